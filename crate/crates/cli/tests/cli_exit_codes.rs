use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparsepatch"));
    c.args(args).env_remove("SPARSEPATCH_SEED");
    if let Some(s) = seed_env {
        c.env("SPARSEPATCH_SEED", s);
    }
    c.output().expect("binary runs")
}

fn expect_error(args: &[&str], code: i32, kind: &str) {
    let out = cli(args, None);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{args:?}: {err}");
}

#[test]
fn failures_map_to_their_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.rv1");
    let missing = missing.to_str().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "bogus = 1\n").unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    expect_error(&[], 2, "usage");
    expect_error(&["macs", "--geometry", "abc"], 2, "usage");
    expect_error(&["train", "--config", bad.to_str().unwrap(), "--out", out], 2, "usage");
    expect_error(&["encode", "--in", missing, "--out", out], 3, "io");
    expect_error(&["macs", "--geometry", "100x256x8"], 5, "validation");
    expect_error(&["macs", "--kept-fraction", "1.5"], 5, "validation");
    assert_eq!(cli(&["--help"], None).status.code(), Some(0));
}

#[test]
fn seed_environment_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    std::fs::write(
        &spec,
        "identities = 5\nclips_per_identity = 2\nheight = 48\nwidth = 64\nt_total = 4\nheldout_per_id = 0\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let ok = cli(
        &[
            "synth",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ],
        None,
    );
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let clip = data.join("id000_clip00.rv1");
    assert!(clip.exists());

    let select = |name: &str, seed: &str, env: Option<&str>| {
        let out = dir.path().join(name);
        let r = cli(
            &[
                "select",
                "--clip",
                clip.to_str().unwrap(),
                "--mode",
                "train",
                "--seed",
                seed,
                "--out",
                out.to_str().unwrap(),
            ],
            env,
        );
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        std::fs::read(Path::new(&out)).unwrap()
    };
    let flag = select("a.json", "7", None);
    let env = select("b.json", "3", Some("7"));
    let other = select("c.json", "3", None);
    assert_eq!(flag, env);
    assert_ne!(flag, other);
}

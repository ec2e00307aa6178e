use proptest::prelude::*;
use rand::Rng;
use sparsepatch_core::gopcodec::{encode_gop, patchify, unpatchify, PATCH_LEN};
use sparsepatch_core::selector::{
    clip_tensor, init_selector_params, progressive_residual, score_gate, select_patches, shallow_3dcnn, PoolEntry,
    SelectMode, SelectOptions, SelectorConfig,
};
use sparsepatch_core::spectral::{affinity, normalized_laplacian, prominent_eigvec, SpectralOptions};
use sparsepatch_core::videoio::{synth_clip, RawClip, SynthSpec, PATCH};
use sparsepatch_numcore::{
    grad_check_params, seeded_rng, seeded_uniform, sym_eig, Graph, ParamProbe, ParamSet, SplitSeed, Tensor,
};

fn random_frame(seed: u64, gh: usize, gw: usize) -> Vec<u8> {
    let mut rng = seeded_rng(seed);
    (0..gh * gw * PATCH * PATCH * 3).map(|_| rng.random()).collect()
}

fn clip_from_frames(gh: usize, gw: usize, frames: &[Vec<u8>]) -> RawClip {
    RawClip::new(gh * PATCH, gw * PATCH, frames.len(), frames.concat()).unwrap()
}

/// Frame `base` with patch `n` replaced by `content`.
fn with_patch(base: &[u8], gh: usize, gw: usize, n: usize, content: &[u8]) -> Vec<u8> {
    let mut grid = patchify(base, gh * PATCH, gw * PATCH).unwrap();
    grid.patches[n * PATCH_LEN..(n + 1) * PATCH_LEN].copy_from_slice(content);
    unpatchify(&grid)
}

/// Scorer `w_n·‖N‖₁ + w_r·‖R‖₁ − 0.5` built from ReLU pairs.
fn l1_scorer(cfg: &SelectorConfig, w_n: f64, w_r: f64) -> ParamSet {
    let mut p = ParamSet::new();
    init_selector_params(&mut p, cfg, 0).unwrap();
    let [din, h0, h1, _] = cfg.mlp_dims();
    let c = cfg.feature_dim();
    let mut l0 = vec![0.0; din * h0];
    for i in 0..din {
        let w = if i < PATCH_LEN {
            w_n
        } else if i >= PATCH_LEN + c {
            w_r
        } else {
            0.0
        };
        l0[i * h0] = w;
        l0[i * h0 + 1] = -w;
    }
    let mut l1 = vec![0.0; h0 * h1];
    l1[0] = 1.0;
    l1[h1] = 1.0;
    let mut l2 = vec![0.0; h1];
    l2[0] = 1.0;
    p.set("sel.mlp.l0.w", Tensor::from_rows(din, h0, l0).unwrap()).unwrap();
    p.set("sel.mlp.l0.b", Tensor::zeros(&[1, h0])).unwrap();
    p.set("sel.mlp.l1.w", Tensor::from_rows(h0, h1, l1).unwrap()).unwrap();
    p.set("sel.mlp.l1.b", Tensor::zeros(&[1, h1])).unwrap();
    p.set("sel.mlp.l2.w", Tensor::from_rows(h1, 1, l2).unwrap()).unwrap();
    p.set("sel.mlp.l2.b", Tensor::full(&[1, 1], -0.5)).unwrap();
    p
}

fn run(
    p: &ParamSet,
    cfg: &SelectorConfig,
    clip: &RawClip,
    opts: &SelectOptions,
) -> sparsepatch_core::selector::SelectionResult {
    let gop = encode_gop(clip).unwrap();
    let mut g = Graph::new();
    select_patches(&mut g, p, cfg, clip, &gop, opts).unwrap().result
}

// ---- spectral ----

#[test]
fn affinity_matches_unclamped_product() {
    let f = seeded_uniform(4, &[7, 3], -1.0, 1.0);
    let raw = affinity(&f, false).unwrap();
    let clamped = affinity(&f, true).unwrap();
    let mut negatives = 0;
    for i in 0..7 {
        for j in 0..7 {
            let dot: f64 = (0..3).map(|k| f.get2(i, k) * f.get2(j, k)).sum();
            assert!((raw.get2(i, j) - dot).abs() < 1e-15);
            assert_eq!(clamped.get2(i, j), raw.get2(i, j).max(0.0));
            negatives += usize::from(dot < 0.0);
        }
    }
    assert!(negatives > 0);
}

#[test]
fn small_cluster_is_positive() {
    // 3 rows near (1, 0.2), 9 rows near (0.2, 1)
    let noise = seeded_uniform(8, &[12, 2], -0.02, 0.02);
    let mut rows = Vec::new();
    for i in 0..12 {
        let base = if i % 4 == 1 { [1.0, 0.2] } else { [0.2, 1.0] };
        rows.extend([base[0] + noise.get2(i, 0), base[1] + noise.get2(i, 1)]);
    }
    let f = Tensor::from_rows(12, 2, rows).unwrap();
    let s = prominent_eigvec(&f, SpectralOptions::default()).unwrap();
    let fg = s.foreground();
    for (i, &v) in fg.iter().enumerate() {
        assert_eq!(v, i % 4 == 1, "row {i}: y1 = {:?}", s.y1);
    }
    assert_eq!(prominent_eigvec(&f, SpectralOptions::default()).unwrap(), s);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_spectrum_in_zero_two(seed in any::<u64>(), n in 2usize..10) {
        let f = seeded_uniform(seed, &[n, 4], -1.0, 1.0);
        let a = affinity(&f, true).unwrap();
        if let Ok(l) = normalized_laplacian(&a) {
            for &v in &sym_eig(&l).unwrap().values {
                prop_assert!((-1e-8..=2.0 + 1e-8).contains(&v), "eigenvalue {}", v);
            }
        }
    }

    #[test]
    fn y1_is_unit_and_orthogonal_to_the_trivial_vector(seed in any::<u64>(), n in 3usize..12) {
        // strictly positive features keep the graph connected
        let f = seeded_uniform(seed, &[n, 3], 0.1, 1.0);
        if let Ok(s) = prominent_eigvec(&f, SpectralOptions::default()) {
            let a = affinity(&f, true).unwrap();
            let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get2(i, j)).sum::<f64>().sqrt()).collect();
            let norm = deg.iter().map(|d| d * d).sum::<f64>().sqrt();
            let dot: f64 = s.y1.iter().zip(&deg).map(|(y, d)| y * d / norm).sum();
            let len = s.y1.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((len - 1.0).abs() < 1e-10);
            prop_assert!(dot.abs() < 1e-8, "dot {}", dot);
            prop_assert!(s.lambda1 >= 0.0);
            let pos = s.y1.iter().filter(|&&v| v > 0.0).count();
            let neg = s.y1.iter().filter(|&&v| v < 0.0).count();
            prop_assert!(pos <= neg);
        }
    }
}

// ---- selector ----

#[test]
fn gate_at_minus_three_is_clipped() {
    // 1.2·σ(−3) − 0.1 = −0.04308884...
    let sigma = 1.0 / (1.0 + 3f64.exp());
    assert!((1.2 * sigma - 0.1 + 0.043_088_8).abs() < 1e-6);
    let out = score_gate(-3.0, 0.0, SelectMode::Infer);
    assert_eq!((out.b, out.d), (false, 0.0));
    let out = score_gate(10.0, 0.0, SelectMode::Infer);
    assert_eq!((out.b, out.d), (true, 1.0));
    let out = score_gate(0.0, 0.0, SelectMode::Infer);
    assert_eq!((out.b, out.d), (false, 0.5));
}

#[test]
fn cnn_zero_input_and_paper_geometry_shape() {
    let cfg = SelectorConfig::base();
    let mut p = ParamSet::new();
    init_selector_params(&mut p, &cfg, 3).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 8, 128, 256])).unwrap();
    let y = shallow_3dcnn(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(y), &[64, 8, 8, 16]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_gradient_matches_finite_differences() {
    let cfg = SelectorConfig::toy();
    let mut p = ParamSet::new();
    init_selector_params(&mut p, &cfg, 5).unwrap();
    let spec = SynthSpec {
        height: 48,
        width: 32,
        t_total: 2,
        ..SynthSpec::default()
    };
    let clip = synth_clip(&spec, 0, 1).unwrap();
    let x = clip_tensor(&clip);
    let names: Vec<String> = p.names().filter(|n| n.contains("conv")).map(str::to_string).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let r = grad_check_params(&p, &refs, ParamProbe::default(), |g, p| {
        let xv = g.constant(x.clone())?;
        let y = shallow_3dcnn(g, p, xv).map_err(|e| sparsepatch_numcore::Error::Invalid {
            op: "cnn",
            msg: e.to_string(),
        })?;
        let s = g.sum_all(y)?;
        let n = g.value(y).len() as f64;
        g.scale(s, 1.0 / n)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn progressive_residual_matches_exhaustive_search() {
    let mut rng = seeded_rng(77);
    for _ in 0..20 {
        let pool: Vec<PoolEntry> = (0..32)
            .map(|k| PoolEntry {
                frame: 0,
                patch: k,
                pixels: (0..PATCH_LEN).map(|_| rng.random()).collect(),
            })
            .collect();
        let query: Vec<u8> = (0..PATCH_LEN).map(|_| rng.random()).collect();
        let mut best = (0, u64::MAX);
        for (k, e) in pool.iter().enumerate() {
            let d: u64 = query
                .iter()
                .zip(&e.pixels)
                .map(|(&a, &b)| u64::from(a.abs_diff(b)))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        let expected: Vec<i16> = query
            .iter()
            .zip(&pool[best.0].pixels)
            .map(|(&a, &b)| i16::from(a) - i16::from(b))
            .collect();
        assert_eq!(progressive_residual(&query, &pool).unwrap(), expected);
    }
    let zero = [PoolEntry {
        frame: 0,
        patch: 0,
        pixels: vec![0; PATCH_LEN],
    }];
    let q: Vec<u8> = (0..PATCH_LEN).map(|i| (i % 251) as u8).collect();
    let r = progressive_residual(&q, &zero).unwrap();
    assert!(r.iter().zip(&q).all(|(&a, &b)| a == i16::from(b)));
}

#[test]
fn static_clip_selects_nothing_and_novelty_is_selected() {
    let cfg = SelectorConfig::toy();
    let p = l1_scorer(&cfg, 1.0, 1.0);
    let (gh, gw) = (3, 4);
    let i = random_frame(1, gh, gw);
    let still = clip_from_frames(gh, gw, &[i.clone(), i.clone(), i.clone()]);
    let r = run(&p, &cfg, &still, &SelectOptions::infer());
    assert_eq!(r.total_kept(), 0);
    assert!(r.frames.iter().flat_map(|f| &f.scores).all(|&s| s <= -0.5 + 1e-12));

    let novel: Vec<u8> = random_frame(2, 1, 1);
    let changed = with_patch(&i, gh, gw, 5, &novel);
    let clip = clip_from_frames(gh, gw, &[i.clone(), i.clone(), changed]);
    let r = run(&p, &cfg, &clip, &SelectOptions::infer());
    assert_eq!(r.selected(1), Vec::<usize>::new());
    assert_eq!(r.selected(2), vec![5]);
    assert!(r.frames[1].scores[5] > 0.0);
    assert_eq!(r.pool.len(), gh * gw + 1);
    assert_eq!((r.pool.last().unwrap().frame, r.pool.last().unwrap().patch), (2, 5));
}

#[test]
fn earlier_frames_fill_the_pool_first() {
    // frames 1 and 2 share one novel patch; only the first to be processed keeps it
    let cfg = SelectorConfig::toy();
    let p = l1_scorer(&cfg, 0.0, 1.0);
    let (gh, gw) = (2, 3);
    let i = random_frame(3, gh, gw);
    let novel = random_frame(4, 1, 1);
    let f = with_patch(&i, gh, gw, 0, &novel);
    let clip = clip_from_frames(gh, gw, &[i, f.clone(), f]);
    let r = run(&p, &cfg, &clip, &SelectOptions::infer());
    assert_eq!(r.selected(1), vec![0]);
    assert_eq!(r.selected(2), Vec::<usize>::new());
}

#[test]
fn selection_invariants_in_both_modes() {
    let cfg = SelectorConfig::toy();
    let spec = SynthSpec {
        height: 64,
        width: 64,
        t_total: 4,
        ..SynthSpec::default()
    };
    let clip = synth_clip(&spec, 2, 6).unwrap();
    for seed in 0..4u64 {
        let mut p = ParamSet::new();
        init_selector_params(&mut p, &cfg, seed).unwrap();
        let a = run(&p, &cfg, &clip, &SelectOptions::infer());
        assert_eq!(a, run(&p, &cfg, &clip, &SelectOptions::infer()));
        let t = run(&p, &cfg, &clip, &SelectOptions::train(seed.split(9)));
        for (res, train) in [(&a, false), (&t, true)] {
            let mut pool_len = 16;
            for f in &res.frames {
                let decision = if train {
                    f.noisy_scores.as_ref().unwrap()
                } else {
                    &f.scores
                };
                for (n, &b) in f.selected.iter().enumerate() {
                    assert_eq!(b, decision[n] > 0.0);
                    assert!((0.0..=1.0).contains(&f.gates[n]));
                }
                assert_eq!(f.kept_count, f.selected_indices().len());
                let added: Vec<(usize, usize)> = res.pool[pool_len..pool_len + f.kept_count]
                    .iter()
                    .map(|e| (e.frame, e.patch))
                    .collect();
                let expected: Vec<(usize, usize)> = f.selected_indices().into_iter().map(|n| (f.frame, n)).collect();
                assert_eq!(added, expected);
                pool_len += f.kept_count;
            }
            assert_eq!(pool_len, res.pool.len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn negative_bias_never_adds_patches(seed in any::<u64>(), lo in -2.0f64..0.0, hi in 0.0f64..2.0) {
        let cfg = SelectorConfig::toy();
        let mut p = ParamSet::new();
        init_selector_params(&mut p, &cfg, seed).unwrap();
        let spec = SynthSpec { height: 48, width: 64, t_total: 3, ..SynthSpec::default() };
        let clip = synth_clip(&spec, 1, seed).unwrap();
        let kept = |bias: f64| run(&p, &cfg, &clip, &SelectOptions { score_bias: bias, ..SelectOptions::infer() }).total_kept();
        let (a, b, c) = (kept(lo), kept(0.0), kept(hi));
        prop_assert!(a <= b && b <= c, "{} {} {}", a, b, c);
    }
}

//! Line-based `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key must appear in
//! [`SCHEMA`]; keys may appear at most once and missing keys take the listed
//! defaults, which describe a small desk-scale training run.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::psformer::PsformerConfig;
use crate::selector::SelectorConfig;
use crate::training::TrainConfig;
use crate::videoio::{Background, SynthSpec, PATCH};

/// `(key, default, meaning)` for every accepted key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("identities", "10", "synthetic identities"),
    ("clips_per_identity", "8", "clips generated per identity"),
    ("height", "64", "frame height in pixels, multiple of 16"),
    ("width", "64", "frame width in pixels, multiple of 16"),
    ("t_total", "16", "frames per generated clip"),
    ("background", "textured", "uniform | textured | distractor-person"),
    ("motion_amplitude", "4", "figure motion in pixels per frame"),
    ("synth_seed", "0", "dataset seed"),
    ("frames", "8", "frames sampled per clip (RRS)"),
    ("selector", "toy", "selector widths: toy | base"),
    ("dim", "64", "transformer width"),
    ("layers", "4", "transformer layers"),
    ("heads", "4", "attention heads"),
    ("threshold", "0.5", "routing threshold s"),
    ("warp_hidden", "32", "hidden width of the warp MLPs"),
    ("stage1_epochs", "20", "dense epochs"),
    ("stage2_epochs", "20", "sparse epochs"),
    ("lr", "0.0005", "Adam learning rate"),
    ("lr_decay_every", "30", "epochs between learning-rate decays"),
    ("lr_decay", "0.1", "learning-rate decay factor"),
    ("weight_decay", "0.0005", "decoupled weight decay"),
    ("margin", "0.3", "triplet margin"),
    (
        "noise_samples",
        "4",
        "noise levels per layer in the error-constraint loss",
    ),
    ("error_weight", "1", "weight of the error-constraint loss"),
    ("batch_ids", "5", "identities per batch"),
    ("batch_clips", "2", "clips per identity per batch"),
    ("heldout_per_id", "2", "clips per identity held out for evaluation"),
    ("seed", "0", "initialisation and training seed"),
    ("init_params", "", "optional checkpoint to start from"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub selector: SelectorConfig,
    pub psformer: PsformerConfig,
    pub train: TrainConfig,
    pub init_params: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("schema defaults are valid")
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse {key} = {v:?}"),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut set: Vec<(usize, String, String)> = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected key = value, found {body:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !SCHEMA.iter().any(|(name, _, _)| *name == k) {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {k:?}"),
                });
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key {k:?}"),
                });
            }
            set.push((line, k.to_string(), v.to_string()));
        }
        let lookup = |key: &str| -> (usize, String) {
            set.iter()
                .find(|(_, k, _)| k == key)
                .map(|(l, _, v)| (*l, v.clone()))
                .unwrap_or_else(|| {
                    let d = SCHEMA.iter().find(|(k, _, _)| *k == key).expect("schema key").1;
                    (0, d.to_string())
                })
        };
        macro_rules! get {
            ($key:literal) => {{
                let (line, v) = lookup($key);
                parse_value(line, $key, &v)?
            }};
        }
        let synth = SynthSpec {
            identity_count: get!("identities"),
            clips_per_identity: get!("clips_per_identity"),
            height: get!("height"),
            width: get!("width"),
            t_total: get!("t_total"),
            background: {
                let (line, v) = lookup("background");
                Background::from_str(&v).map_err(|msg| Error::Config { line, msg })?
            },
            motion_amplitude: get!("motion_amplitude"),
            seed: get!("synth_seed"),
        };
        let selector = {
            let (line, v) = lookup("selector");
            match v.as_str() {
                "toy" => SelectorConfig::toy(),
                "base" => SelectorConfig::base(),
                other => {
                    return Err(Error::Config {
                        line,
                        msg: format!("selector must be toy or base, found {other:?}"),
                    })
                }
            }
        };
        let frames: usize = get!("frames");
        let psformer = PsformerConfig {
            layers: get!("layers"),
            dim: get!("dim"),
            heads: get!("heads"),
            threshold: get!("threshold"),
            warp_hidden: get!("warp_hidden"),
            grid_h: synth.height / PATCH,
            grid_w: synth.width / PATCH,
            max_frames: frames,
        };
        let train = TrainConfig {
            stage1_epochs: get!("stage1_epochs"),
            stage2_epochs: get!("stage2_epochs"),
            lr: get!("lr"),
            lr_decay_every: get!("lr_decay_every"),
            lr_decay: get!("lr_decay"),
            weight_decay: get!("weight_decay"),
            margin: get!("margin"),
            noise_samples: get!("noise_samples"),
            error_weight: get!("error_weight"),
            batch_ids: get!("batch_ids"),
            batch_clips: get!("batch_clips"),
            heldout_per_id: get!("heldout_per_id"),
            frames,
            seed: get!("seed"),
        };
        let init_params = {
            let (_, v) = lookup("init_params");
            (!v.is_empty()).then(|| PathBuf::from(v))
        };
        let cfg = RunConfig {
            synth,
            selector,
            psformer,
            train,
            init_params,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.psformer.validate()?;
        self.train.validate(&self.synth)
    }

    /// Every key with its resolved value, in schema order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let p = &self.psformer;
        let t = &self.train;
        let selector = if self.selector == SelectorConfig::base() {
            "base"
        } else {
            "toy"
        };
        let values: Vec<String> = vec![
            s.identity_count.to_string(),
            s.clips_per_identity.to_string(),
            s.height.to_string(),
            s.width.to_string(),
            s.t_total.to_string(),
            s.background.to_string(),
            s.motion_amplitude.to_string(),
            s.seed.to_string(),
            t.frames.to_string(),
            selector.to_string(),
            p.dim.to_string(),
            p.layers.to_string(),
            p.heads.to_string(),
            p.threshold.to_string(),
            p.warp_hidden.to_string(),
            t.stage1_epochs.to_string(),
            t.stage2_epochs.to_string(),
            t.lr.to_string(),
            t.lr_decay_every.to_string(),
            t.lr_decay.to_string(),
            t.weight_decay.to_string(),
            t.margin.to_string(),
            t.noise_samples.to_string(),
            t.error_weight.to_string(),
            t.batch_ids.to_string(),
            t.batch_clips.to_string(),
            t.heldout_per_id.to_string(),
            t.seed.to_string(),
            self.init_params
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ];
        let mut out = String::new();
        for ((k, _, _), v) in SCHEMA.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.psformer, PsformerConfig::toy(4, 4, 8));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_comments_and_errors() {
        let c = RunConfig::parse("# run\n threshold = 0.7  # s\n\nstage2_epochs=3\n").unwrap();
        assert_eq!(c.psformer.threshold, 0.7);
        assert_eq!(c.train.stage2_epochs, 3);
        for bad in ["bogus = 1", "lr", "lr = x", "lr = 1\nlr = 2", "selector = huge"] {
            match RunConfig::parse(bad) {
                Err(Error::Config { line, .. }) => assert!(line >= 1, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
        assert!(RunConfig::parse("height = 50").is_err());
    }
}

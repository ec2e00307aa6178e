//! Finite-difference checks of every trainable path at toy dimensions.
//!
//! Discrete choices stay fixed during a check: the saliency vectors are
//! computed once and passed as constants, routing decisions are frozen, and
//! probes that flip a ReLU, gate region, hardest pair or selection are
//! skipped by the checker.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use sparsepatch_numcore::{
    grad_check, grad_check_pair, grad_check_params, seeded_gaussian, seeded_uniform, GradCheckReport, Graph,
    ParamProbe, ParamSet, SplitSeed, Tensor,
};

use crate::error::{Error, Result};
use crate::gopcodec::encode_gop;
use crate::nn::l2_norm;
use crate::psformer::{init_psformer_params, psformer_forward, GateMode, PsformerConfig, PsformerInput};
use crate::selector::{init_selector_params, select_patches, GateForward, SelectOptions, SelectorConfig};
use crate::training::{cross_entropy, error_constraint_loss, hard_triplet};
use crate::videoio::{synth_clip, RawClip, SynthSpec, PATCH};

/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Selector,
    Psformer,
    Losses,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Suite::All),
            "selector" => Ok(Suite::Selector),
            "psformer" => Ok(Suite::Psformer),
            "losses" => Ok(Suite::Losses),
            other => Err(format!(
                "unknown module {other:?}; expected all, selector, psformer or losses"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub module: &'static str,
    pub check: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub unresolved: usize,
    pub pass: bool,
}

impl GradRow {
    fn from_report(module: &'static str, check: &'static str, r: &GradCheckReport) -> Self {
        GradRow {
            module,
            check,
            max_rel_err: r.max_rel_err,
            checked: r.checked,
            skipped: r.skipped,
            unresolved: r.unresolved,
            pass: r.passes(GRAD_TOL),
        }
    }
}

pub fn table(rows: &[GradRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<18} {:>12} {:>8} {:>8} {:>10}  result",
        "module", "check", "max_rel_err", "checked", "skipped", "unresolved"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<18} {:>12.3e} {:>8} {:>8} {:>10}  {}",
            r.module,
            r.check,
            r.max_rel_err,
            r.checked,
            r.skipped,
            r.unresolved,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}

/// Core errors inside a checked closure, in the checker's error type.
fn nc<T>(r: Result<T>) -> sparsepatch_numcore::Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(inner) => inner,
        other => sparsepatch_numcore::Error::Invalid {
            op: "gradient check",
            msg: other.to_string(),
        },
    })
}

fn toy_clip(frames: usize, seed: u64) -> Result<RawClip> {
    let spec = SynthSpec {
        height: 64,
        width: 64,
        t_total: frames,
        ..SynthSpec::default()
    };
    synth_clip(&spec, 1, seed)
}

fn param_names(p: &ParamSet, prefix: &str) -> Vec<String> {
    p.names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect()
}

/// Straight-through gate against finite differences of the smooth gate, on
/// points inside the unclipped band.
pub fn check_ste_gate(seed: u64) -> Result<GradRow> {
    // sigmoid(x) in (1/12, 11/12) keeps 1.2σ − 0.1 inside (0, 1)
    let x = seeded_uniform(seed, &[1, 32], -2.3, 2.3);
    let w = seeded_gaussian(seed.split(1), &[1, 32]);
    let analytic = |g: &mut Graph, v| {
        let s = g.ste_gate(v)?;
        let wv = g.constant(w.clone())?;
        let m = g.mul(s, wv)?;
        g.sum_all(m)
    };
    let numeric = |g: &mut Graph, v| {
        let s = g.sat_gate(v)?;
        let wv = g.constant(w.clone())?;
        let m = g.mul(s, wv)?;
        g.sum_all(m)
    };
    let r = grad_check_pair(analytic, numeric, &x, EPS)?;
    Ok(GradRow::from_report("selector", "ste_gate", &r))
}

/// Gate-weighted selector output with respect to every selector parameter.
pub fn check_selector(seed: u64) -> Result<GradRow> {
    let cfg = SelectorConfig::toy();
    let mut p = ParamSet::new();
    init_selector_params(&mut p, &cfg, seed)?;
    let clip = toy_clip(3, seed.split(1))?;
    let gop = encode_gop(&clip)?;
    let y1 = {
        let mut g = Graph::new();
        select_patches(&mut g, &p, &cfg, &clip, &gop, &SelectOptions::infer())?.y1
    };
    let n = gop.patches_per_frame();
    let weights = seeded_gaussian(seed.split(2), &[n, 1]);
    let opts = SelectOptions {
        gate_forward: GateForward::Soft,
        y1_override: Some(y1),
        ..SelectOptions::train(seed.split(3))
    };
    let names = param_names(&p, "sel.");
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let probe = ParamProbe {
        seed: seed.split(4),
        ..ParamProbe::default()
    };
    let r = grad_check_params(&p, &refs, probe, |g, p| {
        let run = nc(select_patches(g, p, &cfg, &clip, &gop, &opts))?;
        let w = g.constant(weights.clone())?;
        let mut terms = Vec::new();
        for gate in run.gates.into_iter().flatten() {
            let m = g.mul(gate, w)?;
            terms.push(g.sum_all(m)?);
        }
        let all = g.concat_cols(&terms)?;
        g.sum_all(all)
    })?;
    Ok(GradRow::from_report("selector", "w_sel_and_cnn", &r))
}

/// Clip-feature norm with respect to every transformer parameter, with a
/// fixed selection and a fixed mix of open and closed gates.
pub fn check_psformer(seed: u64) -> Result<GradRow> {
    let frames = 3;
    let clip = toy_clip(frames, seed.split(1))?;
    let gop = encode_gop(&clip)?;
    let cfg = PsformerConfig::toy(clip.height / PATCH, clip.width / PATCH, frames);
    let mut p = ParamSet::new();
    init_psformer_params(&mut p, &cfg, seed)?;
    let n = cfg.patches();
    let selected: Vec<Vec<usize>> = (1..frames)
        .map(|t| (0..n).filter(|k| (k + t) % 3 == 0).collect())
        .collect();
    let input = PsformerInput::new(&gop, selected)?;
    let decisions: Vec<Vec<bool>> = (0..cfg.layers)
        .map(|l| (1..frames).map(|t| (l + t) % 2 == 0).collect())
        .collect();
    let mode = GateMode::Frozen(decisions);
    let names = param_names(&p, "pf.");
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let probe = ParamProbe {
        seed: seed.split(4),
        per_tensor: 6,
        ..ParamProbe::default()
    };
    let r = grad_check_params(&p, &refs, probe, |g, p| {
        let out = nc(psformer_forward(g, p, &cfg, &input, &mode))?;
        nc(l2_norm(g, out.feature))
    })?;
    Ok(GradRow::from_report("psformer", "feature_norm", &r))
}

pub fn check_cross_entropy(seed: u64) -> Result<GradRow> {
    let logits = seeded_gaussian(seed, &[6, 5]);
    let labels = [0, 3, 1, 4, 4, 2];
    let r = grad_check(|g, x| nc(cross_entropy(g, x, &labels)), &logits, EPS)?;
    Ok(GradRow::from_report("losses", "cross_entropy", &r))
}

pub fn check_triplet(seed: u64) -> Result<GradRow> {
    let feats = seeded_gaussian(seed, &[8, 4]);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    // a large margin keeps every hinge active
    let r = grad_check(|g, x| nc(hard_triplet(g, x, &labels, 2.0)), &feats, EPS)?;
    Ok(GradRow::from_report("losses", "hard_triplet", &r))
}

pub fn check_error_loss(seed: u64) -> Result<GradRow> {
    let cfg = PsformerConfig::toy(4, 4, 3);
    let mut p = ParamSet::new();
    init_psformer_params(&mut p, &cfg, seed)?;
    let contexts: Vec<Tensor> = (0..=cfg.layers)
        .map(|l| seeded_gaussian(seed.split(10 + l as u64), &[1, cfg.dim]))
        .collect();
    let mut names = param_names(&p, "pf.ev.");
    names.extend(param_names(&p, "pf.gw."));
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let probe = ParamProbe {
        seed: seed.split(4),
        ..ParamProbe::default()
    };
    let r = grad_check_params(&p, &refs, probe, |g, p| {
        Ok(nc(error_constraint_loss(g, p, &contexts, 4, seed.split(5)))?.loss)
    })?;
    Ok(GradRow::from_report("losses", "error_constraint", &r))
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    if matches!(suite, Suite::All | Suite::Selector) {
        rows.push(check_ste_gate(seed)?);
        rows.push(check_selector(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Psformer) {
        rows.push(check_psformer(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Losses) {
        rows.push(check_cross_entropy(seed)?);
        rows.push(check_triplet(seed)?);
        rows.push(check_error_loss(seed)?);
    }
    Ok(rows)
}

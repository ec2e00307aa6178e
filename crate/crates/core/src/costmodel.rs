//! Analytic multiply-accumulate counts for a dense ViT baseline and for the
//! selective pipeline, and the bridge to the runtime counter.
//!
//! One MAC is one multiply-accumulate inside a matrix product or
//! convolution. Normalisation, activations, softmax, pooling, the motion and
//! pool searches and the eigensolver cost nothing here; their work is listed
//! separately under `uncounted`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use sparsepatch_numcore::MacCounter;

use crate::error::{Error, Result};
use crate::gopcodec::PATCH_LEN;
use crate::nn::mlp_macs;
use crate::psformer::{
    PsformerConfig, LOCAL_TOKENS, STAGE_EMBED, STAGE_GW, STAGE_IMSA, STAGE_PMSA, STAGE_PW, STAGE_ROUTE,
};
use crate::selector::{SelectorConfig, STAGE_CNN, STAGE_MLP};
use crate::videoio::PATCH;

const GIGA: f64 = 1e9;

/// Stage names of the selective pipeline, in report order.
pub const OURS_STAGES: [&str; 8] = [
    STAGE_EMBED,
    STAGE_IMSA,
    STAGE_PMSA,
    STAGE_PW,
    STAGE_GW,
    STAGE_ROUTE,
    STAGE_CNN,
    STAGE_MLP,
];
pub const STAGE_VIT_MSA: &str = "msa";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Geometry {
    /// ViT-B at 128×256, eight frames.
    pub fn vit_base() -> Self {
        Geometry {
            height: 128,
            width: 256,
            frames: 8,
            dim: 768,
            layers: 12,
            heads: 12,
        }
    }

    pub fn patches(&self) -> usize {
        (self.height / PATCH) * (self.width / PATCH)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation("geometry", m));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(PATCH)
            || !self.width.is_multiple_of(PATCH)
        {
            return bad(format!(
                "{}x{} is not a positive multiple of {PATCH}",
                self.height, self.width
            ));
        }
        if self.frames == 0 || self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return bad("frames, dim, layers and heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        Ok(())
    }
}

/// Measured or assumed sparsity of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostInputs {
    /// Kept fraction of each P-frame (`T − 1` entries).
    pub kept_fraction: Vec<f64>,
    /// Gate open rate of each layer (`L` entries).
    pub open_rate: Vec<f64>,
}

impl CostInputs {
    pub fn uniform(geom: &Geometry, kept_fraction: f64, open_rate: f64) -> Self {
        CostInputs {
            kept_fraction: vec![kept_fraction; geom.frames.saturating_sub(1)],
            open_rate: vec![open_rate; geom.layers],
        }
    }

    fn validate(&self, geom: &Geometry) -> Result<()> {
        if self.kept_fraction.len() + 1 != geom.frames || self.open_rate.len() != geom.layers {
            return Err(Error::validation(
                "cost inputs",
                format!(
                    "{} kept fractions and {} open rates for {} frames and {} layers",
                    self.kept_fraction.len(),
                    self.open_rate.len(),
                    geom.frames,
                    geom.layers
                ),
            ));
        }
        for &v in self.kept_fraction.iter().chain(&self.open_rate) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation("cost inputs", format!("rate {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn mean(v: &[f64]) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Architecture choices the selective estimate depends on beyond the geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct OursOptions {
    pub include_selection: bool,
    pub selector: SelectorConfig,
    pub warp_hidden: usize,
}

impl OursOptions {
    pub fn base() -> Self {
        OursOptions {
            include_selection: true,
            selector: SelectorConfig::base(),
            warp_hidden: 192,
        }
    }

    pub fn for_model(psf: &PsformerConfig, selector: &SelectorConfig) -> Self {
        OursOptions {
            include_selection: true,
            selector: selector.clone(),
            warp_hidden: psf.warp_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportInputs {
    pub kept_fraction: f64,
    pub gate_open_rate: f64,
    pub kept_fraction_per_frame: Vec<f64>,
    pub open_rate_per_layer: Vec<f64>,
    pub include_selection: bool,
    pub geometry: Geometry,
}

/// Work the MAC rule leaves out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Uncounted {
    /// Absolute differences summed by the exhaustive motion search.
    pub motion_search_abs_diffs: u64,
    /// Symmetric eigenproblems solved for saliency, each of order `patches`.
    pub eigenproblems: usize,
    pub eigenproblem_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub analytic_gmacs: f64,
    /// Runtime counter total; absent for purely analytic reports.
    pub counted_gmacs: Option<f64>,
    pub breakdown: BTreeMap<String, f64>,
    pub inputs: ReportInputs,
    pub uncounted: Uncounted,
}

impl CostReport {
    /// `|counted − analytic| / analytic`.
    pub fn counted_rel_diff(&self) -> Option<f64> {
        self.counted_gmacs
            .map(|c| (c - self.analytic_gmacs).abs() / self.analytic_gmacs.max(f64::MIN_POSITIVE))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let g = &self.inputs.geometry;
        let _ = writeln!(
            s,
            "geometry      {}x{} T={} d={} L={} heads={}",
            g.height, g.width, g.frames, g.dim, g.layers, g.heads
        );
        let _ = writeln!(
            s,
            "kept_fraction {:>10.4}   open_rate {:>8.4}   selection {}",
            self.inputs.kept_fraction,
            self.inputs.gate_open_rate,
            if self.inputs.include_selection {
                "included"
            } else {
                "excluded"
            }
        );
        let _ = writeln!(s, "{:<16} {:>12}", "stage", "GMACs");
        for (k, v) in &self.breakdown {
            let _ = writeln!(s, "{k:<16} {v:>12.4}");
        }
        let _ = writeln!(s, "{:<16} {:>12.4}", "analytic", self.analytic_gmacs);
        if let Some(c) = self.counted_gmacs {
            let _ = writeln!(s, "{:<16} {:>12.4}", "counted", c);
        }
        s
    }
}

fn msa_macs(d: f64, k: f64) -> f64 {
    12.0 * k * d * d + 2.0 * k * k * d
}

fn uncounted(geom: &Geometry, selection: bool) -> Uncounted {
    let n = geom.patches();
    let p = geom.frames.saturating_sub(1);
    Uncounted {
        motion_search_abs_diffs: (p * n * n * PATCH_LEN) as u64,
        eigenproblems: if selection && p > 0 { geom.frames } else { 0 },
        eigenproblem_order: n,
    }
}

/// Dense ViT over every patch of every frame, attention within each frame.
pub fn estimate_vit(geom: &Geometry) -> Result<CostReport> {
    geom.validate()?;
    let (n, d, l, t) = (
        geom.patches() as f64,
        geom.dim as f64,
        geom.layers as f64,
        geom.frames as f64,
    );
    let embed = t * n * PATCH_LEN as f64 * d;
    let msa = t * l * msa_macs(d, n);
    let breakdown = BTreeMap::from([
        (STAGE_EMBED.to_string(), embed / GIGA),
        (STAGE_VIT_MSA.to_string(), msa / GIGA),
    ]);
    Ok(CostReport {
        analytic_gmacs: (embed + msa) / GIGA,
        counted_gmacs: None,
        breakdown,
        inputs: ReportInputs {
            kept_fraction: 1.0,
            gate_open_rate: 0.0,
            kept_fraction_per_frame: vec![1.0; geom.frames.saturating_sub(1)],
            open_rate_per_layer: vec![0.0; geom.layers],
            include_selection: false,
            geometry: *geom,
        },
        uncounted: uncounted(geom, false),
    })
}

/// Selective pipeline under the given kept fractions and gate open rates.
pub fn estimate_ours(geom: &Geometry, inputs: &CostInputs, opts: &OursOptions) -> Result<CostReport> {
    geom.validate()?;
    inputs.validate(geom)?;
    let psf = PsformerConfig {
        layers: geom.layers,
        dim: geom.dim,
        heads: geom.heads,
        threshold: 0.0,
        warp_hidden: opts.warp_hidden,
        grid_h: geom.height / PATCH,
        grid_w: geom.width / PATCH,
        max_frames: geom.frames,
    };
    let n = geom.patches() as f64;
    let d = geom.dim as f64;
    let layers = geom.layers as f64;
    let pframes = geom.frames - 1;
    let kept: Vec<f64> = inputs.kept_fraction.iter().map(|f| f * n).collect();
    let unkept: f64 = kept.iter().map(|k| n - k).sum();
    let warp_mlp = mlp_macs(&psf.warp_dims()) as f64;
    let per_patch = psf.warp_patch_macs() as f64;
    let kv = psf.warp_kv_macs() as f64;

    let embed = (n + kept.iter().sum::<f64>()) * PATCH_LEN as f64 * d;
    let imsa = layers * msa_macs(d, n);
    let mut pmsa = 0.0;
    let mut pw = 0.0;
    for &r in &inputs.open_rate {
        for &k in &kept {
            pmsa += (1.0 - r) * msa_macs(d, k + 1.0) + r * msa_macs(d, k + 1.0 + LOCAL_TOKENS as f64);
        }
        if r > 0.0 {
            pw += kv + r * unkept * per_patch;
        }
    }
    let (gw, route, cnn, sel_mlp) = if pframes > 0 {
        pw += kv + unkept * per_patch;
        let p = pframes as f64;
        let sel = opts.include_selection;
        (
            layers * warp_mlp * (1.0 + p),
            layers * p * 2.0 * warp_mlp,
            if sel {
                opts.selector.cnn_macs(geom.frames, geom.height, geom.width) as f64
            } else {
                0.0
            },
            if sel {
                p * n * opts.selector.mlp_macs_per_patch() as f64
            } else {
                0.0
            },
        )
    } else {
        (0.0, 0.0, 0.0, 0.0)
    };
    let parts = [embed, imsa, pmsa, pw, gw, route, cnn, sel_mlp];
    let breakdown: BTreeMap<String, f64> = OURS_STAGES
        .iter()
        .zip(parts)
        .map(|(k, v)| (k.to_string(), v / GIGA))
        .collect();
    Ok(CostReport {
        analytic_gmacs: parts.iter().sum::<f64>() / GIGA,
        counted_gmacs: None,
        breakdown,
        inputs: ReportInputs {
            kept_fraction: CostInputs::mean(&inputs.kept_fraction),
            gate_open_rate: CostInputs::mean(&inputs.open_rate),
            kept_fraction_per_frame: inputs.kept_fraction.clone(),
            open_rate_per_layer: inputs.open_rate.clone(),
            include_selection: opts.include_selection,
            geometry: *geom,
        },
        uncounted: uncounted(geom, opts.include_selection),
    })
}

/// Analytic estimate for a measured run plus the runtime counter total.
pub fn runtime_counter_report(
    counter: &MacCounter,
    geom: &Geometry,
    measured: &CostInputs,
    opts: &OursOptions,
) -> Result<CostReport> {
    if counter.total() == 0 {
        return Err(Error::validation(
            "runtime counter",
            "no MACs recorded; counting was not enabled",
        ));
    }
    let mut report = estimate_ours(geom, measured, opts)?;
    report.counted_gmacs = Some(counter.total() as f64 / GIGA);
    Ok(report)
}

/// Uniform kept fraction in `[lo, hi]` whose estimate hits `target_gmacs` at
/// a fixed open rate, by bisection; `None` when the target is not bracketed.
pub fn fit_kept_fraction(
    geom: &Geometry,
    target_gmacs: f64,
    open_rate: f64,
    opts: &OursOptions,
    lo: f64,
    hi: f64,
) -> Result<Option<f64>> {
    let at = |f: f64| -> Result<f64> {
        Ok(estimate_ours(geom, &CostInputs::uniform(geom, f, open_rate), opts)?.analytic_gmacs)
    };
    let (mut a, mut b) = (lo, hi);
    if at(a)? > target_gmacs || at(b)? < target_gmacs {
        return Ok(None);
    }
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if at(m)? < target_gmacs {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-12 {
            break;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_layers_scale_linearly() {
        let g = Geometry::vit_base();
        let a = estimate_vit(&g).unwrap();
        let b = estimate_vit(&Geometry { layers: 24, ..g }).unwrap();
        assert!((b.breakdown[STAGE_VIT_MSA] - 2.0 * a.breakdown[STAGE_VIT_MSA]).abs() < 1e-9);
        let wide = estimate_vit(&Geometry { width: 512, ..g }).unwrap();
        assert!(wide.breakdown[STAGE_VIT_MSA] > 2.0 * a.breakdown[STAGE_VIT_MSA]);
    }

    #[test]
    fn rates_are_validated() {
        let g = Geometry::vit_base();
        let o = OursOptions::base();
        assert!(estimate_ours(&g, &CostInputs::uniform(&g, 1.2, 0.0), &o).is_err());
        assert!(estimate_ours(&g, &CostInputs::uniform(&g, 0.5, -0.1), &o).is_err());
        let short = CostInputs {
            kept_fraction: vec![0.5; 3],
            open_rate: vec![0.0; 12],
        };
        assert!(estimate_ours(&g, &short, &o).is_err());
    }

    #[test]
    fn breakdown_sums_to_total() {
        let g = Geometry::vit_base();
        let r = estimate_ours(&g, &CostInputs::uniform(&g, 0.3, 0.4), &OursOptions::base()).unwrap();
        let s: f64 = r.breakdown.values().sum();
        assert!((s - r.analytic_gmacs).abs() <= 1e-3 * r.analytic_gmacs);
        assert_eq!(r.breakdown.len(), OURS_STAGES.len());
    }
}

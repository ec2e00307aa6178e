//! Selector and transformer bundled as one model, plus the end-to-end clip
//! forward shared by training, evaluation and the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sparsepatch_numcore::{Graph, ParamSet, SplitSeed};

use crate::costmodel::{runtime_counter_report, CostInputs, CostReport, Geometry, OursOptions};
use crate::error::{Error, Result};
use crate::gopcodec::{encode_gop, GopClip};
use crate::nn::init_linear;
use crate::psformer::{
    init_psformer_params, psformer_forward, GateMode, PsformerConfig, PsformerInput, PsformerOutput,
};
use crate::selector::{init_selector_params, select_patches, SelectOptions, SelectionRun, SelectorConfig};
use crate::videoio::{RawClip, PATCH};

/// Identity classifier over the clip feature.
pub const CLASSIFIER: &str = "cls";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub selector: SelectorConfig,
    pub psformer: PsformerConfig,
    /// Classifier width; 0 for a model without a classifier head.
    pub classes: usize,
    pub params: ParamSet,
}

impl Model {
    pub fn init(selector: SelectorConfig, psformer: PsformerConfig, classes: usize, seed: u64) -> Result<Self> {
        psformer.validate()?;
        let mut params = ParamSet::new();
        init_selector_params(&mut params, &selector, seed.split(1))?;
        init_psformer_params(&mut params, &psformer, seed.split(2))?;
        if classes > 0 {
            init_linear(&mut params, CLASSIFIER, psformer.dim, classes, 1.0, seed.split(3))?;
        }
        Ok(Model {
            selector,
            psformer,
            classes,
            params,
        })
    }

    pub fn geometry(&self, frames: usize) -> Geometry {
        Geometry {
            height: self.psformer.grid_h * PATCH,
            width: self.psformer.grid_w * PATCH,
            frames,
            dim: self.psformer.dim,
            layers: self.psformer.layers,
            heads: self.psformer.heads,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Model = serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "model checkpoint",
            offset: 0,
            msg: e.to_string(),
        })?;
        m.psformer.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Everything one end-to-end clip forward produced.
pub struct ClipForward {
    pub selection: SelectionRun,
    pub output: PsformerOutput,
    pub kept_counts: Vec<usize>,
}

impl ClipForward {
    pub fn kept_fractions(&self, patches: usize) -> Vec<f64> {
        self.kept_counts.iter().map(|&k| k as f64 / patches as f64).collect()
    }
}

/// Selection then the sparse transformer; in train mode the gate nodes scale
/// the selected tokens so the selector receives gradients.
pub fn clip_forward(
    g: &mut Graph,
    model: &Model,
    clip: &RawClip,
    gop: &GopClip,
    select: &SelectOptions,
    gates: &GateMode,
) -> Result<ClipForward> {
    let selection = select_patches(g, &model.params, &model.selector, clip, gop, select)?;
    let input = PsformerInput::from_selection(gop, &selection.result)?.with_gates(selection.gates.clone())?;
    let kept_counts = input.kept_counts();
    let output = psformer_forward(g, &model.params, &model.psformer, &input, gates)?;
    Ok(ClipForward {
        selection,
        output,
        kept_counts,
    })
}

/// Inference forward of a raw clip with MAC counting, returning the feature
/// and the counted-versus-analytic cost of exactly this run.
pub struct InferenceRun {
    pub feature: Vec<f64>,
    pub forward: ClipForward,
    pub cost: CostReport,
}

pub fn infer_clip(model: &Model, clip: &RawClip, gop: Option<&GopClip>) -> Result<InferenceRun> {
    let owned;
    let gop = match gop {
        Some(g) => g,
        None => {
            owned = encode_gop(clip)?;
            &owned
        }
    };
    let mut g = Graph::new();
    let fwd = clip_forward(&mut g, model, clip, gop, &SelectOptions::infer(), &GateMode::Threshold)?;
    let feature = g.value(fwd.output.feature).data().to_vec();
    let geom = model.geometry(clip.frames);
    let measured = CostInputs {
        kept_fraction: fwd.kept_fractions(model.psformer.patches()),
        open_rate: fwd.output.routing.open_rate_per_layer(),
    };
    let cost = runtime_counter_report(
        g.macs(),
        &geom,
        &measured,
        &OursOptions::for_model(&model.psformer, &model.selector),
    )?;
    Ok(InferenceRun {
        feature,
        forward: fwd,
        cost,
    })
}

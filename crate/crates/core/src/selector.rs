//! Progressive, differentiable patch selection over the P-frames of a clip.
//!
//! Each P-frame patch is described by three features: its GOP residual
//! (novelty), its shallow-CNN feature scaled by the frame's saliency vector
//! (semantics), and its residual against the closest patch already selected
//! (progressive residual). A shared MLP scores the concatenation; positive
//! scores keep the patch. Frames are processed in ascending order and each
//! frame's picks join the pool before the next frame is scored.

use serde::{Deserialize, Serialize};
use sparsepatch_numcore::{saturating_sigmoid, seeded_gaussian, Graph, ParamSet, SplitSeed, Tensor, Var};

use crate::error::{Error, Result};
use crate::gopcodec::{best_match, patchify, GopClip, PATCH_LEN};
use crate::nn::{init_mlp, mlp, mlp_macs, Act};
use crate::spectral::{center_rows, prominent_eigvec, SpectralOptions};
use crate::videoio::RawClip;

pub const STAGE_CNN: &str = "selection_cnn";
pub const STAGE_MLP: &str = "selector_mlp";
const PIXEL_SCALE: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// Output channels of the four convolutions; the last is the feature width C.
    pub channels: [usize; 4],
    pub hidden: [usize; 2],
    pub clamp_affinity: bool,
}

impl SelectorConfig {
    pub fn base() -> Self {
        SelectorConfig {
            channels: [16, 32, 64, 64],
            hidden: [256, 64],
            clamp_affinity: true,
        }
    }

    /// Narrow widths for small-scale training runs.
    pub fn toy() -> Self {
        SelectorConfig {
            channels: [4, 8, 16, 16],
            hidden: [32, 16],
            clamp_affinity: true,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[3]
    }

    pub fn mlp_dims(&self) -> [usize; 4] {
        [2 * PATCH_LEN + self.feature_dim(), self.hidden[0], self.hidden[1], 1]
    }

    /// Convolution MACs for a `T × H × W` clip.
    pub fn cnn_macs(&self, frames: usize, height: usize, width: usize) -> u64 {
        let (mut h, mut w, mut cin) = (height, width, 3);
        let mut total = 0;
        for &cout in &self.channels {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
            total += (cout * cin * 27 * frames * h * w) as u64;
            cin = cout;
        }
        total
    }

    pub fn mlp_macs_per_patch(&self) -> u64 {
        mlp_macs(&self.mlp_dims())
    }
}

pub fn init_selector_params(p: &mut ParamSet, cfg: &SelectorConfig, seed: u64) -> Result<()> {
    let mut cin = 3;
    for (i, &cout) in cfg.channels.iter().enumerate() {
        let fan_in = cin * 27;
        p.insert_normal(
            &format!("sel.conv{i}.w"),
            &[cout, fan_in],
            (2.0 / fan_in as f64).sqrt(),
            seed.split(i as u64),
        )?;
        p.insert_const(&format!("sel.conv{i}.b"), &[1, cout], 0.0)?;
        cin = cout;
    }
    init_mlp(p, "sel.mlp", &cfg.mlp_dims(), seed.split(99))
}

/// Clip as a `[3, T, H, W]` tensor scaled to `[0, 1]` with each channel's
/// clip mean removed, so zero padding reads as the average colour.
pub fn clip_tensor(clip: &RawClip) -> Tensor {
    let (t, h, w) = (clip.frames, clip.height, clip.width);
    let plane = t * h * w;
    let mut data = vec![0.0; 3 * plane];
    for f in 0..t {
        let frame = clip.frame(f);
        for (i, px) in frame.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(c * t + f) * h * w + i] = f64::from(px[c]) * PIXEL_SCALE;
            }
        }
    }
    for chan in data.chunks_mut(plane) {
        let mean = chan.iter().sum::<f64>() / plane as f64;
        chan.iter_mut().for_each(|v| *v -= mean);
    }
    Tensor::new(vec![3, t, h, w], data).expect("clip tensor size")
}

const CNN_PAD_BEFORE: [usize; 4] = [0, 0, 0, 1];

/// Four stride-(1,2,2) convolutions with ReLU; output `[C, T, H/16, W/16]`.
/// Leading pads `[0, 0, 0, 1]` put output cell `(i, j)` at pixel
/// `(16i + 7, 16j + 7)`, the centre of its own patch.
pub fn shallow_3dcnn(g: &mut Graph, p: &ParamSet, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[2] < 16 || shape[3] < 16 {
        return Err(Error::validation(
            "cnn input",
            format!("{shape:?}: H and W must be at least 16"),
        ));
    }
    let prev = g.set_stage(STAGE_CNN);
    let mut h = x;
    for i in 0..4 {
        let w = g.param(p, &format!("sel.conv{i}.w"))?;
        let b = g.param(p, &format!("sel.conv{i}.b"))?;
        h = g.conv3d(h, w, b, 2, CNN_PAD_BEFORE[i])?;
        h = g.relu(h)?;
    }
    g.set_stage(prev);
    Ok(h)
}

/// Per-frame `N × C` feature matrices from the CNN output.
pub fn frame_features(g: &mut Graph, cnn_out: Var) -> Result<Vec<Var>> {
    let shape = g.shape(cnn_out).to_vec();
    let (c, t, n) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = g.reshape(cnn_out, &[c, t * n])?;
    let rows = g.transpose(flat)?;
    (0..t).map(|f| Ok(g.slice_rows(rows, f * n, n)?)).collect()
}

/// `S[n, :] = F[n, :] · y1[n]`.
pub fn patch_semantics(g: &mut Graph, f: Var, y1: &[f64]) -> Result<Var> {
    if g.shape(f)[0] != y1.len() {
        return Err(Error::validation(
            "saliency vector",
            format!("length {} for {} patches", y1.len(), g.shape(f)[0]),
        ));
    }
    let col = g.constant(Tensor::column(y1.to_vec()))?;
    Ok(g.scale_rows(f, col)?)
}

/// `query − closest pool patch` by SAD, ties to the earliest entry.
pub fn progressive_residual(query: &[u8], pool: &[PoolEntry]) -> Result<Vec<i16>> {
    let (k, _) = best_match(query, pool.iter().map(|e| e.pixels.as_slice()))
        .ok_or_else(|| Error::validation("selection pool", "empty"))?;
    Ok(query
        .iter()
        .zip(&pool[k].pixels)
        .map(|(&a, &b)| i16::from(a) - i16::from(b))
        .collect())
}

/// Result of one scored patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutput {
    pub s: f64,
    pub s_hat: f64,
    pub b: bool,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Infer,
    Train,
}

/// Decision and gate value for a score; `noise` is ignored in inference.
pub fn score_gate(s: f64, noise: f64, mode: SelectMode) -> GateOutput {
    match mode {
        SelectMode::Infer => GateOutput {
            s,
            s_hat: s,
            b: s > 0.0,
            d: saturating_sigmoid(s),
        },
        SelectMode::Train => {
            let s_hat = s + noise;
            GateOutput {
                s,
                s_hat,
                b: s_hat > 0.0,
                d: saturating_sigmoid(s_hat),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub frame: usize,
    pub patch: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSelection {
    pub frame: usize,
    pub scores: Vec<f64>,
    pub noisy_scores: Option<Vec<f64>>,
    pub selected: Vec<bool>,
    pub gates: Vec<f64>,
    pub kept_count: usize,
}

impl FrameSelection {
    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&n| self.selected[n]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub patches_per_frame: usize,
    /// One entry per P-frame, in frame order (`frames[k].frame == k + 1`).
    pub frames: Vec<FrameSelection>,
    /// I-frame patches first, then selections in frame and patch order.
    pub pool: Vec<PoolEntry>,
}

#[derive(Serialize)]
struct FrameJson<'a> {
    frame: usize,
    scores: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    noisy_scores: Option<&'a [f64]>,
    selected: Vec<u8>,
    gates: &'a [f64],
    kept_count: usize,
}

#[derive(Serialize)]
struct SelectionJson<'a> {
    frames: Vec<FrameJson<'a>>,
    kept_fraction: f64,
    /// `(frame, patch)` of every pool entry in pool order.
    pool: Vec<(usize, usize)>,
}

impl SelectionResult {
    /// Kept patches over all P-frame patches; 0 for a single-frame clip.
    pub fn kept_fraction(&self) -> f64 {
        let total = self.frames.len() * self.patches_per_frame;
        if total == 0 {
            return 0.0;
        }
        self.frames.iter().map(|f| f.kept_count).sum::<usize>() as f64 / total as f64
    }

    pub fn total_kept(&self) -> usize {
        self.frames.iter().map(|f| f.kept_count).sum()
    }

    /// Selected indices of clip frame `t ≥ 1`.
    pub fn selected(&self, t: usize) -> Vec<usize> {
        self.frames[t - 1].selected_indices()
    }

    pub fn to_json(&self) -> String {
        let frames = self
            .frames
            .iter()
            .map(|f| FrameJson {
                frame: f.frame,
                scores: &f.scores,
                noisy_scores: f.noisy_scores.as_deref(),
                selected: f.selected.iter().map(|&b| u8::from(b)).collect(),
                gates: &f.gates,
                kept_count: f.kept_count,
            })
            .collect();
        serde_json::to_string_pretty(&SelectionJson {
            frames,
            kept_fraction: self.kept_fraction(),
            pool: self.pool.iter().map(|e| (e.frame, e.patch)).collect(),
        })
        .expect("selection serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateForward {
    /// Forward value is the hard decision; backward uses the gate slope.
    Straight,
    /// Forward value is the gate value itself.
    Soft,
}

#[derive(Debug, Clone)]
pub struct SelectOptions {
    pub mode: SelectMode,
    pub noise_seed: u64,
    pub gate_forward: GateForward,
    /// Fixed saliency vectors per clip frame; computed from the CNN when absent.
    pub y1_override: Option<Vec<Vec<f64>>>,
    /// Added to every score; used to probe monotonicity.
    pub score_bias: f64,
}

impl SelectOptions {
    pub fn infer() -> Self {
        SelectOptions {
            mode: SelectMode::Infer,
            noise_seed: 0,
            gate_forward: GateForward::Straight,
            y1_override: None,
            score_bias: 0.0,
        }
    }

    pub fn train(noise_seed: u64) -> Self {
        SelectOptions {
            mode: SelectMode::Train,
            noise_seed,
            ..Self::infer()
        }
    }
}

/// Selection plus the graph nodes needed downstream.
pub struct SelectionRun {
    pub result: SelectionResult,
    /// Per P-frame `N × 1` gate node (train mode), `None` in inference.
    pub gates: Vec<Option<Var>>,
    /// Saliency vector used per clip frame (index 0 unused, left empty).
    pub y1: Vec<Vec<f64>>,
    /// Frames whose saliency fell back to zero because the spectrum was degenerate.
    pub degenerate_frames: Vec<usize>,
}

/// Saliency of the mean-centred features of every frame, zero where degenerate.
pub fn frame_saliency(g: &Graph, feats: &[Var], opts: SpectralOptions) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut out = Vec::with_capacity(feats.len());
    let mut degenerate = Vec::new();
    for (t, &f) in feats.iter().enumerate() {
        match prominent_eigvec(&center_rows(g.value(f)), opts) {
            Ok(s) => out.push(s.y1),
            Err(Error::Degenerate(_)) => {
                degenerate.push(t);
                out.push(vec![0.0; g.shape(f)[0]]);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, degenerate))
}

fn residual_tensor(rows: &[Vec<i16>]) -> Tensor {
    let data = rows.iter().flatten().map(|&v| f64::from(v) * PIXEL_SCALE).collect();
    Tensor::from_rows(rows.len(), PATCH_LEN, data).expect("residual rows")
}

pub fn select_patches(
    g: &mut Graph,
    p: &ParamSet,
    cfg: &SelectorConfig,
    clip: &RawClip,
    gop: &GopClip,
    opts: &SelectOptions,
) -> Result<SelectionRun> {
    if clip.frames != gop.frames() || clip.height != gop.height || clip.width != gop.width {
        return Err(Error::validation("selection inputs", "clip and GOP geometry differ"));
    }
    let n = gop.patches_per_frame();
    let mut pool: Vec<PoolEntry> = (0..n)
        .map(|k| PoolEntry {
            frame: 0,
            patch: k,
            pixels: gop.i_frame.patch(k).to_vec(),
        })
        .collect();
    if clip.frames < 2 {
        return Ok(SelectionRun {
            result: SelectionResult {
                patches_per_frame: n,
                frames: Vec::new(),
                pool,
            },
            gates: Vec::new(),
            y1: vec![Vec::new()],
            degenerate_frames: Vec::new(),
        });
    }

    let x = g.constant(clip_tensor(clip))?;
    let cnn = shallow_3dcnn(g, p, x)?;
    let feats = frame_features(g, cnn)?;
    let (y1, degenerate_frames) = match &opts.y1_override {
        Some(v) => {
            if v.len() != clip.frames {
                return Err(Error::validation("saliency override", "one vector per frame required"));
            }
            (v.clone(), Vec::new())
        }
        None => frame_saliency(
            g,
            &feats,
            SpectralOptions {
                clamp_negative: cfg.clamp_affinity,
            },
        )?,
    };

    let prev_stage = g.set_stage(STAGE_MLP);
    let mut frames = Vec::with_capacity(clip.frames - 1);
    let mut gates = Vec::with_capacity(clip.frames - 1);
    for t in 1..clip.frames {
        let grid = patchify(clip.frame(t), clip.height, clip.width)?;
        let novelty = g.constant(residual_tensor(
            &(0..n)
                .map(|k| gop.p_frame(t).residual_patch(k).to_vec())
                .collect::<Vec<_>>(),
        ))?;
        let semantics = patch_semantics(g, feats[t], &y1[t])?;
        let prog: Vec<Vec<i16>> = (0..n)
            .map(|k| progressive_residual(grid.patch(k), &pool))
            .collect::<Result<_>>()?;
        let prog = g.constant(residual_tensor(&prog))?;
        let input = g.concat_cols(&[novelty, semantics, prog])?;
        let mut s = mlp(g, p, "sel.mlp", 3, Act::Relu, input)?;
        if opts.score_bias != 0.0 {
            s = g.add_const(s, opts.score_bias)?;
        }
        let scores = g.value(s).data().to_vec();
        let (outs, gate_var) = match opts.mode {
            SelectMode::Infer => (
                scores
                    .iter()
                    .map(|&v| score_gate(v, 0.0, SelectMode::Infer))
                    .collect::<Vec<_>>(),
                None,
            ),
            SelectMode::Train => {
                let noise = seeded_gaussian(opts.noise_seed.split(t as u64), &[n, 1]);
                let outs: Vec<_> = scores
                    .iter()
                    .zip(noise.data())
                    .map(|(&v, &z)| score_gate(v, z, SelectMode::Train))
                    .collect();
                let nz = g.constant(noise)?;
                let s_hat = g.add(s, nz)?;
                let gate = match opts.gate_forward {
                    GateForward::Straight => g.ste_gate(s_hat)?,
                    GateForward::Soft => g.sat_gate(s_hat)?,
                };
                (outs, Some(gate))
            }
        };
        let selected: Vec<bool> = outs.iter().map(|o| o.b).collect();
        // decisions feed the pool, so they are part of the branch structure
        for (k, &b) in selected.iter().enumerate() {
            if b {
                g.note_branch(((t as u64) << 32) | k as u64);
            }
        }
        for k in 0..n {
            if selected[k] {
                pool.push(PoolEntry {
                    frame: t,
                    patch: k,
                    pixels: grid.patch(k).to_vec(),
                });
            }
        }
        frames.push(FrameSelection {
            frame: t,
            kept_count: selected.iter().filter(|&&b| b).count(),
            noisy_scores: (opts.mode == SelectMode::Train).then(|| outs.iter().map(|o| o.s_hat).collect()),
            gates: outs.iter().map(|o| o.d).collect(),
            scores,
            selected,
        });
        gates.push(gate_var);
    }
    g.set_stage(prev_stage);
    Ok(SelectionRun {
        result: SelectionResult {
            patches_per_frame: n,
            frames,
            pool,
        },
        gates,
        y1,
        degenerate_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_examples() {
        let z = score_gate(0.0, 0.0, SelectMode::Train);
        assert_eq!(z.d, 0.5);
        assert!(!z.b);
        let big = score_gate(10.0, 0.0, SelectMode::Train);
        assert_eq!(big.d, 1.0);
        assert!(big.b);
        let neg = score_gate(-3.0, 0.0, SelectMode::Train);
        assert_eq!(neg.d, 0.0);
        assert!(!neg.b);
        assert!(!score_gate(0.0, 5.0, SelectMode::Infer).b);
    }

    #[test]
    fn progressive_residual_examples() {
        let pool = vec![PoolEntry {
            frame: 0,
            patch: 0,
            pixels: vec![0; PATCH_LEN],
        }];
        let q: Vec<u8> = (0..PATCH_LEN).map(|i| (i % 256) as u8).collect();
        let r = progressive_residual(&q, &pool).unwrap();
        assert!(r.iter().zip(&q).all(|(&a, &b)| a == i16::from(b)));
        assert!(progressive_residual(&q, &[]).is_err());
    }

    #[test]
    fn cnn_mac_formula_base_geometry() {
        let c = SelectorConfig::base();
        // 16·81·8·64·128 + 32·432·8·32·64 + 64·864·8·16·32 + 64·1728·8·8·16
        assert_eq!(
            c.cnn_macs(8, 128, 256),
            84_934_656 + 226_492_416 + 226_492_416 + 113_246_208
        );
        assert_eq!(c.mlp_macs_per_patch(), 1600 * 256 + 256 * 64 + 64);
    }
}

//! Patch-sparse transformer over one GOP.
//!
//! The I-frame runs through a plain pre-norm transformer. Each P-frame keeps
//! only its selected patch tokens plus a context token predicted from the
//! I-frame context trajectory (global warp). A reverse reconstruction of the
//! I-frame context scores that prediction; when the cosine distance exceeds
//! the threshold the context is rebuilt by patch-wise warping, which also
//! yields eight local tokens. After the last layer every unselected patch gets
//! a warped pseudo feature and the clip feature is the mean over all
//! positions of all frames.

use serde::{Deserialize, Serialize};
use sparsepatch_numcore::{Graph, ParamSet, SplitSeed, Tensor, Var};

use crate::error::{Error, Result};
use crate::gopcodec::{decode_gop, patchify, GopClip, PFrame, PatchGrid, PATCH_LEN};
use crate::nn::{
    init_layer_norm, init_linear, init_mlp, init_projection, layer_norm, linear, mlp, mlp_macs, project, Act,
};
use crate::selector::SelectionResult;

pub const STAGE_EMBED: &str = "embedding";
pub const STAGE_IMSA: &str = "iframe_msa";
pub const STAGE_PMSA: &str = "pframe_msa";
pub const STAGE_PW: &str = "patchwise_warp";
pub const STAGE_GW: &str = "global_warp";
pub const STAGE_ROUTE: &str = "routing";

/// Local tokens pool the patch grid into this many rows and columns.
pub const LOCAL_GRID: (usize, usize) = (2, 4);
pub const LOCAL_TOKENS: usize = LOCAL_GRID.0 * LOCAL_GRID.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Routing threshold `s`; the gate opens when the cosine distance exceeds it.
    pub threshold: f64,
    /// Hidden width shared by the patch-wise, evolution and guidance MLPs.
    pub warp_hidden: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Size of the frame-index embedding table.
    pub max_frames: usize,
}

impl PsformerConfig {
    pub fn base(grid_h: usize, grid_w: usize, max_frames: usize) -> Self {
        PsformerConfig {
            layers: 12,
            dim: 768,
            heads: 12,
            threshold: 0.5,
            warp_hidden: 192,
            grid_h,
            grid_w,
            max_frames,
        }
    }

    pub fn toy(grid_h: usize, grid_w: usize, max_frames: usize) -> Self {
        PsformerConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            threshold: 0.5,
            warp_hidden: 32,
            grid_h,
            grid_w,
            max_frames,
        }
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn pw_dims(&self) -> [usize; 4] {
        [self.dim + PATCH_LEN, self.warp_hidden, self.warp_hidden, self.dim]
    }

    /// Dims of both the evolution (`W_ev`) and guidance (`W_gw`) MLPs.
    pub fn warp_dims(&self) -> [usize; 3] {
        [2 * self.dim, self.warp_hidden, self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation("psformer config", msg));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.warp_hidden == 0 {
            return bad("layers, dim, heads and warp_hidden must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.grid_h < LOCAL_GRID.0 || self.grid_w < LOCAL_GRID.1 {
            return bad(format!(
                "grid {}x{} smaller than the {}x{} local pooling grid",
                self.grid_h, self.grid_w, LOCAL_GRID.0, LOCAL_GRID.1
            ));
        }
        if self.max_frames == 0 {
            return bad("max_frames must be positive".into());
        }
        if !self.threshold.is_finite() {
            return bad("threshold must be finite".into());
        }
        Ok(())
    }

    /// MACs of one transformer block over `k` tokens.
    pub fn msa_macs(&self, k: usize) -> u64 {
        let (d, k) = (self.dim as u64, k as u64);
        12 * k * d * d + 2 * k * k * d
    }

    /// MACs to warp one unselected patch: `W_pw`, its query and its attention
    /// over the `N` I-frame keys and values.
    pub fn warp_patch_macs(&self) -> u64 {
        let (d, dk, n) = (self.dim as u64, self.head_dim() as u64, self.patches() as u64);
        mlp_macs(&self.pw_dims()) + d * dk + dk * n + n * d
    }

    /// MACs of the I-frame key and value projections used by the warp.
    pub fn warp_kv_macs(&self) -> u64 {
        let (d, dk, n) = (self.dim as u64, self.head_dim() as u64, self.patches() as u64);
        n * d * (dk + d)
    }
}

pub fn init_psformer_params(p: &mut ParamSet, cfg: &PsformerConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    init_linear(p, "pf.embed", PATCH_LEN, d, 1.0, seed.split(1))?;
    p.insert_normal("pf.pos", &[cfg.patches(), d], 0.02, seed.split(2))?;
    p.insert_normal("pf.frame", &[cfg.max_frames, d], 0.02, seed.split(3))?;
    for l in 0..cfg.layers {
        let s = seed.split(100 + l as u64);
        init_layer_norm(p, &format!("pf.l{l}.ln1"), d)?;
        for (i, name) in ["q", "k", "v", "o"].iter().enumerate() {
            let prefix = format!("pf.l{l}.attn.{name}");
            if *name == "k" {
                init_projection(p, &prefix, d, d, s.split(i as u64))?;
            } else {
                init_linear(p, &prefix, d, d, 1.0, s.split(i as u64))?;
            }
        }
        init_layer_norm(p, &format!("pf.l{l}.ln2"), d)?;
        init_mlp(p, &format!("pf.l{l}.ffn"), &[d, 4 * d, d], s.split(9))?;
    }
    init_mlp(p, "pf.pw", &cfg.pw_dims(), seed.split(4))?;
    init_linear(p, "pf.wq", d, cfg.head_dim(), 1.0, seed.split(5))?;
    init_projection(p, "pf.wk", d, cfg.head_dim(), seed.split(6))?;
    init_linear(p, "pf.wv", d, d, 1.0, seed.split(7))?;
    init_mlp(p, "pf.ev", &cfg.warp_dims(), seed.split(8))?;
    init_mlp(p, "pf.gw", &cfg.warp_dims(), seed.split(9))?;
    Ok(())
}

/// Pre-norm transformer block `l`: attention then a GELU feed-forward of width `4d`.
/// Keys have no bias; one would shift each score row uniformly and cancel in the softmax.
pub fn msa_layer(g: &mut Graph, p: &ParamSet, cfg: &PsformerConfig, l: usize, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.dim || shape[0] == 0 {
        return Err(Error::validation(
            "msa input",
            format!("{shape:?}, model dim {}", cfg.dim),
        ));
    }
    let pre = format!("pf.l{l}");
    let h = layer_norm(g, p, &format!("{pre}.ln1"), x)?;
    let q = linear(g, p, &format!("{pre}.attn.q"), h)?;
    let k = project(g, p, &format!("{pre}.attn.k"), h)?;
    let v = linear(g, p, &format!("{pre}.attn.v"), h)?;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qi = g.slice_cols(q, i * dk, dk)?;
        let ki = g.slice_cols(k, i * dk, dk)?;
        let vi = g.slice_cols(v, i * dk, dk)?;
        let s = g.matmul_nt(qi, ki)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows(s)?;
        heads.push(g.matmul(a, vi)?);
    }
    let cat = g.concat_cols(&heads)?;
    let o = linear(g, p, &format!("{pre}.attn.o"), cat)?;
    let x1 = g.add(x, o)?;
    let h2 = layer_norm(g, p, &format!("{pre}.ln2"), x1)?;
    let f = mlp(g, p, &format!("{pre}.ffn"), 2, Act::Gelu, h2)?;
    Ok(g.add(x1, f)?)
}

/// `C^P = W_gw(E ‖ cP_prev)` for an evolution code `E = W_ev(cI_l ‖ cI_prev)`.
pub fn guide(g: &mut Graph, p: &ParamSet, e: Var, c_prev: Var) -> Result<Var> {
    let x = g.concat_cols(&[e, c_prev])?;
    mlp(g, p, "pf.gw", 2, Act::Gelu, x)
}

pub fn evolution(g: &mut Graph, p: &ParamSet, c: Var, c_prev: Var) -> Result<Var> {
    let x = g.concat_cols(&[c, c_prev])?;
    mlp(g, p, "pf.ev", 2, Act::Gelu, x)
}

/// Global-level warp of the P-frame context.
pub fn global_warp(g: &mut Graph, p: &ParamSet, ci: Var, ci_prev: Var, cp_prev: Var) -> Result<Var> {
    let e = evolution(g, p, ci, ci_prev)?;
    guide(g, p, e, cp_prev)
}

/// Reverse reconstruction of `C^I_l` from a predicted `C^P_l`; returns the
/// cosine-distance node (zero norm reads as distance 1).
pub fn routing_distance(g: &mut Graph, p: &ParamSet, cp: Var, cp_prev: Var, ci: Var, ci_prev: Var) -> Result<Var> {
    let e_hat = evolution(g, p, cp, cp_prev)?;
    let ci_hat = guide(g, p, e_hat, ci_prev)?;
    Ok(g.cosine_distance(ci_hat, ci)?)
}

/// Gate decision for a distance `c` and threshold `s`.
pub fn gate_opens(c: f64, s: f64) -> bool {
    c > s
}

/// I-frame keys and values shared by every warp of one layer.
#[derive(Debug, Clone, Copy)]
pub struct WarpKv {
    k: Var,
    v: Var,
}

pub fn warp_kv(g: &mut Graph, p: &ParamSet, i_tokens: Var) -> Result<WarpKv> {
    Ok(WarpKv {
        k: project(g, p, "pf.wk", i_tokens)?,
        v: linear(g, p, "pf.wv", i_tokens)?,
    })
}

/// Patch-wise warp output on the full `N`-position grid.
pub struct WarpOutput {
    /// `N × d`, transformer tokens at selected positions and pseudo features elsewhere.
    pub grid: Var,
    /// `M × d` pseudo features of the unselected positions, ascending; `None` when `M = 0`.
    pub pseudo: Option<Var>,
}

/// Pseudo features for the positions not in `selected`, assembled with the
/// selected tokens (`tokens` row `j` belongs to `selected[j]`) into grid order.
pub fn patchwise_warp(
    g: &mut Graph,
    p: &ParamSet,
    cfg: &PsformerConfig,
    i_tokens: Var,
    kv: WarpKv,
    tokens: Option<Var>,
    selected: &[usize],
    frame: &PFrame,
) -> Result<WarpOutput> {
    let n = cfg.patches();
    if frame.motion.len() != n || frame.residual.len() != n * PATCH_LEN {
        return Err(Error::validation(
            "patchwise warp",
            "motion data does not cover every patch",
        ));
    }
    let mut slot = vec![usize::MAX; n];
    for (j, &k) in selected.iter().enumerate() {
        slot[k] = j;
    }
    let unselected: Vec<usize> = (0..n).filter(|&k| slot[k] == usize::MAX).collect();
    let kept = selected.len();

    let pseudo = if unselected.is_empty() {
        None
    } else {
        let motion: Vec<usize> = unselected.iter().map(|&k| frame.motion[k]).collect();
        let shifted = g.gather_rows(i_tokens, &motion)?;
        let res: Vec<f64> = unselected
            .iter()
            .flat_map(|&k| frame.residual_patch(k).iter().map(|&r| f64::from(r) * PIXEL_SCALE))
            .collect();
        let res = g.constant(Tensor::from_rows(unselected.len(), PATCH_LEN, res)?)?;
        let x = g.concat_cols(&[shifted, res])?;
        let p_hat = mlp(g, p, "pf.pw", 3, Act::Gelu, x)?;
        let q = linear(g, p, "pf.wq", p_hat)?;
        let s = g.matmul_nt(q, kv.k)?;
        let s = g.scale(s, 1.0 / (cfg.head_dim() as f64).sqrt())?;
        let a = g.softmax_rows(s)?;
        Some(g.matmul(a, kv.v)?)
    };
    for (m, &k) in unselected.iter().enumerate() {
        slot[k] = kept + m;
    }
    let stacked = match (tokens, pseudo) {
        (Some(t), Some(ps)) => g.concat_rows(&[t, ps])?,
        (Some(t), None) => t,
        (None, Some(ps)) => ps,
        (None, None) => return Err(Error::validation("patchwise warp", "empty patch grid")),
    };
    let grid = g.gather_rows(stacked, &slot)?;
    Ok(WarpOutput { grid, pseudo })
}

/// Row groups of the 2×4 local pooling over a `grid_h × grid_w` grid.
pub fn local_cells(grid_h: usize, grid_w: usize) -> Vec<Vec<usize>> {
    let (rh, rw) = LOCAL_GRID;
    let mut cells = Vec::with_capacity(LOCAL_TOKENS);
    for r in 0..rh {
        for c in 0..rw {
            let rows = r * grid_h / rh..(r + 1) * grid_h / rh;
            let cols = c * grid_w / rw..(c + 1) * grid_w / rw;
            cells.push(rows.flat_map(|y| cols.clone().map(move |x| y * grid_w + x)).collect());
        }
    }
    cells
}

const PIXEL_SCALE: f64 = 1.0 / 255.0;

/// Patch pixels mapped to `[-0.5, 0.5]`.
fn pixel_rows(grid: &PatchGrid, idx: &[usize]) -> Result<Tensor> {
    let data = idx
        .iter()
        .flat_map(|&k| grid.patch(k).iter().map(|&v| f64::from(v) * PIXEL_SCALE - 0.5))
        .collect();
    Ok(Tensor::from_rows(idx.len(), PATCH_LEN, data)?)
}

/// Embeds the patches `idx` of frame `t`: linear projection plus positional
/// embedding of each original location plus the frame embedding.
pub fn embed_patches(g: &mut Graph, p: &ParamSet, grid: &PatchGrid, idx: &[usize], t: usize) -> Result<Var> {
    let x = g.constant(pixel_rows(grid, idx)?)?;
    let e = linear(g, p, "pf.embed", x)?;
    let pos_all = g.param(p, "pf.pos")?;
    let pos = g.gather_rows(pos_all, idx)?;
    let e = g.add(e, pos)?;
    let frames = g.param(p, "pf.frame")?;
    let fr = g.slice_rows(frames, t, 1)?;
    Ok(g.add_row(e, fr)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateMode {
    Threshold,
    ForceOpen,
    ForceClosed,
    /// Fixed decisions indexed `[layer][t − 1]`, e.g. replayed for gradient checks.
    Frozen(Vec<Vec<bool>>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingEntry {
    pub layer: usize,
    pub frame: usize,
    pub cosine_distance: f64,
    pub gate_open: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingLog {
    pub layers: usize,
    pub entries: Vec<RoutingEntry>,
}

#[derive(Serialize)]
struct RoutingJson<'a> {
    entries: &'a [RoutingEntry],
    open_rate: f64,
}

impl RoutingLog {
    pub fn open_count(&self) -> usize {
        self.entries.iter().filter(|e| e.gate_open).count()
    }

    /// Opened gates over all (layer, P-frame) pairs; 0 when there are none.
    pub fn open_rate(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.open_count() as f64 / self.entries.len() as f64
        }
    }

    pub fn open_rate_per_layer(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|l| {
                let row: Vec<_> = self.entries.iter().filter(|e| e.layer == l).collect();
                if row.is_empty() {
                    0.0
                } else {
                    row.iter().filter(|e| e.gate_open).count() as f64 / row.len() as f64
                }
            })
            .collect()
    }

    /// Decisions as `[layer][t − 1]`, suitable for [`GateMode::Frozen`].
    pub fn decisions(&self) -> Vec<Vec<bool>> {
        let mut out = vec![Vec::new(); self.layers];
        for e in &self.entries {
            out[e.layer].push(e.gate_open);
        }
        out
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(RoutingJson {
            entries: &self.entries,
            open_rate: self.open_rate(),
        })
        .expect("routing log serializes")
    }
}

/// Everything the sparse forward needs from one clip.
pub struct PsformerInput<'a> {
    pub gop: &'a GopClip,
    /// Decoded pixel grid of every frame.
    pub frames: Vec<PatchGrid>,
    /// Selected patch indices per P-frame, in token storage order.
    pub selected: Vec<Vec<usize>>,
    /// Optional `N × 1` gate node per P-frame; selected rows scale their tokens.
    pub gates: Vec<Option<Var>>,
}

impl<'a> PsformerInput<'a> {
    pub fn new(gop: &'a GopClip, selected: Vec<Vec<usize>>) -> Result<Self> {
        let clip = decode_gop(gop)?;
        let frames = (0..clip.frames)
            .map(|t| patchify(clip.frame(t), clip.height, clip.width))
            .collect::<Result<Vec<_>>>()?;
        let n = gop.patches_per_frame();
        if selected.len() + 1 != gop.frames() {
            return Err(Error::validation(
                "selection",
                format!("{} P-frame selections for {} frames", selected.len(), gop.frames()),
            ));
        }
        for (t, sel) in selected.iter().enumerate() {
            let mut seen = vec![false; n];
            for &k in sel {
                if k >= n || std::mem::replace(&mut seen[k], true) {
                    return Err(Error::validation(
                        "selection",
                        format!("frame {}: patch {k} out of range or repeated", t + 1),
                    ));
                }
            }
        }
        let gates = vec![None; selected.len()];
        Ok(PsformerInput {
            gop,
            frames,
            selected,
            gates,
        })
    }

    pub fn from_selection(gop: &'a GopClip, sel: &SelectionResult) -> Result<Self> {
        if sel.patches_per_frame != gop.patches_per_frame() {
            return Err(Error::validation("selection", "patch count differs from the GOP"));
        }
        Self::new(gop, sel.frames.iter().map(|f| f.selected_indices()).collect())
    }

    pub fn with_gates(mut self, gates: Vec<Option<Var>>) -> Result<Self> {
        if gates.len() != self.selected.len() {
            return Err(Error::validation("gates", "one gate entry per P-frame required"));
        }
        self.gates = gates;
        Ok(self)
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.selected.iter().map(Vec::len).collect()
    }
}

pub struct PsformerOutput {
    /// `1 × d` clip feature.
    pub feature: Var,
    pub routing: RoutingLog,
    /// `C^I_0 ..= C^I_L`: mean I-frame token entering each layer, then after the last.
    pub contexts: Vec<Var>,
}

fn branch_code(l: usize, t: usize, open: bool) -> u64 {
    0x6A7E_0000_0000_0000 | ((l as u64) << 24) | ((t as u64) << 1) | u64::from(open)
}

pub fn psformer_forward(
    g: &mut Graph,
    p: &ParamSet,
    cfg: &PsformerConfig,
    input: &PsformerInput<'_>,
    mode: &GateMode,
) -> Result<PsformerOutput> {
    cfg.validate()?;
    let gop = input.gop;
    let n = cfg.patches();
    let frames = gop.frames();
    if gop.i_frame.grid_h != cfg.grid_h || gop.i_frame.grid_w != cfg.grid_w {
        return Err(Error::validation(
            "psformer input",
            format!(
                "clip grid {}x{} but model grid {}x{}",
                gop.i_frame.grid_h, gop.i_frame.grid_w, cfg.grid_h, cfg.grid_w
            ),
        ));
    }
    if frames > cfg.max_frames {
        return Err(Error::validation(
            "psformer input",
            format!("{frames} frames exceed max_frames {}", cfg.max_frames),
        ));
    }
    if let GateMode::Frozen(d) = mode {
        if d.len() != cfg.layers || d.iter().any(|row| row.len() + 1 != frames) {
            return Err(Error::validation(
                "frozen gates",
                "need one decision per layer and P-frame",
            ));
        }
    }
    let prev_stage = g.set_stage(STAGE_EMBED);
    let all: Vec<usize> = (0..n).collect();
    let mut i_tok = embed_patches(g, p, &input.frames[0], &all, 0)?;
    let mut p_tok: Vec<Option<Var>> = Vec::with_capacity(frames - 1);
    for t in 1..frames {
        let sel = &input.selected[t - 1];
        if sel.is_empty() {
            p_tok.push(None);
            continue;
        }
        let mut e = embed_patches(g, p, &input.frames[t], sel, t)?;
        if let Some(gate) = input.gates[t - 1] {
            let gsel = g.gather_rows(gate, sel)?;
            e = g.scale_rows(e, gsel)?;
        }
        p_tok.push(Some(e));
    }

    let mut contexts = vec![g.mean_rows(i_tok)?];
    let mut cp_prev: Vec<Var> = p_tok
        .iter()
        .map(|t| match t {
            Some(v) => g.mean_rows(*v),
            None => Ok(contexts[0]),
        })
        .collect::<std::result::Result<_, _>>()?;
    let cells = local_cells(cfg.grid_h, cfg.grid_w);
    let mut log = RoutingLog {
        layers: cfg.layers,
        entries: Vec::with_capacity(cfg.layers * (frames - 1)),
    };

    for l in 0..cfg.layers {
        let ci = contexts[l];
        let ci_prev = contexts[l.saturating_sub(1)];
        g.set_stage(STAGE_IMSA);
        let i_next = msa_layer(g, p, cfg, l, i_tok)?;
        let e = if frames > 1 {
            g.set_stage(STAGE_GW);
            Some(evolution(g, p, ci, ci_prev)?)
        } else {
            None
        };
        let mut kv: Option<WarpKv> = None;
        for t in 1..frames {
            g.set_stage(STAGE_GW);
            let mut cp = guide(g, p, e.expect("P-frames imply an evolution code"), cp_prev[t - 1])?;
            g.set_stage(STAGE_ROUTE);
            let c = routing_distance(g, p, cp, cp_prev[t - 1], ci, ci_prev)?;
            let c_val = g.value(c).item();
            let open = match mode {
                GateMode::Threshold => gate_opens(c_val, cfg.threshold),
                GateMode::ForceOpen => true,
                GateMode::ForceClosed => false,
                GateMode::Frozen(d) => d[l][t - 1],
            };
            g.note_branch(branch_code(l, t, open));
            log.entries.push(RoutingEntry {
                layer: l,
                frame: t,
                cosine_distance: c_val,
                gate_open: open,
            });
            let mut ext = Vec::with_capacity(3);
            if let Some(tok) = p_tok[t - 1] {
                ext.push(tok);
            }
            let mut local = None;
            if open {
                g.set_stage(STAGE_PW);
                let kv = match kv {
                    Some(kv) => kv,
                    None => *kv.insert(warp_kv(g, p, i_tok)?),
                };
                let w = patchwise_warp(
                    g,
                    p,
                    cfg,
                    i_tok,
                    kv,
                    p_tok[t - 1],
                    &input.selected[t - 1],
                    gop.p_frame(t),
                )?;
                cp = g.mean_rows(w.grid)?;
                local = Some(g.pool_rows(w.grid, cells.clone())?);
            }
            ext.push(cp);
            ext.extend(local);
            g.set_stage(STAGE_PMSA);
            let x = g.concat_rows(&ext)?;
            let out = msa_layer(g, p, cfg, l, x)?;
            if p_tok[t - 1].is_some() {
                let k = input.selected[t - 1].len();
                p_tok[t - 1] = Some(g.slice_rows(out, 0, k)?);
            }
            cp_prev[t - 1] = cp;
        }
        i_tok = i_next;
        contexts.push(g.mean_rows(i_tok)?);
    }

    let mut rows = vec![i_tok];
    if frames > 1 {
        g.set_stage(STAGE_PW);
        let kv = warp_kv(g, p, i_tok)?;
        for t in 1..frames {
            let w = patchwise_warp(
                g,
                p,
                cfg,
                i_tok,
                kv,
                p_tok[t - 1],
                &input.selected[t - 1],
                gop.p_frame(t),
            )?;
            rows.push(w.grid);
        }
    }
    let stacked = g.concat_rows(&rows)?;
    let feature = g.mean_rows(stacked)?;
    g.set_stage(prev_stage);
    Ok(PsformerOutput {
        feature,
        routing: log,
        contexts,
    })
}

/// Output of the dense forward used in the first training stage.
pub struct DenseOutput {
    pub feature: Var,
    pub contexts: Vec<Var>,
}

/// Every patch of every frame through the shared blocks; each P-frame's
/// context token is the exact mean of its own tokens.
pub fn psformer_dense_forward(
    g: &mut Graph,
    p: &ParamSet,
    cfg: &PsformerConfig,
    frames: &[PatchGrid],
) -> Result<DenseOutput> {
    cfg.validate()?;
    if frames.is_empty() || frames.len() > cfg.max_frames {
        return Err(Error::validation("dense forward", format!("{} frames", frames.len())));
    }
    if frames.iter().any(|f| f.grid_h != cfg.grid_h || f.grid_w != cfg.grid_w) {
        return Err(Error::validation(
            "dense forward",
            "frame grid differs from the model grid",
        ));
    }
    let n = cfg.patches();
    let prev_stage = g.set_stage(STAGE_EMBED);
    let all: Vec<usize> = (0..n).collect();
    let mut tok = frames
        .iter()
        .enumerate()
        .map(|(t, f)| embed_patches(g, p, f, &all, t))
        .collect::<Result<Vec<_>>>()?;
    let mut contexts = vec![g.mean_rows(tok[0])?];
    for l in 0..cfg.layers {
        g.set_stage(STAGE_IMSA);
        tok[0] = msa_layer(g, p, cfg, l, tok[0])?;
        g.set_stage(STAGE_PMSA);
        for t in 1..frames.len() {
            let ctx = g.mean_rows(tok[t])?;
            let x = g.concat_rows(&[tok[t], ctx])?;
            let out = msa_layer(g, p, cfg, l, x)?;
            tok[t] = g.slice_rows(out, 0, n)?;
        }
        contexts.push(g.mean_rows(tok[0])?);
    }
    let stacked = g.concat_rows(&tok)?;
    let feature = g.mean_rows(stacked)?;
    g.set_stage(prev_stage);
    Ok(DenseOutput { feature, contexts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_cells_cover_grid_once() {
        let cells = local_cells(8, 16);
        assert_eq!(cells.len(), 8);
        let mut seen = vec![0; 128];
        for c in &cells {
            assert_eq!(c.len(), 16);
            for &k in c {
                seen[k] += 1;
            }
        }
        assert!(seen.iter().all(|&v| v == 1));
        // a 2×4 grid pools to its own cells
        assert_eq!(local_cells(2, 4), (0..8).map(|k| vec![k]).collect::<Vec<_>>());
    }

    #[test]
    fn gate_threshold_extremes() {
        assert!(!gate_opens(0.0, 0.5));
        assert!(gate_opens(1.0, 0.5));
        assert!(!gate_opens(0.5, 0.5));
        for c in [0.0, 0.7, 2.0] {
            assert!(gate_opens(c, -1.0));
            assert!(!gate_opens(c, 2.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(PsformerConfig::toy(4, 4, 8).validate().is_ok());
        let mut c = PsformerConfig::toy(4, 4, 8);
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(PsformerConfig::toy(1, 4, 8).validate().is_err());
    }

    #[test]
    fn single_token_attention_is_identity_weight() {
        let cfg = PsformerConfig::toy(2, 4, 2);
        let mut p = ParamSet::new();
        init_psformer_params(&mut p, &cfg, 3).unwrap();
        let mut g = Graph::new();
        let x = g
            .constant(sparsepatch_numcore::seeded_gaussian(1, &[1, cfg.dim]))
            .unwrap();
        let y = msa_layer(&mut g, &p, &cfg, 0, x).unwrap();
        // with one key every head returns v, so the block equals x + o(v) + ffn(...)
        let mut h = Graph::new();
        let xv = h.constant(g.value(x).clone()).unwrap();
        let n1 = layer_norm(&mut h, &p, "pf.l0.ln1", xv).unwrap();
        let v = linear(&mut h, &p, "pf.l0.attn.v", n1).unwrap();
        let o = linear(&mut h, &p, "pf.l0.attn.o", v).unwrap();
        let x1 = h.add(xv, o).unwrap();
        let n2 = layer_norm(&mut h, &p, "pf.l0.ln2", x1).unwrap();
        let f = mlp(&mut h, &p, "pf.l0.ffn", 2, Act::Gelu, n2).unwrap();
        let want = h.add(x1, f).unwrap();
        assert!(g.value(y).max_abs_diff(h.value(want)) < 1e-12);
    }
}

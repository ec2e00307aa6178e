//! Group-of-pictures representation: an I-frame plus, per P-frame, exhaustive
//! SAD motion indices into the I-frame and exact signed residuals.

use std::path::Path;

use sparsepatch_numcore::Tensor;

use crate::error::{Error, Result};
use crate::videoio::{Cursor, RawClip, PATCH};

pub const PATCH_LEN: usize = PATCH * PATCH * 3;
pub const GOP_MAGIC: &[u8; 5] = b"GOP1\0";
pub const GOP_VERSION: u8 = 1;

pub fn flatten_index(h: usize, w: usize, grid_h: usize, grid_w: usize) -> Result<usize> {
    if h >= grid_h || w >= grid_w {
        return Err(Error::validation(
            "patch coordinate",
            format!("({h}, {w}) outside {grid_h}x{grid_w}"),
        ));
    }
    Ok(grid_w * h + w)
}

pub fn unflatten_index(v: usize, grid_h: usize, grid_w: usize) -> Result<(usize, usize)> {
    if grid_w == 0 || v >= grid_h * grid_w {
        return Err(Error::validation(
            "patch index",
            format!("{v} outside {grid_h}x{grid_w}"),
        ));
    }
    Ok((v / grid_w, v % grid_w))
}

/// Frame split into `N = grid_h · grid_w` flattened 16×16×3 patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `N × 768`, channel-last and row-major within each patch.
    pub patches: Vec<u8>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, n: usize) -> &[u8] {
        &self.patches[n * PATCH_LEN..(n + 1) * PATCH_LEN]
    }

    /// `N × 768` tensor scaled by `scale`.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        let data = self.patches.iter().map(|&v| f64::from(v) * scale).collect();
        Tensor::from_rows(self.len(), PATCH_LEN, data).expect("patch buffer size")
    }
}

pub fn patchify(frame: &[u8], height: usize, width: usize) -> Result<PatchGrid> {
    if height == 0
        || width == 0
        || !height.is_multiple_of(PATCH)
        || !width.is_multiple_of(PATCH)
        || frame.len() != height * width * 3
    {
        return Err(Error::validation(
            "frame",
            format!("{height}x{width} with {} bytes", frame.len()),
        ));
    }
    let (gh, gw) = (height / PATCH, width / PATCH);
    let mut patches = Vec::with_capacity(frame.len());
    for r in 0..gh {
        for c in 0..gw {
            for y in r * PATCH..(r + 1) * PATCH {
                let start = (y * width + c * PATCH) * 3;
                patches.extend_from_slice(&frame[start..start + PATCH * 3]);
            }
        }
    }
    Ok(PatchGrid {
        grid_h: gh,
        grid_w: gw,
        patches,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Vec<u8> {
    let width = grid.grid_w * PATCH;
    let mut frame = vec![0u8; grid.patches.len()];
    for n in 0..grid.len() {
        let (r, c) = (n / grid.grid_w, n % grid.grid_w);
        let p = grid.patch(n);
        for dy in 0..PATCH {
            let dst = ((r * PATCH + dy) * width + c * PATCH) * 3;
            frame[dst..dst + PATCH * 3].copy_from_slice(&p[dy * PATCH * 3..(dy + 1) * PATCH * 3]);
        }
    }
    frame
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PFrame {
    /// I-frame patch index per patch.
    pub motion: Vec<usize>,
    /// `N × 768` values in `[−255, 255]`.
    pub residual: Vec<i16>,
}

impl PFrame {
    pub fn residual_patch(&self, n: usize) -> &[i16] {
        &self.residual[n * PATCH_LEN..(n + 1) * PATCH_LEN]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GopClip {
    pub height: usize,
    pub width: usize,
    pub i_frame: PatchGrid,
    pub p_frames: Vec<PFrame>,
}

impl GopClip {
    pub fn frames(&self) -> usize {
        1 + self.p_frames.len()
    }

    pub fn patches_per_frame(&self) -> usize {
        self.i_frame.len()
    }

    /// `t ≥ 1` indexes P-frames by clip frame number.
    pub fn p_frame(&self, t: usize) -> &PFrame {
        &self.p_frames[t - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.patches_per_frame();
        if self.i_frame.grid_h * PATCH != self.height || self.i_frame.grid_w * PATCH != self.width {
            return Err(Error::validation("gop", "I-frame grid does not match frame size"));
        }
        for (k, p) in self.p_frames.iter().enumerate() {
            if p.motion.len() != n || p.residual.len() != n * PATCH_LEN {
                return Err(Error::validation("gop", format!("P-frame {} has wrong sizes", k + 1)));
            }
            if let Some(&bad) = p.motion.iter().find(|&&m| m >= n) {
                return Err(Error::validation(
                    "motion index",
                    format!("{bad} out of range [0, {n}) in frame {}", k + 1),
                ));
            }
            if p.residual.iter().any(|v| !(-255..=255).contains(v)) {
                return Err(Error::validation(
                    "gop",
                    format!("residual out of range in frame {}", k + 1),
                ));
            }
        }
        Ok(())
    }
}

/// Sum of absolute differences between two patches.
pub fn sad(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(&x, &y)| u32::from(x.abs_diff(y))).sum()
}

/// Index of the candidate with the smallest SAD to `query`; ties go to the
/// smallest index.
pub fn best_match<'a>(query: &[u8], candidates: impl Iterator<Item = &'a [u8]>) -> Option<(usize, u32)> {
    let mut best: Option<(usize, u32)> = None;
    for (k, cand) in candidates.enumerate() {
        let bound = best.map_or(u32::MAX, |b| b.1);
        // partial sums only grow, so a chunk total reaching the bound cannot win
        let mut s = 0u32;
        for (qa, ca) in query.chunks(96).zip(cand.chunks(96)) {
            s += sad(qa, ca);
            if s >= bound {
                break;
            }
        }
        if s < bound {
            best = Some((k, s));
        }
    }
    best
}

pub fn encode_gop(clip: &RawClip) -> Result<GopClip> {
    clip.validate()?;
    let i_frame = patchify(clip.frame(0), clip.height, clip.width)?;
    let n = i_frame.len();
    let mut p_frames = Vec::with_capacity(clip.frames - 1);
    for t in 1..clip.frames {
        let grid = patchify(clip.frame(t), clip.height, clip.width)?;
        let mut motion = Vec::with_capacity(n);
        let mut residual = Vec::with_capacity(n * PATCH_LEN);
        for q in 0..n {
            let query = grid.patch(q);
            let (m, _) = best_match(query, (0..n).map(|k| i_frame.patch(k))).expect("N >= 1");
            motion.push(m);
            residual.extend(
                query
                    .iter()
                    .zip(i_frame.patch(m))
                    .map(|(&a, &b)| i16::from(a) - i16::from(b)),
            );
        }
        p_frames.push(PFrame { motion, residual });
    }
    Ok(GopClip {
        height: clip.height,
        width: clip.width,
        i_frame,
        p_frames,
    })
}

/// Reconstructed pixel patch `n` of frame `t`.
pub fn reconstruct_patch(g: &GopClip, t: usize, n: usize) -> Vec<u8> {
    if t == 0 {
        return g.i_frame.patch(n).to_vec();
    }
    let p = g.p_frame(t);
    g.i_frame
        .patch(p.motion[n])
        .iter()
        .zip(p.residual_patch(n))
        .map(|(&b, &r)| (i16::from(b) + r) as u8)
        .collect()
}

pub fn decode_gop(g: &GopClip) -> Result<RawClip> {
    g.validate()?;
    let n = g.patches_per_frame();
    let mut pixels = unpatchify(&g.i_frame);
    for t in 1..g.frames() {
        let p = g.p_frame(t);
        let mut patches = Vec::with_capacity(n * PATCH_LEN);
        for k in 0..n {
            for (&b, &r) in g.i_frame.patch(p.motion[k]).iter().zip(p.residual_patch(k)) {
                let v = i16::from(b) + r;
                if !(0..=255).contains(&v) {
                    return Err(Error::validation(
                        "gop",
                        format!("frame {t} patch {k} reconstructs to {v}"),
                    ));
                }
                patches.push(v as u8);
            }
        }
        pixels.extend(unpatchify(&PatchGrid {
            grid_h: g.i_frame.grid_h,
            grid_w: g.i_frame.grid_w,
            patches,
        }));
    }
    RawClip::new(g.height, g.width, g.frames(), pixels)
}

pub fn gop_to_bytes(g: &GopClip) -> Vec<u8> {
    let n = g.patches_per_frame();
    let mut out = Vec::with_capacity(18 + g.i_frame.patches.len() + g.p_frames.len() * n * (2 + 2 * PATCH_LEN));
    out.extend_from_slice(GOP_MAGIC);
    out.push(GOP_VERSION);
    for v in [g.height, g.width, g.frames()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(unpatchify(&g.i_frame));
    for p in &g.p_frames {
        for &m in &p.motion {
            out.extend_from_slice(&(m as u16).to_le_bytes());
        }
        for &r in &p.residual {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    out
}

pub fn gop_from_bytes(buf: &[u8]) -> Result<GopClip> {
    const WHAT: &str = "gop1";
    if buf.len() < GOP_MAGIC.len() || &buf[..5] != GOP_MAGIC {
        return Err(Error::Parse {
            what: WHAT,
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    if buf.len() < 6 {
        return Err(Error::Parse {
            what: WHAT,
            offset: 5,
            msg: "missing version byte".into(),
        });
    }
    if buf[5] != GOP_VERSION {
        return Err(Error::UnsupportedVersion {
            what: WHAT,
            version: buf[5],
        });
    }
    let mut cur = Cursor {
        buf,
        pos: 6,
        what: WHAT,
    };
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let t = cur.u32()? as usize;
    if h == 0 || w == 0 || !h.is_multiple_of(PATCH) || !w.is_multiple_of(PATCH) || t == 0 {
        return Err(Error::Parse {
            what: WHAT,
            offset: 6,
            msg: format!("bad geometry {h}x{w}x{t}"),
        });
    }
    let frame = cur.take(h * w * 3, "I-frame")?;
    let i_frame = patchify(frame, h, w)?;
    let n = i_frame.len();
    let mut p_frames = Vec::with_capacity(t - 1);
    for _ in 1..t {
        let mb = cur.take(2 * n, "motion section")?;
        let motion: Vec<usize> = mb
            .chunks_exact(2)
            .map(|b| usize::from(u16::from_le_bytes([b[0], b[1]])))
            .collect();
        let rb = cur.take(2 * n * PATCH_LEN, "residual section")?;
        let residual = rb.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
        p_frames.push(PFrame { motion, residual });
    }
    if cur.pos != buf.len() {
        return Err(Error::Parse {
            what: WHAT,
            offset: cur.pos as u64,
            msg: format!("{} unexpected trailing bytes", buf.len() - cur.pos),
        });
    }
    let g = GopClip {
        height: h,
        width: w,
        i_frame,
        p_frames,
    };
    g.validate()?;
    Ok(g)
}

pub fn write_gop(g: &GopClip, path: &Path) -> Result<()> {
    g.validate()?;
    std::fs::write(path, gop_to_bytes(g)).map_err(|e| Error::io(path, e))
}

pub fn read_gop(path: &Path) -> Result<GopClip> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    gop_from_bytes(&buf)
}

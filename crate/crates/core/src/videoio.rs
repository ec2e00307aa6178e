//! Raw clip container, synthetic person clips, and restricted random sampling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sparsepatch_numcore::{seeded_rng, SplitSeed};

use crate::error::{Error, Result};

pub const PATCH: usize = 16;
pub const RV_MAGIC: &[u8; 6] = b"RVID1\0";
const MASK_TAG: &[u8; 4] = b"MASK";
const IDENT_TAG: &[u8; 4] = b"IDNT";

/// Decoded RGB clip, `T × H × W × 3`, frame-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawClip {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub pixels: Vec<u8>,
    pub identity: Option<u32>,
    /// `T × grid_h × grid_w` patch-level person indicator (0/1).
    pub person_masks: Option<Vec<u8>>,
}

impl RawClip {
    pub fn new(height: usize, width: usize, frames: usize, pixels: Vec<u8>) -> Result<Self> {
        let clip = RawClip {
            height,
            width,
            frames,
            pixels,
            identity: None,
            person_masks: None,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(PATCH)
            || !self.width.is_multiple_of(PATCH)
        {
            return Err(Error::validation(
                "clip",
                format!("{}x{} is not a positive multiple of {PATCH}", self.height, self.width),
            ));
        }
        if self.frames == 0 {
            return Err(Error::validation("clip", "frame count is zero"));
        }
        if self.pixels.len() != self.frames * self.frame_len() {
            return Err(Error::validation(
                "clip",
                format!(
                    "pixel buffer {} != {}",
                    self.pixels.len(),
                    self.frames * self.frame_len()
                ),
            ));
        }
        if let Some(m) = &self.person_masks {
            if m.len() != self.frames * self.patches_per_frame() || m.iter().any(|&v| v > 1) {
                return Err(Error::validation("clip", "person mask size or values"));
            }
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / PATCH
    }

    pub fn grid_w(&self) -> usize {
        self.width / PATCH
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn frame_mask(&self, t: usize) -> Option<&[u8]> {
        let n = self.patches_per_frame();
        self.person_masks.as_ref().map(|m| &m[t * n..(t + 1) * n])
    }

    /// Clip made of the listed frames, in the given order.
    pub fn select_frames(&self, idx: &[usize]) -> Result<RawClip> {
        if idx.is_empty() || idx.iter().any(|&t| t >= self.frames) {
            return Err(Error::validation(
                "frame selection",
                format!("{idx:?} of {}", self.frames),
            ));
        }
        let mut pixels = Vec::with_capacity(idx.len() * self.frame_len());
        let mut masks = self.person_masks.as_ref().map(|_| Vec::new());
        for &t in idx {
            pixels.extend_from_slice(self.frame(t));
            if let (Some(dst), Some(src)) = (masks.as_mut(), self.frame_mask(t)) {
                dst.extend_from_slice(src);
            }
        }
        Ok(RawClip {
            height: self.height,
            width: self.width,
            frames: idx.len(),
            pixels,
            identity: self.identity,
            person_masks: masks,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.pixels.len());
        out.extend_from_slice(RV_MAGIC);
        for v in [self.height, self.width, self.frames] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        if let Some(m) = &self.person_masks {
            out.extend_from_slice(MASK_TAG);
            out.extend_from_slice(m);
        }
        if let Some(id) = self.identity {
            out.extend_from_slice(IDENT_TAG);
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        const WHAT: &str = "rv1";
        if buf.len() < RV_MAGIC.len() || &buf[..6] != RV_MAGIC {
            return Err(Error::Parse {
                what: WHAT,
                offset: 0,
                msg: "bad magic".into(),
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
        if h == 0 || w == 0 || !h.is_multiple_of(PATCH) || !w.is_multiple_of(PATCH) {
            return Err(Error::Parse {
                what: WHAT,
                offset: 6,
                msg: format!("dimensions {h}x{w} are not positive multiples of {PATCH}"),
            });
        }
        if t == 0 {
            return Err(Error::Parse {
                what: WHAT,
                offset: 14,
                msg: "frame count is zero".into(),
            });
        }
        let pixels = cur.take(t * h * w * 3, "pixel payload")?.to_vec();
        let mut clip = RawClip {
            height: h,
            width: w,
            frames: t,
            pixels,
            identity: None,
            person_masks: None,
        };
        if cur.peek_tag(MASK_TAG) {
            cur.pos += 4;
            let start = cur.pos;
            let m = cur.take(t * clip.patches_per_frame(), "mask trailer")?.to_vec();
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Parse {
                    what: WHAT,
                    offset: start as u64,
                    msg: "mask values must be 0 or 1".into(),
                });
            }
            clip.person_masks = Some(m);
        }
        if cur.peek_tag(IDENT_TAG) {
            cur.pos += 4;
            clip.identity = Some(cur.u32()?);
        }
        if cur.pos != buf.len() {
            return Err(Error::Parse {
                what: WHAT,
                offset: cur.pos as u64,
                msg: format!("{} unexpected trailing bytes", buf.len() - cur.pos),
            });
        }
        Ok(clip)
    }
}

/// Little-endian reader that reports byte offsets on failure.
pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
    pub what: &'static str,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if avail < n {
            return Err(Error::Truncated {
                what: section,
                expected: n as u64,
                actual: avail as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let at = self.pos;
        let b = self.take(4, "header").map_err(|_| Error::Parse {
            what: self.what,
            offset: at as u64,
            msg: "unexpected end of header".into(),
        })?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn peek_tag(&self, tag: &[u8; 4]) -> bool {
        self.buf.len() >= self.pos + 4 && &self.buf[self.pos..self.pos + 4] == tag
    }
}

pub fn write_rawvid(clip: &RawClip, path: &Path) -> Result<()> {
    clip.validate()?;
    std::fs::write(path, clip.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_rawvid(path: &Path) -> Result<RawClip> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RawClip::from_bytes(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Uniform,
    Textured,
    DistractorPerson,
}

impl FromStr for Background {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Background::Uniform),
            "textured" => Ok(Background::Textured),
            "distractor-person" => Ok(Background::DistractorPerson),
            other => Err(format!("unknown background {other:?}")),
        }
    }
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Background::Uniform => "uniform",
            Background::Textured => "textured",
            Background::DistractorPerson => "distractor-person",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub identity_count: u32,
    pub clips_per_identity: u32,
    pub height: usize,
    pub width: usize,
    pub t_total: usize,
    pub background: Background,
    /// Pixels per frame.
    pub motion_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identity_count: 10,
            clips_per_identity: 8,
            height: 128,
            width: 256,
            t_total: 8,
            background: Background::Textured,
            motion_amplitude: 4.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identity_count < 2 {
            return Err(Error::validation("synth spec", "identity_count must be at least 2"));
        }
        if self.height < 3 * PATCH
            || self.width < 2 * PATCH
            || !self.height.is_multiple_of(PATCH)
            || !self.width.is_multiple_of(PATCH)
        {
            return Err(Error::validation(
                "synth spec",
                format!(
                    "{}x{} must be multiples of {PATCH}, at least 48x32",
                    self.height, self.width
                ),
            ));
        }
        if self.t_total == 0 {
            return Err(Error::validation("synth spec", "t_total must be positive"));
        }
        if !(self.motion_amplitude >= 0.0 && self.motion_amplitude < self.width as f64 / 4.0) {
            return Err(Error::validation("synth spec", "motion amplitude must lie in [0, W/4)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Rgb([f64; 3]);

impl Rgb {
    fn hsv(h: f64, s: f64, v: f64) -> Rgb {
        let h = h.rem_euclid(1.0) * 6.0;
        let c = v * s;
        let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
        let (r, g, b) = match h as u32 {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = v - c;
        Rgb([(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0])
    }
}

/// Appearance fixed by identity alone.
struct Appearance {
    head: Rgb,
    torso: Rgb,
    stripe: Rgb,
    legs: Rgb,
    stripe_period: usize,
}

fn appearance(identity: u32) -> Appearance {
    const GOLDEN: f64 = 0.618_033_988_749_895;
    let h = 0xA55A_u64.split(u64::from(identity));
    let unit = |k: u32| ((h >> (8 * k)) & 0xFF) as f64 / 255.0;
    let hue = (f64::from(identity) * GOLDEN + 0.05 * unit(0)).rem_euclid(1.0);
    Appearance {
        head: Rgb::hsv(0.07, 0.35 + 0.25 * unit(1), 0.85),
        torso: Rgb::hsv(hue, 0.85, 0.9),
        stripe: Rgb::hsv(hue + 0.5, 0.7, 0.35 + 0.4 * unit(2)),
        legs: Rgb::hsv(hue + 0.25 + 0.2 * unit(3), 0.75, 0.55),
        stripe_period: [4, 6, 8][(identity % 3) as usize],
    }
}

/// Person extent in patches for a given grid.
fn person_extent(grid_h: usize, grid_w: usize) -> (usize, usize) {
    let ph = grid_h;
    let pw = (grid_w / 4).max(2).min(grid_w);
    (ph, pw)
}

enum Part {
    Head,
    Torso,
    Legs,
}

/// Part covering the person-local patch cell `(r, c)`, if any.
fn person_part(r: usize, c: usize, ph: usize, pw: usize) -> Option<Part> {
    let legs = (ph / 3).max(1);
    if r == 0 {
        (c >= pw / 4 && c < pw - pw / 4).then_some(Part::Head)
    } else if r >= ph - legs {
        Some(Part::Legs)
    } else {
        Some(Part::Torso)
    }
}

/// Synthetic clip plus its per-pixel person mask (`T × H × W`).
pub fn synth_clip_with_pixel_mask(spec: &SynthSpec, identity: u32, seed: u64) -> Result<(RawClip, Vec<bool>)> {
    spec.validate()?;
    if identity >= spec.identity_count {
        return Err(Error::validation(
            "identity",
            format!("{identity} >= identity_count {}", spec.identity_count),
        ));
    }
    let (h, w, t_total) = (spec.height, spec.width, spec.t_total);
    let (gh, gw) = (h / PATCH, w / PATCH);
    let mut rng = seeded_rng(seed.split(0x5E17));

    // background: base tint plus an optional static texture
    let gray: f64 = rng.random_range(70.0..170.0);
    let tint: [f64; 3] = [
        rng.random_range(-12.0..12.0),
        rng.random_range(-12.0..12.0),
        rng.random_range(-12.0..12.0),
    ];
    let textured = spec.background != Background::Uniform;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(6.0..14.0),
            )
        })
        .collect();
    let mut background = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut v = gray;
            if textured {
                for &(fy, fx, ph, amp) in &waves {
                    v += amp * (fy * y as f64 + fx * x as f64 + ph).sin();
                }
                v += rng.random_range(-6.0..6.0);
            }
            for c in 0..3 {
                background[(y * w + x) * 3 + c] = v + tint[c];
            }
        }
    }

    let (ph, pw) = person_extent(gh, gw);
    if spec.background == Background::DistractorPerson {
        // muted static figure, one patch wide and two tall
        let dy = rng.random_range(0..=gh - 2) * PATCH;
        let dx = rng.random_range(0..gw) * PATCH;
        let shade = [gray + 28.0, gray + 22.0, gray + 18.0];
        for y in dy..dy + 2 * PATCH {
            for x in dx + 3..dx + PATCH - 3 {
                for c in 0..3 {
                    background[(y * w + x) * 3 + c] = shade[c] + tint[c];
                }
            }
        }
    }

    let look = appearance(identity);
    let py0 = rng.random_range(0..=gh - ph);
    let px0 = rng.random_range(0..=gw - pw);
    let dir: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let span = gw - pw;

    let mut pixels = Vec::with_capacity(t_total * h * w * 3);
    let mut pixel_mask = Vec::with_capacity(t_total * h * w);
    let mut masks = Vec::with_capacity(t_total * gh * gw);
    for t in 0..t_total {
        // whole-patch translation with reflection at the borders
        let shift = (dir * spec.motion_amplitude * t as f64 / PATCH as f64).round() as i64;
        let px = if span == 0 {
            0
        } else {
            let period = 2 * span as i64;
            let raw = (px0 as i64 + shift).rem_euclid(period);
            (if raw > span as i64 { period - raw } else { raw }) as usize
        };
        let (jy, jx): (i64, i64) = if spec.motion_amplitude > 0.0 {
            (rng.random_range(-1..=1), rng.random_range(-1..=1))
        } else {
            (0, 0)
        };
        let oy = (py0 * PATCH) as i64 + jy;
        let ox = (px * PATCH) as i64 + jx;
        let mut frame_mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * 3;
                let (ly, lx) = (y as i64 - oy, x as i64 - ox);
                let part = if ly >= 0 && lx >= 0 && ly < (ph * PATCH) as i64 && lx < (pw * PATCH) as i64 {
                    person_part(ly as usize / PATCH, lx as usize / PATCH, ph, pw)
                } else {
                    None
                };
                let rgb = match part {
                    None => [background[base], background[base + 1], background[base + 2]],
                    Some(p) => {
                        frame_mask[y * w + x] = true;
                        match p {
                            Part::Head => look.head.0,
                            Part::Legs => look.legs.0,
                            Part::Torso if (ly as usize / (look.stripe_period / 2)) % 2 == 1 => look.stripe.0,
                            Part::Torso => look.torso.0,
                        }
                    }
                };
                pixels.extend(rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
            }
        }
        for r in 0..gh {
            for c in 0..gw {
                let mut count = 0;
                for y in r * PATCH..(r + 1) * PATCH {
                    for x in c * PATCH..(c + 1) * PATCH {
                        count += usize::from(frame_mask[y * w + x]);
                    }
                }
                masks.push(u8::from(2 * count >= PATCH * PATCH));
            }
        }
        pixel_mask.extend(frame_mask);
    }
    let clip = RawClip {
        height: h,
        width: w,
        frames: t_total,
        pixels,
        identity: Some(identity),
        person_masks: Some(masks),
    };
    Ok((clip, pixel_mask))
}

/// Deterministic clip with a per-identity figure translating over the
/// background; `person_masks` marks patches that are at least half person.
pub fn synth_clip(spec: &SynthSpec, identity: u32, seed: u64) -> Result<RawClip> {
    synth_clip_with_pixel_mask(spec, identity, seed).map(|(c, _)| c)
}

/// Seed of clip `k` of `identity` within a dataset.
pub fn clip_seed(spec: &SynthSpec, identity: u32, k: u32) -> u64 {
    spec.seed.split(u64::from(identity)).split(u64::from(k))
}

/// Every clip of the dataset, identity-major.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<RawClip>> {
    spec.validate()?;
    let mut out = Vec::new();
    for id in 0..spec.identity_count {
        for k in 0..spec.clips_per_identity {
            out.push(synth_clip(spec, id, clip_seed(spec, id, k))?);
        }
    }
    Ok(out)
}

/// Restricted random sampling: one index per equal contiguous chunk, the last
/// chunk absorbing the remainder. Short clips repeat their final frame.
pub fn rrs_sample(t_total: usize, t: usize, seed: u64) -> Result<Vec<usize>> {
    if t_total == 0 {
        return Err(Error::validation("rrs_sample", "T_total must be positive"));
    }
    if t == 0 {
        return Err(Error::validation("rrs_sample", "T must be at least 1"));
    }
    if t_total < t {
        let mut idx: Vec<usize> = (0..t_total).collect();
        idx.resize(t, t_total - 1);
        return Ok(idx);
    }
    let chunk = t_total / t;
    let mut rng = seeded_rng(seed);
    Ok((0..t)
        .map(|i| {
            let lo = i * chunk;
            let hi = if i + 1 == t { t_total } else { lo + chunk };
            rng.random_range(lo..hi)
        })
        .collect())
}

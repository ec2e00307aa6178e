//! Identity losses, the error-constraint ranking loss, Adam, and the
//! two-stage schedule over a synthetic identity set.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sparsepatch_numcore::{seeded_gaussian, seeded_rng, Graph, ParamSet, SplitSeed, Tensor, Var};

use crate::error::{Error, Result};
use crate::gopcodec::{encode_gop, patchify, GopClip};
use crate::nn::linear;
use crate::pipeline::{clip_forward, Model, CLASSIFIER};
use crate::psformer::{evolution, guide, psformer_dense_forward, GateMode};
use crate::selector::SelectOptions;
use crate::videoio::{clip_seed, rrs_sample, synth_clip, RawClip, SynthSpec};

/// Mean of `−log softmax(logits)[label]` over the rows.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::validation(
            "cross entropy",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::validation(
            "cross entropy",
            format!("label {bad} outside [0, {k})"),
        ));
    }
    let lsm = g.log_softmax_rows(logits)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(b, &y)| b * k + y).collect();
    let picked = g.pick(lsm, &idx)?;
    let mean = g.mean_all(picked)?;
    Ok(g.scale(mean, -1.0)?)
}

/// Offset inside the square root so the distance is differentiable at zero.
pub const DIST_EPS: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hardest positive and hardest negative of every anchor, ties to the lowest index.
pub fn hardest_pairs(features: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = sq_dist(features.row_slice(a), features.row_slice(j));
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((n, _))) => out.push((p, n)),
            _ => {
                return Err(Error::validation(
                    "triplet batch",
                    format!("anchor {a} lacks a positive or a negative"),
                ))
            }
        }
    }
    Ok(out)
}

/// Batch-hard triplet loss with Euclidean distances, averaged over anchors.
pub fn hard_triplet(g: &mut Graph, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::validation(
            "triplet features",
            format!("{shape:?} for {} labels", labels.len()),
        ));
    }
    let pairs = hardest_pairs(g.value(features), labels)?;
    for &(p, n) in &pairs {
        g.note_branch(((p as u64) << 32) | n as u64);
    }
    let pos: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let neg: Vec<usize> = pairs.iter().map(|&(_, n)| n).collect();
    let ones = g.constant(Tensor::column(vec![1.0; shape[1]]))?;
    let dist = |g: &mut Graph, idx: &[usize]| -> Result<Var> {
        let other = g.gather_rows(features, idx)?;
        let diff = g.sub(features, other)?;
        let sq = g.square(diff)?;
        let s = g.matmul(sq, ones)?;
        let s = g.add_const(s, DIST_EPS)?;
        Ok(g.sqrt(s)?)
    };
    let dp = dist(g, &pos)?;
    let dn = dist(g, &neg)?;
    let gap = g.sub(dp, dn)?;
    let gap = g.add_const(gap, margin)?;
    let hinge = g.relu(gap)?;
    Ok(g.mean_all(hinge)?)
}

/// Per-layer samples of the error-constraint loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLossSamples {
    /// Noise levels, ascending.
    pub alphas: Vec<f64>,
    /// Cosine distance of each reconstruction to the clean context.
    pub distances: Vec<f64>,
}

pub struct ErrorLoss {
    pub loss: Var,
    /// One entry per consecutive context pair `(l − 1, l)`.
    pub layers: Vec<ErrorLossSamples>,
}

/// `Σ_{i<j} max(0, c_i − c_j)` as a `1 × 1` node over a `1 × S` row.
pub fn ordered_hinge(g: &mut Graph, c: Var) -> Result<Var> {
    let s = g.value(c).len();
    let pairs: Vec<(usize, usize)> = (0..s).flat_map(|i| (i + 1..s).map(move |j| (i, j))).collect();
    let mut d = vec![0.0; s * pairs.len()];
    for (col, &(i, j)) in pairs.iter().enumerate() {
        d[i * pairs.len() + col] = 1.0;
        d[j * pairs.len() + col] = -1.0;
    }
    let d = g.constant(Tensor::from_rows(s, pairs.len(), d)?)?;
    let row = g.reshape(c, &[1, s])?;
    let diffs = g.matmul(row, d)?;
    let h = g.relu(diffs)?;
    Ok(g.sum_all(h)?)
}

/// Error-constraint loss summed over every consecutive pair of `contexts`
/// (`1 × d` values, treated as constants). Each pair draws `samples` noise
/// levels, mixes the clean context with standard-normal noise, reconstructs
/// it through the evolution and guidance MLPs and penalises every
/// out-of-order pair of distances.
pub fn error_constraint_loss(
    g: &mut Graph,
    p: &ParamSet,
    contexts: &[Tensor],
    samples: usize,
    seed: u64,
) -> Result<ErrorLoss> {
    if samples < 2 {
        return Err(Error::validation("error loss", "at least two noise samples required"));
    }
    if contexts.len() < 2 {
        return Err(Error::validation("error loss", "at least two contexts required"));
    }
    let d = contexts[0].len();
    let mut terms = Vec::with_capacity(contexts.len() - 1);
    let mut layers = Vec::with_capacity(contexts.len() - 1);
    for l in 1..contexts.len() {
        let (cur, prev) = (&contexts[l], &contexts[l - 1]);
        if cur.len() != d || prev.len() != d {
            return Err(Error::validation("error loss", "contexts differ in width"));
        }
        let ls = seed.split(l as u64);
        let mut rng = seeded_rng(ls);
        let mut alphas: Vec<f64> = (0..samples).map(|_| rng.random_range(0.0..1.0)).collect();
        alphas.sort_by(f64::total_cmp);
        let mut noisy = Vec::with_capacity(samples * d);
        for (i, &a) in alphas.iter().enumerate() {
            let noise = seeded_gaussian(ls.split(1 + i as u64), &[d]);
            noisy.extend(cur.data().iter().zip(noise.data()).map(|(c, z)| (1.0 - a) * c + a * z));
        }
        let noisy = g.constant(Tensor::from_rows(samples, d, noisy)?)?;
        let prev_rows = g.constant(Tensor::from_rows(samples, d, prev.data().repeat(samples))?)?;
        let clean = g.constant(Tensor::from_rows(1, d, cur.data().to_vec())?)?;
        let e = evolution(g, p, noisy, prev_rows)?;
        let recon = guide(g, p, e, prev_rows)?;
        let mut dists = Vec::with_capacity(samples);
        for i in 0..samples {
            let r = g.slice_rows(recon, i, 1)?;
            dists.push(g.cosine_distance(r, clean)?);
        }
        let c = g.concat_cols(&dists)?;
        let distances = g.value(c).data().to_vec();
        terms.push(ordered_hinge(g, c)?);
        layers.push(ErrorLossSamples { alphas, distances });
    }
    let all = g.concat_cols(&terms)?;
    Ok(ErrorLoss {
        loss: g.sum_all(all)?,
        layers,
    })
}

/// Spearman rank correlation, average ranks for ties; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Adam with decoupled weight decay; only parameters given a gradient move.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, grad) in grads {
            let value = params.get(name)?;
            if value.len() != grad.len() {
                return Err(Error::validation("optimizer", format!("gradient shape of {name}")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut next = value.clone();
            for (i, w) in next.data_mut().iter_mut().enumerate() {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
            if !next.is_finite() {
                return Err(sparsepatch_numcore::Error::NonFinite { op: "adam" }.into());
            }
            params.set(name, next)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub margin: f64,
    /// Noise levels per layer in the error-constraint loss.
    pub noise_samples: usize,
    pub error_weight: f64,
    /// Identities per batch.
    pub batch_ids: usize,
    /// Clips per identity per batch.
    pub batch_clips: usize,
    /// Clips per identity kept out of training for evaluation.
    pub heldout_per_id: usize,
    /// Frames sampled per clip.
    pub frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 20,
            stage2_epochs: 20,
            lr: 5e-4,
            lr_decay_every: 30,
            lr_decay: 0.1,
            weight_decay: 5e-4,
            margin: 0.3,
            noise_samples: 4,
            error_weight: 1.0,
            batch_ids: 5,
            batch_clips: 2,
            heldout_per_id: 2,
            frames: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.lr_decay_every == 0 {
            0
        } else {
            epoch / self.lr_decay_every
        };
        self.lr * self.lr_decay.powi(steps as i32)
    }

    pub fn validate(&self, data: &SynthSpec) -> Result<()> {
        let bad = |m: String| Err(Error::validation("train config", m));
        if self.total_epochs() == 0 {
            return bad("at least one epoch required".into());
        }
        if self.noise_samples < 2 {
            return bad("noise_samples must be at least 2".into());
        }
        if self.batch_ids < 2 || self.batch_clips < 2 {
            return bad("batches need at least 2 identities with 2 clips each".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) || self.weight_decay < 0.0 {
            return bad("lr, lr_decay must be positive and weight_decay nonnegative".into());
        }
        if self.frames == 0 || self.margin < 0.0 || self.error_weight < 0.0 {
            return bad("frames must be positive; margin and error_weight nonnegative".into());
        }
        let train_per_id = (data.clips_per_identity as usize).saturating_sub(self.heldout_per_id);
        if (data.identity_count as usize) < self.batch_ids || train_per_id < self.batch_clips {
            return bad(format!(
                "dataset of {} identities with {train_per_id} training clips each is smaller than a batch of {}x{}",
                data.identity_count, self.batch_ids, self.batch_clips
            ));
        }
        if self.heldout_per_id == 1 {
            return bad("held-out rank-1 needs 0 or at least 2 held-out clips per identity".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dense,
    Sparse,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Dense => 1,
            Stage::Sparse => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub loss_cent: f64,
    pub loss_tri: f64,
    pub loss_error: f64,
    pub train_rank1: f64,
    pub heldout_rank1: f64,
}

/// Writes the convergence log as CSV.
pub fn write_log_csv<W: Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)
            .map_err(|e| Error::validation("convergence log", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("convergence log", e))?;
    Ok(())
}

pub fn save_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log_csv(log, f)
}

/// Leave-one-out nearest-neighbour accuracy, ties to the lowest index.
pub fn rank1(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    if features.len() < 2 {
        return 0.0;
    }
    let hits = (0..features.len())
        .filter(|&q| {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..features.len() {
                if j == q {
                    continue;
                }
                let d = sq_dist(&features[q], &features[j]);
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((j, d));
                }
            }
            best.is_some_and(|(j, _)| labels[j] == labels[q])
        })
        .count();
    hits as f64 / features.len() as f64
}

/// One clip of the dataset with its identity label.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip: RawClip,
    pub label: usize,
}

/// Identity-major split: the last `heldout_per_id` clips of every identity are held out.
pub fn split_dataset(data: &SynthSpec, heldout_per_id: usize) -> Result<(Vec<LabeledClip>, Vec<LabeledClip>)> {
    data.validate()?;
    let mut train = Vec::new();
    let mut held = Vec::new();
    let keep = (data.clips_per_identity as usize).saturating_sub(heldout_per_id);
    for id in 0..data.identity_count {
        for k in 0..data.clips_per_identity {
            let clip = synth_clip(data, id, clip_seed(data, id, k))?;
            let item = LabeledClip {
                clip,
                label: id as usize,
            };
            if (k as usize) < keep {
                train.push(item);
            } else {
                held.push(item);
            }
        }
    }
    Ok((train, held))
}

/// `frames` frames of `clip` by restricted random sampling, then encoded.
pub fn sample_clip(clip: &RawClip, frames: usize, seed: u64) -> Result<(RawClip, GopClip)> {
    let idx = rrs_sample(clip.frames, frames, seed)?;
    let c = clip.select_frames(&idx)?;
    let gop = encode_gop(&c)?;
    Ok((c, gop))
}

/// Inference features of `clips` under the sparse pipeline at the model's threshold.
pub fn sparse_features(model: &Model, clips: &[LabeledClip], frames: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (clip, gop) = sample_clip(&c.clip, frames, seed.split(i as u64))?;
            let mut g = Graph::new();
            let f = clip_forward(
                &mut g,
                model,
                &clip,
                &gop,
                &SelectOptions::infer(),
                &GateMode::Threshold,
            )?;
            Ok(g.value(f.output.feature).data().to_vec())
        })
        .collect()
}

/// Seed label of the fixed frame sampling used for evaluation.
const EVAL_STREAM: u64 = 0xE7A1;

/// Held-out rank-1 of `model` over `held` with the evaluation frame sampling.
pub fn heldout_rank1(model: &Model, held: &[LabeledClip], frames: usize, seed: u64) -> Result<f64> {
    let feats = sparse_features(model, held, frames, seed.split(EVAL_STREAM))?;
    let labels: Vec<usize> = held.iter().map(|c| c.label).collect();
    Ok(rank1(&feats, &labels))
}

/// One threshold of a routing sweep over held-out clips.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub s: f64,
    /// Opened gates over every (clip, layer, P-frame).
    pub open_rate: f64,
    /// Mean counted GMACs per clip.
    pub gmacs: f64,
    pub heldout_rank1: f64,
}

/// Inference over `held` at each routing threshold in `thresholds`, with the
/// evaluation frame sampling.
pub fn sweep_threshold(
    model: &Model,
    held: &[LabeledClip],
    frames: usize,
    seed: u64,
    thresholds: &[f64],
) -> Result<Vec<SweepRow>> {
    if held.is_empty() {
        return Err(Error::validation("threshold sweep", "no held-out clips"));
    }
    let es = seed.split(EVAL_STREAM);
    let sampled = held
        .iter()
        .enumerate()
        .map(|(i, c)| sample_clip(&c.clip, frames, es.split(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = held.iter().map(|c| c.label).collect();
    let mut rows = Vec::with_capacity(thresholds.len());
    for &s in thresholds {
        let mut m = model.clone();
        m.psformer.threshold = s;
        let (mut opened, mut gates, mut macs) = (0usize, 0usize, 0u64);
        let mut feats = Vec::with_capacity(held.len());
        for (clip, gop) in &sampled {
            let mut g = Graph::new();
            let f = clip_forward(&mut g, &m, clip, gop, &SelectOptions::infer(), &GateMode::Threshold)?;
            opened += f.output.routing.open_count();
            gates += f.output.routing.entries.len();
            macs += g.macs().total();
            feats.push(g.value(f.output.feature).data().to_vec());
        }
        rows.push(SweepRow {
            s,
            open_rate: if gates == 0 { 0.0 } else { opened as f64 / gates as f64 },
            gmacs: macs as f64 / 1e9 / held.len() as f64,
            heldout_rank1: rank1(&feats, &labels),
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::validation("sweep table", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("sweep table", e))?;
    Ok(())
}

fn epoch_batches(train: &[LabeledClip], cfg: &TrainConfig, ids: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seeded_rng(seed);
    let mut per_id: Vec<Vec<usize>> = vec![Vec::new(); ids];
    for (i, c) in train.iter().enumerate() {
        per_id[c.label].push(i);
    }
    for v in per_id.iter_mut() {
        v.shuffle(&mut rng);
    }
    let rounds = per_id.iter().map(Vec::len).min().unwrap_or(0) / cfg.batch_clips;
    let mut batches = Vec::new();
    for r in 0..rounds {
        let mut order: Vec<usize> = (0..ids).collect();
        order.shuffle(&mut rng);
        for group in order.chunks_exact(cfg.batch_ids) {
            batches.push(
                group
                    .iter()
                    .flat_map(|&id| {
                        per_id[id][r * cfg.batch_clips..(r + 1) * cfg.batch_clips]
                            .iter()
                            .copied()
                    })
                    .collect(),
            );
        }
    }
    batches
}

struct BatchOutcome {
    loss_cent: f64,
    loss_tri: f64,
    loss_error: f64,
    features: Vec<Vec<f64>>,
}

fn train_batch(
    model: &mut Model,
    opt: &mut Adam,
    cfg: &TrainConfig,
    stage: Stage,
    items: &[(&LabeledClip, RawClip, GopClip)],
    seed: u64,
) -> Result<BatchOutcome> {
    let mut g = Graph::new();
    let mut feats = Vec::with_capacity(items.len());
    let mut contexts = Vec::new();
    for (i, (_, clip, gop)) in items.iter().enumerate() {
        match stage {
            Stage::Dense => {
                let frames = (0..clip.frames)
                    .map(|t| patchify(clip.frame(t), clip.height, clip.width))
                    .collect::<Result<Vec<_>>>()?;
                let out = psformer_dense_forward(&mut g, &model.params, &model.psformer, &frames)?;
                feats.push(out.feature);
            }
            Stage::Sparse => {
                let fwd = clip_forward(
                    &mut g,
                    model,
                    clip,
                    gop,
                    &SelectOptions::train(seed.split(i as u64)),
                    &GateMode::Threshold,
                )?;
                feats.push(fwd.output.feature);
                contexts.push(
                    fwd.output
                        .contexts
                        .iter()
                        .map(|&c| g.value(c).clone())
                        .collect::<Vec<_>>(),
                );
            }
        }
    }
    let labels: Vec<usize> = items.iter().map(|(c, _, _)| c.label).collect();
    let f = g.concat_rows(&feats)?;
    let logits = linear(&mut g, &model.params, CLASSIFIER, f)?;
    let ce = cross_entropy(&mut g, logits, &labels)?;
    let tri = hard_triplet(&mut g, f, &labels, cfg.margin)?;
    let mut total = g.add(ce, tri)?;
    let mut loss_error = 0.0;
    if !contexts.is_empty() && cfg.error_weight > 0.0 {
        let mut terms = Vec::with_capacity(contexts.len());
        for (i, ctx) in contexts.iter().enumerate() {
            let el = error_constraint_loss(
                &mut g,
                &model.params,
                ctx,
                cfg.noise_samples,
                seed.split(0xE000 + i as u64),
            )?;
            terms.push(el.loss);
        }
        let stacked = g.concat_cols(&terms)?;
        let mean = g.mean_all(stacked)?;
        loss_error = g.value(mean).item();
        let weighted = g.scale(mean, cfg.error_weight)?;
        total = g.add(total, weighted)?;
    }
    let outcome = BatchOutcome {
        loss_cent: g.value(ce).item(),
        loss_tri: g.value(tri).item(),
        loss_error,
        features: (0..items.len()).map(|i| g.value(f).row_slice(i).to_vec()).collect(),
    };
    g.backward(total)?;
    opt.step(&mut model.params, &g.param_grads())?;
    Ok(outcome)
}

/// Stage of every epoch: `stage1_epochs` dense epochs, then sparse ones.
pub fn schedule(cfg: &TrainConfig) -> Vec<Stage> {
    (0..cfg.total_epochs())
        .map(|e| {
            if e < cfg.stage1_epochs {
                Stage::Dense
            } else {
                Stage::Sparse
            }
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Trains `model` on the synthetic set; `on_epoch` sees each log row and the
/// model after that epoch.
pub fn two_stage_train(
    mut model: Model,
    data: &SynthSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate(data)?;
    if model.classes != data.identity_count as usize {
        return Err(Error::validation(
            "train model",
            format!("{} classes for {} identities", model.classes, data.identity_count),
        ));
    }
    if cfg.frames > model.psformer.max_frames {
        return Err(Error::validation(
            "train config",
            "frames exceed the model's max_frames",
        ));
    }
    let (train, held) = split_dataset(data, cfg.heldout_per_id)?;
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.total_epochs());
    for (epoch, stage) in schedule(cfg).into_iter().enumerate() {
        opt.lr = cfg.lr_at(epoch);
        let es = cfg.seed.split(0x7000 + epoch as u64);
        let batches = epoch_batches(&train, cfg, data.identity_count as usize, es.split(0));
        let (mut ce, mut tri, mut err) = (0.0, 0.0, 0.0);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (b, batch) in batches.iter().enumerate() {
            let bs = es.split(1 + b as u64);
            let items = batch
                .iter()
                .map(|&i| {
                    let (c, gop) = sample_clip(&train[i].clip, cfg.frames, bs.split(i as u64))?;
                    Ok((&train[i], c, gop))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = train_batch(&mut model, &mut opt, cfg, stage, &items, bs.split(0xB))?;
            ce += out.loss_cent;
            tri += out.loss_tri;
            err += out.loss_error;
            feats.extend(out.features);
            labels.extend(items.iter().map(|(c, _, _)| c.label));
        }
        let nb = batches.len().max(1) as f64;
        let row = EpochLog {
            epoch,
            stage: stage.number(),
            loss_cent: ce / nb,
            loss_tri: tri / nb,
            loss_error: err / nb,
            train_rank1: rank1(&feats, &labels),
            heldout_rank1: if held.is_empty() {
                0.0
            } else {
                heldout_rank1(&model, &held, cfg.frames, cfg.seed)?
            },
        };
        on_epoch(&row, &model)?;
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

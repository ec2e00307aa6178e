//! Prominent-object indicator from the normalized graph Laplacian of a patch
//! feature map.

use serde::Serialize;
use sparsepatch_numcore::{sym_eig, Tensor};

use crate::error::{Error, Result};

/// Relative cutoff below which an eigenvalue counts as zero.
pub const ZERO_EIG_RTOL: f64 = 1e-8;
/// Added to every degree, relative to the largest degree.
const DEGREE_REG: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyVector {
    pub y1: Vec<f64>,
    pub lambda1: f64,
    pub orientation_flipped: bool,
}

impl SaliencyVector {
    /// Patches with strictly positive entries.
    pub fn foreground(&self) -> Vec<bool> {
        self.y1.iter().map(|&v| v > 0.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralOptions {
    pub clamp_negative: bool,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions { clamp_negative: true }
    }
}

/// `A = F·Fᵀ`, negative entries set to zero when `clamp` is on.
pub fn affinity(f: &Tensor, clamp: bool) -> Result<Tensor> {
    let n = f.rows();
    if f.shape().len() != 2 || n < 2 {
        return Err(Error::validation(
            "affinity",
            format!("need at least 2 rows, got {:?}", f.shape()),
        ));
    }
    let a = f.matmul(&f.transpose())?;
    Ok(if clamp { a.map(|v| v.max(0.0)) } else { a })
}

/// `L = D^{-1/2} (D − A) D^{-1/2}` with a tiny relative degree floor.
pub fn normalized_laplacian(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(Error::validation("laplacian", format!("not square: {:?}", a.shape())));
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row_slice(i).iter().sum()).collect();
    let max_deg = deg.iter().fold(0.0f64, |m, &d| m.max(d));
    if !(max_deg > 0.0) {
        return Err(Error::Degenerate("graph: every degree is zero"));
    }
    let reg = DEGREE_REG * max_deg;
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| {
            let d = d + reg;
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::Degenerate("graph: zero-degree row"))
            }
        })
        .collect::<Result<_>>()?;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dij = if i == j { deg[i] + reg } else { 0.0 };
            l[i * n + j] = inv_sqrt[i] * (dij - a.get2(i, j)) * inv_sqrt[j];
        }
    }
    // exact symmetry; the two products above can differ in the last bit
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (l[i * n + j] + l[j * n + i]);
            l[i * n + j] = m;
            l[j * n + i] = m;
        }
    }
    Ok(Tensor::from_rows(n, n, l)?)
}

/// Eigenvector of the smallest eigenvalue above `1e-8 · λ_max`, oriented so
/// that strictly positive entries are the minority (first nonzero entry
/// positive on a tie).
pub fn prominent_eigvec(f: &Tensor, opts: SpectralOptions) -> Result<SaliencyVector> {
    let a = affinity(f, opts.clamp_negative)?;
    let l = normalized_laplacian(&a)?;
    let eig = sym_eig(&l)?;
    let lmax = eig.values.last().copied().unwrap_or(0.0);
    let tol = ZERO_EIG_RTOL * lmax.abs();
    let k = eig
        .values
        .iter()
        .position(|&v| v > tol)
        .ok_or(Error::Degenerate("features: no eigenvalue above tolerance"))?;
    // a flat spectrum above the cutoff leaves y1 arbitrary within its eigenspace
    if lmax - eig.values[k] <= tol && k + 1 < eig.values.len() {
        return Err(Error::Degenerate(
            "features: flat spectrum, no unique prominent eigenvector",
        ));
    }
    let mut y1 = eig.vector(k);
    let pos = y1.iter().filter(|&&v| v > 0.0).count();
    let neg = y1.iter().filter(|&&v| v < 0.0).count();
    let flip = match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => y1.iter().find(|&&v| v != 0.0).is_some_and(|&v| v < 0.0),
    };
    if flip {
        y1.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(SaliencyVector {
        y1,
        lambda1: eig.values[k],
        orientation_flipped: flip,
    })
}

/// Subtracts the mean row. Post-ReLU features are nonnegative, so without
/// this every affinity is positive and the clamp never acts.
pub fn center_rows(f: &Tensor) -> Tensor {
    let (n, c) = (f.rows(), f.cols());
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(f.row_slice(i)) {
            *m += v / n as f64;
        }
    }
    let data = (0..n)
        .flat_map(|i| f.row_slice(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    Tensor::from_rows(n, c, data).expect("same shape")
}

/// Intersection over union of two boolean masks; two empty masks give 1.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

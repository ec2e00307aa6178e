//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_RTOL: f64 = 1e-9;
const OFF_DIAG_RTOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with matching unit eigenvectors stored
/// column-wise in `vectors` (`n × n`).
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Tensor,
    pub sweeps: usize,
}

impl SymEig {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.values.len();
        (0..n).map(|i| self.vectors.get2(i, k)).collect()
    }
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn off_diagonal(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Eigendecomposition of a real symmetric matrix.
///
/// Rejects input whose asymmetry exceeds `1e-9` relative to its largest entry.
/// Sweeps stop once the off-diagonal Frobenius norm drops below
/// `1e-12 · ‖S‖_F`.
pub fn sym_eig(s: &Tensor) -> Result<SymEig> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "sym_eig",
            lhs: shape.to_vec(),
            rhs: vec![shape[0], shape[0]],
        });
    }
    let n = shape[0];
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "sym_eig" });
    }
    let src = s.data();
    let scale = src.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((src[i * n + j] - src[j * n + i]).abs());
        }
    }
    if max_asym > SYMMETRY_RTOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Asymmetric { max_asym });
    }

    // symmetrise exactly so rotations preserve symmetry bit-for-bit
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (src[i * n + j] + src[j * n + i]);
        }
    }
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }

    let tol = OFF_DIAG_RTOL * frobenius(&a);
    let mut sweeps = 0;
    loop {
        let off = off_diagonal(&a, n);
        if off <= tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                // an entry below the rounding of both diagonals is already converged
                let g = 100.0 * apq.abs();
                if sweeps > 4
                    && a[p * n + p].abs() + g == a[p * n + p].abs()
                    && a[q * n + q].abs() + g == a[q * n + q].abs()
                {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // A ← Pᵀ·A·P touches rows and columns p, q; update the rows
                // and mirror them so A stays exactly symmetric
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[p * n + k];
                    let akq = a[q * n + k];
                    let np = c * akp - sn * akq;
                    let nq = sn * akp + c * akq;
                    a[p * n + k] = np;
                    a[q * n + k] = nq;
                    a[k * n + p] = np;
                    a[k * n + q] = nq;
                }
                a[p * n + p] -= t * apq;
                a[q * n + q] += t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                // rows of `vt` are the eigenvector estimates
                let (lo, hi) = vt.split_at_mut(q * n);
                for (vp, vq) in lo[p * n..(p + 1) * n].iter_mut().zip(&mut hi[..n]) {
                    let (x, y) = (*vp, *vq);
                    *vp = c * x - sn * y;
                    *vq = sn * x + c * y;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src_col) in order.iter().enumerate() {
        let norm = (0..n).map(|k| vt[src_col * n + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..n {
            vectors[k * n + dst] = vt[src_col * n + k] / norm;
        }
    }
    Ok(SymEig {
        values,
        vectors: Tensor::from_rows(n, n, vectors)?,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_gaussian;

    fn residual(s: &Tensor, e: &SymEig) -> f64 {
        let n = e.values.len();
        let sv = s.matmul(&e.vectors).unwrap();
        let mut worst = 0.0f64;
        for i in 0..n {
            for k in 0..n {
                let r = sv.get2(i, k) - e.vectors.get2(i, k) * e.values[k];
                worst += r * r;
            }
        }
        worst.sqrt()
    }

    #[test]
    fn diagonal_matrix() {
        let s = Tensor::from_nested(&[&[3.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 2.0]]);
        let e = sym_eig(&s).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.vector(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(e.vector(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.vector(2), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_by_two_laplacian() {
        let s = Tensor::from_nested(&[&[0.5, -0.5], &[-0.5, 0.5]]);
        let e = sym_eig(&s).unwrap();
        assert!(e.values[0].abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = 0.5f64.sqrt();
        let y0 = e.vector(0);
        let y1 = e.vector(1);
        assert!((y0[0].abs() - h).abs() < 1e-14 && (y0[0] - y0[1]).abs() < 1e-14);
        assert!((y1[0].abs() - h).abs() < 1e-14 && (y1[0] + y1[1]).abs() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let s = Tensor::from_nested(&[&[0.0, 1.0], &[2.0, 0.0]]);
        assert!(matches!(sym_eig(&s), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn random_16x16_reconstruction() {
        for seed in 0..5 {
            let g = seeded_gaussian(seed, &[16, 16]);
            let s = Tensor::from_rows(
                16,
                16,
                (0..256)
                    .map(|k| {
                        let (i, j) = (k / 16, k % 16);
                        g.get2(i, j) + g.get2(j, i)
                    })
                    .collect(),
            )
            .unwrap();
            let e = sym_eig(&s).unwrap();
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            let r = residual(&s, &e);
            assert!(r <= 1e-8 * s.norm(), "residual {r}");
            for k in 0..16 {
                let nrm: f64 = e.vector(k).iter().map(|x| x * x).sum();
                assert!((nrm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_matrix_is_already_diagonal() {
        let e = sym_eig(&Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(e.sweeps, 0);
        assert!(e.values.iter().all(|&v| v == 0.0));
    }
}

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use sparsepatch_numcore::{seeded_gaussian, sym_eig, Tensor};

fn symmetric(seed: u64, n: usize) -> Tensor {
    let g = seeded_gaussian(seed, &[n, n]);
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            g.get2(i, j) + g.get2(j, i)
        })
        .collect();
    Tensor::from_rows(n, n, data).unwrap()
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, p in 1usize..6, n in 1usize..6) {
        let a = seeded_gaussian(seed, &[m, k]);
        let b = seeded_gaussian(seed ^ 1, &[k, p]);
        let c = seeded_gaussian(seed ^ 2, &[p, n]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.norm().max(1e-300);
        prop_assert!(left.max_abs_diff(&right) <= 1e-10 * scale);
    }

    #[test]
    fn sums_are_bit_reproducible(seed in any::<u64>(), n in 1usize..2000) {
        let t = seeded_gaussian(seed, &[n]);
        let again = seeded_gaussian(seed, &[n]);
        prop_assert_eq!(t.sum().to_bits(), again.sum().to_bits());
    }

    #[test]
    fn eig_reconstructs(seed in any::<u64>(), n in 2usize..12) {
        let s = symmetric(seed, n);
        let e = sym_eig(&s).unwrap();
        let sv = s.matmul(&e.vectors).unwrap();
        let mut r = 0.0;
        for i in 0..n {
            for k in 0..n {
                r += (sv.get2(i, k) - e.vectors.get2(i, k) * e.values[k]).powi(2);
            }
        }
        prop_assert!(r.sqrt() <= 1e-8 * s.norm());
    }
}

#[test]
fn eigenvalues_agree_with_nalgebra() {
    for seed in 0..10 {
        let s = symmetric(100 + seed, 16);
        let ours = sym_eig(&s).unwrap();
        let m = DMatrix::from_row_slice(16, 16, s.data());
        let mut theirs: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (a, b) in ours.values.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-9 * s.norm(), "{a} vs {b}");
        }
    }
}

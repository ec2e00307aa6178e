use sparsepatch_numcore::{grad_check, grad_check_pair, seeded_gaussian, Graph, Result, Tensor, Var};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let r = grad_check(f, x, EPS).unwrap();
    assert!(r.passes(TOL), "{name}: {r:?}");
}

/// Weighted sum so every output coordinate carries a distinct cotangent.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = seeded_gaussian(seed, g.shape(y));
    let wv = g.constant(w)?;
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

#[test]
fn matmul_both_sides() {
    let a = seeded_gaussian(1, &[3, 4]);
    let b = seeded_gaussian(2, &[4, 2]);
    let bb = b.clone();
    check("matmul lhs", &a, move |g, x| {
        let b = g.constant(bb.clone())?;
        let y = g.matmul(x, b)?;
        weighted(g, y, 9)
    });
    check("matmul rhs", &b, move |g, x| {
        let a = g.constant(a.clone())?;
        let y = g.matmul(a, x)?;
        weighted(g, y, 9)
    });
}

#[test]
fn matmul_nt_and_transpose() {
    let a = seeded_gaussian(3, &[3, 4]);
    let b = seeded_gaussian(4, &[5, 4]);
    let bb = b.clone();
    check("matmul_nt lhs", &a, move |g, x| {
        let b = g.constant(bb.clone())?;
        let y = g.matmul_nt(x, b)?;
        weighted(g, y, 10)
    });
    let aa = a.clone();
    check("matmul_nt rhs", &b, move |g, x| {
        let a = g.constant(aa.clone())?;
        let y = g.matmul_nt(a, x)?;
        weighted(g, y, 10)
    });
    check("transpose", &a, |g, x| {
        let y = g.transpose(x)?;
        weighted(g, y, 11)
    });
}

#[test]
fn elementwise_binary() {
    let a = seeded_gaussian(5, &[2, 3]);
    let b = seeded_gaussian(6, &[2, 3]);
    for (name, k) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let b = b.clone();
        check(name, &a, move |g, x| {
            let c = g.input(b.clone())?;
            let y = match k {
                0 => g.add(x, c)?,
                1 => g.sub(c, x)?,
                _ => g.mul(x, c)?,
            };
            weighted(g, y, 12)
        });
    }
}

#[test]
fn broadcasts_and_scales() {
    let x = seeded_gaussian(7, &[3, 4]);
    let row = seeded_gaussian(8, &[1, 4]);
    let col = seeded_gaussian(9, &[3, 1]);
    let xx = x.clone();
    check("add_row row", &row, move |g, r| {
        let x = g.constant(xx.clone())?;
        let y = g.add_row(x, r)?;
        weighted(g, y, 13)
    });
    let xx = x.clone();
    check("scale_rows factors", &col, move |g, s| {
        let x = g.constant(xx.clone())?;
        let y = g.scale_rows(x, s)?;
        weighted(g, y, 14)
    });
    check("scale_rows input", &x, move |g, x| {
        let s = g.constant(col.clone())?;
        let y = g.scale_rows(x, s)?;
        weighted(g, y, 14)
    });
    check("scale/add_const", &x, |g, x| {
        let y = g.scale(x, -1.7)?;
        let y = g.add_const(y, 0.3)?;
        weighted(g, y, 15)
    });
}

#[test]
fn activations() {
    let x = seeded_gaussian(10, &[4, 5]);
    check("relu", &x, |g, x| {
        let y = g.relu(x)?;
        weighted(g, y, 16)
    });
    check("gelu", &x, |g, x| {
        let y = g.gelu(x)?;
        weighted(g, y, 17)
    });
    check("sigmoid", &x, |g, x| {
        let y = g.sigmoid(x)?;
        weighted(g, y, 18)
    });
    check("square", &x, |g, x| {
        let y = g.square(x)?;
        weighted(g, y, 19)
    });
    let pos = x.map(|v| v.abs() + 0.5);
    check("sqrt", &pos, |g, x| {
        let y = g.sqrt(x)?;
        weighted(g, y, 20)
    });
    check("sat_gate", &x, |g, x| {
        let y = g.sat_gate(x)?;
        weighted(g, y, 21)
    });
}

#[test]
fn normalisations() {
    let x = seeded_gaussian(11, &[3, 6]);
    check("softmax_rows", &x, |g, x| {
        let y = g.softmax_rows(x)?;
        weighted(g, y, 22)
    });
    check("log_softmax_rows", &x, |g, x| {
        let y = g.log_softmax_rows(x)?;
        weighted(g, y, 23)
    });
    let gamma = seeded_gaussian(12, &[1, 6]);
    let beta = seeded_gaussian(13, &[1, 6]);
    let (gm, bt) = (gamma.clone(), beta.clone());
    check("layer_norm x", &x, move |g, x| {
        let a = g.constant(gm.clone())?;
        let b = g.constant(bt.clone())?;
        let y = g.layer_norm(x, a, b, 1e-5)?;
        weighted(g, y, 24)
    });
    let xx = x.clone();
    let bt = beta.clone();
    check("layer_norm gamma", &gamma, move |g, gm| {
        let x = g.constant(xx.clone())?;
        let b = g.constant(bt.clone())?;
        let y = g.layer_norm(x, gm, b, 1e-5)?;
        weighted(g, y, 24)
    });
    check("layer_norm beta", &beta, move |g, bt| {
        let x = g.constant(x.clone())?;
        let a = g.constant(gamma.clone())?;
        let y = g.layer_norm(x, a, bt, 1e-5)?;
        weighted(g, y, 24)
    });
}

#[test]
fn structural_ops() {
    let x = seeded_gaussian(14, &[5, 4]);
    check("slice_cols", &x, |g, x| {
        let y = g.slice_cols(x, 1, 2)?;
        weighted(g, y, 25)
    });
    check("concat_cols", &x, |g, x| {
        let a = g.slice_cols(x, 0, 1)?;
        let y = g.concat_cols(&[x, a, x])?;
        weighted(g, y, 26)
    });
    check("concat_rows", &x, |g, x| {
        let y = g.concat_rows(&[x, x])?;
        weighted(g, y, 27)
    });
    check("gather_rows", &x, |g, x| {
        let y = g.gather_rows(x, &[4, 0, 4, 2])?;
        weighted(g, y, 28)
    });
    check("pool_rows", &x, |g, x| {
        let y = g.pool_rows(x, vec![vec![0, 1], vec![2, 3, 4], vec![1]])?;
        weighted(g, y, 29)
    });
    check("mean_rows/mean_all", &x, |g, x| {
        let m = g.mean_rows(x)?;
        let s = g.square(m)?;
        g.mean_all(s)
    });
    check("pick", &x, |g, x| {
        let y = g.pick(x, &[3, 7, 3, 19])?;
        weighted(g, y, 30)
    });
}

#[test]
fn cosine_distance_both_sides() {
    let a = seeded_gaussian(15, &[1, 6]);
    let b = seeded_gaussian(16, &[1, 6]);
    let bb = b.clone();
    check("cosine lhs", &a, move |g, x| {
        let c = g.constant(bb.clone())?;
        let d = g.cosine_distance(x, c)?;
        g.scale(d, 3.0)
    });
    check("cosine rhs", &b, move |g, x| {
        let c = g.constant(a.clone())?;
        g.cosine_distance(c, x)
    });
}

#[test]
fn cosine_distance_of_zero_vector_is_one() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[1, 3])).unwrap();
    let b = g.input(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
    let c = g.cosine_distance(a, b).unwrap();
    assert_eq!(g.value(c).item(), 1.0);
    g.backward(c).unwrap();
    assert!(g.grad(a).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn conv3d_all_inputs() {
    let x = seeded_gaussian(17, &[2, 3, 6, 6]);
    let w = seeded_gaussian(18, &[3, 54]).map(|v| v * 0.3);
    let b = seeded_gaussian(19, &[1, 3]);
    let (ww, bb) = (w.clone(), b.clone());
    check("conv3d x", &x, move |g, x| {
        let w = g.constant(ww.clone())?;
        let b = g.constant(bb.clone())?;
        let y = g.conv3d(x, w, b, 2, 1)?;
        weighted(g, y, 31)
    });
    let (xx, bb) = (x.clone(), b.clone());
    check("conv3d w", &w, move |g, w| {
        let x = g.constant(xx.clone())?;
        let b = g.constant(bb.clone())?;
        let y = g.conv3d(x, w, b, 2, 0)?;
        weighted(g, y, 31)
    });
    check("conv3d b", &b, move |g, b| {
        let x = g.constant(x.clone())?;
        let w = g.constant(w.clone())?;
        let y = g.conv3d(x, w, b, 1, 0)?;
        weighted(g, y, 32)
    });
}

#[test]
fn straight_through_matches_soft_gate_slope() {
    // inputs inside the unclipped band
    let x = Tensor::row(vec![-1.9, -0.7, -0.05, 0.3, 1.1, 1.95]);
    let r = grad_check_pair(
        |g, x| {
            let b = g.ste_gate(x)?;
            weighted(g, b, 33)
        },
        |g, x| {
            let d = g.sat_gate(x)?;
            weighted(g, d, 33)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert_eq!(r.checked, 6);
    assert!(r.passes(TOL), "{r:?}");
}

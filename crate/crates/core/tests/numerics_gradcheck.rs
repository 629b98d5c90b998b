//! Every tape primitive against central finite differences on randomized
//! inputs.

use std::sync::Arc;

use omninav_core::numerics::{
    check_gradients, finite_diff_check, FdOptions, Gradients, Graph, NodeId, Params, PointField,
    Tensor, MASK_NEG,
};
use omninav_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Projects `out` onto fixed random weights so every output element
/// contributes to the scalar.
fn project(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check<F>(name: &str, params: &Params, build: F)
where
    F: Fn(&mut Graph, &Params) -> Result<NodeId>,
{
    let report = finite_diff_check(build, params, TOL, &FdOptions::default()).unwrap();
    assert!(
        report.passed,
        "{name}: max relative error {:.3e} ({:?})",
        report.max_rel_error, report.per_param
    );
}

#[test]
fn primitives_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let mut p = Params::new();
        p.insert("a", rand_tensor(&mut rng, &[m, k]));
        p.insert("b", rand_tensor(&mut rng, &[k, n]));
        p.insert("c", rand_tensor(&mut rng, &[m, k]));
        p.insert("bias", rand_tensor(&mut rng, &[k]));
        p.insert("gamma", rand_tensor(&mut rng, &[k]));
        p.insert("beta", rand_tensor(&mut rng, &[k]));

        check("matmul", &p, |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = g.matmul(a, b)?;
            project(g, y, seed)
        });
        check("add/sub/mul/scale/offset", &p, |g, p| {
            let a = g.param(p, "a")?;
            let c = g.param(p, "c")?;
            let bias = g.param(p, "bias")?;
            let s = g.add(a, bias)?;
            let d = g.sub(s, c)?;
            let e = g.mul(d, a)?;
            let f = g.mul(e, bias)?;
            let h = g.scale(f, -0.7)?;
            let y = g.offset(h, 0.3)?;
            project(g, y, seed)
        });
        check("unary", &p, |g, p| {
            let a = g.param(p, "a")?;
            let t = g.tanh(a)?;
            let ge = g.gelu(a)?;
            let s = g.sin(a)?;
            let c = g.cos(a)?;
            let sc = g.sinc(a)?;
            let hs = g.hinge_sq(a)?;
            let mut acc = g.add(t, ge)?;
            for x in [s, c, sc, hs] {
                acc = g.add(acc, x)?;
            }
            project(g, acc, seed)
        });
        check("softmax", &p, |g, p| {
            let a = g.param(p, "a")?;
            let y = g.softmax(a)?;
            project(g, y, seed)
        });
        if k > 1 {
            check("layer_norm", &p, |g, p| {
                let a = g.param(p, "a")?;
                let gm = g.param(p, "gamma")?;
                let bt = g.param(p, "beta")?;
                let y = g.layer_norm(a, gm, bt)?;
                project(g, y, seed)
            });
        }
        let bags: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                (0..rng.random_range(1..4))
                    .map(|_| rng.random_range(0..m))
                    .collect()
            })
            .collect();
        check("embedding_mean", &p, |g, p| {
            let a = g.param(p, "a")?;
            let y = g.embedding_mean(a, bags.clone())?;
            project(g, y, seed)
        });
        let index: Arc<Vec<usize>> = Arc::new((0..6).map(|_| rng.random_range(0..m * k)).collect());
        check("gather/reshape/concat", &p, |g, p| {
            let a = g.param(p, "a")?;
            let c = g.param(p, "c")?;
            let gat = g.gather(a, index.clone(), vec![2, 3])?;
            let r = g.reshape(gat, vec![3, 2])?;
            let r2 = g.reshape(r, vec![1, 6])?;
            let a3 = g.reshape(a, vec![1, m * k])?;
            let cat = g.concat(&[a3, r2], 1)?;
            let c3 = g.reshape(c, vec![m, 1, k])?;
            let a4 = g.reshape(a, vec![m, 1, k])?;
            let cat2 = g.concat(&[c3, a4], 1)?;
            let x = project(g, cat, seed)?;
            let y = project(g, cat2, seed + 1)?;
            let s = g.concat(&[x, y], 0)?;
            g.sum(s)
        });
        check("cumsum/mean/mse", &p, |g, p| {
            let a = g.param(p, "a")?;
            let c = g.param(p, "c")?;
            let cs = g.cumsum(a)?;
            let l1 = g.mse(cs, c)?;
            let l2 = g.mean(a)?;
            let l = g.add(l1, l2)?;
            g.scale(l, 1.5)
        });
    }
}

#[test]
fn attention_and_pooling_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (b, t, heads) = (
            rng.random_range(1..3),
            rng.random_range(2..5),
            rng.random_range(1..3),
        );
        let d = heads * rng.random_range(1..3);
        let mut p = Params::new();
        for name in ["q", "k", "v"] {
            p.insert(name, rand_tensor(&mut rng, &[b, t, d]));
        }
        // Mask random keys, always keeping key 0.
        let mask: Vec<f64> = (0..b * t)
            .map(|i| {
                if i % t != 0 && rng.random_bool(0.3) {
                    MASK_NEG
                } else {
                    0.0
                }
            })
            .collect();
        let weights: Vec<f64> = (0..b * t).map(|_| rng.random_range(0.0..1.0)).collect();
        check("attention", &p, |g, p| {
            let q = g.param(p, "q")?;
            let k = g.param(p, "k")?;
            let v = g.param(p, "v")?;
            let o = g.attention(q, k, v, heads, &mask)?;
            let pooled = g.weighted_mean(o, weights.clone())?;
            let m = g.mean_axis1(o)?;
            let s = g.add(pooled, m)?;
            project(g, s, seed)
        });
    }
}

#[test]
fn point_map_matches_finite_differences() {
    let field: PointField = Arc::new(|p: [f64; 2]| {
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        (r - 1.0, [p[0] / r, p[1] / r])
    });
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut p = Params::new();
        p.insert(
            "pts",
            Tensor::new(
                vec![4, 2],
                (0..8).map(|_| rng.random_range(0.5..3.0)).collect(),
            )
            .unwrap(),
        );
        check("point_map", &p, |g, p| {
            let x = g.param(p, "pts")?;
            let d = g.point_map(x, &field)?;
            let neg = g.scale(d, -1.0)?;
            let m = g.offset(neg, 2.0)?;
            let h = g.hinge_sq(m)?;
            g.sum(h)
        });
    }
}

#[test]
fn linear_layer_with_squared_error_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = Params::new();
    p.insert("w", rand_tensor(&mut rng, &[6, 3]));
    p.insert("b", rand_tensor(&mut rng, &[3]));
    let x = rand_tensor(&mut rng, &[5, 6]);
    let y = rand_tensor(&mut rng, &[5, 3]);
    check("linear+mse", &p, |g, p| {
        let xi = g.input("x", x.clone());
        let yi = g.input("y", y.clone());
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let h = g.matmul(xi, w)?;
        let o = g.add(h, b)?;
        g.mse(o, yi)
    });
}

#[test]
fn corrupted_gradient_rule_fails_the_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = Params::new();
    p.insert("x", rand_tensor(&mut rng, &[4]));
    let build = |g: &mut Graph, p: &Params| -> Result<NodeId> {
        let x = g.param(p, "x")?;
        let t = g.tanh(x)?;
        g.sum(t)
    };
    // Test double: tanh derivative written as 1 - y instead of 1 - y^2.
    let corrupted = |p: &Params| -> Result<Gradients> {
        let x = p.get("x").unwrap();
        let data = x.data().iter().map(|v| 1.0 - v.tanh()).collect();
        let mut g = Gradients::new();
        g.insert("x".into(), Tensor::new(x.shape().to_vec(), data)?);
        Ok(g)
    };
    let loss = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, p)?;
        Ok(g.value(out).item())
    };
    let report = check_gradients(corrupted, loss, &p, TOL, &FdOptions::default()).unwrap();
    assert!(!report.passed);
    let honest = finite_diff_check(build, &p, TOL, &FdOptions::default()).unwrap();
    assert!(honest.passed);
}

#[test]
fn evaluation_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = Params::new();
    p.insert("q", rand_tensor(&mut rng, &[2, 3, 4]));
    let run = |p: &Params| {
        let mut g = Graph::new();
        let q = g.param(p, "q").unwrap();
        let o = g.attention(q, q, q, 2, &[0.0; 6]).unwrap();
        g.value(o).clone()
    };
    assert_eq!(run(&p).data(), run(&p).data());
}

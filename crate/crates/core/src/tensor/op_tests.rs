//! Finite-difference checks for every differentiable op on the tape.

use super::{Graph, ResampleMap, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduce any node to a scalar with a fixed random rank-1 weighting.
fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = g.value(y).dims2();
    let c = g.constant(rand_tensor(&mut rng, &[n, 1]));
    let r = g.constant(rand_tensor(&mut rng, &[1, m]));
    let col = g.matmul(y, c);
    let s = g.matmul(r, col);
    g.weighted_sum(&[s], &[1.0])
}

/// Build a graph from `inputs`, then compare tape gradients for every input
/// entry with central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F, tol: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let run = |ins: &[Tensor<f64>]| -> (Graph<f64>, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = build(&mut g, &vars);
        let l = if g.value(y).len() == 1 { y } else { reduce(&mut g, y, 99) };
        (g, l, vars)
    };
    let (g, l, vars) = run(&inputs);
    let analytic = g.backward_vars(l, &vars);
    let eps = 1e-6;
    for (ti, t) in inputs.iter().enumerate() {
        for idx in 0..t.len() {
            let mut plus = inputs.clone();
            plus[ti].data[idx] += eps;
            let mut minus = inputs.clone();
            minus[ti].data[idx] -= eps;
            let (gp, lp, _) = run(&plus);
            let (gm, lm, _) = run(&minus);
            let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
            let a = analytic[ti].data[idx];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
            assert!(err < tol, "input {ti}[{idx}]: analytic {a} numeric {num}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_both_layouts() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 5])], |g, v| g.matmul(v[0], v[1]), 1e-6);
    check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[5, 4])], |g, v| g.matmul_nt(v[0], v[1]), 1e-6);
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[3, 4])], |g, v| g.add(v[0], v[1]), 1e-6);
    check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4])], |g, v| g.add_row(v[0], v[1]), 1e-6);
    check(vec![rand_tensor(&mut r, &[3, 4])], |g, v| g.scale(v[0], -2.5), 1e-6);
    check(vec![rand_tensor(&mut r, &[3, 4])], |g, v| g.gelu(v[0]), 1e-6);
    check(vec![rand_tensor(&mut r, &[3, 4])], |g, v| g.relu(v[0]), 1e-6);
}

#[test]
fn layer_norm_grad() {
    let mut r = rng();
    check(
        vec![rand_tensor(&mut r, &[3, 6]), rand_tensor(&mut r, &[6]), rand_tensor(&mut r, &[6])],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
        1e-5,
    );
}

#[test]
fn attention_grad() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[2 * 3, 3 * 4])], |g, v| g.attention(v[0], 2, 3, 2), 1e-5);
}

#[test]
fn row_plumbing() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[3, 4])], |g, v| g.l2_normalize_rows(v[0], 1e-8), 1e-5);
    check(vec![rand_tensor(&mut r, &[3, 4])], |g, v| g.gather_rows(v[0], vec![2, 0, 2]), 1e-6);
    check(vec![rand_tensor(&mut r, &[2, 4]), rand_tensor(&mut r, &[3, 4])], |g, v| g.concat_rows(&[v[0], v[1]]), 1e-6);
    check(
        vec![rand_tensor(&mut r, &[4, 3]), rand_tensor(&mut r, &[3])],
        |g, v| g.mask_rows(v[0], v[1], vec![true, false, false, true]),
        1e-6,
    );
    check(vec![rand_tensor(&mut r, &[4, 3]), rand_tensor(&mut r, &[3])], |g, v| g.prepend_cls(v[0], v[1], 2), 1e-6);
    check(vec![rand_tensor(&mut r, &[6, 3]), rand_tensor(&mut r, &[3, 3])], |g, v| g.add_tiled(v[0], v[1]), 1e-6);
    let map = Arc::new(ResampleMap::bilinear(2, 2, 3, 3));
    check(vec![rand_tensor(&mut r, &[4, 3])], move |g, v| g.resample(v[0], map.clone()), 1e-6);
}

#[test]
fn conv_and_pyramid_ops() {
    let mut r = rng();
    check(
        vec![rand_tensor(&mut r, &[2, 2, 5, 5]), rand_tensor(&mut r, &[3, 2, 3, 3]), rand_tensor(&mut r, &[3])],
        |g, v| g.conv2d(v[0], v[1], v[2], 2, 1),
        1e-6,
    );
    check(
        vec![rand_tensor(&mut r, &[1, 2, 4, 4]), rand_tensor(&mut r, &[2, 2, 1, 1]), rand_tensor(&mut r, &[2])],
        |g, v| g.conv2d(v[0], v[1], v[2], 1, 0),
        1e-6,
    );
    check(vec![rand_tensor(&mut r, &[1, 2, 4, 4])], |g, v| g.avg_pool2(v[0]), 1e-6);
    check(vec![rand_tensor(&mut r, &[1, 2, 2, 2])], |g, v| g.upsample2(v[0]), 1e-6);
    check(vec![rand_tensor(&mut r, &[1, 2, 3, 5])], |g, v| g.avg_pool2(v[0]), 1e-6);
    check(vec![rand_tensor(&mut r, &[2, 1, 2, 3])], |g, v| g.upsample_to(v[0], 3, 5), 1e-6);
    check(vec![rand_tensor(&mut r, &[2, 3, 2, 2])], |g, v| g.spatial_mean(v[0]), 1e-6);
    check(vec![rand_tensor(&mut r, &[2, 3, 2, 2])], |g, v| g.nchw_to_tokens(v[0]), 1e-6);
    let w = Tensor::new(vec![3], vec![0.7, 0.2, 1.3]);
    check(
        vec![rand_tensor(&mut r, &[1, 2, 2, 2]), rand_tensor(&mut r, &[1, 2, 2, 2]), rand_tensor(&mut r, &[1, 2, 2, 2]), w],
        |g, v| g.weighted_fusion(&v[..3], v[3], 1e-4),
        1e-6,
    );
}

#[test]
fn loss_ops() {
    let mut r = rng();
    let mut tgt = rand_tensor(&mut r, &[3, 5]);
    for row in tgt.data.chunks_mut(5) {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        row.iter_mut().for_each(|v| *v = v.abs() / s);
    }
    check(
        vec![rand_tensor(&mut r, &[3, 5])],
        move |g, v| g.soft_cross_entropy(v[0], &tgt, &[0.5, 1.0, 0.25], 0.3, 1e-12),
        1e-6,
    );
    check(vec![rand_tensor(&mut r, &[5, 4])], |g, v| g.koleo(v[0], 1e-8), 1e-5);
}

#[test]
fn gelu_matches_reference_points() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![3], vec![0.0, 1.0, -1.0]), false);
    let y = g.gelu(x);
    let v = &g.value(y).data;
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.841_191_990_607_477_2).abs() < 1e-12);
    assert!((v[2] + 0.158_808_009_392_522_8).abs() < 1e-12);
}

#[test]
fn inner_const_grad() {
    let mut r = rng();
    let c = rand_tensor(&mut r, &[3, 4]);
    check(vec![rand_tensor(&mut r, &[3, 4])], |g, v| g.inner_const(v[0], &c), 1e-6);
}

#[test]
fn ceil_pool_and_nearest_resize_values() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()), false);
    let p = g.avg_pool2(x);
    // windows: {1,2,4,5} {3,6} {7,8} {9}
    assert_eq!(g.value(p).data, vec![3.0, 4.5, 7.5, 9.0]);
    let u = g.upsample_to(p, 3, 3);
    assert_eq!(g.value(u).data, vec![3.0, 3.0, 4.5, 3.0, 3.0, 4.5, 7.5, 7.5, 9.0]);
}

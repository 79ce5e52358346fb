//! Finite-difference checks of every differentiable tape op at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune_core::numerics::{grad_check, layer_norm, Graph, Tensor, Var, MASK_VALUE};

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Checks `sum(w * op(inputs))` with respect to every input.
fn check_op<B>(shapes: &[Vec<usize>], seed: u64, build: B) -> f64
where
    B: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let point = rand_vec(&mut rng, sizes.iter().sum());
    let probe = {
        let mut g = Graph::new();
        let vars = leaves(&mut g, shapes, &point);
        let out = build(&mut g, &vars);
        g.value(out).len()
    };
    let weights = rand_vec(&mut rng, probe);
    let f = |x: &[f64]| {
        let mut g = Graph::new();
        let vars = leaves(&mut g, shapes, x);
        let out = build(&mut g, &vars);
        let w = g.constant(Tensor::new(g.shape(out), weights.clone()).unwrap());
        let prod = g.mul(out, w);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let grad: Vec<f64> = vars
            .iter()
            .zip(&sizes)
            .flat_map(|(v, n)| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; *n]))
            .collect();
        (g.value(loss)[0], grad)
    };
    grad_check(f, &point)
}

fn leaves(g: &mut Graph<'_, f64>, shapes: &[Vec<usize>], flat: &[f64]) -> Vec<Var> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat[off..off + n].to_vec()).unwrap().trainable();
            off += n;
            g.leaf(t)
        })
        .collect()
}

fn assert_all(name: &str, shapes: &[Vec<usize>], build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var + Copy) {
    for seed in 0..INSTANCES {
        let err = check_op(shapes, seed, build);
        assert!(err < TOL, "{name} seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn matmul() {
    assert_all("matmul", &[vec![3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn add_bias_add_mul_scale() {
    assert_all("add_bias", &[vec![3, 4], vec![4]], |g, v| g.add_bias(v[0], v[1]));
    assert_all("add", &[vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1]));
    assert_all("mul", &[vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1]));
    assert_all("scale", &[vec![5]], |g, v| g.scale(v[0], 0.37));
}

#[test]
fn gelu() {
    assert_all("gelu", &[vec![4, 3]], |g, v| g.gelu(v[0]));
}

#[test]
fn layer_norm_rows() {
    assert_all("layer_norm", &[vec![3, 6], vec![6], vec![6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn heads_permutations() {
    assert_all("split_heads", &[vec![2 * 3, 8]], |g, v| g.split_heads(v[0], 2, 3, 4));
    assert_all("merge_heads", &[vec![2 * 4, 3, 2]], |g, v| g.merge_heads(v[0], 2, 3, 4));
}

#[test]
fn batched_products() {
    assert_all("bmm", &[vec![2, 3, 4], vec![2, 4, 5]], |g, v| g.bmm(v[0], v[1], false));
    assert_all("bmm_nt", &[vec![2, 3, 4], vec![2, 5, 4]], |g, v| {
        g.bmm(v[0], v[1], true)
    });
}

#[test]
fn masked_softmax_rows() {
    // Group 0 masks column 1, group 1 masks columns 0 and 3.
    let mask = [0.0, MASK_VALUE, 0.0, 0.0, MASK_VALUE, 0.0, 0.0, MASK_VALUE];
    assert_all("masked_softmax", &[vec![2, 3, 4]], |g, v| {
        g.masked_softmax(v[0], &mask, 3).unwrap()
    });
}

#[test]
fn masked_softmax_composed_with_dot_product() {
    // f(q, k) = sum(w * softmax(q k^T + mask))
    let mask = [0.0, 0.0, MASK_VALUE, 0.0, 0.0];
    assert_all("attention_scores", &[vec![1, 4, 3], vec![1, 5, 3]], |g, v| {
        let s = g.bmm(v[0], v[1], true);
        g.masked_softmax(s, &mask, 4).unwrap()
    });
}

#[test]
fn gather_and_assemble() {
    assert_all("gather_rows", &[vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2]));
    assert_all("assemble_tokens", &[vec![2 * 3, 2], vec![2], vec![4, 2]], |g, v| {
        g.assemble_tokens(v[0], v[1], v[2], 2)
    });
}

#[test]
fn cross_entropy() {
    assert_all("cross_entropy", &[vec![3, 4]], |g, v| g.cross_entropy(v[0], &[0, 3, 1]));
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.random_range(2..16);
        let x = rand_vec(&mut rng, n);
        let gain = rand_vec(&mut rng, n);
        let bias = rand_vec(&mut rng, n);
        let eps = 1e-5;
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let got = layer_norm(&x, &gain, &bias, eps);
        for j in 0..n {
            let want = gain[j] * (x[j] - mean) / (var + eps).sqrt() + bias[j];
            assert!((got[j] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::new(&[2, 3], vec![30.0, 0.0, 0.0, 0.0, 0.0, 30.0]).unwrap());
    let loss = g.cross_entropy(logits, &[0, 2]);
    assert!(g.value(loss)[0] < 1e-12);
    let wrong = g.cross_entropy(logits, &[1, 1]);
    assert!((g.value(wrong)[0] - 30.0).abs() < 1e-9);
}

//! Reverse-mode gradients of every graph primitive against central finite
//! differences (h = 1e-5) on random inputs in [-2, 2].

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volflow::tensor::{Bindings, Graph, NodeId, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], f: impl Fn(f64) -> f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f(rng.random_range(-2.0..2.0))).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Builds `sum(op(inputs) * r)` for a fixed random `r` and compares the AD
/// gradient of every input element with a central difference.
fn check(name: &str, inputs: Vec<(&str, Tensor)>, op: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let build = |bindings: &Bindings| -> (Graph, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|(n, _)| g.input(n, bindings[*n].shape()).unwrap())
            .collect();
        let out = op(&mut g, &ids);
        (g, out)
    };
    let mut bindings: Bindings = inputs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let (mut g, out) = build(&bindings);
    let weights = random(&mut rng, g.shape(out), |x| x);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let seed = g.sum_all(prod);
    let values = g.forward_eval(&bindings).unwrap();
    let grads = g.backward(&values, seed).unwrap();

    let eval = |b: &Bindings| -> f64 {
        let vals = g.forward_eval(b).unwrap();
        vals.get(seed).item()
    };
    for (input, tensor) in &inputs {
        let analytic = grads.get(input).unwrap();
        for i in 0..tensor.len() {
            let mut plus = tensor.data().to_vec();
            let mut minus = plus.clone();
            plus[i] += H;
            minus[i] -= H;
            bindings.insert(input.to_string(), Tensor::new(tensor.shape(), plus).unwrap());
            let fp = eval(&bindings);
            bindings.insert(input.to_string(), Tensor::new(tensor.shape(), minus).unwrap());
            let fm = eval(&bindings);
            bindings.insert(input.to_string(), tensor.clone());
            let fd = (fp - fm) / (2.0 * H);
            let a = analytic.data()[i];
            assert!(
                rel_err(a, fd) <= TOL,
                "{name}: d/d{input}[{i}] analytic {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn elementwise_binary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], |x| x);
    let b = random(&mut rng, &[3, 4], |x| x);
    let pos = random(&mut rng, &[3, 4], |x| x.abs() + 0.5);
    check("add", vec![("a", a.clone()), ("b", b.clone())], |g, v| g.add(v[0], v[1]).unwrap());
    check("sub", vec![("a", a.clone()), ("b", b.clone())], |g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", vec![("a", a.clone()), ("b", b.clone())], |g, v| g.mul(v[0], v[1]).unwrap());
    check("div", vec![("a", a.clone()), ("b", pos)], |g, v| g.div(v[0], v[1]).unwrap());
    check("square", vec![("a", a)], |g, v| g.square(v[0]));
}

#[test]
fn elementwise_unary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 5], |x| x);
    let pos = random(&mut rng, &[2, 5], |x| x.abs() + 0.5);
    let away_from_kink = random(&mut rng, &[2, 5], |x| if x.abs() < 0.05 { x + 0.1 } else { x });
    check("add_scalar", vec![("x", x.clone())], |g, v| g.add_scalar(v[0], 1.7));
    check("mul_scalar", vec![("x", x.clone())], |g, v| g.mul_scalar(v[0], -0.3));
    check("exp", vec![("x", x.clone())], |g, v| g.exp(v[0]));
    check("ln", vec![("x", pos)], |g, v| g.ln(v[0]));
    check("sigmoid", vec![("x", x)], |g, v| g.sigmoid(v[0]));
    check("relu", vec![("x", away_from_kink)], |g, v| g.relu(v[0]));
}

#[test]
fn matrix_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4], |x| x);
    let b = random(&mut rng, &[4, 2], |x| x);
    check("matmul", vec![("a", a), ("b", b)], |g, v| g.matmul(v[0], v[1]).unwrap());
    // Diagonally dominant so the matrix stays well conditioned.
    let mut m = random(&mut rng, &[3, 3], |x| 0.3 * x).into_vec();
    for i in 0..3 {
        m[i * 4] += 2.5;
    }
    let m = Tensor::new(&[3, 3], m).unwrap();
    check("log_abs_det", vec![("m", m.clone())], |g, v| g.log_abs_det(v[0]).unwrap());
    check("inverse", vec![("m", m)], |g, v| g.inverse(v[0]).unwrap());
}

#[test]
fn convolution_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 2, 3, 2], |x| x);
    let w = random(&mut rng, &[3, 3, 3, 2, 3], |x| 0.5 * x);
    let b = random(&mut rng, &[3], |x| x);
    check(
        "conv3d k3",
        vec![("x", x.clone()), ("w", w), ("b", b.clone())],
        |g, v| g.conv3d(v[0], v[1], Some(v[2])).unwrap(),
    );
    let w1 = random(&mut rng, &[1, 1, 1, 2, 3], |x| x);
    check("conv3d k1", vec![("x", x), ("w", w1), ("b", b)], |g, v| {
        g.conv3d(v[0], v[1], Some(v[2])).unwrap()
    });
}

#[test]
fn structural_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 4], |x| x);
    let y = random(&mut rng, &[2, 3, 2], |x| x);
    let c = random(&mut rng, &[4], |x| x);
    check("sum axes", vec![("x", x.clone())], |g, v| g.sum(v[0], &[0, 2]).unwrap());
    check("mean axes", vec![("x", x.clone())], |g, v| g.mean(v[0], &[1]).unwrap());
    check("reshape", vec![("x", x.clone())], |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    check("transpose", vec![("x", x.clone())], |g, v| g.transpose(v[0], &[2, 0, 1]).unwrap());
    check("slice", vec![("x", x.clone())], |g, v| g.slice_channels(v[0], 1, 3).unwrap());
    check("concat", vec![("x", x.clone()), ("y", y)], |g, v| {
        g.concat_channels(&[v[0], v[1]]).unwrap()
    });
    check("squared_norm", vec![("x", x)], |g, v| g.squared_norm(v[0]));
    check("broadcast", vec![("c", c)], |g, v| g.broadcast_to(v[0], &[2, 3, 4]).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Reshape and transpose are pure index maps: composing with the inverse
    // permutation reproduces the input bit for bit.
    #[test]
    fn transpose_round_trip(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[d0, d1, d2], |x| x);
        let mut g = Graph::new();
        let xi = g.input("x", &[d0, d1, d2]).unwrap();
        let t = g.transpose(xi, &[1, 2, 0]).unwrap();
        let flat = g.reshape(t, &[d0 * d1 * d2]).unwrap();
        let back = g.reshape(flat, &[d1, d2, d0]).unwrap();
        let orig = g.transpose(back, &[2, 0, 1]).unwrap();
        let b: Bindings = [("x".to_string(), x.clone())].into_iter().collect();
        let vals = g.forward_eval(&b).unwrap();
        prop_assert_eq!(vals.get(orig).data(), x.data());
    }
}

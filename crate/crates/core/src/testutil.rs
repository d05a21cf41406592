//! Test-only helpers: seeded random tensors and a central finite-difference
//! gradient oracle that never touches the analytic backward pass.

use rand::Rng;

use crate::rng::rng;
use crate::tensor::{Graph, Tensor, Var};

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Central differences of `f` at `x`.
pub fn finite_difference(x: &Tensor, step: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Checks d/dx of `sum(f(x) ⊙ r)` (with fixed random `r`) against central
/// differences.
pub fn assert_grad_matches(x: &Tensor, tol: f64, f: impl Fn(&mut Graph, Var) -> Var, seed: u64) {
    let weights = {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = f(&mut g, v);
        random_tensor(g.shape(y), seed)
    };
    let scalar = |g: &mut Graph, v: Var| {
        let y = f(g, v);
        let w = g.constant(weights.clone());
        let p = g.mul(y, w);
        g.sum_all(p)
    };
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let s = scalar(&mut g, v);
    let analytic = g.backward(s).wrt(v).cloned().expect("input gradient");
    let numeric = finite_difference(x, 1e-6, |t| {
        let mut g = Graph::inference();
        let v = g.constant(t.clone());
        let s = scalar(&mut g, v);
        g.value(s).item()
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < tol, "relative gradient error {err:e} exceeds {tol:e}");
}

/// Adds small seeded noise to every parameter, so zero-initialised output
/// layers stop masking the rest of a network.
pub fn perturb(ps: &mut crate::tensor::ParamStore, seed: u64) {
    for (k, id) in ps.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let noise = random_tensor(ps.get(id).shape(), seed.wrapping_add(k as u64));
        ps.get_mut(id)
            .data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(v, n)| *v += 0.05 * n);
    }
}

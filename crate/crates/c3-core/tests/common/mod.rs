//! Shared helpers for the integration suites: a central-difference gradient
//! oracle over f64 graphs and a tiny deterministic RNG for test data.

use c3_core::tensor::{Graph, TensorOf, Var};

/// xorshift64* PRNG; good enough for test fixtures and fully deterministic.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }
}

/// Evaluates the scalar loss built by `build` on the given leaf data.
pub fn eval_loss(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| g.leaf(TensorOf::from_f64_slice(s, d), true))
        .collect();
    let loss = build(&mut g, &vars);
    g.value(loss).item()
}

/// Central-difference gradient check of every element of every input against
/// the tape's backward pass, at `rel_tol` relative tolerance (1e-7 absolute
/// floor). The oracle only evaluates the forward pass, so it is independent
/// of the adjoint implementations.
pub fn check_gradients(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    rel_tol: f64,
    what: &str,
) {
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| g.leaf(TensorOf::from_f64_slice(s, d), true))
        .collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "{what}: loss must be scalar");
    let grads = g.backward(loss);

    for (i, (_, d)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("{what}: no gradient for input {i}"));
        for j in 0..d.len() {
            let h = 1e-5 * d[j].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].1[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].1[j] -= h;
            let fd = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * h);
            let an = analytic[j];
            let tol = rel_tol * an.abs().max(fd.abs()) + 1e-7;
            assert!(
                (an - fd).abs() <= tol,
                "{what}: input {i} element {j}: analytic {an:e} vs fd {fd:e} \
                 (|diff| {:e} > tol {tol:e})",
                (an - fd).abs()
            );
        }
    }
}

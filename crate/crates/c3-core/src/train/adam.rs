//! Adam with bias correction, state kept as f64 regardless of the model's
//! element type.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(group_sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn group_count(&self) -> usize {
        self.m.len()
    }

    /// Advances the step counter and folds the gradients into the moment
    /// estimates; `update` receives (group, element, delta) for every
    /// parameter, where the new value is `old + delta`.
    pub fn step(
        &mut self,
        lr: f64,
        grads: &[Vec<f64>],
        mut update: impl FnMut(usize, usize, f64),
    ) {
        assert_eq!(grads.len(), self.m.len(), "gradient group count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gi, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            assert_eq!(g.len(), m.len(), "gradient size in group {gi}");
            for (j, &gj) in g.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                update(gi, j, -lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

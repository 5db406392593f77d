//! Adam optimizer over named parameter groups, host-side.

use std::collections::BTreeMap;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over a set of (name, params, grads) triples. All triples of
    /// one logical model must be passed together so the step counter advances
    /// once per call.
    pub fn step(&mut self, params: &mut [(String, &mut [f64], &[f64])]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p, g) in params.iter_mut() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns true when clipping actually triggered.
pub fn clip_global_norm(grads: &mut [(String, Vec<f64>)], max_norm: f64) -> bool {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_quadratic() {
        let mut adam = Adam::new(0.1);
        let mut x = vec![5.0f64];
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            let mut triples = vec![("x".to_string(), x.as_mut_slice(), g.as_slice())];
            adam.step(&mut triples);
        }
        assert!(x[0].abs() < 0.5, "x = {}", x[0]);
    }

    #[test]
    fn clip_reduces_norm() {
        let mut g = vec![("a".to_string(), vec![3.0, 4.0])];
        let clipped = clip_global_norm(&mut g, 1.0);
        assert!(clipped);
        let norm: f64 = g[0].1.iter().map(|v| v * v).sum::<f64>();
        assert!((norm.sqrt() - 1.0).abs() < 1e-12);
        let mut small = vec![("b".to_string(), vec![0.1])];
        assert!(!clip_global_norm(&mut small, 1.0));
    }
}

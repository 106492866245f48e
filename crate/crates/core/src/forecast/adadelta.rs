use serde::{Deserialize, Serialize};

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPSILON: f64 = 1e-6;

/// AdaDelta over a fixed list of flat parameter tensors.
///
/// Per element: `E[g²] ← ρE[g²] + (1-ρ)g²`,
/// `Δ = -√(E[Δ²]+ε) / √(E[g²]+ε) · g`, `E[Δ²] ← ρE[Δ²] + (1-ρ)Δ²`, `θ ← θ + Δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaDelta {
    pub rho: f64,
    pub epsilon: f64,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl AdaDelta {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        Self::with_constants(shapes, ADADELTA_RHO, ADADELTA_EPSILON)
    }

    pub fn with_constants(shapes: impl IntoIterator<Item = usize>, rho: f64, epsilon: f64) -> Self {
        let sq_grad: Vec<Vec<f64>> = shapes.into_iter().map(|n| vec![0.0; n]).collect();
        let sq_delta = sq_grad.clone();
        AdaDelta {
            rho,
            epsilon,
            sq_grad,
            sq_delta,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(
            params.len(),
            self.sq_grad.len(),
            "parameter tensor count changed"
        );
        let (rho, eps) = (self.rho, self.epsilon);
        for (((p, g), eg), ed) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.sq_grad)
            .zip(&mut self.sq_delta)
        {
            assert_eq!(p.len(), g.len());
            for (((theta, &grad), eg), ed) in p
                .iter_mut()
                .zip(g.iter())
                .zip(eg.iter_mut())
                .zip(ed.iter_mut())
            {
                *eg = rho * *eg + (1.0 - rho) * grad * grad;
                let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * grad;
                *ed = rho * *ed + (1.0 - rho) * delta * delta;
                *theta += delta;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = AdaDelta::new([3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        for _ in 0..5 {
            opt.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0, 0.0]]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut opt = AdaDelta::new([1]);
        let mut p = vec![1.0];
        opt.step(&mut [p.as_mut_slice()], &[&[2.0]]);
        // E[g²] = 0.05 * 4 = 0.2 ; Δ = -√1e-6 / √(0.2 + 1e-6) * 2
        let expected = 1.0 - (1e-6f64).sqrt() / (0.2f64 + 1e-6).sqrt() * 2.0;
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdaDelta::new([2]);
        let mut p = vec![3.0, -4.0];
        for _ in 0..20_000 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut [p.as_mut_slice()], &[&g]);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}

//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward closure on perturbed
//! constant inputs; it never touches a backward rule.
//!
//! Piecewise ops (Leaky ReLU, max pooling, clamped cutoffs) make the loss
//! only piecewise smooth. When the stencil `x +- step` lands on a different
//! branch than `x`, the difference quotient measures a mix of two slopes. The
//! checker detects this through [`Graph::branch_signature`] and halves the
//! step until both ends share the branch of `x`, then applies the same
//! comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: Real,
    /// Lower bound on the relative-error denominator, so that gradients
    /// which are zero up to rounding are compared absolutely.
    pub floor: Real,
    /// Check at most this many entries per input (sampled), or all if `None`.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// How many times the step may be halved to avoid a branch change.
    pub max_halvings: u32,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
            max_halvings: 12,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub checked: usize,
    /// Entries whose stencil had to shrink to stay on one smooth piece.
    pub refined: usize,
    /// Entries still straddling a branch change at the smallest step. These
    /// are compared anyway.
    pub straddled: usize,
    /// (input, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, Real, Real)>,
}

pub fn relative_error(analytic: Real, numeric: Real, floor: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the analytic gradient of `f` with respect to every input against
/// central differences. `f` must return a one-element loss.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let base = g.branch_signature();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(g);

    let eval = |perturbed: &[Tensor]| -> Result<(Real, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match cfg.max_entries {
            Some(k) if k < input.len() => {
                let mut idx = sample(&mut rng, input.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..input.len()).collect(),
        };
        for i in indices {
            let original = input.data()[i];
            let mut step = cfg.step;
            let mut halvings = 0;
            let numeric = loop {
                work[which].data_mut()[i] = original + step;
                let (plus, sig_plus) = eval(&work)?;
                work[which].data_mut()[i] = original - step;
                let (minus, sig_minus) = eval(&work)?;
                work[which].data_mut()[i] = original;
                let smooth = sig_plus == base && sig_minus == base;
                if smooth || halvings == cfg.max_halvings {
                    if !smooth {
                        report.straddled += 1;
                    }
                    if halvings > 0 {
                        report.refined += 1;
                    }
                    break (plus - minus) / (2.0 * step);
                }
                step /= 2.0;
                halvings += 1;
            };
            let a = analytic[which].data()[i];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, i, a, numeric));
            }
        }
    }
    Ok(report)
}

//! Central-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

const ABS_NOISE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat component index) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the analytic gradient of `f` at `point` against central
/// differences, component by component. `f` must reduce to a scalar.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_multi(|xs| f(&xs[0]), std::slice::from_ref(point), eps)
}

/// Multi-input variant: every input is perturbed and checked.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = points
        .iter()
        .map(|p| Tensor::param(p.shape().to_vec(), p.data().to_vec()))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    out.backward()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for ci in 0..leaf.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let inputs: Vec<Tensor> = leaves
                    .iter()
                    .enumerate()
                    .map(|(qi, l)| {
                        let mut data = l.data().to_vec();
                        if qi == pi {
                            data[ci] += delta;
                        }
                        Tensor::param(l.shape().to_vec(), data)
                    })
                    .collect::<Result<_>>()?;
                Ok(f(&inputs)?.item())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[ci];
            let diff = (a - numeric).abs();
            // Central differences carry roughly |f| * machine-eps / eps of
            // roundoff; a disagreement below that is measurement noise, not
            // a gradient error (attention key biases, for one, have an
            // exactly-zero gradient that the noise would otherwise swamp).
            if diff <= ABS_NOISE_FLOOR {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

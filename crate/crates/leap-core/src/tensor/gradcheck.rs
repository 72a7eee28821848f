//! Central-difference gradient checking. The numeric estimate is the oracle
//! the analytic backward pass is judged against, so this module never calls
//! into the tape machinery itself: it only re-evaluates a black-box loss at
//! perturbed parameter values.

use crate::error::Result;
use crate::tensor::TensorData;

/// Outcome of comparing analytic gradients against central differences.
/// `max_ratio <= 1.0` means every coordinate satisfied
/// `|fd - analytic| <= atol + rtol * max(|fd|, |analytic|)`.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_ratio: f64,
    pub coords_checked: usize,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub worst_fd: f64,
    pub worst_analytic: f64,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.max_ratio <= 1.0
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max_ratio={:.3e} over {} coords (worst: param {} coord {}, fd={:.6e}, analytic={:.6e})",
            self.max_ratio,
            self.coords_checked,
            self.worst_param,
            self.worst_coord,
            self.worst_fd,
            self.worst_analytic
        )
    }
}

/// Estimate d loss / d params by central differences: each coordinate is
/// nudged by `±step` and the loss re-evaluated. `eval` must be a pure
/// function of the parameter values.
pub fn central_diff_gradients<E>(
    eval: &mut E,
    params: &[TensorData<f64>],
    step: f64,
) -> Result<Vec<TensorData<f64>>>
where
    E: FnMut(&[TensorData<f64>]) -> Result<f64>,
{
    let mut work: Vec<TensorData<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = TensorData::zeros(params[p].shape().to_vec());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Run central differences on `eval` and compare against the analytic
/// gradients. A `None` analytic entry means "this parameter should not
/// influence the loss" and is compared against zero.
pub fn check_gradients<E>(
    mut eval: E,
    params: &[TensorData<f64>],
    analytic: &[Option<TensorData<f64>>],
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<FdReport>
where
    E: FnMut(&[TensorData<f64>]) -> Result<f64>,
{
    assert_eq!(params.len(), analytic.len(), "one analytic slot per parameter");
    let fd = central_diff_gradients(&mut eval, params, step)?;
    let mut report = FdReport {
        max_ratio: 0.0,
        coords_checked: 0,
        worst_param: 0,
        worst_coord: 0,
        worst_fd: 0.0,
        worst_analytic: 0.0,
    };
    for (p, fd_grad) in fd.iter().enumerate() {
        for i in 0..fd_grad.numel() {
            let f = fd_grad.data()[i];
            let a = analytic[p].as_ref().map_or(0.0, |g| g.data()[i]);
            let ratio = (f - a).abs() / (atol + rtol * f.abs().max(a.abs()));
            report.coords_checked += 1;
            if ratio > report.max_ratio {
                report.max_ratio = ratio;
                report.worst_param = p;
                report.worst_coord = i;
                report.worst_fd = f;
                report.worst_analytic = a;
            }
        }
    }
    Ok(report)
}

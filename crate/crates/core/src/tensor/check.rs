use super::{Graph, Tensor, TensorError, Var};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|g_ad - g_fd| / max(1, |g_fd|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±h` probes changed a relu sign or a max-pool
    /// argmax; the function is not differentiable across them.
    pub excluded: usize,
}

/// Compares reverse-mode gradients of `f` at `theta` against central
/// differences with step `h`.
///
/// `f` receives a fresh kink-tracking graph plus one parameter leaf per
/// entry of `theta` and must return a scalar. It has to be a deterministic
/// function of `theta` (reseed any rng inside it).
pub fn grad_check<F>(f: F, theta: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |params: &[Tensor<f64>]| -> Result<(f64, Option<u64>), TensorError> {
        let mut g = Graph::with_kink_tracking();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.item(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective"));
        }
        Ok((v, g.kink_signature()))
    };

    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = theta.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(theta)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for (ti, t) in theta.iter().enumerate() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            probe[ti].data_mut()[k] = orig + h;
            let (fp, sp) = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - h;
            let (fm, sm) = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.excluded += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[ti].data()[k];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

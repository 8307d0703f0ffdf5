use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which oracle the analytic gradient is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradSign {
    /// Plain central differences.
    Standard,
    /// Negated central differences, for functions whose parameters all
    /// reach the output through exactly one gradient reversal. Reversal
    /// is not a derivative, so no other comparison is meaningful.
    Reversed,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `build` receives a fresh graph and one parameter leaf per entry of
/// `params`, and returns the scalar output. Stochastic nodes replay the
/// same stream on every evaluation, so the function is deterministic.
pub fn grad_check<S, F>(build: F, params: &[Tensor<S>], eps: f64, sign: GradSign) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnOnce(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(0x5eed);
    let leaves: Vec<NodeId> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let out = build(&mut g, &leaves)?;
    g.forward()?;
    g.backward(out)?;
    let analytic: Vec<Tensor<S>> = leaves
        .iter()
        .map(|&l| g.grad(l).cloned().unwrap_or_else(|| Tensor::zeros(g.dims(l))))
        .collect();

    let eval = |g: &mut Graph<S>, leaf: NodeId, t: Tensor<S>| -> Result<f64> {
        g.bind(leaf, t)?;
        g.forward()?;
        let v = g.value(out)?.item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { node: out.index(), op: "grad_check" });
        }
        Ok(v)
    };

    let flip = match sign {
        GradSign::Standard => 1.0,
        GradSign::Reversed => -1.0,
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for (pi, (&leaf, base)) in leaves.iter().zip(params).enumerate() {
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[e] += S::from_f64_lossy(eps);
            let mut minus = base.clone();
            minus.data_mut()[e] -= S::from_f64_lossy(eps);
            let fp = eval(&mut g, leaf, plus)?;
            let fm = eval(&mut g, leaf, minus)?;
            let numeric = flip * (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[e].as_f64();
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, e);
            }
            report.checked += 1;
        }
        g.bind(leaf, base.clone())?;
    }
    Ok(report)
}

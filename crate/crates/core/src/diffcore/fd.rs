//! Central finite-difference checks against [`Graph::grad`].

use super::{Graph, GraphError, NodeId, Result, Tensor};

#[derive(Debug, Clone)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_err: f64,
    /// `(tensor index, flat coordinate)` of the worst probe.
    pub worst: (usize, usize),
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

fn eval<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|p| g.variable(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    match v.item() {
        Some(x) if x.is_finite() => Ok(x),
        Some(x) => Err(GraphError::NonFinite(format!("objective evaluated to {x}"))),
        None => Err(GraphError::NotScalar(v.shape().to_vec())),
    }
}

/// Checks the gradient of a scalar function of a single tensor at every
/// coordinate.
pub fn fd_check<F>(f: F, point: &Tensor, h: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let probes: Vec<(usize, usize)> = (0..point.len()).map(|i| (0, i)).collect();
    fd_check_params(|g, ids| f(g, ids[0]), std::slice::from_ref(point), h, &probes)
}

/// Checks the gradient of a scalar function of several tensors at the given
/// `(tensor, coordinate)` probes.
pub fn fd_check_params<F>(f: F, points: &[Tensor], h: f64, probes: &[(usize, usize)]) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(GraphError::Shape(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|p| g.variable(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    if !g.value(out).is_finite() {
        return Err(GraphError::NonFinite("objective at the base point".into()));
    }
    let grads = g.grad(out, &ids)?;
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: Vec::with_capacity(probes.len()),
        numeric: Vec::with_capacity(probes.len()),
    };
    for &(t, c) in probes {
        let analytic = g.value(grads[t]).values()[c];
        let shifted = |delta: f64| -> Result<f64> {
            let mut pts = points.to_vec();
            let mut vals = pts[t].values().to_vec();
            vals[c] += delta;
            pts[t] = Tensor::new(pts[t].shape().to_vec(), vals)?;
            eval(&f, &pts)
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let e = rel_err(analytic, numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = (t, c);
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_constant_gradient() {
        let p = Tensor::vector(&[0.3, -1.2, 4.0, 2.5]);
        let r = fd_check(|g, x| Ok(g.sum(x)), &p, 1e-3).unwrap();
        assert!(r.max_rel_err <= 1e-10, "{}", r.max_rel_err);
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let p = Tensor::vector(&[0.3, -1.2, 4.0, -2.5, 0.8]);
        let r = fd_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let p = Tensor::vector(&[1.0]);
        assert!(fd_check(|g, x| Ok(g.sum(x)), &p, 0.0).is_err());
        let err = fd_check(
            |g, x| {
                let s = g.sum(x);
                let r = g.recip(s);
                let big = g.scale(r, 1e308);
                Ok(g.scale(big, 1e308))
            },
            &p,
            1e-3,
        );
        assert!(matches!(err, Err(GraphError::NonFinite(_))));
    }
}

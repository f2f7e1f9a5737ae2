use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(param, element)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::InvalidArgument("gradient check needs a scalar function".into()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// finite differences with step `step`.
///
/// `coords` lists `(param index, flat element index)` pairs to test; an empty
/// slice tests every element of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], coords: &[(usize, usize)], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    g.backward(out)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    drop(g);

    let all: Vec<(usize, usize)>;
    let coords = if coords.is_empty() {
        all = params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
            .collect();
        &all[..]
    } else {
        coords
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &(p, e) in coords {
        let orig = work[p].data()[e];
        work[p].data_mut()[e] = orig + step;
        let up = eval(&f, &work)?;
        work[p].data_mut()[e] = orig - step;
        let down = eval(&f, &work)?;
        work[p].data_mut()[e] = orig;
        let fd = (up - down) / (2.0 * step);
        let ad = grads[p].data()[e];
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-12);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((p, e));
        }
        report.analytic.push(ad);
        report.numeric.push(fd);
    }
    Ok(report)
}

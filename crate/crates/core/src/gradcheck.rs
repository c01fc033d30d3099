//! Central finite-difference oracle for [`Graph::backward`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator, so that two vanishing gradients
/// do not produce `0/0`.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `name[flat index]` of the element with the largest relative error.
    pub worst_param: String,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Checks gradients of `f` with respect to anonymous parameters, reported as
/// `p0`, `p1`, ...
pub fn grad_check<F>(f: F, params: &mut [Tensor], eps: f64) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut named: Vec<(String, Tensor)> = params
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("p{i}"), t.clone()))
        .collect();
    let report = grad_check_named(f, &mut named, eps)?;
    for (dst, (_, src)) in params.iter_mut().zip(named) {
        *dst = src;
    }
    Ok(report)
}

/// Compares the gradients `backward` produces for `f` against
/// `(f(p+eps) - f(p-eps)) / (2 eps)` for every element of every parameter.
///
/// `f` receives a fresh graph and the parameter leaves (in `params` order)
/// and must return a scalar loss. Parameters are restored before returning.
pub fn grad_check_named<F>(mut f: F, params: &mut [(String, Tensor)], eps: f64) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }

    let eval = |params: &[(String, Tensor)], f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::Contract("grad_check closure must return a scalar".into()));
        }
        Ok(g.value(loss).data()[0])
    };

    let b1 = eval(params, &mut f)?;
    let b2 = eval(params, &mut f)?;
    if b1.to_bits() != b2.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "two baseline evaluations differ: {b1:e} vs {b2:e}"
        )));
    }

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .zip(params.iter())
            .map(|(&v, (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };

    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for p in 0..params.len() {
        for j in 0..params[p].1.numel() {
            let orig = params[p].1.data()[j];
            params[p].1.data_mut()[j] = orig + eps;
            let plus = eval(params, &mut f);
            params[p].1.data_mut()[j] = orig - eps;
            let minus = eval(params, &mut f);
            params[p].1.data_mut()[j] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            let an = analytic[p][j];
            let abs = (an - fd).abs();
            let rel = rel_err(an, fd);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst_param = format!("{}[{j}]", params[p].0);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut params = vec![Tensor::scalar(0.7)];
        let r = grad_check(
            |g, p| {
                let y = g.scale(p[0], 3.0);
                Ok(g.sum(y))
            },
            &mut params,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(params[0].data(), &[0.7]);
    }

    #[test]
    fn square_matches_taylor_bound() {
        // d/dw w^2 at 1 is 2; the central difference is exact for a quadratic.
        let mut params = vec![Tensor::scalar(1.0)];
        let r = grad_check(
            |g, p| {
                let y = g.mul(p[0], p[0])?;
                Ok(g.sum(y))
            },
            &mut params,
            1e-3,
        )
        .unwrap();
        assert!(r.max_abs_err < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_nondeterministic_closure() {
        let mut calls = 0.0;
        let mut params = vec![Tensor::scalar(1.0)];
        let err = grad_check(
            |g, p| {
                calls += 1.0;
                let y = g.add_scalar(p[0], calls);
                Ok(g.sum(y))
            },
            &mut params,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }
}

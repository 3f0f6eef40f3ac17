//! Central finite differences, used as an oracle for `Graph::backward`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// `(f(θ+εe) − f(θ−εe)) / 2ε` for every coordinate of every parameter in
/// `params`, frozen or not.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamStore, eps: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = work.value(&name)?.len();
        let shape = work.value(&name)?.shape().to_vec();
        let mut grad = vec![0.0; n];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = work.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * eps);
        }
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// `|a−b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.init_const("theta", &[1], v).unwrap();
        s
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| Ok(p.value("theta")?.data()[0].powi(2)), &one_param(3.0), 1e-4).unwrap();
        assert!((g["theta"].data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_diff_grad(|p| Ok(p.value("theta")?.data()[0].sin()), &one_param(0.0), 1e-4).unwrap();
        assert!((g["theta"].data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_gives_zero() {
        let g = finite_diff_grad(|_| Ok(4.2), &one_param(1.0), 1e-4).unwrap();
        assert_eq!(g["theta"].data(), &[0.0]);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(finite_diff_grad(|_| Ok(0.0), &one_param(1.0), 0.0).is_err());
    }
}

//! Central finite-difference verification of backward rules.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Gradients smaller than this are compared absolutely.
    pub floor: f64,
    /// A second difference of the secant slopes over `x ± 2h` above this
    /// fraction of the slope magnitude marks a non-differentiable point in
    /// the stencil. A missed kink perturbs the central difference by at most
    /// 1.5× this bound, so it must stay below `tol / 1.5`.
    pub kink_ratio: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            tol: 1e-3,
            floor: 1e-4,
            kink_ratio: 5e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct InputCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements sitting on a kink of a piecewise-smooth function; excluded.
    pub kinks: usize,
    /// (element, analytic, numeric) at the largest error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, c| m.max(c.max_rel_err))
    }

    pub fn kinks(&self) -> usize {
        self.inputs.iter().map(|c| c.kinks).sum()
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&tape, &vars)?.value();
    if loss.numel() != 1 {
        return Err(Error::dim("grad_check", "loss element count", 1, loss.numel()));
    }
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    Ok(v)
}

/// Compare the analytic gradient of a scalar function of `inputs` with
/// central differences, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let f0 = loss.value();
    if f0.numel() != 1 || !f0.item().is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let f0 = f0.item();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, an) in analytic.iter().enumerate() {
        let mut check = InputCheck::default();
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let mut at = |d: f64| -> Result<f64> {
                work[i].data_mut()[j] = x + d;
                eval(&f, &work)
            };
            let (fm2, fm, fp, fp2) = (at(-2.0 * cfg.h)?, at(-cfg.h)?, at(cfg.h)?, at(2.0 * cfg.h)?);
            work[i].data_mut()[j] = x;

            let slopes = [(fm - fm2) / cfg.h, (f0 - fm) / cfg.h, (fp - f0) / cfg.h, (fp2 - fp) / cfg.h];
            let bend = (slopes[2] - 2.0 * slopes[1] + slopes[0])
                .abs()
                .max((slopes[3] - 2.0 * slopes[2] + slopes[1]).abs());
            let scale = slopes[1].abs().max(slopes[2].abs()).max(cfg.floor);
            if bend > cfg.kink_ratio * scale {
                check.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = an.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            check.checked += 1;
            if err > check.max_rel_err || check.worst.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst = Some((j, a, numeric));
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        inputs: report,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{nn, ops};

    #[test]
    fn linear_loss_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.37 - 1.0);
        let rep = grad_check(
            |_, v| Ok(ops::sum(ops::scale(v[0], 2.0))),
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed());
        assert!(rep.max_rel_err() < 1e-9);
        assert_eq!(rep.inputs[0].checked, 5);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::new(&[3], vec![0.0, 0.5, -0.7]).unwrap();
        let rep = grad_check(
            |_, v| Ok(ops::sum(nn::leaky_relu(v[0], 0.2))),
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.inputs[0].kinks, 1);
        assert!(rep.passed());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let x = Tensor::new(&[1], vec![-1.0]).unwrap();
        let res = grad_check(|_, v| Ok(ops::sum(ops::log(v[0]))), &[x], &GradCheckConfig::default());
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}

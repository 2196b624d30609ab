//! Analytic-vs-numerical gradient comparison.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f32,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because the ±ε probe crossed a relu or log-clamp kink.
    pub skipped_kinks: usize,
    pub tol: f32,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval<F>(f: &F, x: Tensor) -> Result<(f32, Vec<bool>)>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            lhs: tape.shape(y).to_vec(),
            rhs: vec![1],
        });
    }
    Ok((tape.item(y), tape.kink_signature()))
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`, one coordinate at a time.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32, tol: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let base_sig = tape.kink_signature();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
        skipped_kinks: 0,
        tol,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, sp) = eval(&f, plus)?;
        let (fm, sm) = eval(&f, minus)?;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = ((fp as f64 - fm as f64) / (2.0 * eps as f64)) as f32;
        let a = analytic[i];
        let denom = 1f32.max(a.abs()).max(numeric.abs());
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

fn eval_params<F>(f: &F, store: &ParamStore) -> Result<(f32, Vec<bool>)>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let y = f(&mut tape)?;
    Ok((tape.item(y), tape.kink_signature()))
}

/// Like [`grad_check`], but differentiates a scalar built from the
/// parameters in `store` and checks every parameter coordinate.
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f32, tol: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let all: Vec<ParamId> = store.ids().collect();
    grad_check_param_subset(f, store, &all, eps, tol)
}

/// [`grad_check_params`] restricted to the coordinates of `ids`. Parameters
/// the loss reads through `frozen_param` or `detach` have a defined zero
/// gradient, which finite differences cannot confirm; leave them out.
pub fn grad_check_param_subset<F>(
    f: F,
    store: &ParamStore,
    ids: &[ParamId],
    eps: f32,
    tol: f32,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let y = f(&mut tape)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Shape {
            op: "grad_check_params",
            lhs: tape.shape(y).to_vec(),
            rhs: vec![1],
        });
    }
    tape.backward(y)?;
    let mut analytic: Vec<Vec<f32>> = store
        .ids()
        .map(|id| vec![0.0; store.get(id).len()])
        .collect();
    for (id, g) in tape.param_grads() {
        for (a, b) in analytic[id.index()].iter_mut().zip(g) {
            *a += b;
        }
    }
    let base_sig = tape.kink_signature();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
        skipped_kinks: 0,
        tol,
    };
    let mut work = store.clone();
    let mut flat = 0;
    for &id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let (fp, sp) = eval_params(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let (fm, sm) = eval_params(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
            } else {
                let numeric = ((fp as f64 - fm as f64) / (2.0 * eps as f64)) as f32;
                let a = analytic[id.index()][i];
                let rel = (a - numeric).abs() / 1f32.max(a.abs()).max(numeric.abs());
                report.checked += 1;
                if report.worst_index.is_none() || rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst_index = Some(flat);
                }
            }
            flat += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_composition_passes() {
        let x = Tensor::vector(vec![0.3, -1.2, 0.7]);
        let ok = grad_check(
            |t, x| {
                let s = t.sigmoid(x);
                let sq = t.mul(s, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.checked, 3);
    }

    #[test]
    fn parameter_check_covers_all_coordinates() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::new(vec![2, 2], vec![0.5, -0.3, 0.8, 0.1]).unwrap(),
        );
        let b = store.add("b", Tensor::vector(vec![0.2, -0.1]));
        let r = grad_check_params(
            |t| {
                let x = t.constant(Tensor::vector(vec![1.0, -2.0]));
                let wv = t.param(w);
                let bv = t.param(b);
                let h = t.matmul(x, wv)?;
                let h = t.add(h, bv)?;
                let s = t.sigmoid(h);
                let l = t.log(s);
                Ok(t.sum(l))
            },
            &store,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::vector(vec![0.0004, 1.0]);
        let r = grad_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
        assert!(r.passed());
    }
}

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spd::dot;

pub(crate) struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Jacobi-preconditioned conjugate gradients for `A x = b`.
///
/// Entries where `diag_inv` is zero are frozen at zero; `apply` must leave
/// them zero as well. With `project` set, every iterate stays orthogonal to
/// the constants, which solves consistent singular systems whose kernel is
/// the constant vector.
pub(crate) fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    diag_inv: &[f64],
    b: &[f64],
    project: bool,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = b.len();
    let mut r = b.to_vec();
    if project {
        remove_mean(&mut r);
    }
    let b_norm = dot(&r, &r).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgOutcome { x, iterations: 0, residual: 0.0 });
    }

    let precondition = |r: &[f64], z: &mut [f64]| {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(diag_inv) {
            *zi = ri * di;
        }
        if project {
            remove_mean(z);
        }
    };

    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);

    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Convergence { iterations: it, residual: dot(&r, &r).sqrt() / b_norm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= tol {
            return Ok(finish(x, b, project, &apply, it));
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let out = finish(x, b, project, &apply, max_iter);
    if out.residual <= tol {
        Ok(out)
    } else {
        Err(Error::Convergence { iterations: max_iter, residual: out.residual })
    }
}

fn finish(
    mut x: Vec<f64>,
    b: &[f64],
    project: bool,
    apply: &impl Fn(&[f64], &mut [f64]),
    iterations: usize,
) -> CgOutcome {
    if project {
        remove_mean(&mut x);
    }
    let residual = true_residual(apply, &x, b, project);
    CgOutcome { x, iterations, residual }
}

/// `|b - A x| / |b|`, with `b` projected when the system is singular.
pub(crate) fn true_residual(
    apply: &impl Fn(&[f64], &mut [f64]),
    x: &[f64],
    b: &[f64],
    project: bool,
) -> f64 {
    let mut b = b.to_vec();
    if project {
        remove_mean(&mut b);
    }
    let mut ax = vec![0.0; x.len()];
    apply(x, &mut ax);
    let num: f64 = ax.iter().zip(&b).map(|(a, c)| (c - a) * (c - a)).sum();
    let den = dot(&b, &b);
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Dense Cholesky factor reused across right-hand sides.
pub(crate) struct DenseFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DenseFactor {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        m.cholesky()
            .map(|chol| DenseFactor { chol })
            .ok_or_else(|| Error::Consistency(format!("dense {n}x{n} system is not positive definite")))
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let x = self.chol.solve(&DVector::from_column_slice(b));
        x.iter().copied().collect()
    }
}

//! Matrix-free Krylov solvers and power iteration on flat vectors.
//!
//! All inner products used by the callers are a positive constant times the
//! plain dot product, so the iterations below work with `dot` directly.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KrylovOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `|b - A x| / |b|` from the recurrence.
    pub relative_residual: f64,
    pub converged: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Conjugate gradients for a symmetric positive definite operator.
pub fn cg<F>(mut apply: F, b: &[f64], x0: Option<&[f64]>, rtol: f64, max_iter: usize) -> Result<KrylovOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(KrylovOutcome {
            x: vec![0.0; b.len()],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; b.len()]);
    let mut r = b.to_vec();
    if x.iter().any(|&v| v != 0.0) {
        let ax = apply(&x)?;
        axpy(&mut r, -1.0, &ax);
    }
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut it = 0;
    while it < max_iter && rr.sqrt() > rtol * bnorm {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap.is_nan() || pap <= 0.0 {
            return Err(Error::NotCoercive(pap / dot(&p, &p)));
        }
        let a = rr / pap;
        axpy(&mut x, a, &p);
        axpy(&mut r, -a, &ap);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        it += 1;
    }
    let rel = rr.sqrt() / bnorm;
    Ok(KrylovOutcome {
        x,
        iterations: it,
        relative_residual: rel,
        converged: rel <= rtol,
    })
}

/// Restarted GMRES(m) with modified Gram–Schmidt and Givens rotations.
pub fn gmres<F>(
    mut apply: F,
    b: &[f64],
    x0: Option<&[f64]>,
    rtol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<KrylovOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let bnorm = norm(b);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    if bnorm == 0.0 {
        return Ok(KrylovOutcome {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let m = restart.max(1);
    let mut total = 0;
    let mut rel;
    loop {
        let mut r = b.to_vec();
        if x.iter().any(|&v| v != 0.0) {
            let ax = apply(&x)?;
            axpy(&mut r, -1.0, &ax);
        }
        let beta = norm(&r);
        rel = beta / bnorm;
        if rel <= rtol || total >= max_iter {
            break;
        }
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        v.push(r.iter().map(|ri| ri / beta).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_done = 0;
        for k in 0..m {
            let mut w = apply(&v[k])?;
            total += 1;
            for (j, vj) in v.iter().enumerate() {
                h[j][k] = dot(&w, vj);
                axpy(&mut w, -h[j][k], vj);
            }
            h[k + 1][k] = norm(&w);
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let d = h[k][k].hypot(h[k + 1][k]);
            cs[k] = h[k][k] / d;
            sn[k] = h[k + 1][k] / d;
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_done = k + 1;
            let breakdown = d == 0.0 || w.iter().all(|&wi| wi == 0.0);
            if !breakdown {
                let hn = norm(&w);
                v.push(w.iter().map(|wi| wi / hn).collect());
            }
            if g[k + 1].abs() <= rtol * bnorm || total >= max_iter || breakdown {
                break;
            }
        }
        let mut y = vec![0.0; k_done];
        for i in (0..k_done).rev() {
            let mut s = g[i];
            for j in i + 1..k_done {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(&mut x, *yj, &v[j]);
        }
    }
    Ok(KrylovOutcome {
        x,
        iterations: total,
        relative_residual: rel,
        converged: rel <= rtol,
    })
}

/// Largest eigenvalue of a symmetric positive semidefinite operator via the
/// Rayleigh quotient of power iterates.
pub fn power_iteration<F>(mut apply: F, x0: &[f64], rtol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n0 = norm(x0);
    if n0 == 0.0 {
        return Err(Error::Invalid("power iteration needs a nonzero start".into()));
    }
    let mut x: Vec<f64> = x0.iter().map(|v| v / n0).collect();
    let mut lambda_prev = f64::NAN;
    for _ in 0..max_iter {
        let y = apply(&x)?;
        let lambda = dot(&x, &y);
        let ny = norm(&y);
        if ny == 0.0 {
            return Ok((0.0, x));
        }
        x = y.iter().map(|v| v / ny).collect();
        if (lambda - lambda_prev).abs() <= rtol * lambda.abs() {
            return Ok((lambda, x));
        }
        lambda_prev = lambda;
    }
    Err(Error::PowerIteration(max_iter))
}

//! Dense BFGS with a backtracking (Armijo) line search.
//!
//! Minimizes; callers maximizing a log-likelihood pass its negation. Problem
//! sizes here are a handful to a few dozen parameters, so the inverse Hessian
//! approximation is kept as a full matrix.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when `‖∇f‖∞` falls below this.
    pub gradient_tolerance: f64,
    /// Stop when `|Δf| / max(|f|, 1)` falls below this.
    pub relative_objective_tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Gradient,
    ObjectiveChange,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub reason: StopReason,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<f64>,
}

impl BfgsOutcome {
    pub fn converged(&self) -> bool {
        matches!(self.reason, StopReason::Gradient | StopReason::ObjectiveChange)
    }
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut trace = vec![fx];
    let mut h = identity(n);
    let mut fresh_h = true;

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut p = vec![0.0; n];

    if inf_norm(&g) < opts.gradient_tolerance {
        return BfgsOutcome {
            x,
            value: fx,
            gradient: g,
            iterations: 0,
            reason: StopReason::Gradient,
            trace,
        };
    }

    let mut iter = 0;
    let reason = loop {
        if iter >= opts.max_iterations {
            break StopReason::MaxIterations;
        }
        iter += 1;

        mat_vec_neg(&h, &g, &mut p);
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h = identity(n);
            fresh_h = true;
            p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi = -gi);
            slope = dot(&g, &p);
        }

        // an unscaled identity step can be wildly off; cap its length
        let mut alpha = if fresh_h { (1.0 / inf_norm(&p)).min(1.0) } else { 1.0 };
        let mut f_new = f64::NAN;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] + alpha * p[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + ARMIJO_C1 * alpha * slope {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if fresh_h {
                break StopReason::LineSearchFailed;
            }
            h = identity(n);
            fresh_h = true;
            continue;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * yy.sqrt() {
            if fresh_h {
                let scale = sy / yy;
                h.iter_mut().flatten().for_each(|v| *v *= scale);
                fresh_h = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        let f_old = fx;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        trace.push(fx);

        if inf_norm(&g) < opts.gradient_tolerance {
            break StopReason::Gradient;
        }
        if (f_old - fx).abs() / fx.abs().max(1.0) < opts.relative_objective_tolerance {
            break StopReason::ObjectiveChange;
        }
    };

    BfgsOutcome {
        x,
        value: fx,
        gradient: g,
        iterations: iter,
        reason,
        trace,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec_neg(h: &[Vec<f64>], g: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(h) {
        *o = -dot(row, g);
    }
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`, `ρ = 1 / sᵀy`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = h.iter().map(|row| dot(row, y)).collect();
    let yhy = dot(y, &hy);
    let coef = (1.0 + rho * yhy) * rho;
    for i in 0..n {
        for j in 0..n {
            h[i][j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

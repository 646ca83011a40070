//! Derivative-free and quasi-Newton minimizers used by the OCP solver and the
//! identification stage. Both treat `+inf` objective values as "outside the
//! admissible region": line searches and simplex moves back off from them, so
//! barrier-style objectives keep every iterate strictly feasible.

use rayon::prelude::*;

/// Central finite-difference gradient with relative step `h_rel`.
///
/// Component evaluations are independent and run in parallel. Where one side
/// is non-finite (a probe left the feasible region) the finite side is used
/// one-sided; if both sides fail the component is set to zero.
pub fn fd_gradient<F>(f: &F, x: &[f64], fx: f64, h_rel: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let h = h_rel * x[i].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fp = f(&xp);
            let fm = f(&xm);
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - fx) / h,
                (false, true) => (fx - fm) / h,
                (false, false) => 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iters: 60, grad_tol: 1e-6, step_tol: 1e-11, fd_step: 1e-6 }
    }
}

/// BFGS (inverse-Hessian form) with Armijo backtracking and finite-difference
/// gradients. Requires a finite objective at `x0`.
pub fn bfgs<F>(f: &F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    bfgs_warm(f, x0, opts, None).0
}

/// [`bfgs`] that can reuse an inverse-Hessian estimate from a previous run on
/// a nearby problem (e.g. across barrier stages) and hands the final estimate
/// back.
pub fn bfgs_warm<F>(
    f: &F,
    x0: &[f64],
    opts: &BfgsOptions,
    h_init: Option<Vec<f64>>,
) -> (BfgsResult, Vec<f64>)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut evals = 1usize;
    debug_assert!(fx.is_finite(), "BFGS needs a feasible start");

    // inverse Hessian estimate, flat row-major
    let mut h = h_init.filter(|h| h.len() == n * n).unwrap_or_else(|| identity(n));
    let mut g = fd_gradient(f, &x, fx, opts.fd_step);
    evals += 2 * n;

    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut converged = false;
    let mut iters = 0;

    for _ in 0..opts.max_iters {
        iters += 1;
        if inf_norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }
        let mut d = neg_matvec(&h, &g, n);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n);
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                break; // gradient numerically zero
            }
        }

        // Armijo backtracking; +inf objective values simply fail the test
        let mut alpha = 1.0;
        let mut x_new = Vec::new();
        let mut f_new = f64::INFINITY;
        let mut ok = false;
        while alpha >= 1e-13 {
            x_new = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            f_new = f(&x_new);
            evals += 1;
            if f_new.is_finite() && f_new <= fx + 1e-4 * alpha * slope {
                ok = true;
                break;
            }
            alpha *= 0.5;
        }
        if !ok {
            converged = true; // no descent possible at resolvable step sizes
            break;
        }

        let g_new = fd_gradient(f, &x_new, f_new, opts.fd_step);
        evals += 2 * n;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            bfgs_update(&mut h, &s, &y, sy, n);
        }

        let df = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
        if df.abs() <= opts.step_tol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
    }
    if fx < best_f {
        best_f = fx;
        best_x = x;
    }
    (BfgsResult { x: best_x, fx: best_f, iterations: iters, evals, converged }, h)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn neg_matvec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| -(0..n).map(|j| m[i * n + j] * v[j]).sum::<f64>()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                + rho * rho * yhy * s[i] * s[j]
                + rho * s[i] * s[j];
        }
    }
}

/// Axis-aligned box `lower[i] <= x[i] <= upper[i]`.
#[derive(Debug, Clone)]
pub struct Box9 {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Box9 {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Box9 { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    /// Initial simplex edge as a fraction of the box width per coordinate.
    pub init_scale: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_evals: 2000, f_tol: 1e-12, x_tol: 1e-10, init_scale: 0.05 }
    }
}

/// Nelder-Mead with every trial point projected onto the box. Deterministic;
/// non-finite objective values rank worst, which keeps the simplex inside the
/// region where the objective is defined.
pub fn nelder_mead_box<F>(
    f: &F,
    x0: &[f64],
    bounds: &Box9,
    opts: &NelderMeadOptions,
) -> NelderMeadResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = bounds.dim();
    let cmp = |a: f64, b: f64| a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal);
    let rank = |v: f64| if v.is_nan() { f64::INFINITY } else { v };

    // initial simplex: x0 plus one offset vertex per coordinate
    let mut verts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    bounds.project(&mut start);
    verts.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        let w = bounds.width(i);
        let step = if w > 0.0 { opts.init_scale * w } else { 0.0 };
        v[i] = if v[i] + step <= bounds.upper[i] { v[i] + step } else { v[i] - step };
        bounds.project(&mut v);
        verts.push(v);
    }
    let mut fv: Vec<f64> = verts.iter().map(|v| rank(f(v))).collect();
    let mut evals = n + 1;

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;

    while evals < opts.max_evals {
        // sort ascending by objective
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| cmp(fv[i], fv[j]));
        let verts_s: Vec<Vec<f64>> = order.iter().map(|&i| verts[i].clone()).collect();
        let fv_s: Vec<f64> = order.iter().map(|&i| fv[i]).collect();
        verts = verts_s;
        fv = fv_s;

        let f_best = fv[0];
        let f_worst = fv[n];
        let spread = (f_worst - f_best).abs();
        let x_spread = (0..n)
            .map(|i| {
                verts.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max)
                    - verts.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max);
        if (spread <= opts.f_tol * (1.0 + f_best.abs()) && x_spread <= opts.x_tol)
            || x_spread == 0.0
        {
            converged = true;
            break;
        }

        // centroid of all but the worst vertex
        let centroid: Vec<f64> =
            (0..n).map(|i| verts[..n].iter().map(|v| v[i]).sum::<f64>() / n as f64).collect();

        let make = |coef: f64, toward: &[f64]| {
            let mut p: Vec<f64> =
                (0..n).map(|i| centroid[i] + coef * (toward[i] - centroid[i])).collect();
            bounds.project(&mut p);
            p
        };

        let xr = make(-alpha, &verts[n]);
        let fr = rank(f(&xr));
        evals += 1;

        if fr < fv[0] {
            let xe = make(-gamma, &verts[n]);
            let fe = rank(f(&xe));
            evals += 1;
            if fe < fr {
                verts[n] = xe;
                fv[n] = fe;
            } else {
                verts[n] = xr;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            verts[n] = xr;
            fv[n] = fr;
        } else {
            // contraction (outside if the reflection improved on the worst)
            let (xc, fc) = if fr < fv[n] {
                let p = make(-rho, &verts[n]);
                let v = rank(f(&p));
                (p, v)
            } else {
                let p = make(rho, &verts[n]);
                let v = rank(f(&p));
                (p, v)
            };
            evals += 1;
            if fc < fv[n].min(fr) {
                verts[n] = xc;
                fv[n] = fc;
            } else {
                // shrink towards the best vertex
                for i in 1..=n {
                    let mut v: Vec<f64> = (0..n)
                        .map(|j| verts[0][j] + sigma * (verts[i][j] - verts[0][j]))
                        .collect();
                    bounds.project(&mut v);
                    fv[i] = rank(f(&v));
                    verts[i] = v;
                    evals += 1;
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if cmp(fv[i], fv[best]) == std::cmp::Ordering::Less {
            best = i;
        }
    }
    NelderMeadResult { x: verts[best].clone(), fx: fv[best], evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_solves_quadratic() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2);
        let r = bfgs(&f, &[0.0, 0.0], &BfgsOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 3.0).abs() < 1e-5);
        assert!((r.x[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn bfgs_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = bfgs(&f, &[-1.2, 1.0], &BfgsOptions { max_iters: 300, ..Default::default() });
        assert!((r.x[0] - 1.0).abs() < 1e-3, "{:?}", r.x);
        assert!((r.x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bfgs_backs_off_from_infinite_region() {
        // objective undefined for x > 1; minimum sits at the boundary side
        let f = |x: &[f64]| if x[0] > 1.0 { f64::INFINITY } else { (x[0] - 2.0).powi(2) };
        let r = bfgs(&f, &[0.0], &BfgsOptions::default());
        assert!(r.fx.is_finite());
        assert!(r.x[0] <= 1.0);
        assert!(r.x[0] > 0.9, "should approach the barrier, got {}", r.x[0]);
    }

    #[test]
    fn nelder_mead_respects_box() {
        let f = |x: &[f64]| (x[0] - 5.0).powi(2) + (x[1] - 5.0).powi(2);
        let bounds = Box9::new(vec![0.0, 0.0], vec![1.0, 2.0]);
        let r = nelder_mead_box(&f, &[0.5, 0.5], &bounds, &NelderMeadOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-6);
        assert!((r.x[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn nelder_mead_point_box_returns_point() {
        let f = |x: &[f64]| x[0] * x[0];
        let bounds = Box9::new(vec![0.7], vec![0.7]);
        let r = nelder_mead_box(&f, &[0.7], &bounds, &NelderMeadOptions::default());
        assert_eq!(r.x, vec![0.7]);
        assert_eq!(r.fx, 0.7 * 0.7);
        assert!(r.converged);
    }

    #[test]
    fn nelder_mead_is_deterministic() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let bounds = Box9::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let a = nelder_mead_box(&f, &[-1.0, 1.5], &bounds, &NelderMeadOptions::default());
        let b = nelder_mead_box(&f, &[-1.0, 1.5], &bounds, &NelderMeadOptions::default());
        assert_eq!(a.x, b.x);
        assert_eq!(a.fx, b.fx);
    }

    #[test]
    fn fd_gradient_matches_analytic() {
        let f = |x: &[f64]| x[0].powi(3) + 2.0 * x[0] * x[1];
        let x = [1.3, -0.4];
        let g = fd_gradient(&f, &x, f(&x), 1e-6);
        assert!((g[0] - (3.0 * 1.3 * 1.3 + 2.0 * -0.4)).abs() < 1e-6);
        assert!((g[1] - 2.0 * 1.3).abs() < 1e-7);
    }
}

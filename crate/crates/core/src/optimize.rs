//! Box-constrained limited-memory BFGS.
//!
//! Projected variant: the search direction comes from the two-loop recursion
//! restricted to the free variables (those not pinned at a bound by the
//! gradient), and steps are projected back onto the box with an Armijo
//! backtracking line search along the projected path.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Bounds { lower, upper }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((xi, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*l, *u);
        }
    }

    /// `P(x - g) - x`, the standard first-order optimality measure.
    pub fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((xi, gi), (l, u))| (xi - gi).clamp(*l, *u) - xi)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsbOptions {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the sup-norm of the projected gradient falls below this.
    pub pg_tolerance: f64,
    /// Stop when the relative objective change between iterates falls below this.
    pub f_rel_tolerance: f64,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        LbfgsbOptions {
            memory: 10,
            max_iterations: 1000,
            pg_tolerance: 1e-7,
            f_rel_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pg_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Minimizes `objective` over the box. The closure writes the gradient into
/// its second argument and returns the objective value.
pub fn minimize<F>(mut objective: F, x0: &[f64], bounds: &Bounds, opts: &LbfgsbOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(bounds.lower.len(), n);
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut converged = false;

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    loop {
        let pg_norm = sup_norm(&bounds.projected_gradient(&x, &g));
        if pg_norm < opts.pg_tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;

        // Variables held at a bound by the current gradient do not move.
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lower = x[i] <= bounds.lower[i] && g[i] > 0.0;
                let at_upper = x[i] >= bounds.upper[i] && g[i] < 0.0;
                !(at_lower || at_upper)
            })
            .collect();

        let mut d = two_loop(&g, &free, &history);
        let slope = dot(&d, &g);
        if !(slope < 0.0 && slope.is_finite()) {
            history.clear();
            d = steepest(&g, &free);
        }
        if history.is_empty() {
            // First step (or restart): keep the trial move within unit length.
            let scale = 1.0 / sup_norm(&d).max(1.0);
            d.iter_mut().for_each(|di| *di *= scale);
        }

        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = f;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            bounds.project(&mut x_new);
            let moved: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &moved);
            if decrease >= 0.0 && sup_norm(&moved) == 0.0 {
                break;
            }
            f_new = objective(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * decrease.min(0.0) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }

        if !accepted {
            if history.is_empty() {
                // Steepest descent made no progress; we are as close as the
                // line search can resolve.
                converged = pg_norm < opts.pg_tolerance.sqrt();
                break;
            }
            history.clear();
            continue;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let rel_change = (f - f_new).abs() / f.abs().max(f_new.abs()).max(1.0);
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        f = f_new;
        if rel_change < opts.f_rel_tolerance {
            converged = true;
            break;
        }
    }

    let pg_norm = sup_norm(&bounds.projected_gradient(&x, &g));
    Minimum {
        x,
        f,
        iterations,
        converged,
        pg_norm,
    }
}

fn steepest(g: &[f64], free: &[bool]) -> Vec<f64> {
    g.iter()
        .zip(free)
        .map(|(gi, &f)| if f { -gi } else { 0.0 })
        .collect()
}

fn two_loop(g: &[f64], free: &[bool], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(free)
            .map(|(x, &f)| if f { *x } else { 0.0 })
            .collect()
    };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let s = mask(s);
        let y = mask(y);
        let a = rho * dot(&s, &q);
        for (qi, yi) in q.iter_mut().zip(&y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let yy = dot(y, y);
        if yy > 0.0 {
            let gamma = dot(s, y) / yy;
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let s = mask(s);
        let y = mask(y);
        let b = rho * dot(&y, &q);
        for (qi, si) in q.iter_mut().zip(&s) {
            *qi += (a - b) * si;
        }
    }
    mask(&q).into_iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let bounds = Bounds::new(vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2]);
        let min = minimize(rosenbrock, &[-1.2, 1.0], &bounds, &LbfgsbOptions::default());
        assert!(min.converged);
        assert!((min.x[0] - 1.0).abs() < 1e-5, "{:?}", min.x);
        assert!((min.x[1] - 1.0).abs() < 1e-5, "{:?}", min.x);
    }

    #[test]
    fn active_upper_bound() {
        // Minimum of the unconstrained problem sits at (1, 1); cap x0 at 0.5.
        let bounds = Bounds::new(vec![f64::NEG_INFINITY; 2], vec![0.5, f64::INFINITY]);
        let min = minimize(rosenbrock, &[-1.2, 1.0], &bounds, &LbfgsbOptions::default());
        assert!((min.x[0] - 0.5).abs() < 1e-9);
        assert!((min.x[1] - 0.25).abs() < 1e-5, "{:?}", min.x);
    }

    #[test]
    fn quadratic_with_lower_bounds() {
        // f = sum (x_i - c_i)^2 with c = (-1, 2, -3) and x >= 0.
        let c = [-1.0, 2.0, -3.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..3 {
                g[i] = 2.0 * (x[i] - c[i]);
                v += (x[i] - c[i]).powi(2);
            }
            v
        };
        let bounds = Bounds::new(vec![0.0; 3], vec![f64::INFINITY; 3]);
        let min = minimize(f, &[5.0, 5.0, 5.0], &bounds, &LbfgsbOptions::default());
        assert!(min.converged);
        assert_eq!(min.x[0], 0.0);
        assert!((min.x[1] - 2.0).abs() < 1e-8);
        assert_eq!(min.x[2], 0.0);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let bounds = Bounds::new(vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2]);
        let opts = LbfgsbOptions {
            max_iterations: 2,
            ..Default::default()
        };
        let min = minimize(rosenbrock, &[-1.2, 1.0], &bounds, &opts);
        assert!(!min.converged);
        assert_eq!(min.iterations, 2);
    }
}

//! Limited-memory BFGS with box constraints.
//!
//! Search directions come from the two-loop recursion restricted to the
//! variables that are not held at an active bound. Steps that stay inside
//! the box use a strong-Wolfe line search; steps that would leave it are
//! projected back onto the box and accepted by Armijo backtracking along
//! the projected path. Every accepted iterate is feasible and no accepted
//! step increases the objective.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Box constraints.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Bounds {
    #[default]
    Unbounded,
    Uniform(f64, f64),
    PerVariable(Vec<(f64, f64)>),
}

impl Bounds {
    #[inline]
    fn get(&self, i: usize) -> (f64, f64) {
        match self {
            Bounds::Unbounded => (f64::NEG_INFINITY, f64::INFINITY),
            Bounds::Uniform(lo, hi) => (*lo, *hi),
            Bounds::PerVariable(b) => b[i],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let bad = |lo: f64, hi: f64| lo.is_nan() || hi.is_nan() || lo > hi;
        match self {
            Bounds::Unbounded => Ok(()),
            Bounds::Uniform(lo, hi) if bad(*lo, *hi) => Err(Error::InvalidArgument(format!(
                "lower bound {lo} above upper bound {hi}"
            ))),
            Bounds::Uniform(..) => Ok(()),
            Bounds::PerVariable(b) => {
                if b.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "{} bounds for {n} variables",
                        b.len()
                    )));
                }
                match b.iter().position(|&(lo, hi)| bad(lo, hi)) {
                    Some(i) => Err(Error::InvalidArgument(format!(
                        "inconsistent bounds at {i}"
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        if matches!(self, Bounds::Unbounded) {
            return;
        }
        for (i, v) in x.iter_mut().enumerate() {
            let (lo, hi) = self.get(i);
            *v = v.clamp(lo, hi);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Number of curvature pairs kept; 0 gives projected gradient descent.
    pub history_size: usize,
    pub max_iterations: usize,
    /// Stop when the projected gradient's infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction of max(|f|, 1). Zero disables the test.
    pub function_tolerance: f64,
    pub bounds: Bounds,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            history_size: 10,
            max_iterations: 100,
            gradient_tolerance: 1e-5,
            function_tolerance: 0.0,
            bounds: Bounds::Unbounded,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_steps: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Tolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Clone, Debug)]
pub struct OptimizationReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective at the start and after every accepted step.
    pub values: Vec<f64>,
}

/// Something that can be minimized: returns the value and gradient at `x`.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Minimizer<'a, O> {
    objective: &'a mut O,
    cfg: &'a OptimizerConfig,
    evaluations: usize,
}

impl<O: Objective> Minimizer<'_, O> {
    fn eval(&mut self, x: Vec<f64>) -> Result<Point> {
        self.evaluations += 1;
        let (f, g) = self.objective.evaluate(&x)?;
        if g.len() != x.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries for {} variables",
                g.len(),
                x.len()
            )));
        }
        // non-finite trial points are rejected by the line search
        let f = if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            f
        } else {
            f64::INFINITY
        };
        Ok(Point { x, f, g })
    }

    /// Variables free to move: not pinned at a bound by the gradient.
    fn free_mask(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| {
                let (lo, hi) = self.cfg.bounds.get(i);
                !((xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0))
            })
            .collect()
    }

    /// Largest step along `d` that stays feasible.
    fn max_feasible_step(&self, x: &[f64], d: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for (i, (&xi, &di)) in x.iter().zip(d).enumerate() {
            let (lo, hi) = self.cfg.bounds.get(i);
            if di > 0.0 && hi.is_finite() {
                alpha = alpha.min((hi - xi) / di);
            } else if di < 0.0 && lo.is_finite() {
                alpha = alpha.min((lo - xi) / di);
            }
        }
        alpha.max(0.0)
    }

    fn trial(&mut self, cur: &Point, d: &[f64], alpha: f64) -> Result<Point> {
        let mut x: Vec<f64> = cur.x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        self.cfg.bounds.project(&mut x);
        self.eval(x)
    }

    /// Strong-Wolfe search on an unconstrained segment (0, cap].
    fn wolfe(&mut self, cur: &Point, d: &[f64], cap: f64) -> Result<Option<Point>> {
        let (c1, c2) = (self.cfg.c1, self.cfg.c2);
        let dphi0 = dot(&cur.g, d);
        let mut budget = self.cfg.max_line_search_steps;
        let mut best: Option<Point> = None;
        let armijo = |alpha: f64, f: f64| f <= cur.f + c1 * alpha * dphi0;
        let keep = |best: &mut Option<Point>, p: Point| {
            if p.f < cur.f && best.as_ref().is_none_or(|b| p.f < b.f) {
                *best = Some(p);
            }
        };

        let mut lo = (0.0, cur.f, dphi0);
        let mut alpha = 1.0f64.min(cap);
        let mut hi: Option<(f64, f64, f64)> = None;
        let mut first = true;
        // bracketing phase
        while hi.is_none() {
            if budget == 0 {
                return Ok(best);
            }
            budget -= 1;
            let p = self.trial(cur, d, alpha)?;
            let dphi = dot(&p.g, d);
            if !armijo(alpha, p.f) || (!first && p.f >= lo.1) {
                hi = Some((alpha, p.f, dphi));
                keep(&mut best, p);
                break;
            }
            if dphi.abs() <= -c2 * dphi0 {
                return Ok(Some(p));
            }
            if dphi >= 0.0 {
                hi = Some(lo);
                lo = (alpha, p.f, dphi);
                keep(&mut best, p);
                break;
            }
            if alpha >= cap {
                // sufficient decrease at the edge of the segment
                return Ok(Some(p));
            }
            lo = (alpha, p.f, dphi);
            keep(&mut best, p);
            alpha = (2.0 * alpha).min(cap);
            first = false;
        }
        // zoom phase
        let mut hi = hi.expect("bracketed");
        while budget > 0 {
            budget -= 1;
            let (a_lo, f_lo, g_lo) = lo;
            let (a_hi, f_hi, _) = hi;
            // minimizer of the quadratic through (a_lo, f_lo, g_lo) and (a_hi, f_hi)
            let span = a_hi - a_lo;
            let denom = 2.0 * (f_hi - f_lo - g_lo * span);
            let mut a = if denom > 0.0 {
                a_lo - g_lo * span * span / denom
            } else {
                a_lo + 0.5 * span
            };
            let (l, h) = if a_lo < a_hi {
                (a_lo, a_hi)
            } else {
                (a_hi, a_lo)
            };
            let margin = 0.1 * (h - l);
            if !(a > l + margin && a < h - margin) {
                a = 0.5 * (a_lo + a_hi);
            }
            let p = self.trial(cur, d, a)?;
            let dphi = dot(&p.g, d);
            if !armijo(a, p.f) || p.f >= f_lo {
                hi = (a, p.f, dphi);
                keep(&mut best, p);
            } else {
                if dphi.abs() <= -c2 * dphi0 {
                    return Ok(Some(p));
                }
                if dphi * (a_hi - a_lo) >= 0.0 {
                    hi = lo;
                }
                lo = (a, p.f, dphi);
                keep(&mut best, p);
            }
            if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(1e-300) {
                break;
            }
        }
        // settle for the best point that satisfied sufficient decrease
        Ok(best.filter(|p| {
            let step: Vec<f64> = p.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
            p.f <= cur.f + c1 * dot(&cur.g, &step)
        }))
    }

    /// Armijo backtracking along the projected path P(x + αd).
    fn projected_backtracking(&mut self, cur: &Point, d: &[f64]) -> Result<Option<Point>> {
        let mut alpha = 1.0;
        for _ in 0..self.cfg.max_line_search_steps {
            let p = self.trial(cur, d, alpha)?;
            let step: Vec<f64> = p.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
            let decrease = dot(&cur.g, &step);
            if decrease < 0.0 && p.f <= cur.f + self.cfg.c1 * decrease {
                return Ok(Some(p));
            }
            alpha *= 0.5;
        }
        Ok(None)
    }

    fn line_search(&mut self, cur: &Point, d: &[f64]) -> Result<Option<Point>> {
        let cap = self.max_feasible_step(&cur.x, d);
        if cap >= 1.0 {
            self.wolfe(cur, d, cap.min(1e10))
        } else {
            self.projected_backtracking(cur, d)
        }
    }
}

/// Two-loop recursion: approximates −H·q with the stored pairs.
fn two_loop(q: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, gamma: f64) -> Vec<f64> {
    let mut r = q.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &r);
        r.iter_mut().zip(y).for_each(|(ri, yi)| *ri -= a * yi);
        alphas.push(a);
    }
    r.iter_mut().for_each(|v| *v *= gamma);
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &r);
        r.iter_mut().zip(s).for_each(|(ri, si)| *ri += (a - b) * si);
    }
    r.iter_mut().for_each(|v| *v = -*v);
    r
}

/// Minimizes `objective` from `x0` (projected onto the bounds first).
pub fn minimize<O: Objective>(
    objective: &mut O,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> Result<OptimizationReport> {
    cfg.bounds.validate(x0.len())?;
    if !(cfg.c1 > 0.0 && cfg.c1 < cfg.c2 && cfg.c2 < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "line search constants need 0 < c1 < c2 < 1, got {} and {}",
            cfg.c1, cfg.c2
        )));
    }
    let mut m = Minimizer {
        objective,
        cfg,
        evaluations: 0,
    };
    let mut x = x0.to_vec();
    cfg.bounds.project(&mut x);
    let mut cur = m.eval(x)?;
    if !cur.f.is_finite() {
        return Err(Error::NonFinite);
    }
    let initial_value = cur.f;
    let mut values = vec![cur.f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut gamma: Option<f64> = None;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_iterations {
        let free = m.free_mask(&cur.x, &cur.g);
        let pg_norm = cur
            .g
            .iter()
            .zip(&free)
            .filter(|(_, &f)| f)
            .fold(0.0f64, |acc, (g, _)| acc.max(g.abs()));
        if pg_norm <= cfg.gradient_tolerance {
            termination = Termination::Tolerance;
            break;
        }
        let q: Vec<f64> = cur
            .g
            .iter()
            .zip(&free)
            .map(|(&g, &f)| if f { g } else { 0.0 })
            .collect();
        let steepest_scale =
            || gamma.unwrap_or_else(|| 1.0 / dot(&q, &q).sqrt().max(f64::MIN_POSITIVE));
        let mut d = two_loop(&q, &history, steepest_scale());
        d.iter_mut().zip(&free).for_each(|(v, &f)| {
            if !f {
                *v = 0.0
            }
        });
        if dot(&d, &cur.g) >= 0.0 {
            history.clear();
            d = q.iter().map(|v| -v * steepest_scale()).collect();
        }
        let mut next = m.line_search(&cur, &d)?;
        if next.is_none() && !history.is_empty() {
            // retry from steepest descent with a fresh model
            history.clear();
            d = q.iter().map(|v| -v * steepest_scale()).collect();
            next = m.line_search(&cur, &d)?;
        }
        let Some(next) = next.filter(|p| p.f <= cur.f) else {
            termination = Termination::LineSearchFailure;
            break;
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 {
            gamma = Some(sy / dot(&y, &y));
            if cfg.history_size > 0 {
                if history.len() == cfg.history_size {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
        }
        let previous = cur.f;
        cur = next;
        values.push(cur.f);
        iterations += 1;
        if cfg.function_tolerance > 0.0
            && previous - cur.f <= cfg.function_tolerance * previous.abs().max(1.0)
        {
            termination = Termination::Tolerance;
            break;
        }
    }
    Ok(OptimizationReport {
        value: cur.f,
        x: cur.x,
        initial_value,
        iterations,
        evaluations: m.evaluations,
        termination,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((f, g))
    }

    fn nonincreasing(v: &[f64]) -> bool {
        v.windows(2).all(|w| w[1] <= w[0])
    }

    #[test]
    fn quadratic_converges_quickly() {
        let c = [3.0, -1.0, 0.5, 7.0];
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let g: Vec<f64> = x.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect();
            Ok((x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum(), g))
        };
        let cfg = OptimizerConfig {
            gradient_tolerance: 1e-10,
            ..Default::default()
        };
        let r = minimize(&mut f, &[0.0, 0.0, 0.0, 0.0], &cfg).unwrap();
        assert!(r.iterations <= 5, "{} iterations", r.iterations);
        for (a, b) in r.x.iter().zip(&c) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(nonincreasing(&r.values));
    }

    #[test]
    fn active_upper_bound() {
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok(((x[0] - 2.0).powi(2), vec![2.0 * (x[0] - 2.0)]))
        };
        let cfg = OptimizerConfig {
            bounds: Bounds::Uniform(f64::NEG_INFINITY, 1.0),
            ..Default::default()
        };
        let r = minimize(&mut f, &[-3.0], &cfg).unwrap();
        assert_eq!(r.x[0], 1.0);
        assert_eq!(r.termination, Termination::Tolerance);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let cfg = OptimizerConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-9,
            ..Default::default()
        };
        let r = minimize(&mut rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(
            (r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6,
            "{:?}",
            r
        );
        assert!(r.iterations <= 200);
        assert!(nonincreasing(&r.values));
    }

    #[test]
    fn projected_gradient_descent_without_history() {
        let cfg = OptimizerConfig {
            history_size: 0,
            max_iterations: 500,
            bounds: Bounds::Uniform(-0.5, 0.8),
            ..Default::default()
        };
        let r = minimize(&mut rosenbrock, &[-0.2, 0.7], &cfg).unwrap();
        assert!(nonincreasing(&r.values));
        assert!(r.x.iter().all(|&v| (-0.5..=0.8).contains(&v)));
        assert!(r.value < r.initial_value);
    }

    #[test]
    fn starting_point_is_projected_and_checked() {
        let mut nan = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(matches!(
            minimize(&mut nan, &[0.0], &OptimizerConfig::default()),
            Err(Error::NonFinite)
        ));
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0] * x[0], vec![2.0 * x[0]])) };
        let cfg = OptimizerConfig {
            bounds: Bounds::PerVariable(vec![(2.0, 5.0)]),
            ..Default::default()
        };
        let r = minimize(&mut f, &[9.0], &cfg).unwrap();
        assert_eq!(r.x[0], 2.0);
        assert_eq!(r.initial_value, 25.0);
        let bad = OptimizerConfig {
            bounds: Bounds::Uniform(1.0, 0.0),
            ..Default::default()
        };
        assert!(minimize(&mut f, &[0.0], &bad).is_err());
    }
}

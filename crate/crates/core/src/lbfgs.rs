//! Limited-memory BFGS minimisation with a strong-Wolfe line search
//! (bracketing phase followed by cubic-interpolation zoom).

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the gradient ∞-norm drops below this.
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    /// No acceptable step even after discarding the curvature memory.
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
    /// Objective value after each accepted iteration, starting with the
    /// initial point.
    pub values: Vec<f64>,
    /// Gradient ∞-norm at the same points as `values`.
    pub gradient_norms: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
    gradient: Vec<f64>,
}

/// Minimises `objective`, which returns the value and gradient at a point.
pub fn minimize<F>(mut objective: F, x0: Vec<f64>, config: &LbfgsConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evaluations = 1;
    let (mut value, mut gradient) = objective(&x0)?;
    let mut x = x0;
    let mut values = vec![value];
    let mut gradient_norms = vec![inf_norm(&gradient)];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut iterations = 0;
    let mut status = Status::MaxIterations;

    while iterations < config.max_iterations {
        if inf_norm(&gradient) < config.gradient_tolerance {
            status = Status::Converged;
            break;
        }
        let mut direction = two_loop(&gradient, &memory);
        let mut slope = dot(&direction, &gradient);
        if slope >= 0.0 {
            memory.clear();
            direction = gradient.iter().map(|g| -g).collect();
            slope = -dot(&gradient, &gradient);
        }
        let initial_step = if memory.is_empty() {
            1.0 / dot(&gradient, &gradient).sqrt()
        } else {
            1.0
        };

        let mut search = |alpha: f64| -> Result<Point> {
            evaluations += 1;
            let trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + alpha * di).collect();
            let (v, g) = objective(&trial)?;
            Ok(Point {
                alpha,
                value: v,
                slope: dot(&g, &direction),
                gradient: g,
            })
        };
        let mut accepted = line_search(&mut search, value, slope, initial_step, config)?;

        if accepted.is_none() && !memory.is_empty() {
            // retry once along steepest descent with fresh curvature information
            memory.clear();
            direction = gradient.iter().map(|g| -g).collect();
            slope = -dot(&gradient, &gradient);
            let step = 1.0 / slope.abs().sqrt();
            let mut search = |alpha: f64| -> Result<Point> {
                evaluations += 1;
                let trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + alpha * di).collect();
                let (v, g) = objective(&trial)?;
                Ok(Point {
                    alpha,
                    value: v,
                    slope: dot(&g, &direction),
                    gradient: g,
                })
            };
            accepted = line_search(&mut search, value, slope, step, config)?;
        }
        let Some(point) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = direction.iter().map(|d| point.alpha * d).collect();
        let y: Vec<f64> = point.gradient.iter().zip(&gradient).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        value = point.value;
        gradient = point.gradient;
        iterations += 1;
        values.push(value);
        gradient_norms.push(inf_norm(&gradient));

        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if memory.len() == config.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
    }
    if status == Status::MaxIterations && inf_norm(&gradient) < config.gradient_tolerance {
        status = Status::Converged;
    }
    Ok(Minimum {
        x,
        value,
        gradient,
        iterations,
        evaluations,
        status,
        values,
        gradient_norms,
    })
}

fn two_loop(gradient: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = gradient.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Returns a step satisfying the strong Wolfe conditions, or the best
/// sufficient-decrease point found when the zoom runs out of evaluations.
fn line_search<S>(
    phi: &mut S,
    f0: f64,
    slope0: f64,
    initial: f64,
    config: &LbfgsConfig,
) -> Result<Option<Point>>
where
    S: FnMut(f64) -> Result<Point>,
{
    let armijo = |p: &Point| p.value <= f0 + config.c1 * p.alpha * slope0;
    let curvature = |p: &Point| p.slope.abs() <= -config.c2 * slope0;

    let mut prev = Point {
        alpha: 0.0,
        value: f0,
        slope: slope0,
        gradient: Vec::new(),
    };
    let mut alpha = initial;
    let mut evals = 0;
    while evals < config.max_line_search {
        let cur = phi(alpha)?;
        evals += 1;
        if !cur.value.is_finite() {
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        }
        if !armijo(&cur) || (evals > 1 && cur.value >= prev.value) {
            return zoom(phi, prev, cur, f0, slope0, config, config.max_line_search - evals);
        }
        if curvature(&cur) {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            return zoom(phi, cur, prev, f0, slope0, config, config.max_line_search - evals);
        }
        let next = extrapolate(&prev, &cur);
        prev = cur;
        alpha = next;
    }
    Ok(None)
}

fn extrapolate(prev: &Point, cur: &Point) -> f64 {
    let lo = cur.alpha + 1.1 * (cur.alpha - prev.alpha);
    let hi = cur.alpha + 10.0 * (cur.alpha - prev.alpha);
    cubic_minimizer(prev, cur).map_or(2.0 * cur.alpha, |a| a.clamp(lo, hi))
}

/// Minimiser of the cubic matching values and slopes at two points.
fn cubic_minimizer(a: &Point, b: &Point) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = disc.sqrt().copysign(b.alpha - a.alpha);
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    t.is_finite().then_some(t)
}

fn zoom<S>(
    phi: &mut S,
    mut lo: Point,
    mut hi: Point,
    f0: f64,
    slope0: f64,
    config: &LbfgsConfig,
    budget: usize,
) -> Result<Option<Point>>
where
    S: FnMut(f64) -> Result<Point>,
{
    for _ in 0..budget {
        let (left, right) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let width = right - left;
        if width <= 1e-14 * right.abs().max(1e-300) {
            break;
        }
        let margin = 0.1 * width;
        let alpha = cubic_minimizer(&lo, &hi)
            .filter(|a| *a > left + margin && *a < right - margin)
            .unwrap_or(0.5 * (left + right));
        let cur = phi(alpha)?;
        if !cur.value.is_finite() || cur.value > f0 + config.c1 * alpha * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -config.c2 * slope0 {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // lo always satisfies sufficient decrease; accept it if it moved
    Ok((lo.alpha > 0.0 && !lo.gradient.is_empty()).then_some(lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut f = 0.0;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * x[i] * a - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        Ok((f, g))
    }

    #[test]
    fn minimises_rosenbrock() {
        let cfg = LbfgsConfig {
            gradient_tolerance: 1e-8,
            ..Default::default()
        };
        let m = minimize(rosenbrock, vec![-1.2, 1.0, -0.5, 0.8], &cfg).unwrap();
        assert_eq!(m.status, Status::Converged);
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-6), "{:?}", m.x);
    }

    #[test]
    fn values_never_increase() {
        let cfg = LbfgsConfig::default();
        let m = minimize(rosenbrock, vec![-1.5, 2.0], &cfg).unwrap();
        assert!(m.values.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(m.values.len(), m.iterations + 1);
    }

    #[test]
    fn quadratic_converges_quickly() {
        let diag = [1.0, 10.0, 100.0, 0.5];
        let quad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let f = x.iter().zip(diag).map(|(v, d)| 0.5 * d * v * v).sum();
            Ok((f, x.iter().zip(diag).map(|(v, d)| d * v).collect()))
        };
        let m = minimize(quad, vec![1.0; 4], &LbfgsConfig::default()).unwrap();
        assert_eq!(m.status, Status::Converged);
        assert!(m.iterations < 30);
    }

    #[test]
    fn starts_converged() {
        let m = minimize(|x: &[f64]| Ok((0.0, vec![0.0; x.len()])), vec![3.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(m.status, Status::Converged);
        assert_eq!(m.iterations, 0);
        assert_eq!(m.x, vec![3.0]);
    }

    #[test]
    fn iteration_cap_is_respected() {
        let cfg = LbfgsConfig {
            max_iterations: 3,
            gradient_tolerance: 0.0,
            ..Default::default()
        };
        let m = minimize(rosenbrock, vec![-1.2, 1.0], &cfg).unwrap();
        assert!(m.iterations <= 3);
        assert_ne!(m.status, Status::Converged);
    }
}

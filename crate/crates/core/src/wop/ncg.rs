use serde::{Deserialize, Serialize};

use super::TapObjective;
use crate::error::{Error, Result};
use crate::iqcore::{epsilon_of, FirFilter};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn step_filter(phi: &FirFilter, p: &[f64], alpha: f64) -> Result<FirFilter> {
    let theta: Vec<f64> = phi.to_reals().iter().zip(p).map(|(t, d)| t + alpha * d).collect();
    FirFilter::from_reals(&theta)
}

/// Step sizes are expressed as distances in tap space (`alpha * |p|`), so
/// the same settings work whatever the gradient's scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearchOptions {
    pub max_iter: usize,
    /// Length of the first trial step.
    pub initial_step_len: f64,
    /// Caps `alpha` at `max_step_len / |p|`.
    pub max_step_len: f64,
    /// Stop once the directional derivative falls to this fraction of its
    /// value at `alpha = 0`.
    pub rel_tol: f64,
    /// Halvings tried when no evaluated point improved on `alpha = 0`.
    pub backtrack_steps: usize,
}

impl Default for LineSearchOptions {
    fn default() -> Self {
        LineSearchOptions { max_iter: 10, initial_step_len: 0.05, max_step_len: 1.0, rel_tol: 1e-3, backtrack_steps: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcgOptions {
    pub num_taps: usize,
    pub t_max: usize,
    /// Stop when the gradient's Euclidean norm is at or below this.
    pub grad_tol: f64,
    /// Bound on `epsilon_of`; `None` leaves the filter unconstrained.
    pub eps_max: Option<f64>,
    pub n_bins: usize,
    /// Fletcher-Reeves ratios above this restart the direction.
    pub restart_beta: f64,
    pub line_search: LineSearchOptions,
}

impl Default for NcgOptions {
    fn default() -> Self {
        NcgOptions {
            num_taps: 10,
            t_max: 30,
            grad_tol: 1e-8,
            eps_max: Some(0.2),
            n_bins: 64,
            restart_beta: 1e3,
            line_search: LineSearchOptions::default(),
        }
    }
}

impl NcgOptions {
    pub fn validate(&self) -> Result<()> {
        if self.num_taps == 0 {
            return Err(Error::Config("need at least one tap".into()));
        }
        if let Some(e) = self.eps_max {
            if !(e >= 0.0) {
                return Err(Error::Config(format!("eps_max {e} must be non-negative")));
            }
        }
        let ls = &self.line_search;
        if !(ls.initial_step_len > 0.0) || !(ls.max_step_len >= ls.initial_step_len) || ls.max_iter == 0 {
            return Err(Error::Config("line search needs 0 < initial_step_len <= max_step_len and max_iter > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state between iterations. A fresh state has a zero direction
/// and no previous gradient, so the first step uses `beta = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NcgState {
    pub phi: FirFilter,
    /// Previous search direction, as `2M` reals.
    pub p: Vec<f64>,
    /// `|g|^2` of the previous iteration; `None` forces `beta = 0`.
    pub prev_grad_sqnorm: Option<f64>,
    pub t: usize,
    pub t_max: usize,
    pub converged: bool,
}

impl NcgState {
    pub fn new(phi: FirFilter, t_max: usize) -> Self {
        let p = vec![0.0; 2 * phi.len()];
        NcgState { phi, p, prev_grad_sqnorm: None, t: 0, t_max, converged: false }
    }
}

/// What one iteration did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub gradient: Vec<f64>,
    pub direction: Vec<f64>,
    pub beta: f64,
    pub alpha: f64,
    pub value_before: f64,
    pub value_after: f64,
    pub projected: bool,
    pub restarted: bool,
}

/// Maximizes `F(phi + alpha p)` over `alpha >= 0` by secant iterations on
/// the directional derivative, starting from `alpha = 0` where `F = f0` and
/// the derivative is `d0`. Returns the best evaluated `(alpha, F)`; when no
/// trial point beats `f0`, halves the first trial step until one does, and
/// otherwise returns `(0, f0)`.
pub fn line_search(
    obj: &impl TapObjective,
    phi: &FirFilter,
    p: &[f64],
    f0: f64,
    d0: f64,
    opts: &LineSearchOptions,
) -> Result<(f64, f64)> {
    let pn = norm(p);
    if !(d0 > 0.0) || !(pn > 0.0) {
        return Ok((0.0, f0));
    }
    let alpha_max = opts.max_step_len / pn;
    let first = (opts.initial_step_len / pn).min(alpha_max);
    let mut best = (0.0, f0);
    let (mut a_prev, mut d_prev) = (0.0, d0);
    let mut a = first;
    for _ in 0..opts.max_iter {
        let (f, g) = obj.value_and_gradient(&step_filter(phi, p, a)?)?;
        let d = dot(&g.to_reals(), p);
        if f > best.1 {
            best = (a, f);
        }
        if d.abs() <= opts.rel_tol * d0 || (a >= alpha_max && d > 0.0) {
            break;
        }
        let denom = d - d_prev;
        let secant = if denom != 0.0 { a - d * (a - a_prev) / denom } else { f64::NAN };
        let next = if secant.is_finite() && secant > 0.0 {
            secant
        } else if d > 0.0 {
            2.0 * a
        } else {
            0.5 * a
        };
        a_prev = a;
        d_prev = d;
        a = next.min(alpha_max);
        if a == a_prev {
            break;
        }
    }
    if best.0 == 0.0 {
        let mut a = first;
        for _ in 0..opts.backtrack_steps {
            a *= 0.5;
            let f = obj.value(&step_filter(phi, p, a)?)?;
            if f > f0 {
                return Ok((a, f));
            }
        }
    }
    Ok(best)
}

/// Scales `Phi(w) - 1` uniformly toward zero on every bin so that
/// `epsilon_of(result) <= eps_max`. The tap count is unchanged. Returns
/// whether the filter had to be scaled.
pub fn project_to_epsilon_ball(phi: &FirFilter, eps_max: f64, n_bins: usize) -> (FirFilter, bool) {
    let eps = epsilon_of(phi, n_bins);
    if eps <= eps_max {
        return (phi.clone(), false);
    }
    let mut scaled = phi.scaled_toward_identity(eps_max / eps);
    if epsilon_of(&scaled, n_bins) > eps_max {
        scaled = phi.scaled_toward_identity(eps_max / eps * (1.0 - 1e-12));
    }
    (scaled, true)
}

/// One ascent iteration from `state`.
pub fn ncg_step(state: &NcgState, obj: &impl TapObjective, opts: &NcgOptions) -> Result<(NcgState, StepInfo)> {
    if state.t >= state.t_max {
        return Err(Error::invalid(format!("iteration budget of {} exhausted", state.t_max)));
    }
    let (f0, grad) = obj.value_and_gradient(&state.phi)?;
    let g = grad.to_reals();
    let gn2 = grad.sqnorm();
    let mut next = state.clone();
    next.t += 1;
    if gn2.sqrt() <= opts.grad_tol {
        next.converged = true;
        let info = StepInfo {
            gradient: g,
            direction: vec![0.0; state.p.len()],
            beta: 0.0,
            alpha: 0.0,
            value_before: f0,
            value_after: f0,
            projected: false,
            restarted: false,
        };
        return Ok((next, info));
    }

    let mut beta = match state.prev_grad_sqnorm {
        Some(prev) if prev > 0.0 => gn2 / prev,
        _ => 0.0,
    };
    let mut restarted = false;
    if beta > opts.restart_beta {
        beta = 0.0;
        restarted = true;
    }
    let mut p: Vec<f64> = g.iter().zip(&state.p).map(|(gi, pi)| gi + beta * pi).collect();
    if dot(&p, &g) <= 0.0 {
        p = g.clone();
        beta = 0.0;
        restarted = true;
    }

    let (line_alpha, line_value) = line_search(obj, &state.phi, &p, f0, dot(&p, &g), &opts.line_search)?;
    let (mut alpha, mut value) = (line_alpha, line_value);
    let mut phi = step_filter(&state.phi, &p, alpha)?;
    let mut projected = false;
    if let Some(eps_max) = opts.eps_max {
        // shrink the step until its projection does not lose objective
        let mut accepted = false;
        let mut a = line_alpha;
        for _ in 0..=opts.line_search.backtrack_steps {
            let (proj, active) = project_to_epsilon_ball(&step_filter(&state.phi, &p, a)?, eps_max, opts.n_bins);
            let v = if active || a != line_alpha { obj.value(&proj)? } else { line_value };
            if v >= f0 {
                (alpha, value, phi, projected, accepted) = (a, v, proj, active, true);
                break;
            }
            a *= 0.5;
        }
        if !accepted {
            (alpha, value, phi) = (0.0, f0, state.phi.clone());
        }
    }

    if alpha == 0.0 && beta == 0.0 {
        // a steepest-ascent step made no progress; repeating it cannot either
        next.converged = true;
    }
    next.phi = phi;
    next.p = p.clone();
    // after an active projection the old direction no longer describes the
    // path taken, so the next iteration starts over from the gradient
    next.prev_grad_sqnorm = if projected { None } else { Some(gn2) };
    let info = StepInfo { gradient: g, direction: p, beta, alpha, value_before: f0, value_after: value, projected, restarted };
    Ok((next, info))
}

/// Result of [`optimize_fir`].
#[derive(Debug, Clone, PartialEq)]
pub struct FirOptimization {
    pub filter: FirFilter,
    /// Objective at the start followed by its value after every iteration.
    pub trace: Vec<f64>,
    pub steps: Vec<StepInfo>,
    pub converged: bool,
}

impl FirOptimization {
    pub fn objective_before(&self) -> f64 {
        self.trace[0]
    }

    pub fn objective_after(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Runs up to `t_max` NCG iterations from `warm_start` (zero-extended to
/// `num_taps`), or from the identity filter.
pub fn optimize_fir(obj: &impl TapObjective, opts: &NcgOptions, warm_start: Option<&FirFilter>) -> Result<FirOptimization> {
    opts.validate()?;
    let start = match warm_start {
        Some(w) if w.len() > opts.num_taps => {
            return Err(Error::invalid(format!("warm start has {} taps, more than {}", w.len(), opts.num_taps)));
        }
        Some(w) => w.zero_extended(opts.num_taps),
        None => FirFilter::identity(opts.num_taps),
    };
    let start = match opts.eps_max {
        Some(e) => project_to_epsilon_ball(&start, e, opts.n_bins).0,
        None => start,
    };
    let mut state = NcgState::new(start, opts.t_max);
    let mut trace = vec![obj.value(&state.phi)?];
    let mut steps = Vec::new();
    while state.t < state.t_max && !state.converged {
        let (next, info) = ncg_step(&state, obj, opts)?;
        if !next.converged {
            trace.push(info.value_after);
        }
        steps.push(info);
        state = next;
    }
    Ok(FirOptimization { filter: state.phi, trace, steps, converged: state.converged })
}

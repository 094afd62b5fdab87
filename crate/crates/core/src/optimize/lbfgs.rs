use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::squared_residual;
use crate::error::{Error, Result};
use crate::io::{MarkerTrack, WeightTrack};
use crate::rig::{MarkerSet, Rig};

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;
const CURVATURE_FLOOR: f64 = 1e-12;
const ACTIVE_EPS: f64 = 1e-3;
const DIAG_FLOOR: f64 = 1e-8;

fn default_max_iters() -> usize {
    100
}

fn default_grad_tol() -> f64 {
    1e-9
}

fn default_history() -> usize {
    10
}

/// Which channels, frames and markers a fine-tuning pass touches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSpec {
    pub channel_subset: Vec<usize>,
    /// Inclusive `[first, last]` frame range.
    pub frame_range: [usize; 2],
    /// Markers entering the objective; all markers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker_subset: Option<Vec<usize>>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_history")]
    pub history_size: usize,
}

impl FinetuneSpec {
    /// Defaults for everything except the channels and frames.
    pub fn new(channel_subset: Vec<usize>, frame_range: [usize; 2]) -> Self {
        FinetuneSpec {
            channel_subset,
            frame_range,
            marker_subset: None,
            max_iters: default_max_iters(),
            grad_tol: default_grad_tol(),
            history_size: default_history(),
        }
    }

    pub fn validate(&self, rig: &Rig, n_frames: usize) -> Result<()> {
        if self.channel_subset.is_empty() {
            return Err(Error::Empty("finetune channel subset".into()));
        }
        let d = rig.n_channels();
        let mut seen = BTreeSet::new();
        for (i, &k) in self.channel_subset.iter().enumerate() {
            if k >= d {
                return Err(Error::Index(format!("channel_subset[{i}] = {k}, rig has {d} channels")));
            }
            if !seen.insert(k) {
                return Err(Error::validation(
                    format!("/channel_subset/{i}"),
                    format!("channel {k} listed twice"),
                ));
            }
        }
        let [f0, f1] = self.frame_range;
        if f0 > f1 {
            return Err(Error::validation("/frame_range", format!("start {f0} after end {f1}")));
        }
        if f1 >= n_frames {
            return Err(Error::Index(format!("frame {f1} of a {n_frames}-frame track")));
        }
        if let Some(markers) = &self.marker_subset {
            if markers.is_empty() {
                return Err(Error::Empty("finetune marker subset".into()));
            }
            let n = rig.n_markers();
            if let Some(&m) = markers.iter().find(|&&m| m >= n) {
                return Err(Error::Index(format!("marker {m} of {n}")));
            }
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::validation("/grad_tol", "must be non-negative"));
        }
        if self.history_size == 0 {
            return Err(Error::validation("/history_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Convergence record of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub weights: WeightTrack,
    pub stats: Vec<FrameStats>,
}

/// Fine-tune `w_init` over the selected channels and frames; see
/// [`finetune_with_stats`].
pub fn finetune(rig: &Rig, track: &MarkerTrack, w_init: &WeightTrack, spec: &FinetuneSpec) -> Result<WeightTrack> {
    finetune_with_stats(rig, track, w_init, spec).map(|o| o.weights)
}

/// Per-frame projected L-BFGS on the nonlinear rig, restricted to
/// `spec.channel_subset`. Every other weight is copied from `w_init`
/// untouched, and a step is only taken when it decreases the objective, so
/// no frame ends worse than it started.
pub fn finetune_with_stats(
    rig: &Rig,
    track: &MarkerTrack,
    w_init: &WeightTrack,
    spec: &FinetuneSpec,
) -> Result<FinetuneOutcome> {
    w_init.validate()?;
    if w_init.dim() != rig.n_channels() {
        return Err(Error::Dimension(format!(
            "weight track has {} channels, rig has {}",
            w_init.dim(),
            rig.n_channels()
        )));
    }
    if track.n() != rig.n_markers() {
        return Err(Error::Dimension(format!(
            "marker track has {} markers, rig has {}",
            track.n(),
            rig.n_markers()
        )));
    }
    spec.validate(rig, track.len().min(w_init.len()))?;
    let [f0, f1] = spec.frame_range;
    for f in f0..=f1 {
        for &k in &spec.channel_subset {
            let v = w_init.frames[f][k];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(
                    format!("/frames/{f}/{k}"),
                    format!("initial weight {v} outside [0, 1]"),
                ));
            }
        }
    }

    let solved: Vec<(Vec<f64>, FrameStats)> = (f0..=f1)
        .into_par_iter()
        .map(|f| solve_frame(rig, track.frame(f), &w_init.frames[f], spec, f))
        .collect::<Result<_>>()?;

    let mut weights = w_init.clone();
    let mut stats = Vec::with_capacity(solved.len());
    for (f, (w, s)) in (f0..=f1).zip(solved) {
        weights.frames[f] = w;
        stats.push(s);
    }
    Ok(FinetuneOutcome { weights, stats })
}

struct FrameProblem<'a> {
    rig: &'a Rig,
    target: &'a MarkerSet,
    channels: &'a [usize],
    markers: Option<&'a [usize]>,
}

impl FrameProblem<'_> {
    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(squared_residual(&self.rig.evaluate(w)?, self.target, self.markers))
    }

    /// Objective, its gradient with respect to the selected channels, and the
    /// diagonal of the Gauss-Newton Hessian `2 JᵀJ`.
    fn value_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (g, jac) = self.rig.evaluate_jacobian(w, self.channels)?;
        let residual: Vec<f64> = g.iter().zip(self.target.iter()).map(|(a, b)| a - b).collect();
        let rows: Vec<usize> = match self.markers {
            None => (0..residual.len()).collect(),
            Some(m) => m.iter().flat_map(|&i| 3 * i..3 * i + 3).collect(),
        };
        let value = rows.iter().map(|&r| residual[r] * residual[r]).sum();
        let grad = (0..self.channels.len())
            .map(|c| 2.0 * rows.iter().map(|&r| jac[[r, c]] * residual[r]).sum::<f64>())
            .collect();
        let diag = (0..self.channels.len())
            .map(|c| 2.0 * rows.iter().map(|&r| jac[[r, c]].powi(2)).sum::<f64>())
            .collect();
        Ok((value, grad, diag))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Variables within `eps` of a bound whose gradient pushes outward are
/// treated as active and sent straight to that bound; the quasi-Newton step
/// only acts on the rest.
fn active_set(x: &[f64], grad: &[f64], eps: f64) -> Vec<Option<f64>> {
    x.iter()
        .zip(grad)
        .map(|(&v, &g)| {
            if v <= eps && g > 0.0 {
                Some(0.0)
            } else if v >= 1.0 - eps && g < 0.0 {
                Some(1.0)
            } else {
                None
            }
        })
        .collect()
}

/// Two-loop recursion on the free variables, seeded with a diagonal Hessian
/// estimate so channels of very different marker reach are scaled alike.
fn lbfgs_direction(
    x: &[f64],
    grad: &[f64],
    diag: &[f64],
    active: &[Option<f64>],
    memory: &VecDeque<(Vec<f64>, Vec<f64>)>,
) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(active).map(|(&x, a)| if a.is_some() { 0.0 } else { x }).collect()
    };
    let mut q = mask(grad);
    let pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = memory
        .iter()
        .filter_map(|(s, y)| {
            let (s, y) = (mask(s), mask(y));
            let sy = dot(&s, &y);
            (sy > CURVATURE_FLOOR).then(|| (s, y, 1.0 / sy))
        })
        .collect();
    let mut alpha = vec![0.0; pairs.len()];
    for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
        alpha[i] = rho * dot(s, &q);
        for (qj, yj) in q.iter_mut().zip(y) {
            *qj -= alpha[i] * yj;
        }
    }
    let scaled: Vec<f64> = diag.iter().map(|&d| d.max(DIAG_FLOOR)).collect();
    // Rescale the diagonal so it agrees with the latest curvature pair along
    // its own step, keeping the seed consistent with observed curvature.
    let gamma = match pairs.last() {
        Some((s, y, _)) => {
            let sds: f64 = s.iter().zip(&scaled).map(|(v, d)| v * v * d).sum();
            if sds > 0.0 {
                dot(s, y) / sds
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (v, d) in q.iter_mut().zip(&scaled) {
        *v /= gamma * d;
    }
    for (i, (s, y, rho)) in pairs.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for (qj, sj) in q.iter_mut().zip(s) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q.iter()
        .zip(active)
        .zip(x)
        .map(|((&v, a), &xi)| match a {
            Some(bound) => bound - xi,
            None => -v,
        })
        .collect()
}

fn solve_frame(
    rig: &Rig,
    target: &MarkerSet,
    w0: &[f64],
    spec: &FinetuneSpec,
    frame: usize,
) -> Result<(Vec<f64>, FrameStats)> {
    let problem = FrameProblem {
        rig,
        target,
        channels: &spec.channel_subset,
        markers: spec.marker_subset.as_deref(),
    };
    let mut w = w0.to_vec();
    let mut x: Vec<f64> = spec.channel_subset.iter().map(|&k| w[k]).collect();
    let (mut f, mut grad, mut diag) = problem.value_and_gradient(&w)?;
    let initial_objective = f;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(spec.history_size);
    let mut iterations = 0;

    let with_subset = |full: &mut Vec<f64>, sub: &[f64]| {
        for (&k, &v) in spec.channel_subset.iter().zip(sub) {
            full[k] = v;
        }
    };

    while iterations < spec.max_iters {
        let pg: f64 = x
            .iter()
            .zip(&grad)
            .map(|(&v, &g)| ((v - g).clamp(0.0, 1.0) - v).powi(2))
            .sum::<f64>()
            .sqrt();
        if pg < spec.grad_tol {
            break;
        }
        let active = active_set(&x, &grad, pg.min(ACTIVE_EPS));
        let mut dir = lbfgs_direction(&x, &grad, &diag, &active, &memory);
        if dot(&grad, &dir) >= 0.0 {
            memory.clear();
            dir = lbfgs_direction(&x, &grad, &diag, &active, &memory);
            if dot(&grad, &dir) >= 0.0 {
                break;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(v, d)| (v + step * d).clamp(0.0, 1.0)).collect();
            if trial == x {
                break;
            }
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let mut w_trial = w.clone();
            with_subset(&mut w_trial, &trial);
            let f_trial = problem.value(&w_trial)?;
            if f_trial <= f + ARMIJO_C * dot(&grad, &moved) {
                accepted = Some((trial, moved, w_trial));
                break;
            }
            step *= SHRINK;
        }
        let Some((trial, moved, w_trial)) = accepted else {
            break;
        };
        let (f_new, grad_new, diag_new) = problem.value_and_gradient(&w_trial)?;
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        if dot(&moved, &y) > CURVATURE_FLOOR {
            if memory.len() == spec.history_size {
                memory.pop_front();
            }
            memory.push_back((moved, y));
        }
        let decrease = f - f_new;
        x = trial;
        w = w_trial;
        f = f_new;
        grad = grad_new;
        diag = diag_new;
        iterations += 1;
        if decrease <= f64::EPSILON * f.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok((
        w,
        FrameStats {
            frame,
            initial_objective,
            final_objective: f,
            iterations,
        },
    ))
}

//! Matching solvers: per-frame box-constrained least squares on the linear
//! rig, projected L-BFGS fine-tuning on the nonlinear rig, and a grid search
//! used as a test oracle.

mod brute;
mod lbfgs;
mod qp;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::rig::{MarkerSet, Rig};

pub use brute::brute_force_match;
pub use lbfgs::{finetune, finetune_with_stats, FinetuneOutcome, FinetuneSpec, FrameStats};
pub use qp::{largest_eigenvalue, qp_match};

/// Sum of squared marker residuals `|g(w) - x|^2` over `marker_subset`
/// (all markers when `None`).
pub fn objective(rig: &Rig, w: &[f64], x: &MarkerSet, marker_subset: Option<&[usize]>) -> Result<f64> {
    let g = rig.evaluate(w)?;
    if x.n() != g.n() {
        return Err(Error::Dimension(format!(
            "target has {} markers, rig has {}",
            x.n(),
            g.n()
        )));
    }
    Ok(squared_residual(&g, x, marker_subset))
}

pub(crate) fn squared_residual(g: &[f64], x: &[f64], marker_subset: Option<&[usize]>) -> f64 {
    match marker_subset {
        None => g.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(),
        Some(idx) => idx
            .iter()
            .flat_map(|&m| 3 * m..3 * m + 3)
            .map(|r| (g[r] - x[r]) * (g[r] - x[r]))
            .sum(),
    }
}

/// Linear matching problem `min |b0 + B w - x|^2` s.t. `lo <= w <= hi`.
#[derive(Clone, Debug)]
pub struct MatchProblem {
    /// `3n x D` delta basis.
    pub basis: Array2<f64>,
    pub neutral: Vec<f64>,
    pub target: Vec<f64>,
    pub marker_mask: Option<Vec<usize>>,
    pub bounds: Vec<(f64, f64)>,
}

impl MatchProblem {
    /// Problem over the rig's linear basis (in-betweens and correctives
    /// ignored) with `[0, 1]` bounds.
    pub fn from_rig(rig: &Rig, target: &MarkerSet, marker_mask: Option<Vec<usize>>) -> Self {
        let rows = 3 * rig.n_markers();
        let basis = Array2::from_shape_fn((rows, rig.n_channels()), |(r, k)| rig.channels[k].delta[r]);
        MatchProblem {
            basis,
            neutral: rig.neutral.to_vec(),
            target: target.to_vec(),
            marker_mask,
            bounds: vec![(0.0, 1.0); rig.n_channels()],
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.basis.nrows();
        if self.neutral.len() != rows || self.target.len() != rows {
            return Err(Error::Dimension(format!(
                "basis has {rows} rows, neutral {}, target {}",
                self.neutral.len(),
                self.target.len()
            )));
        }
        if self.bounds.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "{} bounds for {} channels",
                self.bounds.len(),
                self.dim()
            )));
        }
        for (k, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo <= hi) || lo < 0.0 || hi > 1.0 {
                return Err(Error::validation(
                    format!("/bounds/{k}"),
                    format!("[{lo}, {hi}] is not a sub-interval of [0, 1]"),
                ));
            }
        }
        let finite = self.basis.iter().chain(&self.neutral).chain(&self.target).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("match problem input".into()));
        }
        if let Some(mask) = &self.marker_mask {
            if let Some(&m) = mask.iter().find(|&&m| 3 * m + 2 >= rows) {
                return Err(Error::Index(format!("marker {m} in mask")));
            }
        }
        Ok(())
    }

    /// Reduced normal-equation form: `f(w) = w'Hw + 2 q'w + c`.
    pub(crate) fn quadratic(&self) -> Quadratic {
        let rows: Vec<usize> = match &self.marker_mask {
            None => (0..self.basis.nrows()).collect(),
            Some(mask) => mask.iter().flat_map(|&m| 3 * m..3 * m + 3).collect(),
        };
        let b = self.basis.select(ndarray::Axis(0), &rows);
        let offset: Array1<f64> = rows.iter().map(|&r| self.neutral[r] - self.target[r]).collect();
        Quadratic {
            h: b.t().dot(&b),
            q: b.t().dot(&offset),
            c: offset.dot(&offset),
        }
    }

    pub fn project(&self, w: &mut [f64]) {
        for (v, &(lo, hi)) in w.iter_mut().zip(&self.bounds) {
            *v = v.clamp(lo, hi);
        }
    }

    /// Objective at `w` computed directly from the residual.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let g: Vec<f64> = self
            .basis
            .dot(&ndarray::ArrayView1::from(w))
            .iter()
            .zip(&self.neutral)
            .map(|(bw, b0)| bw + b0)
            .collect();
        squared_residual(&g, &self.target, self.marker_mask.as_deref())
    }
}

pub(crate) struct Quadratic {
    pub h: Array2<f64>,
    pub q: Array1<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn value(&self, w: &[f64]) -> f64 {
        let w = ndarray::ArrayView1::from(w);
        (w.dot(&self.h.dot(&w)) + 2.0 * self.q.dot(&w) + self.c).max(0.0)
    }

    /// Half gradient `H w + q`.
    pub fn half_gradient(&self, w: &[f64]) -> Array1<f64> {
        self.h.dot(&ndarray::ArrayView1::from(w)) + &self.q
    }
}

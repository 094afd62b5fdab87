use ndarray::{Array1, Array2};

use super::MatchProblem;
use crate::error::Result;
use crate::rig::{clamp_weights, WeightVector};

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration.
pub fn largest_eigenvalue(h: &Array2<f64>, iters: usize) -> f64 {
    let d = h.nrows();
    if d == 0 {
        return 0.0;
    }
    // deterministic, non-degenerate start
    let mut v: Array1<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let hv = h.dot(&v);
        let norm = hv.dot(&hv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&hv) / v.dot(&v);
        v = hv / norm;
    }
    lambda.max(0.0)
}

fn projected_gradient_norm(p: &MatchProblem, w: &[f64], half_grad: &Array1<f64>) -> f64 {
    w.iter()
        .zip(half_grad)
        .zip(&p.bounds)
        .map(|((&wi, &g), &(lo, hi))| {
            let step = (wi - 2.0 * g).clamp(lo, hi) - wi;
            step * step
        })
        .sum::<f64>()
        .sqrt()
}

/// Accelerated projected gradient on the box-constrained least-squares
/// problem. Steps are `1 / L` with `L` the largest eigenvalue of `B'B`;
/// momentum restarts whenever the objective would increase, so the returned
/// objective never exceeds the objective at the projected zero vector.
///
/// Stops when the projected gradient norm drops below `tol` or after
/// `max_iters` iterations.
pub fn qp_match(p: &MatchProblem, tol: f64, max_iters: usize) -> Result<(WeightVector, f64)> {
    p.validate()?;
    let quad = p.quadratic();
    let d = p.dim();
    let mut w = vec![0.0; d];
    p.project(&mut w);
    // power iteration converges from below; pad so 1/L stays a descent step
    let lipschitz = largest_eigenvalue(&quad.h, 200) * 1.01;
    if lipschitz == 0.0 || d == 0 {
        let f = p.objective(&w);
        return Ok((clamp_weights(&w)?, f));
    }
    let mut f_w = quad.value(&w);
    let mut y = w.clone();
    let mut t = 1.0f64;
    for _ in 0..max_iters {
        let g_w = quad.half_gradient(&w);
        if projected_gradient_norm(p, &w, &g_w) < tol {
            break;
        }
        let g_y = quad.half_gradient(&y);
        let mut next: Vec<f64> = y.iter().zip(&g_y).map(|(yi, gi)| yi - gi / lipschitz).collect();
        p.project(&mut next);
        let f_next = quad.value(&next);
        if f_next > f_w {
            // restart momentum from the current iterate
            t = 1.0;
            y.clone_from(&w);
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = next
            .iter()
            .zip(&w)
            .map(|(n, o)| n + beta * (n - o))
            .collect();
        w = next;
        f_w = f_next;
        t = t_next;
    }
    let f = p.objective(&w);
    Ok((clamp_weights(&w)?, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_channel(scale: f64) -> MatchProblem {
        let basis = Array2::from_shape_vec((6, 1), vec![0.0, 1.0, 0.0, 0.5, 0.0, -0.5]).unwrap();
        let neutral = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let target: Vec<f64> = neutral
            .iter()
            .zip(basis.column(0))
            .map(|(b0, b)| b0 + scale * b)
            .collect();
        MatchProblem {
            basis,
            neutral,
            target,
            marker_mask: None,
            bounds: vec![(0.0, 1.0)],
        }
    }

    #[test]
    fn neutral_target_gives_zero() {
        let (w, f) = qp_match(&one_channel(0.0), 1e-12, 1000).unwrap();
        assert_eq!(&*w, &[0.0]);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn interior_optimum() {
        let (w, f) = qp_match(&one_channel(0.5), 1e-12, 1000).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-6, "{w:?}");
        assert!(f < 1e-12);
    }

    #[test]
    fn upper_bound_active() {
        let (w, _) = qp_match(&one_channel(2.0), 1e-12, 1000).unwrap();
        assert_eq!(&*w, &[1.0]);
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let h = Array2::from_diag(&ndarray::arr1(&[3.0, 1.0, 0.5]));
        assert!((largest_eigenvalue(&h, 200) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_target_rejected() {
        let mut p = one_channel(0.5);
        p.target[0] = f64::NAN;
        assert!(qp_match(&p, 1e-9, 10).is_err());
    }
}

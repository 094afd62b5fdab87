use super::MatchProblem;
use crate::error::{Error, Result};
use crate::rig::{clamp_weights, WeightVector};

fn axis(lo: f64, hi: f64, resolution: f64) -> Vec<f64> {
    let steps = ((hi - lo) / resolution + 1e-9).floor() as usize;
    let mut values: Vec<f64> = (0..=steps).map(|k| (lo + k as f64 * resolution).min(hi)).collect();
    if values.last().is_some_and(|&v| v < hi) {
        values.push(hi);
    }
    values
}

/// Exhaustive grid search over the bounds at step `resolution`; the upper
/// bound is always part of the grid. Only for `D <= 3`. Ties resolve to the
/// first grid point in lexicographic order.
pub fn brute_force_match(p: &MatchProblem, resolution: f64) -> Result<(WeightVector, f64)> {
    p.validate()?;
    let d = p.dim();
    if d > 3 {
        return Err(Error::Dimension(format!("grid search supports at most 3 channels, got {d}")));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::validation("/resolution", "must be positive and finite"));
    }
    let quad = p.quadratic();
    let axes: Vec<Vec<f64>> = p.bounds.iter().map(|&(lo, hi)| axis(lo, hi, resolution)).collect();
    let mut best = (vec![0.0; d], f64::INFINITY);
    let mut index = vec![0usize; d];
    let mut w = vec![0.0; d];
    loop {
        for k in 0..d {
            w[k] = axes[k][index[k]];
        }
        let f = quad.value(&w);
        if f < best.1 {
            best = (w.clone(), f);
        }
        // odometer increment, last axis fastest
        let mut k = d;
        loop {
            if k == 0 {
                let f = p.objective(&best.0);
                return Ok((clamp_weights(&best.0)?, f));
            }
            k -= 1;
            index[k] += 1;
            if index[k] < axes[k].len() {
                break;
            }
            index[k] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn grid_includes_upper_bound() {
        assert_eq!(axis(0.0, 1.0, 0.3), vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        assert_eq!(axis(0.0, 1.0, 0.5), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn finds_grid_optimum() {
        let basis = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let p = MatchProblem {
            basis,
            neutral: vec![0.0; 3],
            target: vec![0.25, 0.75, 0.0],
            marker_mask: None,
            bounds: vec![(0.0, 1.0); 2],
        };
        let (w, f) = brute_force_match(&p, 0.25).unwrap();
        assert_eq!(&*w, &[0.25, 0.75]);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn rejects_high_dimension() {
        let p = MatchProblem {
            basis: Array2::zeros((3, 4)),
            neutral: vec![0.0; 3],
            target: vec![0.0; 3],
            marker_mask: None,
            bounds: vec![(0.0, 1.0); 4],
        };
        assert!(brute_force_match(&p, 0.1).is_err());
    }
}

//! Graph features over marker subsets: pairwise distances, pairwise unit
//! directions and the delta from the neutral pose.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rig::{MarkerSet, Rig};

/// Pairs closer than this produce a zero direction vector.
pub const DIRECTION_EPSILON: f64 = 1e-9;

/// Which feature blocks are concatenated, always in dist, dir, delta order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FeatureVariant {
    pub dist: bool,
    pub dir: bool,
    pub delta: bool,
}

impl FeatureVariant {
    pub const DIST: Self = Self::new(true, false, false);
    pub const DIR: Self = Self::new(false, true, false);
    pub const DELTA: Self = Self::new(false, false, true);
    pub const DIST_DELTA: Self = Self::new(true, false, true);
    pub const DIST_DIR: Self = Self::new(true, true, false);
    pub const DIR_DELTA: Self = Self::new(false, true, true);
    pub const DIST_DIR_DELTA: Self = Self::new(true, true, true);

    pub const ALL: [Self; 7] = [
        Self::DIST,
        Self::DIR,
        Self::DELTA,
        Self::DIST_DELTA,
        Self::DIST_DIR,
        Self::DIR_DELTA,
        Self::DIST_DIR_DELTA,
    ];

    const fn new(dist: bool, dir: bool, delta: bool) -> Self {
        FeatureVariant { dist, dir, delta }
    }
}

impl fmt::Display for FeatureVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.dist, "dist"), (self.dir, "dir"), (self.delta, "delta")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for FeatureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::parse("variant", format!("unknown feature variant `{s}`")))
    }
}

impl From<FeatureVariant> for String {
    fn from(v: FeatureVariant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for FeatureVariant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

pub fn feature_dim(variant: FeatureVariant, m: usize) -> usize {
    let mut d = 0;
    if variant.dist {
        d += m * m;
    }
    if variant.dir {
        d += 3 * m * m;
    }
    if variant.delta {
        d += 3 * m;
    }
    d
}

/// `m^2` distances over ordered pairs, row-major.
pub fn pairwise_distance(markers: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    push_distances(markers, &mut out);
    out
}

/// `3 m^2` unit directions `(m_i - m_j) / |m_i - m_j|`, same pair order as
/// [`pairwise_distance`].
pub fn pairwise_direction(markers: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    push_directions(markers, &mut out);
    out
}

pub fn delta_pose(markers: &[f64], neutral: &[f64]) -> Result<Vec<f64>> {
    if markers.len() != neutral.len() {
        return Err(Error::Dimension(format!(
            "pose has {} coordinates, neutral has {}",
            markers.len(),
            neutral.len()
        )));
    }
    Ok(markers.iter().zip(neutral).map(|(x, x0)| x - x0).collect())
}

fn diff(markers: &[f64], i: usize, j: usize) -> [f64; 3] {
    [
        markers[3 * i] - markers[3 * j],
        markers[3 * i + 1] - markers[3 * j + 1],
        markers[3 * i + 2] - markers[3 * j + 2],
    ]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn push_distances(markers: &[f64], out: &mut Vec<f64>) {
    let m = markers.len() / 3;
    for i in 0..m {
        for j in 0..m {
            out.push(norm(diff(markers, i, j)));
        }
    }
}

fn push_directions(markers: &[f64], out: &mut Vec<f64>) {
    let m = markers.len() / 3;
    for i in 0..m {
        for j in 0..m {
            let v = diff(markers, i, j);
            let d = norm(v);
            if d < DIRECTION_EPSILON {
                out.extend_from_slice(&[0.0; 3]);
            } else {
                out.extend(v.iter().map(|c| c / d));
            }
        }
    }
}

/// Feature vector of an already-selected marker subset.
pub fn assemble(variant: FeatureVariant, markers: &[f64], neutral: &[f64]) -> Result<Vec<f64>> {
    let m = markers.len() / 3;
    let mut out = Vec::with_capacity(feature_dim(variant, m));
    if variant.dist {
        push_distances(markers, &mut out);
    }
    if variant.dir {
        push_directions(markers, &mut out);
    }
    if variant.delta {
        out.extend(delta_pose(markers, neutral)?);
    }
    Ok(out)
}

/// Marker indices a region's features are computed from: the region's
/// markers plus the nose bridge if it is missing.
pub fn region_markers(rig: &Rig, region: &str) -> Result<Vec<usize>> {
    let mut idx = rig.region(region)?.markers.clone();
    if !idx.contains(&rig.nose_bridge_index) {
        idx.push(rig.nose_bridge_index);
    }
    Ok(idx)
}

/// Features of `markers` for one face region.
pub fn extract(
    markers: &MarkerSet,
    neutral: &MarkerSet,
    region: &str,
    variant: FeatureVariant,
    rig: &Rig,
) -> Result<Vec<f64>> {
    let idx = region_markers(rig, region)?;
    if markers.n() != rig.n_markers() || neutral.n() != rig.n_markers() {
        return Err(Error::Dimension(format!(
            "pose has {} markers, neutral {}, rig {}",
            markers.n(),
            neutral.n(),
            rig.n_markers()
        )));
    }
    assemble(variant, &markers.subset(&idx), &neutral.subset(&idx))
}

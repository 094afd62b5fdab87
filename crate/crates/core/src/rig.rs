//! Nonlinear blendshape rig evaluated at sparse marker positions.
//!
//! The rig is the delta formulation `g(w) = b0 + sum_k w_k (b_k - b0)`
//! extended with in-between shapes (piecewise-linear per channel) and
//! pairwise corrective shapes scaled by `w_i * w_j`. Evaluation order is
//! fixed: base deltas in channel order, then correctives in document order.

use std::collections::BTreeMap;
use std::ops::Deref;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical face regions, in solve order (jaw first).
pub const REGION_NAMES: [&str; 7] = [
    "jaw",
    "upper-face",
    "lower-face",
    "lips",
    "cheek",
    "eye-lids",
    "eyeballs",
];

/// Flattened marker coordinates `[x1, y1, z1, ..., xn, yn, zn]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerSet(Vec<f64>);

impl MarkerSet {
    pub fn from_flat(coords: Vec<f64>) -> Result<Self> {
        if coords.len() % 3 != 0 {
            return Err(Error::Dimension(format!(
                "marker coordinate count {} is not a multiple of 3",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("marker coordinate {i}")));
        }
        Ok(MarkerSet(coords))
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        Self::from_flat(points.iter().flatten().copied().collect())
    }

    pub fn n(&self) -> usize {
        self.0.len() / 3
    }

    pub fn marker(&self, i: usize) -> [f64; 3] {
        [self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2]]
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        self.0.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Copy of the markers at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> MarkerSet {
        MarkerSet(indices.iter().flat_map(|&i| self.marker(i)).collect())
    }
}

impl Deref for MarkerSet {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Blendshape weights, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn zeros(d: usize) -> Self {
        WeightVector(vec![0.0; d])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Clamp every weight to `[0, 1]`. Non-finite entries are rejected.
pub fn clamp_weights(raw: &[f64]) -> Result<WeightVector> {
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_finite() {
                Ok(v.clamp(0.0, 1.0))
            } else {
                Err(Error::NonFinite(format!("weight {i} is {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(WeightVector)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inbetween {
    pub t: f64,
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub delta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inbetweens: Vec<Inbetween>,
}

impl Channel {
    /// Segment `(t_lo, d_lo, t_hi, d_hi)` of the piecewise-linear curve that
    /// owns weight `w`. Knots belong to the segment on their right, except
    /// `w = 1` which belongs to the last segment. `None` deltas stand for zero.
    fn segment(&self, w: f64) -> (f64, Option<&[f64]>, f64, &[f64]) {
        let mut t_lo = 0.0;
        let mut d_lo: Option<&[f64]> = None;
        for ib in &self.inbetweens {
            if w < ib.t {
                return (t_lo, d_lo, ib.t, &ib.delta);
            }
            t_lo = ib.t;
            d_lo = Some(&ib.delta);
        }
        (t_lo, d_lo, 1.0, &self.delta)
    }

    /// Adds the channel's contribution at weight `w` into `out`.
    fn accumulate(&self, w: f64, out: &mut [f64]) {
        if self.inbetweens.is_empty() {
            for (o, d) in out.iter_mut().zip(&self.delta) {
                *o += w * d;
            }
            return;
        }
        if w >= 1.0 {
            for (o, d) in out.iter_mut().zip(&self.delta) {
                *o += d;
            }
            return;
        }
        let (t_lo, d_lo, t_hi, d_hi) = self.segment(w);
        let s = (w - t_lo) / (t_hi - t_lo);
        match d_lo {
            None => {
                for (o, d) in out.iter_mut().zip(d_hi) {
                    *o += s * d;
                }
            }
            Some(d_lo) => {
                for ((o, lo), hi) in out.iter_mut().zip(d_lo).zip(d_hi) {
                    *o += lo + s * (hi - lo);
                }
            }
        }
    }

    /// Derivative of the channel contribution with respect to its weight.
    fn slope(&self, w: f64, out: &mut [f64]) {
        if self.inbetweens.is_empty() {
            out.copy_from_slice(&self.delta);
            return;
        }
        let w = w.min(1.0);
        let (t_lo, d_lo, t_hi, d_hi) = if w >= 1.0 {
            // last segment
            self.segment(self.inbetweens.last().map_or(0.0, |ib| ib.t))
        } else {
            self.segment(w)
        };
        let inv = 1.0 / (t_hi - t_lo);
        match d_lo {
            None => {
                for (o, d) in out.iter_mut().zip(d_hi) {
                    *o = d * inv;
                }
            }
            Some(d_lo) => {
                for ((o, lo), hi) in out.iter_mut().zip(d_lo).zip(d_hi) {
                    *o = (hi - lo) * inv;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corrective {
    pub i: usize,
    pub j: usize,
    pub delta: Vec<f64>,
}

/// Marker and channel subsets owned by one face region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub markers: Vec<usize>,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub name: String,
    pub neutral: MarkerSet,
    pub nose_bridge_index: usize,
    pub channels: Vec<Channel>,
    pub correctives: Vec<Corrective>,
    pub regions: BTreeMap<String, Region>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigDocument {
    name: String,
    markers: Vec<[f64; 3]>,
    nose_bridge_index: usize,
    channels: Vec<Channel>,
    #[serde(default)]
    correctives: Vec<Corrective>,
    regions: BTreeMap<String, Region>,
}

/// Parse and validate a rig JSON document.
pub fn load_rig(document: &str) -> Result<Rig> {
    let doc: RigDocument = crate::io::from_json_str(document)?;
    let rig = Rig {
        name: doc.name,
        neutral: MarkerSet::from_points(&doc.markers)
            .map_err(|e| Error::validation("/markers", e.to_string()))?,
        nose_bridge_index: doc.nose_bridge_index,
        channels: doc.channels,
        correctives: doc.correctives,
        regions: doc.regions,
    };
    rig.validate()?;
    Ok(rig)
}

impl Rig {
    pub fn n_markers(&self) -> usize {
        self.neutral.n()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn region(&self, name: &str) -> Result<&Region> {
        self.regions
            .get(name)
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    pub fn to_json(&self) -> String {
        let doc = RigDocument {
            name: self.name.clone(),
            markers: self.neutral.points(),
            nose_bridge_index: self.nose_bridge_index,
            channels: self.channels.clone(),
            correctives: self.correctives.clone(),
            regions: self.regions.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("rig serializes")
    }

    /// Check every structural invariant of the rig.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_markers();
        let dim = 3 * n;
        if n == 0 {
            return Err(Error::validation("/markers", "rig has no markers"));
        }
        if self.nose_bridge_index >= n {
            return Err(Error::validation(
                "/nose_bridge_index",
                format!("{} out of range for {n} markers", self.nose_bridge_index),
            ));
        }
        for (k, ch) in self.channels.iter().enumerate() {
            let path = format!("/channels/{k}");
            if ch.delta.len() != dim {
                return Err(Error::validation(
                    format!("{path}/delta"),
                    format!(
                        "channel `{}` delta has {} components, expected {dim}",
                        ch.name,
                        ch.delta.len()
                    ),
                ));
            }
            check_finite(&ch.delta, &format!("{path}/delta"))?;
            let mut prev = 0.0;
            for (m, ib) in ch.inbetweens.iter().enumerate() {
                let ipath = format!("{path}/inbetweens/{m}");
                if !(ib.t > prev && ib.t < 1.0) {
                    return Err(Error::validation(
                        format!("{ipath}/t"),
                        format!(
                            "channel `{}` knot {} must be strictly increasing inside (0, 1)",
                            ch.name, ib.t
                        ),
                    ));
                }
                if ib.delta.len() != dim {
                    return Err(Error::validation(
                        format!("{ipath}/delta"),
                        format!(
                            "channel `{}` in-between has {} components, expected {dim}",
                            ch.name,
                            ib.delta.len()
                        ),
                    ));
                }
                check_finite(&ib.delta, &format!("{ipath}/delta"))?;
                prev = ib.t;
            }
        }
        let d = self.n_channels();
        for (c, corr) in self.correctives.iter().enumerate() {
            let path = format!("/correctives/{c}");
            if corr.i >= d || corr.j >= d || corr.i == corr.j {
                return Err(Error::validation(
                    path,
                    format!("invalid trigger pair ({}, {}) for {d} channels", corr.i, corr.j),
                ));
            }
            if corr.delta.len() != dim {
                return Err(Error::validation(
                    format!("{path}/delta"),
                    format!("corrective delta has {} components, expected {dim}", corr.delta.len()),
                ));
            }
            check_finite(&corr.delta, &format!("{path}/delta"))?;
        }
        let mut owner: Vec<Option<&str>> = vec![None; d];
        for (name, region) in &self.regions {
            let path = format!("/regions/{name}");
            if let Some(&m) = region.markers.iter().find(|&&m| m >= n) {
                return Err(Error::validation(
                    format!("{path}/markers"),
                    format!("marker index {m} out of range"),
                ));
            }
            if !region.markers.contains(&self.nose_bridge_index) {
                return Err(Error::validation(
                    format!("{path}/markers"),
                    "region does not include the nose-bridge marker",
                ));
            }
            for &k in &region.channels {
                if k >= d {
                    return Err(Error::validation(
                        format!("{path}/channels"),
                        format!("channel index {k} out of range"),
                    ));
                }
                if let Some(other) = owner[k] {
                    return Err(Error::validation(
                        format!("{path}/channels"),
                        format!(
                            "channel `{}` already owned by region `{other}`",
                            self.channels[k].name
                        ),
                    ));
                }
                owner[k] = Some(name);
            }
        }
        if let Some(k) = owner.iter().position(Option::is_none) {
            return Err(Error::validation(
                "/regions",
                format!("channel `{}` is not owned by any region", self.channels[k].name),
            ));
        }
        Ok(())
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_channels() {
            return Err(Error::Dimension(format!(
                "weight vector has {} entries, rig has {} channels",
                w.len(),
                self.n_channels()
            )));
        }
        Ok(())
    }

    /// Marker positions `g(w)`.
    pub fn evaluate(&self, w: &[f64]) -> Result<MarkerSet> {
        self.check_weights(w)?;
        let mut out = self.neutral.0.clone();
        for (ch, &wk) in self.channels.iter().zip(w) {
            if wk != 0.0 {
                ch.accumulate(wk, &mut out);
            }
        }
        for corr in &self.correctives {
            let s = w[corr.i] * w[corr.j];
            if s != 0.0 {
                for (o, d) in out.iter_mut().zip(&corr.delta) {
                    *o += s * d;
                }
            }
        }
        Ok(MarkerSet(out))
    }

    /// `g(w)` together with the `3n x |subset|` Jacobian columns for `subset`.
    pub fn evaluate_jacobian(&self, w: &[f64], subset: &[usize]) -> Result<(MarkerSet, Array2<f64>)> {
        let x = self.evaluate(w)?;
        let d = self.n_channels();
        if let Some(&k) = subset.iter().find(|&&k| k >= d) {
            return Err(Error::Index(format!("channel {k} of {d}")));
        }
        let dim = x.len();
        let mut jac = Array2::zeros((dim, subset.len()));
        let mut col = vec![0.0; dim];
        for (c, &k) in subset.iter().enumerate() {
            self.channels[k].slope(w[k], &mut col);
            for corr in &self.correctives {
                let other = if corr.i == k {
                    corr.j
                } else if corr.j == k {
                    corr.i
                } else {
                    continue;
                };
                let s = w[other];
                for (o, dlt) in col.iter_mut().zip(&corr.delta) {
                    *o += s * dlt;
                }
            }
            jac.column_mut(c).assign(&ndarray::ArrayView1::from(&col));
        }
        Ok((x, jac))
    }

    /// Axis-aligned bounding-box diagonal of the neutral markers.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.neutral.points() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
    }
}

fn check_finite(values: &[f64], path: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::validation(format!("{path}/{i}"), "non-finite value")),
        None => Ok(()),
    }
}

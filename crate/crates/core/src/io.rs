//! Track and profile documents shared by every stage.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rig::MarkerSet;

/// Deserialize JSON, reporting the offending document path on failure.
pub fn from_json_str<T: DeserializeOwned>(s: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(s);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::parse(path, e.into_inner().to_string())
    })
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `T` frames of `n` markers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MarkerTrackDocument", try_from = "MarkerTrackDocument")]
pub struct MarkerTrack {
    n: usize,
    frames: Vec<MarkerSet>,
}

#[derive(Serialize, Deserialize)]
struct MarkerTrackDocument {
    n: usize,
    frames: Vec<Vec<[f64; 3]>>,
}

impl MarkerTrack {
    pub fn new(n: usize, frames: Vec<MarkerSet>) -> Result<Self> {
        if let Some(f) = frames.iter().position(|m| m.n() != n) {
            return Err(Error::Dimension(format!(
                "frame {f} has {} markers, track has {n}",
                frames[f].n()
            )));
        }
        Ok(MarkerTrack { n, frames })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[MarkerSet] {
        &self.frames
    }

    pub fn frame(&self, f: usize) -> &MarkerSet {
        &self.frames[f]
    }

    pub fn into_frames(self) -> Vec<MarkerSet> {
        self.frames
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("track serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MarkerTrackDocument = from_json_str(s)?;
        doc.try_into()
    }
}

impl From<MarkerTrack> for MarkerTrackDocument {
    fn from(t: MarkerTrack) -> Self {
        MarkerTrackDocument {
            n: t.n,
            frames: t.frames.iter().map(MarkerSet::points).collect(),
        }
    }
}

impl TryFrom<MarkerTrackDocument> for MarkerTrack {
    type Error = Error;

    fn try_from(doc: MarkerTrackDocument) -> Result<Self> {
        let frames = doc
            .frames
            .iter()
            .enumerate()
            .map(|(f, pts)| {
                if pts.len() != doc.n {
                    return Err(Error::validation(
                        format!("/frames/{f}"),
                        format!("{} markers, expected {}", pts.len(), doc.n),
                    ));
                }
                MarkerSet::from_points(pts)
                    .map_err(|e| Error::validation(format!("/frames/{f}"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        MarkerTrack::new(doc.n, frames)
    }
}

/// `T` frames of blendshape weights with channel names.
///
/// Used for animation clips (with `fps` and `label`), solved tracks and
/// jaw tracks alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTrack {
    pub channels: Vec<String>,
    pub frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Training animation; identical layout to a solved weight track.
pub type AnimationClip = WeightTrack;

impl WeightTrack {
    pub fn new(channels: Vec<String>, frames: Vec<Vec<f64>>) -> Result<Self> {
        let t = WeightTrack {
            channels,
            frames,
            fps: None,
            label: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn zeros(channels: Vec<String>, len: usize) -> Self {
        let d = channels.len();
        WeightTrack {
            channels,
            frames: vec![vec![0.0; d]; len],
            fps: None,
            label: None,
        }
    }

    pub fn with_meta(mut self, fps: f64, label: &str) -> Self {
        self.fps = Some(fps);
        self.label = Some(label.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.channels.len();
        for (f, w) in self.frames.iter().enumerate() {
            if w.len() != d {
                return Err(Error::validation(
                    format!("/frames/{f}"),
                    format!("{} weights, expected {d}", w.len()),
                ));
            }
            if let Some(k) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(format!("/frames/{f}/{k}"), "non-finite weight"));
            }
        }
        Ok(())
    }

    /// Channel values of `names`, per frame, in the given order.
    pub fn select(&self, names: &[String]) -> Result<WeightTrack> {
        let idx = names
            .iter()
            .map(|n| {
                self.channels
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::validation("/channels", format!("missing channel `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightTrack {
            channels: names.to_vec(),
            frames: self
                .frames
                .iter()
                .map(|w| idx.iter().map(|&k| w[k]).collect())
                .collect(),
            fps: self.fps,
            label: self.label.clone(),
        })
    }

    /// Concatenate clips along time. Channel lists must agree.
    pub fn concat(clips: &[&WeightTrack]) -> Result<WeightTrack> {
        let first = clips.first().ok_or_else(|| Error::Empty("no clips".into()))?;
        let mut frames = Vec::new();
        for c in clips {
            if c.channels != first.channels {
                return Err(Error::Dimension("clips have different channel lists".into()));
            }
            frames.extend(c.frames.iter().cloned());
        }
        Ok(WeightTrack {
            channels: first.channels.clone(),
            frames,
            fps: first.fps,
            label: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("weights serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: WeightTrack = from_json_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

/// Per-marker, per-axis Gaussian standard deviations plus a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub stds: Vec<[f64; 3]>,
    pub seed: u64,
}

impl NoiseProfile {
    pub fn zeros(n: usize, seed: u64) -> Self {
        NoiseProfile {
            stds: vec![[0.0; 3]; n],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stds.iter().enumerate() {
            for (a, v) in s.iter().enumerate() {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::validation(
                        format!("/stds/{i}/{a}"),
                        format!("standard deviation {v} must be finite and >= 0"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: NoiseProfile = from_json_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// `frame,value` CSV with a header line.
pub fn curve_csv(values: &[f64]) -> String {
    let mut out = String::from("frame,value\n");
    for (f, v) in values.iter().enumerate() {
        out.push_str(&format!("{f},{v}\n"));
    }
    out
}

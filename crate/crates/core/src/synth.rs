//! Synthetic training data: animation generation, baking through the rig,
//! Gaussian augmentation and salient sample selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{AnimationClip, MarkerTrack, NoiseProfile, WeightTrack};
use crate::rig::{MarkerSet, Rig};

/// Independent random stream for `(seed, tag)`.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    // FNV-1a over the tag, folded into the seed with a splitmix finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// One channel at a time ramped 0 -> 1 -> 0 over `frames_per_channel` frames.
pub fn generate_one_hot_facs(rig: &Rig, frames_per_channel: usize) -> Result<AnimationClip> {
    if frames_per_channel < 2 {
        return Err(Error::validation(
            "frames_per_channel",
            "need at least 2 frames per channel",
        ));
    }
    let d = rig.n_channels();
    let peak = frames_per_channel / 2;
    let last = frames_per_channel - 1;
    let mut frames = Vec::with_capacity(d * frames_per_channel);
    for k in 0..d {
        for i in 0..frames_per_channel {
            let v = if i <= peak {
                i as f64 / peak as f64
            } else {
                (last - i) as f64 / (last - peak) as f64
            };
            let mut w = vec![0.0; d];
            w[k] = v;
            frames.push(w);
        }
    }
    Ok(WeightTrack::new(rig.channel_names(), frames)?.with_meta(24.0, "facs"))
}

/// Smooth value noise in `[0, 1]`: uniform knots every `spacing` frames
/// joined by smoothstep interpolation.
fn value_noise(rng: &mut ChaCha8Rng, n_frames: usize, spacing: f64) -> Vec<f64> {
    let spacing = spacing.max(1.0);
    let n_knots = if spacing.is_finite() {
        (n_frames as f64 / spacing).ceil() as usize + 2
    } else {
        2
    };
    let knots: Vec<f64> = (0..n_knots).map(|_| rng.random::<f64>()).collect();
    (0..n_frames)
        .map(|f| {
            let u = f as f64 / spacing;
            let k = u.floor() as usize;
            let s = u - k as f64;
            let s = s * s * (3.0 - 2.0 * s);
            knots[k] + s * (knots[k + 1] - knots[k])
        })
        .collect()
}

/// Range-of-motion style clip: each channel is the product of a shared
/// region drive and its own curve, thresholded and clamped to `[0, 1]`, so
/// channels of one region tend to activate together.
///
/// `smoothness` is the spacing in frames between random knots.
pub fn generate_rom(rig: &Rig, n_frames: usize, seed: u64, smoothness: f64) -> Result<AnimationClip> {
    if n_frames == 0 {
        return Err(Error::validation("n_frames", "need at least one frame"));
    }
    if smoothness.is_nan() || smoothness <= 0.0 {
        return Err(Error::validation("smoothness", "must be positive"));
    }
    let d = rig.n_channels();
    let mut rng = stream(seed, "rom");
    let mut curves = vec![vec![0.0; d]; n_frames];
    for region in rig.regions.values() {
        let drive = value_noise(&mut rng, n_frames, smoothness * 2.0);
        for &k in &region.channels {
            let own = value_noise(&mut rng, n_frames, smoothness);
            for f in 0..n_frames {
                curves[f][k] = (1.6 * (drive[f] * own[f] - 0.1)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(WeightTrack::new(rig.channel_names(), curves)?.with_meta(24.0, "rom"))
}

/// Evaluate the rig at every frame of `clip`.
pub fn bake_markers(rig: &Rig, clip: &AnimationClip) -> Result<MarkerTrack> {
    if clip.dim() != rig.n_channels() {
        return Err(Error::Dimension(format!(
            "clip has {} channels, rig has {}",
            clip.dim(),
            rig.n_channels()
        )));
    }
    let frames = clip
        .frames
        .iter()
        .map(|w| rig.evaluate(w))
        .collect::<Result<Vec<_>>>()?;
    MarkerTrack::new(rig.n_markers(), frames)
}

/// Add independent Gaussian noise per marker axis.
pub fn augment(track: &MarkerTrack, profile: &NoiseProfile) -> Result<MarkerTrack> {
    profile.validate()?;
    if profile.stds.len() != track.n() {
        return Err(Error::Dimension(format!(
            "noise profile has {} markers, track has {}",
            profile.stds.len(),
            track.n()
        )));
    }
    let mut rng = stream(profile.seed, "augment");
    let frames = track
        .frames()
        .iter()
        .map(|x| {
            let mut out = x.clone();
            for (i, c) in out.as_mut_slice().iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *c += profile.stds[i / 3][i % 3] * z;
            }
            out
        })
        .collect();
    MarkerTrack::new(track.n(), frames)
}

/// Bake, add a constant per-marker offset, then augment.
pub fn simulate_shot(
    rig: &Rig,
    clip: &AnimationClip,
    drift: &[[f64; 3]],
    profile: &NoiseProfile,
) -> Result<MarkerTrack> {
    if drift.len() != rig.n_markers() {
        return Err(Error::Dimension(format!(
            "drift has {} markers, rig has {}",
            drift.len(),
            rig.n_markers()
        )));
    }
    let baked = bake_markers(rig, clip)?;
    let flat: Vec<f64> = drift.iter().flatten().copied().collect();
    let shifted = baked
        .frames()
        .iter()
        .map(|x| MarkerSet::from_flat(x.iter().zip(&flat).map(|(a, b)| a + b).collect()))
        .collect::<Result<Vec<_>>>()?;
    augment(&MarkerTrack::new(rig.n_markers(), shifted)?, profile)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSetDocument {
    markers: MarkerTrack,
    weights: WeightTrack,
    provenance: Vec<String>,
}

/// Paired marker/weight samples with a provenance tag each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub markers: Vec<MarkerSet>,
    pub weights: WeightTrack,
    pub provenance: Vec<String>,
}

impl TrainingSet {
    pub fn new(markers: Vec<MarkerSet>, weights: WeightTrack, provenance: Vec<String>) -> Result<Self> {
        if markers.len() != weights.len() || provenance.len() != markers.len() {
            return Err(Error::Dimension(format!(
                "{} marker sets, {} weight vectors, {} tags",
                markers.len(),
                weights.len(),
                provenance.len()
            )));
        }
        if let Some(first) = markers.first() {
            if markers.iter().any(|m| m.n() != first.n()) {
                return Err(Error::Dimension("marker sets differ in marker count".into()));
            }
        }
        Ok(TrainingSet {
            markers,
            weights,
            provenance,
        })
    }

    /// Bake each clip through the rig and augment it with `profile`. Clips are
    /// tagged with their label.
    pub fn from_clips(rig: &Rig, clips: &[&AnimationClip], profile: Option<&NoiseProfile>) -> Result<Self> {
        let mut markers = Vec::new();
        let mut provenance = Vec::new();
        for (c, clip) in clips.iter().enumerate() {
            let mut track = bake_markers(rig, clip)?;
            if let Some(p) = profile {
                let p = NoiseProfile {
                    stds: p.stds.clone(),
                    seed: p.seed.wrapping_add(c as u64),
                };
                track = augment(&track, &p)?;
            }
            let tag = clip.label.clone().unwrap_or_else(|| format!("clip{c}"));
            provenance.extend(std::iter::repeat_n(tag, track.len()));
            markers.extend(track.into_frames());
        }
        let weights = WeightTrack::concat(clips)?;
        Self::new(markers, weights, provenance)
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    /// JSON document: the markers as a marker track, the weights as a
    /// weight track, and one provenance tag per sample.
    pub fn to_json(&self) -> String {
        let n = self.markers.first().map_or(0, MarkerSet::n);
        let doc = TrainingSetDocument {
            markers: MarkerTrack::new(n, self.markers.clone()).expect("samples share a marker count"),
            weights: self.weights.clone(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_string(&doc).expect("training set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TrainingSetDocument = crate::io::from_json_str(s)?;
        doc.weights.validate().map_err(|e| match e {
            Error::Validation { path, message } => Error::validation(format!("/weights{path}"), message),
            other => other,
        })?;
        Self::new(doc.markers.into_frames(), doc.weights, doc.provenance)
    }

    pub fn subset(&self, indices: &[usize]) -> TrainingSet {
        TrainingSet {
            markers: indices.iter().map(|&i| self.markers[i].clone()).collect(),
            weights: WeightTrack {
                channels: self.weights.channels.clone(),
                frames: indices.iter().map(|&i| self.weights.frames[i].clone()).collect(),
                fps: self.weights.fps,
                label: self.weights.label.clone(),
            },
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// RBF similarity `exp(-|x - x'|^2 / (2 gamma^2 n))`, in `(0, 1]`.
pub fn rbf_similarity(a: &MarkerSet, b: &MarkerSet, gamma: f64) -> f64 {
    let n = a.n().max(1) as f64;
    (-squared_distance(a, b) / (2.0 * gamma * gamma * n)).exp()
}

/// Median over sample pairs of the per-marker RMS distance, computed on at
/// most 200 evenly strided samples.
pub fn median_gamma(samples: &[MarkerSet]) -> f64 {
    let stride = samples.len().div_ceil(200).max(1);
    let picked: Vec<&MarkerSet> = samples.iter().step_by(stride).collect();
    let mut dists = Vec::new();
    for i in 0..picked.len() {
        for j in i + 1..picked.len() {
            let n = picked[i].n().max(1) as f64;
            dists.push((squared_distance(picked[i], picked[j]) / n).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Greedy salient selection: sample `i` is kept when its mean similarity to
/// the samples kept so far is below `sigma`. The first sample is always
/// kept; the result is in original order.
pub fn select_salient(samples: &[MarkerSet], sigma: f64, gamma: f64) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::Empty("salient selection needs at least one sample".into()));
    }
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::validation("sigma", format!("{sigma} outside (0, 1]")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::validation("gamma", format!("{gamma} must be positive")));
    }
    let mut kept = vec![0];
    for i in 1..samples.len() {
        let total: f64 = kept
            .iter()
            .map(|&j| rbf_similarity(&samples[i], &samples[j], gamma))
            .sum();
        if total / (kept.len() as f64) < sigma {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{default_noise_profile, demo_rig};

    #[test]
    fn training_set_document_round_trips() {
        let rig = demo_rig();
        let clip = generate_rom(&rig, 6, 2, 1.0).unwrap();
        let set = TrainingSet::from_clips(&rig, &[&clip], Some(&default_noise_profile(1))).unwrap();
        let back = TrainingSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back, set);
        let bad = set.to_json().replacen("\"provenance\":[\"", "\"provenance\":[\"x\",\"", 1);
        assert!(TrainingSet::from_json(&bad).is_err());
    }

    #[test]
    fn single_channel_ramp() {
        let mut rig = demo_rig();
        rig.channels.truncate(1);
        rig.correctives.clear();
        rig.regions.retain(|k, _| k == "jaw");
        rig.regions.get_mut("jaw").unwrap().channels = vec![0];
        let clip = generate_one_hot_facs(&rig, 3).unwrap();
        assert_eq!(clip.frames, vec![vec![0.0], vec![1.0], vec![0.0]]);
    }

    #[test]
    fn facs_scale_and_peaks() {
        let rig = demo_rig();
        let clip = generate_one_hot_facs(&rig, 21).unwrap();
        assert_eq!(clip.len(), 504);
        for k in 0..rig.n_channels() {
            let peak = clip.frames.iter().map(|w| w[k]).fold(0.0, f64::max);
            assert_eq!(peak, 1.0);
        }
        for fpc in [2, 4, 7] {
            let c = generate_one_hot_facs(&rig, fpc).unwrap();
            assert_eq!(c.frames.iter().map(|w| w[0]).fold(0.0, f64::max), 1.0);
        }
        assert!(generate_one_hot_facs(&rig, 1).is_err());
    }

    #[test]
    fn rom_is_seed_deterministic_and_bounded() {
        let rig = demo_rig();
        let a = generate_rom(&rig, 2000, 11, 12.0).unwrap();
        let b = generate_rom(&rig, 2000, 11, 12.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2000);
        assert!(a.frames.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        let c = generate_rom(&rig, 2000, 12, 12.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rom_infinite_smoothness_is_constant() {
        let rig = demo_rig();
        let clip = generate_rom(&rig, 50, 3, f64::INFINITY).unwrap();
        assert!(clip.frames.iter().all(|w| w == &clip.frames[0]));
        let nearly = generate_rom(&rig, 50, 3, 1e12).unwrap();
        for w in &nearly.frames {
            for (a, b) in w.iter().zip(&nearly.frames[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_clip_bakes_to_neutral() {
        let rig = demo_rig();
        let clip = WeightTrack::zeros(rig.channel_names(), 4);
        let track = bake_markers(&rig, &clip).unwrap();
        assert!(track.frames().iter().all(|x| x == &rig.neutral));
    }

    #[test]
    fn facs_peaks_reproduce_linear_targets() {
        let rig = demo_rig();
        let clip = generate_one_hot_facs(&rig, 5).unwrap();
        let track = bake_markers(&rig, &clip).unwrap();
        let k = rig.channel_index("browLowerer").unwrap();
        let x = track.frame(5 * k + 2);
        for ((a, b0), d) in x.iter().zip(rig.neutral.iter()).zip(&rig.channels[k].delta) {
            assert_eq!(*a, b0 + d);
        }
    }

    #[test]
    fn bake_dimension_mismatch() {
        let rig = demo_rig();
        let clip = WeightTrack::zeros(vec!["a".into()], 2);
        assert!(bake_markers(&rig, &clip).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let rig = demo_rig();
        let clip = generate_rom(&rig, 10, 1, 5.0).unwrap();
        let track = bake_markers(&rig, &clip).unwrap();
        let out = augment(&track, &NoiseProfile::zeros(rig.n_markers(), 9)).unwrap();
        assert_eq!(out, track);
    }

    #[test]
    fn augment_is_reproducible_and_validated() {
        let rig = demo_rig();
        let clip = generate_rom(&rig, 10, 1, 5.0).unwrap();
        let track = bake_markers(&rig, &clip).unwrap();
        let p = crate::demo::default_noise_profile(5);
        assert_eq!(augment(&track, &p).unwrap(), augment(&track, &p).unwrap());
        let mut bad = p.clone();
        bad.stds[3][1] = -1.0;
        assert!(augment(&track, &bad).is_err());
    }

    #[test]
    fn identical_samples_keep_one() {
        let x = MarkerSet::from_flat(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let samples = vec![x; 25];
        assert_eq!(select_salient(&samples, 0.99, 1.0).unwrap(), vec![0]);
        assert!(select_salient(&[], 0.5, 1.0).is_err());
    }

    #[test]
    fn sigma_one_keeps_distinct_samples() {
        let samples: Vec<MarkerSet> = (0..10)
            .map(|i| MarkerSet::from_flat(vec![i as f64 * 0.01, 0.0, 0.0]).unwrap())
            .collect();
        assert_eq!(select_salient(&samples, 1.0, 1.0).unwrap().len(), 10);
    }

    #[test]
    fn near_duplicates_and_one_distant_pose() {
        // Oracle: kernel means computed by hand. With gamma = 1, n = 1:
        // k(a, a') = exp(-0.01^2 / 2) ~ 0.99995 -> a' rejected at sigma 0.3;
        // k(a, b) = exp(-9 / 2) ~ 0.0111 -> b kept.
        let a = MarkerSet::from_flat(vec![0.0, 0.0, 0.0]).unwrap();
        let a2 = MarkerSet::from_flat(vec![0.01, 0.0, 0.0]).unwrap();
        let b = MarkerSet::from_flat(vec![3.0, 0.0, 0.0]).unwrap();
        let kept = select_salient(&[a, a2, b], 0.3, 1.0).unwrap();
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn stream_tags_are_independent() {
        let a: u64 = stream(1, "a").random();
        let b: u64 = stream(1, "b").random();
        let a2: u64 = stream(1, "a").random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}

//! The multi-stage solve: jaw pass, anchor-pose alignment, jaw-conditioned
//! region solves, optional fine-tuning and per-frame RMSE curves.

mod bundle;
mod experiments;

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{curve_csv, MarkerTrack, WeightTrack};
use crate::optimize::{finetune_with_stats, FinetuneSpec, FrameStats};
use crate::rig::{MarkerSet, Rig};

pub use bundle::{
    default_plans, is_jaw_conditioned, train_bundle, train_region_solver, RegionPlan, RegionSolver, SolverBundle,
    BUNDLE_FORMAT_VERSION, JAW_CONDITIONED,
};
pub use experiments::{
    anchor_experiment, demo_drift, demo_performance, imbalanced_training_set, mean, round_trip, salient_sweep,
    sweep_csv, training_clips, training_set, AnchorExperiment, DataPlan, RoundTrip, SweepRow,
};

/// A hand-picked frame with artist-set weights; its marker offset is
/// propagated to similar frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPose {
    pub frame: usize,
    pub weights: Vec<f64>,
    /// Similarity bandwidth; derived from the track when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

impl AnchorPose {
    pub fn new(frame: usize, weights: Vec<f64>) -> Self {
        AnchorPose {
            frame,
            weights,
            bandwidth: None,
        }
    }

    pub fn validate(&self, rig: &Rig, n_frames: usize) -> Result<()> {
        if self.frame >= n_frames {
            return Err(Error::Index(format!("anchor frame {} of a {n_frames}-frame track", self.frame)));
        }
        if self.weights.len() != rig.n_channels() {
            return Err(Error::Dimension(format!(
                "anchor has {} weights, rig has {} channels",
                self.weights.len(),
                rig.n_channels()
            )));
        }
        if let Some(k) = self.weights.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::validation(format!("/weights/{k}"), "anchor weight outside [0, 1]"));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::validation("/bandwidth", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Names of the jaw-region channels, in rig order.
pub fn jaw_channel_names(rig: &Rig) -> Result<Vec<String>> {
    Ok(rig.region("jaw")?.channels.iter().map(|&k| rig.channels[k].name.clone()).collect())
}

fn check_track(rig: &Rig, track: &MarkerTrack) -> Result<()> {
    if track.n() != rig.n_markers() {
        return Err(Error::Dimension(format!(
            "track has {} markers, rig has {}",
            track.n(),
            rig.n_markers()
        )));
    }
    Ok(())
}

fn clamp01(v: Vec<f64>) -> Result<Vec<f64>> {
    crate::rig::clamp_weights(&v).map(|w| w.into_inner())
}

/// Per-frame jaw pass: the jaw network's clamped output, one column per jaw
/// channel.
pub fn solve_jaw(bundle: &SolverBundle, rig: &Rig, track: &MarkerTrack) -> Result<WeightTrack> {
    check_track(rig, track)?;
    let jaw = bundle.region("jaw")?;
    let frames = track
        .frames()
        .par_iter()
        .map(|x| jaw.predict(rig, x, None).and_then(clamp01))
        .collect::<Result<Vec<_>>>()?;
    WeightTrack::new(jaw_channel_names(rig)?, frames)
}

/// Full per-frame solve given a jaw track (solved or artist-corrected). Jaw
/// channels are copied from `jaw`; every other channel comes from its
/// region's network, clamped to `[0, 1]`.
pub fn solve_raw(bundle: &SolverBundle, rig: &Rig, track: &MarkerTrack, jaw: &WeightTrack) -> Result<WeightTrack> {
    solve_raw_with_progress(bundle, rig, track, jaw, None)
}

/// [`solve_raw`], counting finished frames into `progress`.
pub fn solve_raw_with_progress(
    bundle: &SolverBundle,
    rig: &Rig,
    track: &MarkerTrack,
    jaw: &WeightTrack,
    progress: Option<&AtomicUsize>,
) -> Result<WeightTrack> {
    check_track(rig, track)?;
    let jaw_names = jaw_channel_names(rig)?;
    if jaw.channels != jaw_names {
        return Err(Error::validation(
            "/channels",
            format!("jaw track channels must be {jaw_names:?}"),
        ));
    }
    if jaw.len() != track.len() {
        return Err(Error::Dimension(format!(
            "jaw track has {} frames, marker track {}",
            jaw.len(),
            track.len()
        )));
    }
    jaw.validate()?;
    for (f, w) in jaw.frames.iter().enumerate() {
        if let Some(k) = w.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!("/frames/{f}/{k}"), "jaw weight outside [0, 1]"));
        }
    }
    let jaw_channels = &rig.region("jaw")?.channels;
    let frames = track
        .frames()
        .par_iter()
        .zip(&jaw.frames)
        .map(|(x, z)| {
            let w = solve_frame(bundle, rig, x, z, jaw_channels);
            if let Some(p) = progress {
                p.fetch_add(1, Ordering::Relaxed);
            }
            w
        })
        .collect::<Result<Vec<_>>>()?;
    WeightTrack::new(rig.channel_names(), frames)
}

fn solve_frame(bundle: &SolverBundle, rig: &Rig, x: &MarkerSet, z: &[f64], jaw_channels: &[usize]) -> Result<Vec<f64>> {
    let mut w = vec![0.0; rig.n_channels()];
    for (&k, &v) in jaw_channels.iter().zip(z) {
        w[k] = v;
    }
    for solver in bundle.regions().iter().filter(|r| r.region != "jaw") {
        let out = clamp01(solver.predict(rig, x, Some(z))?)?;
        for (&k, v) in solver.channels.iter().zip(out) {
            w[k] = v;
        }
    }
    Ok(w)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Default bandwidth: a quarter of the RMS per-marker distance between the
/// anchor frame and every frame of the track.
pub fn default_bandwidth(track: &MarkerTrack, frame: usize) -> f64 {
    let xa = track.frame(frame);
    let n = track.n().max(1) as f64;
    let mean_sq = track.frames().iter().map(|x| squared_distance(x, xa) / n).sum::<f64>() / track.len().max(1) as f64;
    0.25 * mean_sq.sqrt()
}

/// Subtract the anchor's marker offset `x_a - g(w_a)` from every frame,
/// weighted by each frame's pose similarity to the anchor frame. The first
/// anchor applies the full offset everywhere.
pub fn align_with_anchor(track: &MarkerTrack, anchor: &AnchorPose, rig: &Rig, is_first: bool) -> Result<MarkerTrack> {
    check_track(rig, track)?;
    anchor.validate(rig, track.len())?;
    let xa = track.frame(anchor.frame);
    let g = rig.evaluate(&anchor.weights)?;
    let offset: Vec<f64> = xa.iter().zip(g.iter()).map(|(x, y)| x - y).collect();
    let h = anchor.bandwidth.unwrap_or_else(|| default_bandwidth(track, anchor.frame));
    let n = track.n() as f64;
    let frames = track
        .frames()
        .iter()
        .map(|x| {
            let q = if is_first || h == 0.0 {
                1.0
            } else {
                (-squared_distance(x, xa) / (2.0 * h * h * n)).exp().clamp(0.0, 1.0)
            };
            MarkerSet::from_flat(x.iter().zip(&offset).map(|(v, d)| v - q * d).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    MarkerTrack::new(track.n(), frames)
}

/// Apply anchors in order, each on the previous result.
pub fn align_sequence(track: &MarkerTrack, anchors: &[AnchorPose], rig: &Rig) -> Result<MarkerTrack> {
    let mut out = track.clone();
    for (i, a) in anchors.iter().enumerate() {
        out = align_with_anchor(&out, a, rig, i == 0)?;
    }
    Ok(out)
}

/// Per-frame root-mean-square over markers of the Euclidean error between
/// `g(w_f)` and `x_f`.
pub fn rmse(rig: &Rig, weights: &WeightTrack, track: &MarkerTrack, marker_subset: Option<&[usize]>) -> Result<Vec<f64>> {
    check_track(rig, track)?;
    if weights.len() != track.len() {
        return Err(Error::Dimension(format!(
            "{} weight frames, {} marker frames",
            weights.len(),
            track.len()
        )));
    }
    let all: Vec<usize>;
    let markers = match marker_subset {
        Some(m) => m,
        None => {
            all = (0..rig.n_markers()).collect();
            &all
        }
    };
    if markers.is_empty() {
        return Err(Error::Empty("rmse marker subset".into()));
    }
    if let Some(&m) = markers.iter().find(|&&m| m >= rig.n_markers()) {
        return Err(Error::Index(format!("marker {m} of {}", rig.n_markers())));
    }
    weights
        .frames
        .iter()
        .zip(track.frames())
        .map(|(w, x)| {
            let g = rig.evaluate(w)?;
            let sum: f64 = markers.iter().map(|&m| squared_distance(&g[3 * m..3 * m + 3], &x[3 * m..3 * m + 3])).sum();
            Ok((sum / markers.len() as f64).sqrt())
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseCurves {
    /// Raw solve against the input track.
    pub raw: Vec<f64>,
    /// Raw solve against the anchor-aligned track.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned: Option<Vec<f64>>,
    /// Fine-tuned weights against the track they were fitted to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned: Option<Vec<f64>>,
}

/// Everything one session run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub jaw: WeightTrack,
    pub raw: WeightTrack,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned: Option<MarkerTrack>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned: Option<WeightTrack>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_stats: Option<Vec<FrameStats>>,
    pub curves: RmseCurves,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        crate::io::from_json_str(s)
    }

    /// The track downstream stages fit: aligned when anchors were applied.
    pub fn target<'a>(&'a self, input: &'a MarkerTrack) -> &'a MarkerTrack {
        self.aligned.as_ref().unwrap_or(input)
    }

    /// `frame,value` CSV of one curve (`raw`, `aligned` or `finetuned`).
    pub fn curve_csv(&self, name: &str) -> Result<String> {
        let curve = match name {
            "raw" => Some(&self.curves.raw),
            "aligned" => self.curves.aligned.as_ref(),
            "finetuned" => self.curves.finetuned.as_ref(),
            other => return Err(Error::validation("curve", format!("unknown curve `{other}`"))),
        };
        curve
            .map(|c| curve_csv(c))
            .ok_or_else(|| Error::Empty(format!("report has no `{name}` curve")))
    }
}

/// Alignment, jaw pass and region solves. `jaw_override` replaces the
/// solved jaw track.
pub fn raw_stage(
    rig: &Rig,
    bundle: &SolverBundle,
    track: &MarkerTrack,
    anchors: &[AnchorPose],
    jaw_override: Option<&WeightTrack>,
    progress: Option<&AtomicUsize>,
) -> Result<SolveReport> {
    check_track(rig, track)?;
    let aligned = if anchors.is_empty() {
        None
    } else {
        Some(align_sequence(track, anchors, rig)?)
    };
    let target = aligned.as_ref().unwrap_or(track);
    let jaw = match jaw_override {
        Some(j) => j.clone(),
        None => solve_jaw(bundle, rig, target)?,
    };
    let raw = solve_raw_with_progress(bundle, rig, target, &jaw, progress)?;
    let curves = RmseCurves {
        raw: rmse(rig, &raw, track, None)?,
        aligned: match &aligned {
            Some(a) => Some(rmse(rig, &raw, a, None)?),
            None => None,
        },
        finetuned: None,
    };
    Ok(SolveReport {
        jaw,
        raw,
        aligned,
        finetuned: None,
        finetune_stats: None,
        curves,
    })
}

/// Fine-tune `init` (the raw solve, possibly edited) against the report's
/// target track and record the result in `report`.
pub fn finetune_stage(
    rig: &Rig,
    report: &mut SolveReport,
    track: &MarkerTrack,
    init: &WeightTrack,
    spec: &FinetuneSpec,
) -> Result<()> {
    let target = report.target(track).clone();
    let outcome = finetune_with_stats(rig, &target, init, spec)?;
    report.curves.finetuned = Some(rmse(rig, &outcome.weights, &target, None)?);
    report.finetuned = Some(outcome.weights);
    report.finetune_stats = Some(outcome.stats);
    Ok(())
}

/// Align, solve, and optionally fine-tune from the raw solve.
pub fn run_session(
    rig: &Rig,
    bundle: &SolverBundle,
    track: &MarkerTrack,
    anchors: &[AnchorPose],
    jaw_override: Option<&WeightTrack>,
    finetune: Option<&FinetuneSpec>,
) -> Result<SolveReport> {
    let mut report = raw_stage(rig, bundle, track, anchors, jaw_override, None)?;
    if let Some(spec) = finetune {
        let init = report.raw.clone();
        finetune_stage(rig, &mut report, track, &init, spec)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::demo_rig;
    use crate::synth::{bake_markers, generate_rom};

    fn baked(rig: &Rig, frames: usize, seed: u64) -> (WeightTrack, MarkerTrack) {
        let clip = generate_rom(rig, frames, seed, 1.0).unwrap();
        let track = bake_markers(rig, &clip).unwrap();
        (clip, track)
    }

    #[test]
    fn rmse_of_truth_is_zero() {
        let rig = demo_rig();
        let (clip, track) = baked(&rig, 10, 1);
        assert!(rmse(&rig, &clip, &track, None).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_marker_error_reads_e_over_root_m() {
        let rig = demo_rig();
        let (clip, track) = baked(&rig, 3, 2);
        let mut frames = track.clone().into_frames();
        frames[1].as_mut_slice()[3 * 7 + 1] += 0.6;
        let moved = MarkerTrack::new(rig.n_markers(), frames).unwrap();
        let curve = rmse(&rig, &clip, &moved, None).unwrap();
        assert_eq!(curve[0], 0.0);
        assert!((curve[1] - 0.6 / (40f64).sqrt()).abs() < 1e-12);
        assert_eq!(curve[2], 0.0);
    }

    #[test]
    fn constant_drift_gives_constant_floor() {
        let rig = demo_rig();
        let (clip, track) = baked(&rig, 5, 3);
        let drift: Vec<[f64; 3]> = (0..rig.n_markers()).map(|i| if i < 10 { [0.3, 0.0, 0.4] } else { [0.0; 3] }).collect();
        let zero = crate::io::NoiseProfile::zeros(rig.n_markers(), 0);
        let shot = crate::synth::simulate_shot(&rig, &clip, &drift, &zero).unwrap();
        let floor = (10.0 * 0.25 / 40.0f64).sqrt();
        for v in rmse(&rig, &clip, &shot, None).unwrap() {
            assert!((v - floor).abs() < 1e-12);
        }
        let _ = track;
    }

    #[test]
    fn matching_anchor_leaves_track_unchanged() {
        let rig = demo_rig();
        let (clip, track) = baked(&rig, 20, 4);
        for first in [true, false] {
            let anchor = AnchorPose::new(7, clip.frames[7].clone());
            let out = align_with_anchor(&track, &anchor, &rig, first).unwrap();
            assert_eq!(out, track);
        }
    }

    #[test]
    fn first_anchor_frame_matches_rig_exactly() {
        let rig = demo_rig();
        let (_, track) = baked(&rig, 20, 5);
        let w = vec![0.2; rig.n_channels()];
        let out = align_with_anchor(&track, &AnchorPose::new(3, w.clone()), &rig, true).unwrap();
        let g = rig.evaluate(&w).unwrap();
        for (a, b) in out.frame(3).iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn later_anchor_decays_with_pose_distance() {
        let rig = demo_rig();
        let (clip, track) = baked(&rig, 40, 6);
        let mut w = clip.frames[10].clone();
        w[0] = if w[0] < 0.5 { w[0] + 0.4 } else { w[0] - 0.4 };
        let anchor = AnchorPose {
            frame: 10,
            weights: w,
            bandwidth: Some(0.05),
        };
        let out = align_with_anchor(&track, &anchor, &rig, false).unwrap();
        let shift = |f: usize| squared_distance(out.frame(f), track.frame(f)).sqrt();
        let far = (0..40).max_by(|&a, &b| {
            squared_distance(track.frame(a), track.frame(10)).total_cmp(&squared_distance(track.frame(b), track.frame(10)))
        });
        assert!(shift(10) > 0.0);
        assert!(shift(far.unwrap()) < shift(10));
    }

    #[test]
    fn anchor_out_of_range_rejected() {
        let rig = demo_rig();
        let (_, track) = baked(&rig, 5, 7);
        let anchor = AnchorPose::new(5, vec![0.0; rig.n_channels()]);
        assert!(matches!(align_with_anchor(&track, &anchor, &rig, true), Err(Error::Index(_))));
    }

    #[test]
    fn unknown_curve_rejected() {
        let report = SolveReport {
            jaw: WeightTrack::zeros(vec!["a".into()], 1),
            raw: WeightTrack::zeros(vec!["a".into()], 1),
            aligned: None,
            finetuned: None,
            finetune_stats: None,
            curves: RmseCurves {
                raw: vec![0.5],
                ..Default::default()
            },
        };
        assert_eq!(report.curve_csv("raw").unwrap(), "frame,value\n0,0.5\n");
        assert!(report.curve_csv("aligned").is_err());
        assert!(report.curve_csv("bogus").is_err());
    }
}

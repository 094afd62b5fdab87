//! Scaled synthetic versions of the two ablations: anchor-pose alignment on
//! a drifted shot, and training on salient subsets of an imbalanced set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    rmse, run_session, solve_jaw, solve_raw, train_bundle, AnchorPose, RegionPlan, SolveReport, SolverBundle,
};
use crate::error::{Error, Result};
use crate::io::{AnimationClip, MarkerTrack, NoiseProfile, WeightTrack};
use crate::rig::Rig;
use crate::optimize::FinetuneSpec;
use crate::synth::{
    bake_markers, generate_one_hot_facs, generate_rom, median_gamma, select_salient, simulate_shot, stream,
    TrainingSet,
};

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// A performance clip that relaxes to the exact neutral pose around
/// `neutral_frame`, giving the operator an obvious anchor candidate.
pub fn demo_performance(rig: &Rig, n_frames: usize, neutral_frame: usize, seed: u64) -> Result<AnimationClip> {
    let mut clip = generate_rom(rig, n_frames, seed, 6.0)?;
    for (f, w) in clip.frames.iter_mut().enumerate() {
        let gap = (f as f64 - neutral_frame as f64).abs();
        let s = ((gap - 3.0) / 12.0).clamp(0.0, 1.0);
        let envelope = s * s * (3.0 - 2.0 * s);
        for v in w.iter_mut() {
            *v *= envelope;
        }
    }
    clip.label = Some("performance".into());
    Ok(clip)
}

/// Constant per-marker offsets of length in `[magnitude / 2, magnitude]`
/// and random direction, as left by imperfect stabilization or marker
/// placement.
pub fn demo_drift(rig: &Rig, magnitude: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = stream(seed, "drift");
    (0..rig.n_markers())
        .map(|_| {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
            let len = magnitude * rng.random_range(0.5..1.0);
            v.map(|c| c / norm * len)
        })
        .collect()
}

/// `n` samples of which 70% are near-neutral (ROM weights scaled to 8%) and
/// 30% regular ROM, with augmentation noise.
pub fn imbalanced_training_set(rig: &Rig, n: usize, seed: u64, profile: &NoiseProfile) -> Result<TrainingSet> {
    let n_neutral = n * 7 / 10;
    let n_rom = n - n_neutral;
    if n_neutral == 0 || n_rom == 0 {
        return Err(Error::validation("n", "need at least 4 samples"));
    }
    let mut calm = generate_rom(rig, n_neutral, seed, 4.0)?;
    for w in &mut calm.frames {
        for v in w.iter_mut() {
            *v *= 0.08;
        }
    }
    calm.label = Some("near-neutral".into());
    let rom = generate_rom(rig, n_rom, seed.wrapping_add(1), 4.0)?;
    TrainingSet::from_clips(rig, &[&calm, &rom], Some(profile))
}

/// Sizes of the standard training data: one-hot FACS ramps plus a ROM clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub facs_frames_per_channel: usize,
    pub rom_frames: usize,
    pub rom_smoothness: f64,
    pub seed: u64,
}

impl Default for DataPlan {
    /// About 500 FACS frames and 2000 ROM frames.
    fn default() -> Self {
        DataPlan {
            facs_frames_per_channel: 21,
            rom_frames: 2000,
            rom_smoothness: 4.0,
            seed: 7,
        }
    }
}

/// FACS + ROM clips baked through the rig and augmented with `profile`.
pub fn training_clips(rig: &Rig, plan: &DataPlan) -> Result<(AnimationClip, AnimationClip)> {
    let facs = generate_one_hot_facs(rig, plan.facs_frames_per_channel)?;
    let rom = generate_rom(rig, plan.rom_frames, plan.seed, plan.rom_smoothness)?;
    Ok((facs, rom))
}

pub fn training_set(rig: &Rig, plan: &DataPlan, profile: Option<&NoiseProfile>) -> Result<TrainingSet> {
    let (facs, rom) = training_clips(rig, plan)?;
    TrainingSet::from_clips(rig, &[&facs, &rom], profile)
}

/// Raw and fine-tuned solve quality on a clean held-out clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub bbox_diagonal: f64,
    pub frames: usize,
    pub raw_rmse: f64,
    pub finetuned_rmse: f64,
    pub raw_fraction_of_diagonal: f64,
    pub finetuned_fraction_of_diagonal: f64,
    pub mean_abs_weight_error: f64,
    /// Frames whose fine-tuned objective exceeded the initial one.
    pub finetune_regressions: usize,
}

/// Solve `clip` baked cleanly through the rig, then fine-tune every channel
/// on every frame starting from the raw solve.
pub fn round_trip(rig: &Rig, bundle: &SolverBundle, clip: &WeightTrack, finetune_iters: usize) -> Result<(RoundTrip, SolveReport)> {
    let track = bake_markers(rig, clip)?;
    let mut spec = FinetuneSpec::new((0..rig.n_channels()).collect(), [0, track.len().saturating_sub(1)]);
    spec.max_iters = finetune_iters;
    let report = run_session(rig, bundle, &track, &[], None, Some(&spec))?;
    let diag = rig.bbox_diagonal();
    let raw_rmse = mean(&report.curves.raw);
    let finetuned_rmse = mean(report.curves.finetuned.as_deref().unwrap_or_default());
    let abs_err: Vec<f64> = report
        .raw
        .frames
        .iter()
        .zip(&clip.frames)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .collect();
    let regressions = report
        .finetune_stats
        .iter()
        .flatten()
        .filter(|s| s.final_objective > s.initial_objective)
        .count();
    Ok((
        RoundTrip {
            bbox_diagonal: diag,
            frames: track.len(),
            raw_rmse,
            finetuned_rmse,
            raw_fraction_of_diagonal: raw_rmse / diag,
            finetuned_fraction_of_diagonal: finetuned_rmse / diag,
            mean_abs_weight_error: mean(&abs_err),
            finetune_regressions: regressions,
        },
        report,
    ))
}

/// One line of the selection sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub sigma: Option<f64>,
    pub samples: usize,
    pub fraction: f64,
    pub heldout_rmse: f64,
}

/// Train a bundle on each salient subset (`None` = the full set) and
/// measure the mean raw-solve RMSE on `heldout`.
pub fn salient_sweep(
    rig: &Rig,
    set: &TrainingSet,
    sigmas: &[Option<f64>],
    plans: &[RegionPlan],
    heldout: &MarkerTrack,
) -> Result<Vec<SweepRow>> {
    let gamma = median_gamma(&set.markers);
    sigmas
        .iter()
        .map(|&sigma| {
            let subset = match sigma {
                Some(s) => set.subset(&select_salient(&set.markers, s, gamma)?),
                None => set.clone(),
            };
            let (bundle, _) = train_bundle(rig, &subset, plans)?;
            let jaw = solve_jaw(&bundle, rig, heldout)?;
            let w = solve_raw(&bundle, rig, heldout, &jaw)?;
            Ok(SweepRow {
                label: sigma.map_or("full".into(), |s| format!("sigma={s}")),
                sigma,
                samples: subset.len(),
                fraction: subset.len() as f64 / set.len() as f64,
                heldout_rmse: mean(&rmse(rig, &w, heldout, None)?),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("label,sigma,samples,fraction,heldout_rmse\n");
    for r in rows {
        let sigma = r.sigma.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.label, sigma, r.samples, r.fraction, r.heldout_rmse));
    }
    out
}

/// Outcome of solving a drifted, noise-free shot with and without one
/// anchor carrying the true weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorExperiment {
    pub anchor_frame: usize,
    /// Mean RMSE of the raw solve against the drifted input.
    pub no_anchor_rmse: f64,
    /// Mean RMSE of the raw solve against the aligned track.
    pub anchor_rmse: f64,
    /// Mean RMSE of each solve against the clean (drift-free) markers.
    pub no_anchor_clean_rmse: f64,
    pub anchor_clean_rmse: f64,
    /// Largest coordinate difference between the aligned and clean tracks.
    pub recovery_error: f64,
    pub no_anchor_curve: Vec<f64>,
    pub anchor_curve: Vec<f64>,
}

impl AnchorExperiment {
    pub fn reduction(&self) -> f64 {
        1.0 - self.anchor_rmse / self.no_anchor_rmse
    }
}

pub fn anchor_experiment(
    rig: &Rig,
    bundle: &SolverBundle,
    clip: &WeightTrack,
    drift: &[[f64; 3]],
    anchor_frame: usize,
) -> Result<AnchorExperiment> {
    let clean = bake_markers(rig, clip)?;
    let shot = simulate_shot(rig, clip, drift, &NoiseProfile::zeros(rig.n_markers(), 0))?;
    let plain = run_session(rig, bundle, &shot, &[], None, None)?;
    let anchor = AnchorPose::new(
        anchor_frame,
        clip.frames
            .get(anchor_frame)
            .ok_or_else(|| Error::Index(format!("anchor frame {anchor_frame}")))?
            .clone(),
    );
    let anchored = run_session(rig, bundle, &shot, &[anchor], None, None)?;
    let aligned = anchored.aligned.as_ref().expect("anchored run aligns");
    let recovery_error = aligned
        .frames()
        .iter()
        .zip(clean.frames())
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    let anchor_curve = anchored.curves.aligned.clone().expect("anchored run has aligned curve");
    Ok(AnchorExperiment {
        anchor_frame,
        no_anchor_rmse: mean(&plain.curves.raw),
        anchor_rmse: mean(&anchor_curve),
        no_anchor_clean_rmse: mean(&rmse(rig, &plain.raw, &clean, None)?),
        anchor_clean_rmse: mean(&rmse(rig, &anchored.raw, &clean, None)?),
        recovery_error,
        no_anchor_curve: plain.curves.raw,
        anchor_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{default_noise_profile, demo_rig};

    #[test]
    fn performance_is_neutral_at_the_anchor_frame() {
        let rig = demo_rig();
        let clip = demo_performance(&rig, 120, 55, 3).unwrap();
        assert!(clip.frames[55].iter().all(|&v| v == 0.0));
        assert!(clip.frames[20].iter().any(|&v| v > 0.0));
    }

    #[test]
    fn drift_lengths_are_bounded() {
        let rig = demo_rig();
        for d in demo_drift(&rig, 0.4, 1) {
            let len = d.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((0.2 - 1e-12..=0.4 + 1e-12).contains(&len));
        }
    }

    #[test]
    fn imbalanced_set_is_seventy_percent_calm() {
        let rig = demo_rig();
        let set = imbalanced_training_set(&rig, 100, 2, &default_noise_profile(2)).unwrap();
        assert_eq!(set.len(), 100);
        assert_eq!(set.provenance.iter().filter(|p| *p == "near-neutral").count(), 70);
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow {
            label: "full".into(),
            sigma: None,
            samples: 10,
            fraction: 1.0,
            heldout_rmse: 0.25,
        }];
        assert_eq!(sweep_csv(&rows), "label,sigma,samples,fraction,heldout_rmse\nfull,,10,1,0.25\n");
    }
}

//! End-to-end solve behaviour with a bundle trained once on demo data.

use std::sync::OnceLock;

use facesolve_core::demo::{default_noise_profile, demo_rig};
use facesolve_core::optimize::{finetune_with_stats, objective, FinetuneSpec};
use facesolve_core::pipeline::{
    align_sequence, align_with_anchor, default_plans, demo_drift, demo_performance, raw_stage, rmse, run_session,
    solve_jaw, solve_raw, train_bundle, training_set, AnchorPose, DataPlan, SolverBundle,
};
use facesolve_core::synth::{bake_markers, generate_rom, simulate_shot};
use facesolve_core::{MarkerTrack, NoiseProfile, Rig, WeightTrack};

fn trained() -> &'static (Rig, SolverBundle) {
    static BUNDLE: OnceLock<(Rig, SolverBundle)> = OnceLock::new();
    BUNDLE.get_or_init(|| {
        let rig = demo_rig();
        let set = training_set(&rig, &DataPlan::default(), Some(&default_noise_profile(3))).unwrap();
        let (bundle, _) = train_bundle(&rig, &set, &default_plans(11)).unwrap();
        (rig, bundle)
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn jaw_names(rig: &Rig) -> Vec<String> {
    rig.region("jaw").unwrap().channels.iter().map(|&k| rig.channels[k].name.clone()).collect()
}

#[test]
fn jaw_pass_follows_a_jaw_open_ramp() {
    let (rig, bundle) = trained();
    let k = rig.channel_index("jawOpen").unwrap();
    let ramp: Vec<f64> = (0..50).map(|f| f as f64 / 49.0).collect();
    let frames = ramp
        .iter()
        .map(|&v| {
            let mut w = vec![0.0; rig.n_channels()];
            w[k] = v;
            w
        })
        .collect();
    let clip = WeightTrack::new(rig.channel_names(), frames).unwrap();
    let jaw = solve_jaw(bundle, rig, &bake_markers(rig, &clip).unwrap()).unwrap();
    assert_eq!(jaw.dim(), 3);
    let solved: Vec<f64> = jaw.frames.iter().map(|w| w[0]).collect();
    let r = pearson(&solved, &ramp);
    assert!(r > 0.99, "pearson {r}");
}

#[test]
fn neutral_track_gives_small_jaw_weights() {
    let (rig, bundle) = trained();
    let track = MarkerTrack::new(rig.n_markers(), vec![rig.neutral.clone(); 5]).unwrap();
    let jaw = solve_jaw(bundle, rig, &track).unwrap();
    for w in &jaw.frames {
        assert!(w.iter().all(|&v| v < 0.05), "{w:?}");
    }
}

#[test]
fn clean_training_clip_round_trips_within_tolerance() {
    let (rig, bundle) = trained();
    let clip = generate_rom(rig, DataPlan::default().rom_frames, DataPlan::default().seed, 4.0).unwrap();
    let clip = WeightTrack::new(clip.channels.clone(), clip.frames[..300].to_vec()).unwrap();
    let track = bake_markers(rig, &clip).unwrap();
    let jaw = solve_jaw(bundle, rig, &track).unwrap();
    let w = solve_raw(bundle, rig, &track, &jaw).unwrap();
    let total: f64 = w.frames.iter().zip(&clip.frames).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).sum();
    let err = total / (clip.len() * clip.dim()) as f64;
    assert!(err < 0.05, "mean absolute weight error {err}");
    assert!(w.frames.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn jaw_override_only_reaches_conditioned_regions() {
    let (rig, bundle) = trained();
    let clip = demo_performance(rig, 40, 20, 2).unwrap();
    let track = bake_markers(rig, &clip).unwrap();
    let jaw = solve_jaw(bundle, rig, &track).unwrap();
    let mut edited = jaw.clone();
    for w in &mut edited.frames {
        w[0] = 1.0 - w[0];
    }
    let a = solve_raw(bundle, rig, &track, &jaw).unwrap();
    let b = solve_raw(bundle, rig, &track, &edited).unwrap();
    let changed = |region: &str| {
        rig.region(region)
            .unwrap()
            .channels
            .iter()
            .any(|&k| a.frames.iter().zip(&b.frames).any(|(x, y)| x[k] != y[k]))
    };
    assert!(changed("lips") && changed("cheek") && changed("lower-face") && changed("jaw"));
    for region in ["upper-face", "eye-lids", "eyeballs"] {
        assert!(!changed(region), "{region} reacted to the jaw override");
    }
    // jaw channels are copied verbatim
    let jaw_channels = &rig.region("jaw").unwrap().channels;
    for (w, z) in b.frames.iter().zip(&edited.frames) {
        for (c, &k) in jaw_channels.iter().enumerate() {
            assert_eq!(w[k], z[c]);
        }
    }
}

#[test]
fn permuting_frames_permutes_outputs() {
    let (rig, bundle) = trained();
    let clip = generate_rom(rig, 30, 77, 3.0).unwrap();
    let track = bake_markers(rig, &clip).unwrap();
    let jaw = solve_jaw(bundle, rig, &track).unwrap();
    let w = solve_raw(bundle, rig, &track, &jaw).unwrap();
    let order: Vec<usize> = (0..30).map(|i| (i * 7) % 30).collect();
    let shuffled = MarkerTrack::new(rig.n_markers(), order.iter().map(|&i| track.frame(i).clone()).collect()).unwrap();
    let shuffled_jaw = WeightTrack::new(jaw.channels.clone(), order.iter().map(|&i| jaw.frames[i].clone()).collect()).unwrap();
    let w2 = solve_raw(bundle, rig, &shuffled, &shuffled_jaw).unwrap();
    for (j, &i) in order.iter().enumerate() {
        assert_eq!(w2.frames[j], w.frames[i]);
    }
}

#[test]
fn constant_drift_is_removed_exactly_by_a_true_anchor() {
    let (rig, _) = trained();
    let clip = demo_performance(rig, 80, 55, 9).unwrap();
    let drift = demo_drift(rig, 0.5, 4);
    let shot = simulate_shot(rig, &clip, &drift, &NoiseProfile::zeros(rig.n_markers(), 0)).unwrap();
    let clean = bake_markers(rig, &clip).unwrap();
    for frame in [0, 30, 55, 79] {
        let anchor = AnchorPose::new(frame, clip.frames[frame].clone());
        let aligned = align_with_anchor(&shot, &anchor, rig, true).unwrap();
        for (a, b) in aligned.frames().iter().zip(clean.frames()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn anchors_apply_in_order() {
    let (rig, _) = trained();
    let clip = demo_performance(rig, 60, 30, 10).unwrap();
    let shot = simulate_shot(rig, &clip, &demo_drift(rig, 0.3, 1), &NoiseProfile::zeros(rig.n_markers(), 0)).unwrap();
    let a = AnchorPose::new(30, clip.frames[30].clone());
    let mut off = clip.frames[10].clone();
    off[5] = (off[5] + 0.5).min(1.0);
    let b = AnchorPose::new(10, off);
    let ab = align_sequence(&shot, &[a.clone(), b.clone()], rig).unwrap();
    let manual = align_with_anchor(&align_with_anchor(&shot, &a, rig, true).unwrap(), &b, rig, false).unwrap();
    assert_eq!(ab, manual);
    assert_ne!(ab, align_sequence(&shot, &[b, a], rig).unwrap());
}

#[test]
fn one_anchor_lowers_rmse_on_a_drifted_shot() {
    let (rig, bundle) = trained();
    let clip = demo_performance(rig, 120, 55, 5).unwrap();
    let shot = simulate_shot(rig, &clip, &demo_drift(rig, 0.5, 8), &default_noise_profile(6)).unwrap();
    let plain = run_session(rig, bundle, &shot, &[], None, None).unwrap();
    assert!(plain.aligned.is_none() && plain.finetuned.is_none() && plain.curves.aligned.is_none());
    let anchored = run_session(rig, bundle, &shot, &[AnchorPose::new(55, clip.frames[55].clone())], None, None).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let before = mean(&plain.curves.raw);
    let after = mean(anchored.curves.aligned.as_ref().unwrap());
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn sessions_are_bitwise_reproducible() {
    let (rig, bundle) = trained();
    let clip = demo_performance(rig, 40, 20, 12).unwrap();
    let shot = simulate_shot(rig, &clip, &demo_drift(rig, 0.2, 2), &default_noise_profile(1)).unwrap();
    let anchors = [AnchorPose::new(20, clip.frames[20].clone())];
    let spec = FinetuneSpec::new(vec![12, 13], [5, 30]);
    let a = run_session(rig, bundle, &shot, &anchors, None, Some(&spec)).unwrap();
    let b = run_session(rig, bundle, &shot, &anchors, None, Some(&spec)).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn finetune_never_raises_rmse_on_its_markers() {
    let (rig, bundle) = trained();
    let clip = demo_performance(rig, 60, 30, 13).unwrap();
    let shot = simulate_shot(rig, &clip, &demo_drift(rig, 0.0, 0), &default_noise_profile(2)).unwrap();
    let markers: Vec<usize> = rig.region("lips").unwrap().markers.clone();
    let mut spec = FinetuneSpec::new(rig.region("lips").unwrap().channels.clone(), [0, 59]);
    spec.marker_subset = Some(markers.clone());
    let report = run_session(rig, bundle, &shot, &[], None, Some(&spec)).unwrap();
    let before = rmse(rig, &report.raw, &shot, Some(&markers)).unwrap();
    let after = rmse(rig, report.finetuned.as_ref().unwrap(), &shot, Some(&markers)).unwrap();
    for (f, (a, b)) in after.iter().zip(&before).enumerate() {
        assert!(a <= b, "frame {f}: {a} > {b}");
    }
}

#[test]
fn raw_solve_is_a_better_finetune_start_than_zero() {
    let (rig, bundle) = trained();
    // A ROM shot never sits exactly at neutral, where a zero start would be
    // the answer already.
    let clip = generate_rom(rig, 60, 14, 6.0).unwrap();
    let track = bake_markers(rig, &clip).unwrap();
    let report = raw_stage(rig, bundle, &track, &[], None, None).unwrap();
    let mut spec = FinetuneSpec::new((0..rig.n_channels()).collect(), [0, 59]);
    spec.max_iters = 500;
    spec.grad_tol = 1e-4;
    let from_raw = finetune_with_stats(rig, &track, &report.raw, &spec).unwrap();
    let zero = WeightTrack::zeros(rig.channel_names(), track.len());
    let from_zero = finetune_with_stats(rig, &track, &zero, &spec).unwrap();
    let iters = |o: &facesolve_core::optimize::FinetuneOutcome| o.stats.iter().map(|s| s.iterations).sum::<usize>();
    let total = |o: &facesolve_core::optimize::FinetuneOutcome| o.stats.iter().map(|s| s.final_objective).sum::<f64>();
    assert!(iters(&from_raw) < iters(&from_zero), "{} vs {}", iters(&from_raw), iters(&from_zero));
    // Both runs stop at the same gradient tolerance, so "equal" means equal
    // up to what that tolerance leaves on the table.
    assert!(total(&from_raw) <= total(&from_zero) + 1e-6, "{} vs {}", total(&from_raw), total(&from_zero));
    for (f, w) in from_raw.weights.frames.iter().enumerate() {
        let o = objective(rig, w, track.frame(f), None).unwrap();
        assert!(o <= from_raw.stats[f].initial_objective);
    }
}

#[test]
fn jaw_override_of_wrong_shape_is_rejected() {
    let (rig, bundle) = trained();
    let clip = demo_performance(rig, 10, 5, 1).unwrap();
    let track = bake_markers(rig, &clip).unwrap();
    let short = WeightTrack::zeros(jaw_names(rig), 9);
    assert!(raw_stage(rig, bundle, &track, &[], Some(&short), None).is_err());
    let wrong_names = WeightTrack::zeros(vec!["a".into(), "b".into(), "c".into()], 10);
    assert!(raw_stage(rig, bundle, &track, &[], Some(&wrong_names), None).is_err());
}

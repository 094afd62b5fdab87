//! One function per subcommand. Every artifact is a deterministic function
//! of the config and seed; progress goes to stdout, timestamps only to the
//! log file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use facesolve_core::io::{read_to_string, write_string};
use facesolve_core::pipeline::{
    anchor_experiment, demo_drift, demo_performance, finetune_stage, imbalanced_training_set, mean, raw_stage,
    round_trip, salient_sweep, sweep_csv, train_region_solver, training_clips, RegionSolver, SolveReport,
    SolverBundle,
};
use facesolve_core::rig::REGION_NAMES;
use facesolve_core::synth::{bake_markers, generate_rom, median_gamma, select_salient, simulate_shot, TrainingSet};
use facesolve_core::{MarkerTrack, NoiseProfile, Rig, WeightTrack};

use crate::config::{seed_offset, Project};
use crate::error::{CliError, CliResult};

fn write(path: &Path, contents: &str) -> CliResult<()> {
    write_string(path, contents).map_err(|source| CliError::Document {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> CliResult<String> {
    read_to_string(path).map_err(|source| CliError::Document {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T>(path: &Path, f: impl FnOnce(&str) -> facesolve_core::Result<T>) -> CliResult<T> {
    let text = read(path)?;
    f(&text).map_err(|source| CliError::Document {
        path: path.to_path_buf(),
        source,
    })
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// CSV with a `frame` column followed by one column per named curve.
fn curves_csv(columns: &[(&str, &[f64])]) -> String {
    let mut out = String::from("frame");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let rows = columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for f in 0..rows {
        write!(out, "{f}").unwrap();
        for (_, c) in columns {
            out.push(',');
            if let Some(v) = c.get(f) {
                write!(out, "{v}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

fn training_set_path(p: &Project) -> PathBuf {
    p.data_dir().join("train.json")
}

fn subset_path(p: &Project) -> PathBuf {
    p.out.join("select").join("subset.json")
}

pub fn gen_rig(p: &Project) -> CliResult<()> {
    let rig = p.rig()?;
    let path = p.out.join("rig.json");
    write(&path, &rig.to_json())?;
    println!(
        "rig `{}`: {} markers, {} channels -> {}",
        rig.name,
        rig.n_markers(),
        rig.n_channels(),
        path.display()
    );
    Ok(())
}

pub fn gen_data(p: &Project) -> CliResult<()> {
    let rig = p.rig()?;
    let plan = p.data_plan();
    let noise = p.noise(&rig)?;
    let (facs, rom) = training_clips(&rig, &plan)?;
    let set = TrainingSet::from_clips(&rig, &[&facs, &rom], p.augment().then_some(&noise))?;
    let dir = p.data_dir();
    write(&dir.join("facs.json"), &facs.to_json())?;
    write(&dir.join("rom.json"), &rom.to_json())?;
    write(&training_set_path(p), &set.to_json())?;
    println!("training set: {} FACS + {} ROM frames", facs.len(), rom.len());

    let d = &p.config.demo_shot;
    let truth = demo_performance(&rig, d.frames, d.neutral_frame, p.seed.wrapping_add(seed_offset::SHOT))?;
    let drift = demo_drift(&rig, d.drift, p.seed.wrapping_add(seed_offset::SHOT_DRIFT));
    let shot_noise = if d.noisy {
        NoiseProfile {
            stds: noise.stds.clone(),
            seed: p.seed.wrapping_add(seed_offset::SHOT_NOISE),
        }
    } else {
        NoiseProfile::zeros(rig.n_markers(), 0)
    };
    let shot = simulate_shot(&rig, &truth, &drift, &shot_noise)?;
    write(&dir.join("shot.json"), &shot.to_json())?;
    write(&dir.join("shot_truth.json"), &truth.to_json())?;
    let anchor = format!("anchor{}.json", d.neutral_frame);
    write(&dir.join(&anchor), &pretty(&truth.frames[d.neutral_frame]))?;
    println!(
        "demo shot: {} frames, neutral at {} (true weights in {anchor})",
        shot.len(),
        d.neutral_frame
    );
    Ok(())
}

fn load_training_set(path: &Path) -> CliResult<TrainingSet> {
    parse(path, TrainingSet::from_json)
}

#[derive(Serialize)]
struct SelectReport {
    sigma: f64,
    gamma: f64,
    total: usize,
    kept: usize,
    fraction: f64,
    /// `[kept, total]` per provenance tag.
    by_provenance: BTreeMap<String, [usize; 2]>,
    indices: Vec<usize>,
}

pub fn select(p: &Project, sigma: Option<f64>) -> CliResult<()> {
    let sigma = sigma.unwrap_or(p.config.selection.sigma);
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(CliError::config("selection.sigma", "must lie in (0, 1]"));
    }
    let set = load_training_set(&training_set_path(p))?;
    let gamma = p.config.selection.gamma.unwrap_or_else(|| median_gamma(&set.markers));
    let indices = select_salient(&set.markers, sigma, gamma)?;
    let mut by_provenance: BTreeMap<String, [usize; 2]> = BTreeMap::new();
    for tag in &set.provenance {
        by_provenance.entry(tag.clone()).or_default()[1] += 1;
    }
    for &i in &indices {
        by_provenance.get_mut(&set.provenance[i]).expect("tag counted")[0] += 1;
    }
    let subset = set.subset(&indices);
    let report = SelectReport {
        sigma,
        gamma,
        total: set.len(),
        kept: indices.len(),
        fraction: indices.len() as f64 / set.len() as f64,
        by_provenance,
        indices,
    };
    let dir = p.out.join("select");
    write(&dir.join("report.json"), &pretty(&report))?;
    write(&subset_path(p), &subset.to_json())?;
    println!(
        "sigma {sigma}: kept {} of {} samples ({:.1}%)",
        report.kept,
        report.total,
        100.0 * report.fraction
    );
    Ok(())
}

pub fn train(p: &Project, regions: &[String], salient: bool) -> CliResult<()> {
    let rig = p.rig()?;
    let mut plans = p.plans()?;
    if !regions.is_empty() {
        for r in regions {
            if !REGION_NAMES.contains(&r.as_str()) {
                return Err(CliError::config(
                    "region",
                    format!("unknown region `{r}`, expected one of {REGION_NAMES:?}"),
                ));
            }
        }
        plans.retain(|plan| regions.contains(&plan.region));
    }
    let set_path = if salient { subset_path(p) } else { training_set_path(p) };
    let set = load_training_set(&set_path)?;
    let trained = plans
        .par_iter()
        .map(|plan| train_region_solver(&rig, &set, plan))
        .collect::<facesolve_core::Result<Vec<_>>>()?;
    let dir = p.models_dir();
    for (plan, (solver, history)) in plans.iter().zip(&trained) {
        write(&dir.join(format!("{}.json", plan.region)), &solver.to_json())?;
        write(&dir.join(format!("{}_history.csv", plan.region)), &history.to_csv())?;
        write(&dir.join(format!("{}_plan.json", plan.region)), &pretty(plan))?;
        let last = history.last().expect("at least one epoch");
        let val = last.val_mse.map_or("-".to_string(), |v| format!("{v:.3e}"));
        println!(
            "{}: {} epochs, train mse {:.3e}, validation mse {val}",
            plan.region,
            history.records.len(),
            last.train_mse
        );
    }
    Ok(())
}

fn load_bundle(p: &Project, rig: &Rig) -> CliResult<SolverBundle> {
    let dir = p.models_dir();
    let regions = REGION_NAMES
        .iter()
        .map(|r| parse(&dir.join(format!("{r}.json")), |s| RegionSolver::from_json(s, rig)))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(SolverBundle::new(regions, rig)?)
}

fn load_shot(p: &Project, rig: &Rig) -> CliResult<MarkerTrack> {
    let path = p.shot_path();
    let track = parse(&path, MarkerTrack::from_json)?;
    if track.n() != rig.n_markers() {
        return Err(CliError::config(
            "shot",
            format!("{} has {} markers, rig has {}", path.display(), track.n(), rig.n_markers()),
        ));
    }
    Ok(track)
}

fn solve_dir(p: &Project) -> PathBuf {
    p.out.join("solve")
}

fn finetune_dir(p: &Project) -> PathBuf {
    p.out.join("finetune")
}

pub fn solve(p: &Project) -> CliResult<()> {
    let rig = p.rig()?;
    let bundle = load_bundle(p, &rig)?;
    let track = load_shot(p, &rig)?;
    let anchors = p.anchor_poses(&rig)?;
    for (i, a) in anchors.iter().enumerate() {
        a.validate(&rig, track.len())
            .map_err(|e| CliError::config(format!("anchors[{i}]"), e.to_string()))?;
    }
    let jaw = match &p.jaw_override {
        Some(path) => Some(parse(path, WeightTrack::from_json)?),
        None => None,
    };
    let report = raw_stage(&rig, &bundle, &track, &anchors, jaw.as_ref(), None)?;
    let dir = solve_dir(p);
    write(&dir.join("report.json"), &report.to_json())?;
    write(&dir.join("weights.json"), &report.raw.to_json())?;
    write(&dir.join("jaw.json"), &report.jaw.to_json())?;
    write(&dir.join("rmse_raw.csv"), &report.curve_csv("raw")?)?;
    if report.aligned.is_some() {
        write(&dir.join("rmse_aligned.csv"), &report.curve_csv("aligned")?)?;
    }
    print!("solved {} frames with {} anchor(s): raw rmse {:.5}", track.len(), anchors.len(), mean(&report.curves.raw));
    if let Some(a) = &report.curves.aligned {
        print!(", aligned rmse {:.5}", mean(a));
    }
    println!();
    Ok(())
}

fn load_report(path: &Path) -> CliResult<SolveReport> {
    parse(path, SolveReport::from_json)
}

pub fn finetune(p: &Project) -> CliResult<()> {
    let rig = p.rig()?;
    let track = load_shot(p, &rig)?;
    let mut report = load_report(&solve_dir(p).join("report.json"))?;
    let spec = p.finetune_spec(&rig, track.len())?;
    let init = report.raw.clone();
    finetune_stage(&rig, &mut report, &track, &init, &spec)?;
    let dir = finetune_dir(p);
    write(&dir.join("report.json"), &report.to_json())?;
    write(
        &dir.join("weights.json"),
        &report.finetuned.as_ref().expect("finetune stage sets weights").to_json(),
    )?;
    write(&dir.join("rmse_finetuned.csv"), &report.curve_csv("finetuned")?)?;
    let stats = report.finetune_stats.as_deref().unwrap_or_default();
    let mut csv = String::from("frame,initial_objective,final_objective,iterations\n");
    for s in stats {
        writeln!(csv, "{},{},{},{}", s.frame, s.initial_objective, s.final_objective, s.iterations).unwrap();
    }
    write(&dir.join("stats.csv"), &csv)?;
    let finetuned = report.curves.finetuned.as_deref().unwrap_or_default();
    let [f0, f1] = spec.frame_range;
    println!(
        "fine-tuned {} channel(s) on frames {f0}..={f1}: rmse {:.5} -> {:.5}",
        spec.channel_subset.len(),
        mean(report.curves.aligned.as_ref().unwrap_or(&report.curves.raw)),
        mean(finetuned)
    );
    Ok(())
}

#[derive(Serialize)]
struct CurveSummary {
    mean: f64,
    max: f64,
    mean_fraction_of_diagonal: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    source: String,
    frames: usize,
    bbox_diagonal: f64,
    curves: BTreeMap<String, CurveSummary>,
}

pub fn eval(p: &Project) -> CliResult<()> {
    let rig = p.rig()?;
    let finetuned = finetune_dir(p).join("report.json");
    let (source, report) = if finetuned.exists() {
        ("finetune", load_report(&finetuned)?)
    } else {
        ("solve", load_report(&solve_dir(p).join("report.json"))?)
    };
    let diag = rig.bbox_diagonal();
    let mut columns: Vec<(&str, &[f64])> = vec![("raw", &report.curves.raw)];
    if let Some(c) = &report.curves.aligned {
        columns.push(("aligned", c));
    }
    if let Some(c) = &report.curves.finetuned {
        columns.push(("finetuned", c));
    }
    let curves = columns
        .iter()
        .map(|(name, c)| {
            let m = mean(c);
            (
                name.to_string(),
                CurveSummary {
                    mean: m,
                    max: c.iter().copied().fold(0.0, f64::max),
                    mean_fraction_of_diagonal: m / diag,
                },
            )
        })
        .collect();
    let summary = EvalSummary {
        source: source.to_string(),
        frames: report.raw.len(),
        bbox_diagonal: diag,
        curves,
    };
    let dir = p.out.join("eval");
    write(&dir.join("rmse.csv"), &curves_csv(&columns))?;
    write(&dir.join("summary.json"), &pretty(&summary))?;
    for (name, c) in &summary.curves {
        println!(
            "{name}: mean rmse {:.5} ({:.3}% of diagonal), max {:.5}",
            c.mean,
            100.0 * c.mean_fraction_of_diagonal,
            c.max
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Salient,
    Anchor,
    Roundtrip,
    All,
}

pub fn ablate(p: &Project, experiment: Experiment, sigmas: Option<&[f64]>) -> CliResult<()> {
    match experiment {
        Experiment::Salient => ablate_salient(p, sigmas),
        Experiment::Anchor => ablate_anchor(p),
        Experiment::Roundtrip => ablate_roundtrip(p),
        Experiment::All => {
            ablate_roundtrip(p)?;
            ablate_anchor(p)?;
            ablate_salient(p, sigmas)
        }
    }
}

fn ablate_dir(p: &Project) -> PathBuf {
    p.out.join("ablate")
}

fn ablate_salient(p: &Project, sigmas: Option<&[f64]>) -> CliResult<()> {
    let rig = p.rig()?;
    let cfg = &p.config.ablate.salient;
    let sigmas = sigmas.unwrap_or(&cfg.sigmas);
    for (i, s) in sigmas.iter().enumerate() {
        if !(*s > 0.0 && *s <= 1.0) {
            return Err(CliError::config(format!("sigmas[{i}]"), "must lie in (0, 1]"));
        }
    }
    let mut noise = p.noise(&rig)?;
    noise.seed = p.seed.wrapping_add(seed_offset::SALIENT_NOISE);
    let set = imbalanced_training_set(&rig, cfg.samples, p.seed.wrapping_add(seed_offset::SALIENT_SET), &noise)?;
    let heldout_clip = generate_rom(
        &rig,
        cfg.heldout_frames,
        p.seed.wrapping_add(seed_offset::SALIENT_HELDOUT),
        cfg.heldout_smoothness,
    )?;
    let heldout = bake_markers(&rig, &heldout_clip)?;
    let mut sweep: Vec<Option<f64>> = sigmas.iter().copied().map(Some).collect();
    sweep.push(None);
    let rows = salient_sweep(&rig, &set, &sweep, &p.plans()?, &heldout)?;
    let dir = ablate_dir(p);
    write(&dir.join("salient.csv"), &sweep_csv(&rows))?;
    write(&dir.join("salient.json"), &pretty(&rows))?;
    for r in &rows {
        println!(
            "{}: {} samples ({:.1}%), held-out rmse {:.5}",
            r.label,
            r.samples,
            100.0 * r.fraction,
            r.heldout_rmse
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AnchorSummary {
    anchor_frame: usize,
    drift: f64,
    no_anchor_rmse: f64,
    anchor_rmse: f64,
    reduction: f64,
    no_anchor_clean_rmse: f64,
    anchor_clean_rmse: f64,
    recovery_error: f64,
}

fn ablate_anchor(p: &Project) -> CliResult<()> {
    let rig = p.rig()?;
    let bundle = load_bundle(p, &rig)?;
    let cfg = &p.config.ablate.anchor;
    let clip = demo_performance(&rig, cfg.frames, cfg.anchor_frame, p.seed.wrapping_add(seed_offset::ANCHOR_SHOT))?;
    let drift = demo_drift(&rig, cfg.drift, p.seed.wrapping_add(seed_offset::ANCHOR_DRIFT));
    let exp = anchor_experiment(&rig, &bundle, &clip, &drift, cfg.anchor_frame)?;
    let summary = AnchorSummary {
        anchor_frame: exp.anchor_frame,
        drift: cfg.drift,
        no_anchor_rmse: exp.no_anchor_rmse,
        anchor_rmse: exp.anchor_rmse,
        reduction: exp.reduction(),
        no_anchor_clean_rmse: exp.no_anchor_clean_rmse,
        anchor_clean_rmse: exp.anchor_clean_rmse,
        recovery_error: exp.recovery_error,
    };
    let dir = ablate_dir(p);
    write(&dir.join("anchor.json"), &pretty(&summary))?;
    write(
        &dir.join("anchor_curves.csv"),
        &curves_csv(&[("no_anchor", &exp.no_anchor_curve), ("anchor", &exp.anchor_curve)]),
    )?;
    println!(
        "anchor at frame {}: rmse {:.5} -> {:.5} ({:.1}% lower), recovery error {:.2e}",
        summary.anchor_frame,
        summary.no_anchor_rmse,
        summary.anchor_rmse,
        100.0 * summary.reduction,
        summary.recovery_error
    );
    Ok(())
}

fn ablate_roundtrip(p: &Project) -> CliResult<()> {
    let rig = p.rig()?;
    let bundle = load_bundle(p, &rig)?;
    let cfg = &p.config.ablate.roundtrip;
    let clip = generate_rom(&rig, cfg.frames, p.seed.wrapping_add(seed_offset::ROUNDTRIP), cfg.smoothness)?;
    let (rt, report) = round_trip(&rig, &bundle, &clip, cfg.finetune_iters)?;
    let dir = ablate_dir(p);
    write(&dir.join("roundtrip.json"), &pretty(&rt))?;
    write(
        &dir.join("roundtrip_curves.csv"),
        &curves_csv(&[
            ("raw", &report.curves.raw),
            ("finetuned", report.curves.finetuned.as_deref().unwrap_or_default()),
        ]),
    )?;
    let mut stats = String::from("frame,initial_objective,final_objective,iterations\n");
    for s in report.finetune_stats.iter().flatten() {
        writeln!(stats, "{},{},{},{}", s.frame, s.initial_objective, s.final_objective, s.iterations).unwrap();
    }
    write(&dir.join("roundtrip_finetune_stats.csv"), &stats)?;
    println!(
        "round trip over {} frames: raw rmse {:.5} ({:.3}% of diagonal), finetuned {:.6} ({:.4}%), {} regression(s)",
        rt.frames,
        rt.raw_rmse,
        100.0 * rt.raw_fraction_of_diagonal,
        rt.finetuned_rmse,
        100.0 * rt.finetuned_fraction_of_diagonal,
        rt.finetune_regressions
    );
    Ok(())
}

pub fn serve(addr: std::net::SocketAddr) -> CliResult<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| CliError::Io {
            path: PathBuf::from("<runtime>"),
            source,
        })?;
    println!("serving on http://{addr}");
    runtime
        .block_on(facesolve_server::serve(addr))
        .map_err(|source| CliError::Io {
            path: PathBuf::from(addr.to_string()),
            source,
        })
}

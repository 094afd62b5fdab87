//! Python bindings: rigs, tracks, training sets and solver bundles as
//! classes; generation, selection, matching, training, solving and
//! fine-tuning as functions. Documents cross the boundary as JSON strings,
//! frames as lists of floats.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use facesolve_core::demo::{default_noise_profile, demo_rig};
use facesolve_core::optimize::{finetune_with_stats, qp_match, FinetuneSpec, MatchProblem};
use facesolve_core::pipeline::{
    default_plans, raw_stage, rmse, train_bundle, training_set, AnchorPose, DataPlan,
};
use facesolve_core::synth::{bake_markers, generate_rom, median_gamma, select_salient};
use facesolve_core::MarkerSet;

fn py_err(e: facesolve_core::Error) -> PyErr {
    match e {
        facesolve_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type CoreResult<T> = facesolve_core::Result<T>;

fn lift<T>(r: CoreResult<T>) -> PyResult<T> {
    r.map_err(py_err)
}

#[pyclass(frozen, from_py_object, module = "facesolve")]
#[derive(Clone)]
struct Rig(facesolve_core::Rig);

#[pymethods]
impl Rig {
    /// The shipped 24-channel, 40-marker demo rig.
    #[staticmethod]
    fn demo() -> Self {
        Rig(demo_rig())
    }

    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        lift(facesolve_core::load_rig(document)).map(Rig)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn n_markers(&self) -> usize {
        self.0.n_markers()
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.0.n_channels()
    }

    #[getter]
    fn channel_names(&self) -> Vec<String> {
        self.0.channel_names()
    }

    fn bbox_diagonal(&self) -> f64 {
        self.0.bbox_diagonal()
    }

    /// Marker positions for one weight vector, flattened `x0, y0, z0, ...`.
    fn evaluate(&self, weights: Vec<f64>) -> PyResult<Vec<f64>> {
        lift(self.0.evaluate(&weights)).map(MarkerSet::into_inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Rig(name={:?}, markers={}, channels={})",
            self.0.name,
            self.0.n_markers(),
            self.0.n_channels()
        )
    }
}

#[pyclass(frozen, from_py_object, module = "facesolve")]
#[derive(Clone)]
struct MarkerTrack(facesolve_core::MarkerTrack);

#[pymethods]
impl MarkerTrack {
    /// `frames` is a list of flattened marker sets, each of length `3 * n`.
    #[new]
    fn new(n: usize, frames: Vec<Vec<f64>>) -> PyResult<Self> {
        let sets = frames
            .into_iter()
            .map(MarkerSet::from_flat)
            .collect::<CoreResult<Vec<_>>>();
        lift(sets.and_then(|s| facesolve_core::MarkerTrack::new(n, s))).map(MarkerTrack)
    }

    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        lift(facesolve_core::MarkerTrack::from_json(document)).map(MarkerTrack)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    fn frame(&self, f: usize) -> PyResult<Vec<f64>> {
        if f >= self.0.len() {
            return Err(PyValueError::new_err(format!("frame {f} of {}", self.0.len())));
        }
        Ok(self.0.frame(f).to_vec())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(frozen, from_py_object, module = "facesolve")]
#[derive(Clone)]
struct WeightTrack(facesolve_core::WeightTrack);

#[pymethods]
impl WeightTrack {
    #[new]
    fn new(channels: Vec<String>, frames: Vec<Vec<f64>>) -> PyResult<Self> {
        lift(facesolve_core::WeightTrack::new(channels, frames)).map(WeightTrack)
    }

    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        lift(facesolve_core::WeightTrack::from_json(document)).map(WeightTrack)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn channels(&self) -> Vec<String> {
        self.0.channels.clone()
    }

    #[getter]
    fn frames(&self) -> Vec<Vec<f64>> {
        self.0.frames.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(frozen, from_py_object, module = "facesolve")]
#[derive(Clone)]
struct TrainingSet(facesolve_core::synth::TrainingSet);

#[pymethods]
impl TrainingSet {
    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        lift(facesolve_core::synth::TrainingSet::from_json(document)).map(TrainingSet)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    /// Marker sets of every sample as one track.
    fn markers(&self) -> PyResult<MarkerTrack> {
        let n = self.0.markers.first().map_or(0, MarkerSet::n);
        lift(facesolve_core::MarkerTrack::new(n, self.0.markers.clone())).map(MarkerTrack)
    }

    #[getter]
    fn weights(&self) -> WeightTrack {
        WeightTrack(self.0.weights.clone())
    }

    #[getter]
    fn provenance(&self) -> Vec<String> {
        self.0.provenance.clone()
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.0.len()) {
            return Err(PyValueError::new_err(format!("index {i} of {}", self.0.len())));
        }
        Ok(TrainingSet(self.0.subset(&indices)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(frozen, module = "facesolve")]
struct SolverBundle(facesolve_core::pipeline::SolverBundle);

#[pymethods]
impl SolverBundle {
    #[staticmethod]
    fn from_json(document: &str, rig: &Rig) -> PyResult<Self> {
        lift(facesolve_core::pipeline::SolverBundle::from_json(document, &rig.0)).map(SolverBundle)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn regions(&self) -> Vec<String> {
        self.0.regions().iter().map(|r| r.region.clone()).collect()
    }
}

#[pyclass(frozen, module = "facesolve")]
struct SolveReport(facesolve_core::pipeline::SolveReport);

#[pymethods]
impl SolveReport {
    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        lift(facesolve_core::pipeline::SolveReport::from_json(document)).map(SolveReport)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn raw(&self) -> WeightTrack {
        WeightTrack(self.0.raw.clone())
    }

    #[getter]
    fn jaw(&self) -> WeightTrack {
        WeightTrack(self.0.jaw.clone())
    }

    #[getter]
    fn aligned(&self) -> Option<MarkerTrack> {
        self.0.aligned.clone().map(MarkerTrack)
    }

    #[getter]
    fn rmse_raw(&self) -> Vec<f64> {
        self.0.curves.raw.clone()
    }

    #[getter]
    fn rmse_aligned(&self) -> Option<Vec<f64>> {
        self.0.curves.aligned.clone()
    }
}

/// A smooth random range-of-motion clip.
#[pyfunction]
#[pyo3(signature = (rig, frames, seed, smoothness = 4.0))]
fn rom_clip(rig: &Rig, frames: usize, seed: u64, smoothness: f64) -> PyResult<WeightTrack> {
    lift(generate_rom(&rig.0, frames, seed, smoothness)).map(WeightTrack)
}

/// Markers of every frame of `clip`, evaluated through the rig.
#[pyfunction]
fn bake(rig: &Rig, clip: &WeightTrack) -> PyResult<MarkerTrack> {
    lift(bake_markers(&rig.0, &clip.0)).map(MarkerTrack)
}

/// FACS + ROM training set, optionally augmented with the demo noise profile.
#[pyfunction]
#[pyo3(signature = (rig, facs_frames_per_channel = 21, rom_frames = 2000, seed = 7, augment = true))]
fn make_training_set(
    rig: &Rig,
    facs_frames_per_channel: usize,
    rom_frames: usize,
    seed: u64,
    augment: bool,
) -> PyResult<TrainingSet> {
    let plan = DataPlan {
        facs_frames_per_channel,
        rom_frames,
        rom_smoothness: DataPlan::default().rom_smoothness,
        seed,
    };
    let noise = default_noise_profile(seed.wrapping_add(1));
    lift(training_set(&rig.0, &plan, augment.then_some(&noise))).map(TrainingSet)
}

/// Indices kept by greedy salient selection; `gamma` defaults to the median
/// pairwise distance heuristic.
#[pyfunction]
#[pyo3(signature = (markers, sigma, gamma = None))]
fn salient_indices(markers: &MarkerTrack, sigma: f64, gamma: Option<f64>) -> PyResult<Vec<usize>> {
    let frames = markers.0.frames();
    let gamma = gamma.unwrap_or_else(|| median_gamma(frames));
    lift(select_salient(frames, sigma, gamma))
}

/// Box-constrained least-squares match of one marker set against the rig's
/// linear basis. Returns `(weights, objective)`.
#[pyfunction]
#[pyo3(signature = (rig, target, tol = 1e-10, max_iters = 10_000))]
fn match_frame(rig: &Rig, target: Vec<f64>, tol: f64, max_iters: usize) -> PyResult<(Vec<f64>, f64)> {
    let target = lift(MarkerSet::from_flat(target))?;
    let problem = MatchProblem::from_rig(&rig.0, &target, None);
    lift(qp_match(&problem, tol, max_iters)).map(|(w, f)| (w.into_inner(), f))
}

/// Train all seven region solvers with the default plans, optionally
/// overriding the epoch count. Releases the interpreter lock while training.
#[pyfunction]
#[pyo3(signature = (rig, set, seed = 107, epochs = None))]
fn train(py: Python<'_>, rig: &Rig, set: &TrainingSet, seed: u64, epochs: Option<usize>) -> PyResult<SolverBundle> {
    let mut plans = default_plans(seed);
    if let Some(e) = epochs {
        for p in &mut plans {
            p.train.epochs = e;
        }
    }
    let (rig, set) = (&rig.0, &set.0);
    let (bundle, _) = lift(py.detach(|| train_bundle(rig, set, &plans)))?;
    Ok(SolverBundle(bundle))
}

/// Jaw pass and region solves, after aligning with `anchors` given as
/// `(frame, weights)` pairs in application order.
#[pyfunction]
#[pyo3(signature = (rig, bundle, track, anchors = Vec::new()))]
fn solve(
    py: Python<'_>,
    rig: &Rig,
    bundle: &SolverBundle,
    track: &MarkerTrack,
    anchors: Vec<(usize, Vec<f64>)>,
) -> PyResult<SolveReport> {
    let anchors: Vec<AnchorPose> = anchors.into_iter().map(|(f, w)| AnchorPose::new(f, w)).collect();
    for a in &anchors {
        lift(a.validate(&rig.0, track.0.len()))?;
    }
    let (rig, bundle, track) = (&rig.0, &bundle.0, &track.0);
    lift(py.detach(|| raw_stage(rig, bundle, track, &anchors, None, None))).map(SolveReport)
}

/// Per-frame L-BFGS-B refinement of `init` over the named channels and the
/// inclusive frame range; every other entry is left untouched. Returns the
/// weights and `(initial, final)` objectives per fine-tuned frame.
#[pyfunction]
#[pyo3(signature = (rig, track, init, channels, frames = None, max_iters = 200))]
#[allow(clippy::type_complexity)]
fn finetune(
    py: Python<'_>,
    rig: &Rig,
    track: &MarkerTrack,
    init: &WeightTrack,
    channels: Vec<String>,
    frames: Option<(usize, usize)>,
    max_iters: usize,
) -> PyResult<(WeightTrack, Vec<(f64, f64)>)> {
    let subset = channels
        .iter()
        .map(|c| {
            rig.0
                .channel_index(c)
                .ok_or_else(|| PyValueError::new_err(format!("unknown channel `{c}`")))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let last = track.0.len().saturating_sub(1);
    let (first, end) = frames.unwrap_or((0, last));
    let mut spec = FinetuneSpec::new(subset, [first, end]);
    spec.max_iters = max_iters;
    let (rig, track, init) = (&rig.0, &track.0, &init.0);
    let outcome = lift(py.detach(|| finetune_with_stats(rig, track, init, &spec)))?;
    let stats = outcome
        .stats
        .iter()
        .map(|s| (s.initial_objective, s.final_objective))
        .collect();
    Ok((WeightTrack(outcome.weights), stats))
}

/// Per-frame marker RMSE of `weights` evaluated through the rig against `track`.
#[pyfunction]
fn rmse_curve(rig: &Rig, weights: &WeightTrack, track: &MarkerTrack) -> PyResult<Vec<f64>> {
    lift(rmse(&rig.0, &weights.0, &track.0, None))
}

#[pymodule]
fn facesolve(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Rig>()?;
    m.add_class::<MarkerTrack>()?;
    m.add_class::<WeightTrack>()?;
    m.add_class::<TrainingSet>()?;
    m.add_class::<SolverBundle>()?;
    m.add_class::<SolveReport>()?;
    m.add_function(wrap_pyfunction!(rom_clip, m)?)?;
    m.add_function(wrap_pyfunction!(bake, m)?)?;
    m.add_function(wrap_pyfunction!(make_training_set, m)?)?;
    m.add_function(wrap_pyfunction!(salient_indices, m)?)?;
    m.add_function(wrap_pyfunction!(match_frame, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_curve, m)?)?;
    Ok(())
}

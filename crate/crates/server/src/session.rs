//! Session state and the action semantics, independent of HTTP.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use facesolve_core::optimize::{FinetuneSpec, FrameStats};
use facesolve_core::pipeline::{
    finetune_stage, is_jaw_conditioned, jaw_channel_names, raw_stage, rmse, AnchorPose, RmseCurves, SolveReport,
    SolverBundle,
};
use facesolve_core::synth::bake_markers;
use facesolve_core::{MarkerTrack, Rig, WeightTrack};

use crate::error::{ApiError, ApiResult};

/// One mutation of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Insert an anchor at `position` in the application order (appended
    /// when absent).
    SetAnchor {
        frame: usize,
        weights: Vec<f64>,
        #[serde(default)]
        bandwidth: Option<f64>,
        #[serde(default)]
        position: Option<usize>,
    },
    RemoveAnchor {
        index: usize,
    },
    /// Replace the solved jaw pass; `null` clears the override.
    SetJawOverride {
        track: Option<WeightTrack>,
    },
    EditWeight {
        frame: usize,
        channel: String,
        value: f64,
    },
    RunRawSolve,
    RunFinetune {
        spec: FinetuneSpec,
    },
    Reset,
}

impl Action {
    /// Whether the action runs a solve job.
    pub fn is_job(&self) -> bool {
        matches!(self, Action::RunRawSolve | Action::RunFinetune { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Action::SetAnchor { .. } => "set_anchor",
            Action::RemoveAnchor { .. } => "remove_anchor",
            Action::SetJawOverride { .. } => "set_jaw_override",
            Action::EditWeight { .. } => "edit_weight",
            Action::RunRawSolve => "run_raw_solve",
            Action::RunFinetune { .. } => "run_finetune",
            Action::Reset => "reset",
        }
    }
}

/// The latest solve together with what has happened to it since.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionReport {
    pub report: SolveReport,
    /// Revision at which the raw solve was computed.
    pub solved_at: u64,
    /// Anchors or jaw override changed after the raw solve.
    pub stale: bool,
    /// Raw weights were edited or re-solved after the last finetune.
    pub finetune_stale: bool,
    /// Weight edits applied to the raw solve, in order.
    pub edits: Vec<WeightEdit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEdit {
    pub frame: usize,
    pub channel: String,
    pub value: f64,
}

/// Everything an action can change. Published as a whole, so readers always
/// see one consistent revision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionData {
    pub revision: u64,
    pub anchors: Vec<AnchorPose>,
    pub jaw_override: Option<WeightTrack>,
    pub report: Option<SessionReport>,
}

/// Progress of a solve job, readable while the job runs.
#[derive(Debug)]
pub struct Job {
    pub token: String,
    pub kind: &'static str,
    pub total: usize,
    pub done: AtomicUsize,
    pub finished: AtomicBool,
}

impl Job {
    pub fn new(token: String, kind: &'static str, total: usize) -> Self {
        Job {
            token,
            kind,
            total,
            done: AtomicUsize::new(0),
            finished: AtomicBool::new(false),
        }
    }

    pub fn status(&self) -> JobStatus {
        let finished = self.finished.load(Ordering::Acquire);
        JobStatus {
            token: self.token.clone(),
            kind: self.kind.to_string(),
            state: if finished { "done" } else { "running" }.to_string(),
            frames_done: if finished {
                self.total
            } else {
                self.done.load(Ordering::Relaxed).min(self.total)
            },
            frames_total: self.total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub token: String,
    pub kind: String,
    pub state: String,
    pub frames_done: usize,
    pub frames_total: usize,
}

/// What an action changed, for clients that re-render selectively.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub action: String,
    /// Channels whose weights differ from before the action (for a
    /// finetune: from its initialization), in rig order.
    pub changed_channels: Vec<String>,
    /// Frames on which any weight changed.
    pub changed_frames: Vec<usize>,
    /// Mean RMSE of the stage the action produced, if it produced one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionInfo {
    pub name: String,
    pub channels: Vec<String>,
    pub markers: Vec<usize>,
    pub jaw_conditioned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub solved_at: u64,
    pub stale: bool,
    pub finetune_stale: bool,
    pub edits: Vec<WeightEdit>,
    pub curves: RmseCurves,
    pub jaw: WeightTrack,
    pub raw: WeightTrack,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetuned: Option<WeightTrack>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_stats: Option<Vec<FrameStats>>,
}

/// Body of `GET /sessions/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub revision: u64,
    pub n_frames: usize,
    pub n_markers: usize,
    pub channels: Vec<String>,
    pub regions: Vec<RegionInfo>,
    pub anchors: Vec<AnchorPose>,
    pub jaw_override: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub job: Option<JobStatus>,
}

/// Immutable inputs of a session.
#[derive(Debug)]
pub struct SessionInputs {
    pub rig: Rig,
    pub bundle: SolverBundle,
    pub track: MarkerTrack,
}

impl SessionInputs {
    /// Parse and cross-check the three documents of a new session.
    pub fn from_documents(rig: &str, bundle: &str, track: &str) -> ApiResult<Self> {
        let rig = facesolve_core::load_rig(rig).map_err(|e| ApiError::at("/rig", e))?;
        let bundle = SolverBundle::from_json(bundle, &rig).map_err(|e| ApiError::at("/bundle", e))?;
        let track = MarkerTrack::from_json(track).map_err(|e| ApiError::at("/track", e))?;
        if track.n() != rig.n_markers() {
            return Err(ApiError::invalid(
                "/track/n",
                format!("track has {} markers, rig has {}", track.n(), rig.n_markers()),
            ));
        }
        if track.is_empty() {
            return Err(ApiError::invalid("/track/frames", "track has no frames"));
        }
        Ok(SessionInputs { rig, bundle, track })
    }

    pub fn regions(&self) -> Vec<RegionInfo> {
        self.bundle
            .regions()
            .iter()
            .map(|r| RegionInfo {
                name: r.region.clone(),
                channels: r.channels.iter().map(|&k| self.rig.channels[k].name.clone()).collect(),
                markers: r.markers.clone(),
                jaw_conditioned: is_jaw_conditioned(&r.region),
            })
            .collect()
    }

    pub fn state(&self, id: &str, data: &SessionData, job: Option<JobStatus>) -> SessionState {
        SessionState {
            id: id.to_string(),
            revision: data.revision,
            n_frames: self.track.len(),
            n_markers: self.track.n(),
            channels: self.rig.channel_names(),
            regions: self.regions(),
            anchors: data.anchors.clone(),
            jaw_override: data.jaw_override.is_some(),
            report: data.report.as_ref().map(|r| ReportSummary {
                solved_at: r.solved_at,
                stale: r.stale,
                finetune_stale: r.finetune_stale,
                edits: r.edits.clone(),
                curves: r.report.curves.clone(),
                jaw: r.report.jaw.clone(),
                raw: r.report.raw.clone(),
                finetuned: r.report.finetuned.clone(),
                finetune_stats: r.report.finetune_stats.clone(),
            }),
            job,
        }
    }

    /// Number of frames a job for `action` processes.
    pub fn job_frames(&self, action: &Action) -> usize {
        match action {
            Action::RunFinetune { spec } => {
                let [f0, f1] = spec.frame_range;
                f1.saturating_sub(f0) + 1
            }
            _ => self.track.len(),
        }
    }

    /// Apply `action` to `data`, returning the next state (revision bumped)
    /// and what changed. `data` itself is never modified, so a failed action
    /// leaves the session untouched.
    pub fn apply(&self, data: &SessionData, action: &Action, job: Option<&Job>) -> ApiResult<(SessionData, Delta)> {
        let n_frames = self.track.len();
        let mut next = data.clone();
        next.revision = data.revision + 1;
        let mut delta = Delta {
            action: action.kind().to_string(),
            ..Delta::default()
        };
        match action {
            Action::SetAnchor {
                frame,
                weights,
                bandwidth,
                position,
            } => {
                let anchor = AnchorPose {
                    frame: *frame,
                    weights: weights.clone(),
                    bandwidth: *bandwidth,
                };
                anchor.validate(&self.rig, n_frames).map_err(|e| ApiError::at("/action", e))?;
                let at = position.unwrap_or(next.anchors.len());
                if at > next.anchors.len() {
                    return Err(ApiError::invalid(
                        "/action/position",
                        format!("position {at} beyond {} anchors", next.anchors.len()),
                    ));
                }
                next.anchors.insert(at, anchor);
                mark_stale(&mut next);
            }
            Action::RemoveAnchor { index } => {
                if *index >= next.anchors.len() {
                    return Err(ApiError::invalid(
                        "/action/index",
                        format!("no anchor {index} of {}", next.anchors.len()),
                    ));
                }
                next.anchors.remove(*index);
                mark_stale(&mut next);
            }
            Action::SetJawOverride { track } => {
                if let Some(t) = track {
                    self.check_jaw_override(t)?;
                }
                next.jaw_override = track.clone();
                mark_stale(&mut next);
            }
            Action::EditWeight { frame, channel, value } => {
                let k = self
                    .rig
                    .channel_index(channel)
                    .ok_or_else(|| ApiError::invalid("/action/channel", format!("unknown channel `{channel}`")))?;
                if *frame >= n_frames {
                    return Err(ApiError::invalid(
                        "/action/frame",
                        format!("frame {frame} of a {n_frames}-frame track"),
                    ));
                }
                if !(0.0..=1.0).contains(value) {
                    return Err(ApiError::invalid("/action/value", "weight outside [0, 1]"));
                }
                let Some(report) = next.report.as_mut() else {
                    return Err(ApiError::NoReport);
                };
                if report.report.raw.frames[*frame][k] != *value {
                    delta.changed_channels.push(channel.clone());
                    delta.changed_frames.push(*frame);
                }
                report.report.raw.frames[*frame][k] = *value;
                let target = report.report.target(&self.track).clone();
                report.report.curves.raw = rmse(&self.rig, &report.report.raw, &self.track, None)?;
                if report.report.aligned.is_some() {
                    report.report.curves.aligned = Some(rmse(&self.rig, &report.report.raw, &target, None)?);
                }
                report.edits.push(WeightEdit {
                    frame: *frame,
                    channel: channel.clone(),
                    value: *value,
                });
                report.finetune_stale = report.report.finetuned.is_some();
            }
            Action::RunRawSolve => {
                let progress = job.map(|j| &j.done);
                let report = raw_stage(
                    &self.rig,
                    &self.bundle,
                    &self.track,
                    &next.anchors,
                    next.jaw_override.as_ref(),
                    progress,
                )?;
                if let Some(old) = &data.report {
                    diff(&self.rig, &old.report.raw, &report.raw, &mut delta);
                }
                delta.mean_rmse = Some(mean(report.curves.aligned.as_ref().unwrap_or(&report.curves.raw)));
                next.report = Some(SessionReport {
                    report,
                    solved_at: next.revision,
                    stale: false,
                    finetune_stale: false,
                    edits: Vec::new(),
                });
            }
            Action::RunFinetune { spec } => {
                let Some(current) = next.report.as_mut() else {
                    return Err(ApiError::NoReport);
                };
                spec.validate(&self.rig, n_frames).map_err(|e| ApiError::at("/action/spec", e))?;
                let init = current.report.raw.clone();
                finetune_stage(&self.rig, &mut current.report, &self.track, &init, spec)
                    .map_err(|e| ApiError::at("/action/spec", e))?;
                let finetuned = current.report.finetuned.as_ref().expect("finetune stage sets weights");
                diff(&self.rig, &init, finetuned, &mut delta);
                delta.mean_rmse = current.report.curves.finetuned.as_deref().map(mean);
                current.finetune_stale = false;
            }
            Action::Reset => {
                next.anchors.clear();
                next.jaw_override = None;
                next.report = None;
            }
        }
        Ok((next, delta))
    }

    fn check_jaw_override(&self, track: &WeightTrack) -> ApiResult<()> {
        let at = |e| ApiError::at("/action/track", e);
        track.validate().map_err(at)?;
        let names = jaw_channel_names(&self.rig).map_err(at)?;
        if track.channels != names {
            return Err(ApiError::invalid(
                "/action/track/channels",
                format!("jaw override channels must be {names:?}"),
            ));
        }
        if track.len() != self.track.len() {
            return Err(ApiError::invalid(
                "/action/track/frames",
                format!("{} frames, shot has {}", track.len(), self.track.len()),
            ));
        }
        for (f, w) in track.frames.iter().enumerate() {
            if let Some(k) = w.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(ApiError::invalid(
                    format!("/action/track/frames/{f}/{k}"),
                    "jaw weight outside [0, 1]",
                ));
            }
        }
        Ok(())
    }

    /// The best available weights: fine-tuned when present, else the
    /// (possibly edited) raw solve.
    pub fn export_weights(&self, data: &SessionData) -> ApiResult<WeightTrack> {
        let report = &data.report.as_ref().ok_or(ApiError::NoReport)?.report;
        Ok(report.finetuned.clone().unwrap_or_else(|| report.raw.clone()))
    }

    /// Rig markers reproduced from [`Self::export_weights`].
    pub fn export_markers(&self, data: &SessionData) -> ApiResult<MarkerTrack> {
        Ok(bake_markers(&self.rig, &self.export_weights(data)?)?)
    }
}

fn mark_stale(data: &mut SessionData) {
    if let Some(r) = data.report.as_mut() {
        r.stale = true;
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn diff(rig: &Rig, before: &WeightTrack, after: &WeightTrack, delta: &mut Delta) {
    let d = rig.n_channels();
    let mut channels = vec![false; d];
    for (f, (a, b)) in before.frames.iter().zip(&after.frames).enumerate() {
        let mut frame_changed = false;
        for k in 0..d {
            if a[k].to_bits() != b[k].to_bits() {
                channels[k] = true;
                frame_changed = true;
            }
        }
        if frame_changed {
            delta.changed_frames.push(f);
        }
    }
    delta.changed_channels = channels
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(k, _)| rig.channels[k].name.clone())
        .collect();
}

/// A session: fixed inputs plus the published state and the running job.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub inputs: SessionInputs,
    /// Serializes mutations; held for the whole of an action, jobs included.
    pub mutation: tokio::sync::Mutex<()>,
    pub data: std::sync::RwLock<Arc<SessionData>>,
    pub job: std::sync::Mutex<Option<Arc<Job>>>,
}

impl Session {
    pub fn new(id: String, inputs: SessionInputs) -> Self {
        Session {
            id,
            inputs,
            mutation: tokio::sync::Mutex::new(()),
            data: std::sync::RwLock::new(Arc::new(SessionData::default())),
            job: std::sync::Mutex::new(None),
        }
    }

    /// The currently published state.
    pub fn snapshot(&self) -> Arc<SessionData> {
        self.data.read().expect("session lock").clone()
    }

    pub fn publish(&self, data: SessionData) {
        *self.data.write().expect("session lock") = Arc::new(data);
    }

    pub fn job_status(&self) -> Option<JobStatus> {
        self.job.lock().expect("job lock").as_ref().map(|j| j.status())
    }

    /// State and job status read under one data snapshot.
    pub fn state(&self) -> SessionState {
        let data = self.snapshot();
        self.inputs.state(&self.id, &data, self.job_status())
    }
}

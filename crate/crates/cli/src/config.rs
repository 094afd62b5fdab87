//! Project configuration: one JSON document with a section per stage.
//! Relative paths in the document resolve against the document's directory;
//! relative paths given as flags resolve against the working directory.
//! Precedence is flag > config > default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use facesolve_core::demo::{default_noise_profile, demo_rig};
use facesolve_core::features::FeatureVariant;
use facesolve_core::io::read_to_string;
use facesolve_core::optimize::FinetuneSpec;
use facesolve_core::pipeline::{default_plans, AnchorPose, DataPlan, RegionPlan};
use facesolve_core::{load_rig, NoiseProfile, Rig};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Rig document; the built-in demo rig when absent.
    #[serde(default)]
    pub rig: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    /// Augmentation profile document; the demo profile when absent.
    #[serde(default)]
    pub noise: Option<PathBuf>,
    #[serde(default)]
    pub selection: SelectionConfig,
    /// Overrides applied to every region's training config.
    #[serde(default)]
    pub train: TrainOverride,
    /// Per-region architecture and training overrides, keyed by region.
    #[serde(default)]
    pub regions: BTreeMap<String, RegionOverride>,
    /// Directory of trained region models; `<out>/models` when absent.
    #[serde(default)]
    pub models: Option<PathBuf>,
    /// Shot to solve; `<out>/data/shot.json` (written by gen-data) when absent.
    #[serde(default)]
    pub shot: Option<PathBuf>,
    #[serde(default)]
    pub anchors: Vec<AnchorRef>,
    #[serde(default)]
    pub jaw_override: Option<PathBuf>,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default)]
    pub demo_shot: DemoShotConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub facs_frames_per_channel: Option<usize>,
    pub rom_frames: Option<usize>,
    pub rom_smoothness: Option<f64>,
    /// Augment baked training markers with the noise profile.
    pub augment: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub sigma: f64,
    /// RBF bandwidth; the median pairwise sample distance when absent.
    pub gamma: Option<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { sigma: 0.3, gamma: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub l2: Option<f64>,
    pub dropout: Option<f64>,
    pub validation_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionOverride {
    pub variant: Option<FeatureVariant>,
    pub rb_dim: Option<usize>,
    pub n_rb: Option<usize>,
    #[serde(default)]
    pub train: TrainOverride,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorRef {
    pub frame: usize,
    pub weights: PathBuf,
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

/// Finetune spec with channels named rather than indexed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub channels: Vec<String>,
    /// Inclusive; the whole shot when absent.
    #[serde(default)]
    pub frames: Option<[usize; 2]>,
    #[serde(default)]
    pub markers: Option<Vec<usize>>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub grad_tol: Option<f64>,
    #[serde(default)]
    pub history_size: Option<usize>,
}

/// The drifted demo shot written by gen-data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoShotConfig {
    pub frames: usize,
    pub neutral_frame: usize,
    pub drift: f64,
    pub noisy: bool,
}

impl Default for DemoShotConfig {
    fn default() -> Self {
        DemoShotConfig {
            frames: 120,
            neutral_frame: 55,
            drift: 0.5,
            noisy: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub salient: SalientConfig,
    pub anchor: AnchorAblation,
    pub roundtrip: RoundTripConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SalientConfig {
    pub samples: usize,
    pub sigmas: Vec<f64>,
    pub heldout_frames: usize,
    pub heldout_smoothness: f64,
}

impl Default for SalientConfig {
    fn default() -> Self {
        SalientConfig {
            samples: 2500,
            sigmas: vec![0.1, 0.3, 0.5],
            heldout_frames: 300,
            heldout_smoothness: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorAblation {
    pub frames: usize,
    pub anchor_frame: usize,
    pub drift: f64,
}

impl Default for AnchorAblation {
    fn default() -> Self {
        AnchorAblation {
            frames: 120,
            anchor_frame: 55,
            drift: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundTripConfig {
    pub frames: usize,
    pub smoothness: f64,
    pub finetune_iters: usize,
}

impl Default for RoundTripConfig {
    fn default() -> Self {
        RoundTripConfig {
            frames: 200,
            smoothness: 6.0,
            finetune_iters: 100,
        }
    }
}

/// Weights of an anchor file: a full vector in rig channel order, or a map
/// from channel name to value with unnamed channels at zero.
#[derive(Deserialize)]
#[serde(untagged)]
enum AnchorWeights {
    Vector(Vec<f64>),
    Named(BTreeMap<String, f64>),
}

/// Seeds of every random stage, derived from the master seed.
pub mod seed_offset {
    pub const NOISE: u64 = 1;
    pub const SHOT: u64 = 2;
    pub const SHOT_DRIFT: u64 = 3;
    pub const SHOT_NOISE: u64 = 4;
    pub const SALIENT_SET: u64 = 5;
    pub const SALIENT_NOISE: u64 = 6;
    pub const SALIENT_HELDOUT: u64 = 7;
    pub const ANCHOR_SHOT: u64 = 8;
    pub const ANCHOR_DRIFT: u64 = 9;
    pub const ROUNDTRIP: u64 = 10;
    pub const TRAIN: u64 = 100;
}

/// Flags that override config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub anchors: Vec<(usize, PathBuf)>,
    pub jaw_override: Option<PathBuf>,
}

/// A config with flags applied and every path resolved.
#[derive(Clone, Debug)]
pub struct Project {
    pub config: ProjectConfig,
    pub base: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub anchors: Vec<AnchorRef>,
    pub jaw_override: Option<PathBuf>,
}

impl Project {
    pub fn load(config: Option<&Path>, overrides: Overrides) -> CliResult<Self> {
        let (config, base) = match config {
            Some(path) => {
                let text = read_to_string(path).map_err(|source| CliError::Document {
                    path: path.to_path_buf(),
                    source,
                })?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                let cfg: ProjectConfig = serde_path_to_error::deserialize(de).map_err(|e| {
                    let key = e.path().to_string();
                    CliError::config(key, e.into_inner().to_string())
                })?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (ProjectConfig::default(), PathBuf::new()),
        };
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let seed = overrides.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
        let out = overrides
            .out
            .clone()
            .or_else(|| config.out.as_deref().map(resolve))
            .unwrap_or_else(|| base.join("out"));
        let anchors = if overrides.anchors.is_empty() {
            config
                .anchors
                .iter()
                .map(|a| AnchorRef {
                    weights: resolve(&a.weights),
                    ..a.clone()
                })
                .collect()
        } else {
            overrides
                .anchors
                .iter()
                .map(|(frame, weights)| AnchorRef {
                    frame: *frame,
                    weights: weights.clone(),
                    bandwidth: None,
                })
                .collect()
        };
        let jaw_override = overrides
            .jaw_override
            .clone()
            .or_else(|| config.jaw_override.as_deref().map(resolve));
        let project = Project {
            base,
            seed,
            out,
            anchors,
            jaw_override,
            config,
        };
        project.validate()?;
        Ok(project)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn validate(&self) -> CliResult<()> {
        let c = &self.config;
        let region_names: Vec<&str> = facesolve_core::rig::REGION_NAMES.to_vec();
        for name in c.regions.keys() {
            if !region_names.contains(&name.as_str()) {
                return Err(CliError::config(
                    format!("regions.{name}"),
                    format!("unknown region, expected one of {region_names:?}"),
                ));
            }
        }
        if !(c.selection.sigma > 0.0 && c.selection.sigma <= 1.0) {
            return Err(CliError::config("selection.sigma", "must lie in (0, 1]"));
        }
        if let Some(g) = c.selection.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CliError::config("selection.gamma", "must be positive"));
            }
        }
        for (i, s) in c.ablate.salient.sigmas.iter().enumerate() {
            if !(*s > 0.0 && *s <= 1.0) {
                return Err(CliError::config(format!("ablate.salient.sigmas[{i}]"), "must lie in (0, 1]"));
            }
        }
        let d = &c.demo_shot;
        if d.frames == 0 || d.neutral_frame >= d.frames {
            return Err(CliError::config("demo_shot.neutral_frame", "must be a frame of the shot"));
        }
        let a = &c.ablate.anchor;
        if a.frames == 0 || a.anchor_frame >= a.frames {
            return Err(CliError::config("ablate.anchor.anchor_frame", "must be a frame of the shot"));
        }
        for (key, path) in [("rig", &c.rig), ("noise", &c.noise)] {
            if let Some(p) = path {
                let p = self.resolve(p);
                if !p.exists() {
                    return Err(CliError::config(key, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn rig(&self) -> CliResult<Rig> {
        match &self.config.rig {
            Some(p) => {
                let path = self.resolve(p);
                let text = read_to_string(&path).map_err(|source| CliError::Document {
                    path: path.clone(),
                    source,
                })?;
                load_rig(&text).map_err(|source| CliError::Document { path, source })
            }
            None => Ok(demo_rig()),
        }
    }

    pub fn noise(&self, rig: &Rig) -> CliResult<NoiseProfile> {
        let profile = match &self.config.noise {
            Some(p) => {
                let path = self.resolve(p);
                let text = read_to_string(&path).map_err(|source| CliError::Document {
                    path: path.clone(),
                    source,
                })?;
                let mut profile = NoiseProfile::from_json(&text).map_err(|source| CliError::Document { path, source })?;
                profile.seed = self.seed.wrapping_add(seed_offset::NOISE);
                profile
            }
            None => {
                let mut profile = default_noise_profile(self.seed.wrapping_add(seed_offset::NOISE));
                if profile.stds.len() != rig.n_markers() {
                    profile = NoiseProfile::zeros(rig.n_markers(), profile.seed);
                }
                profile
            }
        };
        if profile.stds.len() != rig.n_markers() {
            return Err(CliError::config(
                "noise",
                format!("profile has {} markers, rig has {}", profile.stds.len(), rig.n_markers()),
            ));
        }
        Ok(profile)
    }

    pub fn data_plan(&self) -> DataPlan {
        let d = DataPlan::default();
        let c = &self.config.data;
        DataPlan {
            facs_frames_per_channel: c.facs_frames_per_channel.unwrap_or(d.facs_frames_per_channel),
            rom_frames: c.rom_frames.unwrap_or(d.rom_frames),
            rom_smoothness: c.rom_smoothness.unwrap_or(d.rom_smoothness),
            seed: self.seed,
        }
    }

    pub fn augment(&self) -> bool {
        self.config.data.augment.unwrap_or(true)
    }

    /// Default plans with the global then per-region overrides applied.
    pub fn plans(&self) -> CliResult<Vec<RegionPlan>> {
        let mut plans = default_plans(self.seed.wrapping_add(seed_offset::TRAIN));
        for plan in &mut plans {
            apply_train(&mut plan.train, &self.config.train);
            if let Some(o) = self.config.regions.get(&plan.region) {
                if let Some(v) = o.variant {
                    plan.variant = v;
                }
                if let Some(v) = o.rb_dim {
                    plan.rb_dim = v;
                }
                if let Some(v) = o.n_rb {
                    plan.n_rb = v;
                }
                apply_train(&mut plan.train, &o.train);
            }
            plan.train
                .validate()
                .map_err(|e| CliError::config(format!("regions.{}.train", plan.region), e.to_string()))?;
            if plan.rb_dim == 0 || plan.n_rb == 0 {
                return Err(CliError::config(
                    format!("regions.{}", plan.region),
                    "rb_dim and n_rb must be positive",
                ));
            }
        }
        Ok(plans)
    }

    pub fn models_dir(&self) -> PathBuf {
        match &self.config.models {
            Some(p) => self.resolve(p),
            None => self.out.join("models"),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn shot_path(&self) -> PathBuf {
        match &self.config.shot {
            Some(p) => self.resolve(p),
            None => self.data_dir().join("shot.json"),
        }
    }

    /// Anchor poses read from their weight files, in application order.
    pub fn anchor_poses(&self, rig: &Rig) -> CliResult<Vec<AnchorPose>> {
        self.anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let text = read_to_string(&a.weights).map_err(|source| CliError::Document {
                    path: a.weights.clone(),
                    source,
                })?;
                let key = format!("anchors[{i}].weights");
                let parsed: AnchorWeights = facesolve_core::io::from_json_str(&text)
                    .map_err(|e| CliError::config(key.clone(), e.to_string()))?;
                let weights = match parsed {
                    AnchorWeights::Vector(w) => w,
                    AnchorWeights::Named(map) => {
                        let mut w = vec![0.0; rig.n_channels()];
                        for (name, v) in map {
                            let k = rig
                                .channel_index(&name)
                                .ok_or_else(|| CliError::config(key.clone(), format!("unknown channel `{name}`")))?;
                            w[k] = v;
                        }
                        w
                    }
                };
                Ok(AnchorPose {
                    frame: a.frame,
                    weights,
                    bandwidth: a.bandwidth,
                })
            })
            .collect()
    }

    /// The finetune spec with channel names resolved; every channel over
    /// the whole shot when the config has no finetune section.
    pub fn finetune_spec(&self, rig: &Rig, n_frames: usize) -> CliResult<FinetuneSpec> {
        let last = n_frames.saturating_sub(1);
        let Some(f) = &self.config.finetune else {
            return Ok(FinetuneSpec::new((0..rig.n_channels()).collect(), [0, last]));
        };
        let channels = f
            .channels
            .iter()
            .enumerate()
            .map(|(i, name)| {
                rig.channel_index(name)
                    .ok_or_else(|| CliError::config(format!("finetune.channels[{i}]"), format!("unknown channel `{name}`")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let mut spec = FinetuneSpec::new(channels, f.frames.unwrap_or([0, last]));
        spec.marker_subset = f.markers.clone();
        if let Some(v) = f.max_iters {
            spec.max_iters = v;
        }
        if let Some(v) = f.grad_tol {
            spec.grad_tol = v;
        }
        if let Some(v) = f.history_size {
            spec.history_size = v;
        }
        spec.validate(rig, n_frames)
            .map_err(|e| CliError::config("finetune", e.to_string()))?;
        Ok(spec)
    }
}

fn apply_train(cfg: &mut facesolve_core::neural::TrainConfig, o: &TrainOverride) {
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.l2 {
        cfg.l2 = v;
    }
    if let Some(v) = o.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = o.validation_fraction {
        cfg.validation_fraction = v;
    }
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{assemble, feature_dim, region_markers, FeatureVariant};
use crate::neural::model_io::{from_document, to_document, ModelDocument};
use crate::neural::{train_region, InputStandardizer, Network, NetworkArch, TrainConfig, TrainHistory};
use crate::rig::{MarkerSet, Rig, REGION_NAMES};
use crate::synth::TrainingSet;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Regions whose networks also see the jaw weights.
pub const JAW_CONDITIONED: [&str; 3] = ["lower-face", "lips", "cheek"];

pub fn is_jaw_conditioned(region: &str) -> bool {
    JAW_CONDITIONED.contains(&region)
}

/// How one region's network is built and trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub region: String,
    pub variant: FeatureVariant,
    pub rb_dim: usize,
    pub n_rb: usize,
    pub train: TrainConfig,
}

impl RegionPlan {
    pub fn arch(&self, rig: &Rig) -> Result<NetworkArch> {
        let markers = region_markers(rig, &self.region)?;
        let arch = NetworkArch {
            input_dim: feature_dim(self.variant, markers.len()),
            rb_dim: self.rb_dim,
            n_rb: self.n_rb,
            jaw_cond: is_jaw_conditioned(&self.region),
            jaw_dim: rig.region("jaw")?.channels.len(),
            output_dim: rig.region(&self.region)?.channels.len(),
            dropout: self.train.dropout,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Per-region plans for the demo rig: the published feature choices and
/// block counts, with widths cut to a quarter and a higher learning rate
/// over fewer epochs so all seven regions train in minutes on one core.
pub fn default_plans(seed: u64) -> Vec<RegionPlan> {
    // (region, variant, rb_dim, n_rb, dropout)
    let rows: [(&str, FeatureVariant, usize, usize, f64); 7] = [
        ("jaw", FeatureVariant::DIR_DELTA, 200, 2, 0.01),
        ("upper-face", FeatureVariant::DIST_DIR, 75, 3, 0.01),
        ("lower-face", FeatureVariant::DIST_DELTA, 200, 3, 0.01),
        ("lips", FeatureVariant::DIR, 150, 3, 0.01),
        ("cheek", FeatureVariant::DIST_DELTA, 125, 2, 0.01),
        ("eye-lids", FeatureVariant::DIST_DIR, 75, 2, 0.0),
        ("eyeballs", FeatureVariant::DIST_DIR, 40, 2, 0.0),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(region, variant, rb_dim, n_rb, dropout))| RegionPlan {
            region: region.to_string(),
            variant,
            rb_dim,
            n_rb,
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 64,
                epochs: 60,
                l2: 1e-7,
                dropout,
                seed: seed.wrapping_add(i as u64),
                validation_fraction: 0.1,
            },
        })
        .collect()
}

/// One trained region: network, input normalization and the marker and
/// channel indices it reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSolver {
    pub region: String,
    pub variant: FeatureVariant,
    pub markers: Vec<usize>,
    pub channels: Vec<usize>,
    pub network: Network<f32>,
    pub standardizer: InputStandardizer,
}

#[derive(Serialize, Deserialize)]
struct RegionDocument {
    version: u32,
    region: String,
    variant: FeatureVariant,
    markers: Vec<usize>,
    channels: Vec<usize>,
    model: ModelDocument,
}

#[derive(Serialize, Deserialize)]
struct BundleDocument {
    version: u32,
    regions: Vec<RegionDocument>,
}

fn check_version(found: u32) -> Result<()> {
    if found != BUNDLE_FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: BUNDLE_FORMAT_VERSION,
        });
    }
    Ok(())
}

impl RegionSolver {
    pub fn jaw_conditioned(&self) -> bool {
        self.network.arch.jaw_cond
    }

    /// Check the solver against the rig it will run on.
    pub fn validate(&self, rig: &Rig) -> Result<()> {
        let markers = region_markers(rig, &self.region)?;
        let channels = &rig.region(&self.region)?.channels;
        let arch = &self.network.arch;
        let path = |k: &str| format!("/regions/{}/{k}", self.region);
        if self.markers != markers {
            return Err(Error::validation(path("markers"), "marker list differs from the rig region"));
        }
        if &self.channels != channels {
            return Err(Error::validation(path("channels"), "channel list differs from the rig region"));
        }
        if arch.input_dim != feature_dim(self.variant, markers.len()) {
            return Err(Error::validation(
                path("model/arch/input_dim"),
                format!("{} does not match {} features", arch.input_dim, self.variant),
            ));
        }
        if arch.output_dim != channels.len() {
            return Err(Error::validation(path("model/arch/output_dim"), "does not match channel count"));
        }
        if arch.jaw_cond != is_jaw_conditioned(&self.region) {
            return Err(Error::validation(
                path("model/arch/jaw_cond"),
                format!("must be {} for this region", is_jaw_conditioned(&self.region)),
            ));
        }
        if arch.jaw_cond && arch.jaw_dim != rig.region("jaw")?.channels.len() {
            return Err(Error::validation(path("model/arch/jaw_dim"), "does not match jaw channel count"));
        }
        Ok(())
    }

    /// Unclamped network output for one frame.
    pub fn predict(&self, rig: &Rig, x: &MarkerSet, jaw: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.n() != rig.n_markers() {
            return Err(Error::Dimension(format!(
                "frame has {} markers, rig has {}",
                x.n(),
                rig.n_markers()
            )));
        }
        let neutral = rig.neutral.subset(&self.markers);
        let raw = assemble(self.variant, &x.subset(&self.markers), &neutral)?;
        let z: Vec<f64> = raw
            .iter()
            .zip(self.standardizer.mean.iter().zip(&self.standardizer.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let jaw = if self.jaw_conditioned() { jaw } else { None };
        self.network.predict(&z, jaw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.document()).expect("region serializes")
    }

    pub fn from_json(doc: &str, rig: &Rig) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        check_version(crate::io::from_json_str::<Header>(doc)?.version)?;
        Self::from_document(crate::io::from_json_str(doc)?, rig)
    }

    fn document(&self) -> RegionDocument {
        RegionDocument {
            version: BUNDLE_FORMAT_VERSION,
            region: self.region.clone(),
            variant: self.variant,
            markers: self.markers.clone(),
            channels: self.channels.clone(),
            model: to_document(&self.network, &self.standardizer),
        }
    }

    fn from_document(doc: RegionDocument, rig: &Rig) -> Result<Self> {
        check_version(doc.version)?;
        let (network, standardizer) = from_document(doc.model)?;
        let solver = RegionSolver {
            region: doc.region,
            variant: doc.variant,
            markers: doc.markers,
            channels: doc.channels,
            network,
            standardizer,
        };
        solver.validate(rig)?;
        Ok(solver)
    }
}

/// The seven region solvers, in canonical region order.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverBundle {
    regions: Vec<RegionSolver>,
}

impl SolverBundle {
    /// Assemble a bundle; regions may be given in any order but every
    /// region must appear exactly once.
    pub fn new(mut regions: Vec<RegionSolver>, rig: &Rig) -> Result<Self> {
        for name in REGION_NAMES {
            let count = regions.iter().filter(|r| r.region == name).count();
            if count != 1 {
                return Err(Error::validation(
                    "/regions",
                    format!("region `{name}` appears {count} times, expected once"),
                ));
            }
        }
        if let Some(extra) = regions.iter().find(|r| !REGION_NAMES.contains(&r.region.as_str())) {
            return Err(Error::UnknownRegion(extra.region.clone()));
        }
        regions.sort_by_key(|r| REGION_NAMES.iter().position(|&n| n == r.region));
        for r in &regions {
            r.validate(rig)?;
        }
        Ok(SolverBundle { regions })
    }

    pub fn regions(&self) -> &[RegionSolver] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Result<&RegionSolver> {
        self.regions
            .iter()
            .find(|r| r.region == name)
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    pub fn to_json(&self) -> String {
        let doc = BundleDocument {
            version: BUNDLE_FORMAT_VERSION,
            regions: self.regions.iter().map(RegionSolver::document).collect(),
        };
        serde_json::to_string(&doc).expect("bundle serializes")
    }

    pub fn from_json(doc: &str, rig: &Rig) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        check_version(crate::io::from_json_str::<Header>(doc)?.version)?;
        let doc: BundleDocument = crate::io::from_json_str(doc)?;
        let regions = doc
            .regions
            .into_iter()
            .map(|r| RegionSolver::from_document(r, rig))
            .collect::<Result<Vec<_>>>()?;
        Self::new(regions, rig)
    }
}

/// Train one region. Jaw-conditioned regions use the set's ground-truth jaw
/// weights as the conditioning input.
pub fn train_region_solver(rig: &Rig, set: &TrainingSet, plan: &RegionPlan) -> Result<(RegionSolver, TrainHistory)> {
    let arch = plan.arch(rig)?;
    let jaw_truth = if arch.jaw_cond {
        let names: Vec<String> = rig.region("jaw")?.channels.iter().map(|&k| rig.channels[k].name.clone()).collect();
        Some(set.weights.select(&names)?)
    } else {
        None
    };
    let (network, standardizer, history) =
        train_region(set, &plan.region, rig, plan.variant, &arch, &plan.train, jaw_truth.as_ref())?;
    let solver = RegionSolver {
        region: plan.region.clone(),
        variant: plan.variant,
        markers: region_markers(rig, &plan.region)?,
        channels: rig.region(&plan.region)?.channels.clone(),
        network,
        standardizer,
    };
    Ok((solver, history))
}

/// Train every region in `plans` (independently, possibly in parallel).
pub fn train_bundle(rig: &Rig, set: &TrainingSet, plans: &[RegionPlan]) -> Result<(SolverBundle, Vec<TrainHistory>)> {
    let trained = plans
        .par_iter()
        .map(|p| train_region_solver(rig, set, p))
        .collect::<Result<Vec<_>>>()?;
    let (solvers, histories): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((SolverBundle::new(solvers, rig)?, histories))
}

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{init_network, loss_and_grad, Adam, Batch, Mode, Network, NetworkArch, Real};
use crate::error::{Error, Result};
use crate::features::{assemble, region_markers, FeatureVariant};
use crate::io::WeightTrack;
use crate::rig::{MarkerSet, Rig};
use crate::synth::{stream, TrainingSet};

const VALIDATION_BLOCK: usize = 50;
const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    pub dropout: f64,
    pub seed: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("/train/lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("/train/batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("/train/epochs", "must be >= 1"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::validation("/train/l2", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("/train/dropout", "must be in [0, 1)"));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::validation("/train/validation_fraction", "must be in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Per-dimension affine input normalization fitted on training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputStandardizer {
    pub fn fit(features: &Array2<f64>) -> Self {
        let n = features.nrows().max(1) as f64;
        let mean: Vec<f64> = features.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let std = features
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        InputStandardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<F: Real>(&self, features: &Array2<f64>) -> Result<Array2<F>> {
        if features.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "features have {} columns, standardizer {}",
                features.ncols(),
                self.dim()
            )));
        }
        let mut out = Array2::zeros(features.raw_dim());
        for ((r, c), v) in features.indexed_iter() {
            out[[r, c]] = F::from_f64_lossy((v - self.mean[c]) / self.std[c]);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for r in &self.records {
            let val = r.val_mse.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_mse, val));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Raw (unstandardized) region features, one row per marker set.
pub fn region_features(
    rig: &Rig,
    region: &str,
    variant: FeatureVariant,
    markers: &[MarkerSet],
) -> Result<Array2<f64>> {
    let idx = region_markers(rig, region)?;
    let neutral = rig.neutral.subset(&idx);
    let dim = crate::features::feature_dim(variant, idx.len());
    let mut out = Array2::zeros((markers.len(), dim));
    for (row, x) in out.axis_iter_mut(Axis(0)).zip(markers) {
        if x.n() != rig.n_markers() {
            return Err(Error::Dimension(format!(
                "marker set has {} markers, rig has {}",
                x.n(),
                rig.n_markers()
            )));
        }
        let f = assemble(variant, &x.subset(&idx), &neutral)?;
        ndarray::ArrayView1::from(&f).assign_to(row);
    }
    Ok(out)
}

/// Which samples are held out: contiguous blocks of 50 samples, every
/// `round(1 / fraction)`-th block. At least one sample always trains.
pub fn validation_mask(n: usize, fraction: f64) -> Vec<bool> {
    let mut mask = vec![false; n];
    if fraction <= 0.0 || n < 2 {
        return mask;
    }
    let period = (1.0 / fraction).round().max(2.0) as usize;
    for (i, m) in mask.iter_mut().enumerate() {
        *m = (i / VALIDATION_BLOCK) % period == period - 1;
    }
    if mask.iter().all(|&m| m) {
        mask[0] = false;
    }
    mask
}

fn gather<F: Real>(a: &Array2<F>, idx: &[usize]) -> Array2<F> {
    a.select(Axis(0), idx)
}

/// Eval-mode MSE over the rows in `idx`.
fn evaluate_mse<F: Real>(
    net: &Network<F>,
    x: &Array2<F>,
    jaw: Option<&Array2<F>>,
    y: &Array2<F>,
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(512) {
        let xb = gather(x, chunk);
        let jb = jaw.map(|j| gather(j, chunk));
        let out = net.forward(xb.view(), jb.as_ref().map(|j| j.view()), Mode::Eval)?;
        let yb = gather(y, chunk);
        total += (&out - &yb).iter().map(|d| d.to_f64_lossy().powi(2)).sum::<f64>();
    }
    Ok(total / (idx.len() * y.ncols()) as f64)
}

/// Fit a network on already-extracted features.
pub(crate) fn fit<F: Real>(
    features: &Array2<f64>,
    jaw: Option<&Array2<f64>>,
    targets: &Array2<f64>,
    arch: &NetworkArch,
    cfg: &TrainConfig,
) -> Result<(Network<F>, InputStandardizer, TrainHistory)> {
    cfg.validate()?;
    let mut arch = arch.clone();
    arch.dropout = cfg.dropout;
    arch.validate()?;
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Empty("training set is empty".into()));
    }
    if features.ncols() != arch.input_dim {
        return Err(Error::Dimension(format!(
            "features have {} columns, arch.input_dim is {}",
            features.ncols(),
            arch.input_dim
        )));
    }
    if targets.ncols() != arch.output_dim {
        return Err(Error::Dimension(format!(
            "targets have {} columns, arch.output_dim is {}",
            targets.ncols(),
            arch.output_dim
        )));
    }
    match (arch.jaw_cond, jaw) {
        (true, None) => {
            return Err(Error::validation("jaw_truth", "jaw-conditioned training needs jaw values"))
        }
        (true, Some(j)) if j.ncols() != arch.jaw_dim || j.nrows() != n => {
            return Err(Error::Dimension("jaw values do not match samples".into()))
        }
        _ => {}
    }

    let mask = validation_mask(n, cfg.validation_fraction);
    let train_idx: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let val_idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();

    let standardizer = InputStandardizer::fit(&gather(features, &train_idx));
    let x: Array2<F> = standardizer.apply(features)?;
    let y: Array2<F> = targets.mapv(F::from_f64_lossy);
    let jaw: Option<Array2<F>> = if arch.jaw_cond {
        jaw.map(|j| j.mapv(F::from_f64_lossy))
    } else {
        None
    };

    let mut net: Network<F> = init_network(&arch, cfg.seed)?;
    let mut adam = Adam::new(&net, cfg.lr);
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut dropout_rng = stream(cfg.seed, "dropout");
    let l2 = F::from_f64_lossy(cfg.l2);
    let mut history = TrainHistory::default();
    let mut order = train_idx.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch {
                features: gather(&x, chunk),
                jaw: jaw.as_ref().map(|j| gather(j, chunk)),
                targets: gather(&y, chunk),
            };
            let (_, mse, grads) = loss_and_grad(&net, &batch, l2, Mode::Train(&mut dropout_rng))?;
            sum += mse.to_f64_lossy() * chunk.len() as f64;
            adam.step(&mut net, &grads);
        }
        let val_mse = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_mse(&net, &x, jaw.as_ref(), &y, &val_idx)?)
        };
        history.records.push(EpochRecord {
            epoch,
            train_mse: sum / train_idx.len() as f64,
            val_mse,
        });
    }
    Ok((net, standardizer, history))
}

/// Train one region's regressor on `set`.
///
/// `jaw_truth` supplies ground-truth jaw weights per sample and is required
/// when `arch.jaw_cond` is set. `cfg.dropout` overrides `arch.dropout`.
pub fn train_region(
    set: &TrainingSet,
    region: &str,
    rig: &Rig,
    variant: FeatureVariant,
    arch: &NetworkArch,
    cfg: &TrainConfig,
    jaw_truth: Option<&WeightTrack>,
) -> Result<(Network<f32>, InputStandardizer, TrainHistory)> {
    if set.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let channels = &rig.region(region)?.channels;
    let names = rig.channel_names();
    if set.weights.channels != names {
        return Err(Error::Dimension(
            "training weights do not use the rig's channel list".into(),
        ));
    }
    let features = region_features(rig, region, variant, &set.markers)?;
    let targets = Array2::from_shape_fn((set.len(), channels.len()), |(i, c)| {
        set.weights.frames[i][channels[c]]
    });
    let jaw = match (arch.jaw_cond, jaw_truth) {
        (true, Some(t)) => {
            if t.len() != set.len() || t.dim() != arch.jaw_dim {
                return Err(Error::Dimension(format!(
                    "jaw track is {}x{}, expected {}x{}",
                    t.len(),
                    t.dim(),
                    set.len(),
                    arch.jaw_dim
                )));
            }
            Some(Array2::from_shape_fn((t.len(), t.dim()), |(i, c)| t.frames[i][c]))
        }
        (true, None) => {
            return Err(Error::validation("jaw_truth", "jaw-conditioned training needs jaw values"))
        }
        (false, _) => None,
    };
    fit(&features, jaw.as_ref(), &targets, arch, cfg)
}

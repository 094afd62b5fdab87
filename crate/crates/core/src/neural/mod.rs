//! Fully-connected residual regressors with optional jaw conditioning.
//!
//! Layout, in parameter order:
//!
//! ```text
//! input projection   x -> act(x W_in + b_in)                  (input_dim -> rb_dim)
//! residual block b   h -> h + act(h W1 + b1) W2 + b2            (rb_dim -> rb_dim), n_rb times
//! head hidden        [h, jaw] -> act([h, jaw] W_h + b_h)        (rb_dim (+ jaw_dim) -> rb_dim)
//! output             g -> g W_out + b_out                       (rb_dim -> output_dim)
//! ```
//!
//! Jaw values, when enabled, are concatenated after the residual blocks.
//! Dropout (inverted) follows every activation in training mode. The output
//! is linear; callers clamp predicted weights.

mod adam;
pub(crate) mod model_io;
mod train;

use std::fmt::{Debug, Display};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::stream;

pub use adam::Adam;
pub use model_io::{load_network, save_network, MODEL_FORMAT_VERSION};
pub use train::{
    region_features, train_region, validation_mask, EpochRecord, InputStandardizer, TrainConfig,
    TrainHistory,
};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Float type a network computes in.
pub trait Real:
    ndarray::LinalgScalar + Float + FromPrimitive + ScalarOperand + Debug + Display + Default + Send + Sync
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("float conversion")
    }
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub input_dim: usize,
    pub rb_dim: usize,
    pub n_rb: usize,
    pub jaw_cond: bool,
    pub jaw_dim: usize,
    pub output_dim: usize,
    pub dropout: f64,
}

impl NetworkArch {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("rb_dim", self.rb_dim),
            ("n_rb", self.n_rb),
            ("jaw_dim", self.jaw_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::validation(format!("/arch/{name}"), "must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("/arch/dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Width of the head layer input.
    pub fn head_width(&self) -> usize {
        self.rb_dim + if self.jaw_cond { self.jaw_dim } else { 0 }
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_dim, self.rb_dim)];
        for _ in 0..self.n_rb {
            shapes.push((self.rb_dim, self.rb_dim));
            shapes.push((self.rb_dim, self.rb_dim));
        }
        shapes.push((self.head_width(), self.rb_dim));
        shapes.push((self.rb_dim, self.output_dim));
        shapes
    }
}

/// Affine layer `x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(cols),
        }
    }

    fn apply(&self, x: &ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<F = f32> {
    pub arch: NetworkArch,
    pub layers: Vec<Dense<F>>,
    pub init_seed: u64,
}

/// Parameter-shaped gradient (or optimizer moment) storage.
pub type Gradients<F> = Vec<Dense<F>>;

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Mini-batch of standardized features, optional jaw values and targets.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub features: Array2<F>,
    pub jaw: Option<Array2<F>>,
    pub targets: Array2<F>,
}

struct Trace<F> {
    input: Array2<F>,
    /// Pre-activations, one per activated layer (input, block inner, head).
    pre: Vec<Array2<F>>,
    /// Post-activation (and post-dropout) values for the same layers.
    post: Vec<Array2<F>>,
    masks: Vec<Option<Array2<F>>>,
    /// Residual stream entering each block.
    block_in: Vec<Array2<F>>,
    head_in: Array2<F>,
}

fn leaky<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x * F::from_f64_lossy(LEAKY_SLOPE)
    }
}

fn leaky_grad<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        F::from_f64_lossy(LEAKY_SLOPE)
    }
}

/// Build a deterministic fan-in scaled uniform initialization.
pub fn init_network<F: Real>(arch: &NetworkArch, seed: u64) -> Result<Network<F>> {
    arch.validate()?;
    let mut rng = stream(seed, "init");
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let bound = 1.0 / (rows as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((rows, cols), || {
                F::from_f64_lossy(rng.random_range(-bound..bound))
            });
            let bias = Array1::from_shape_simple_fn(cols, || {
                F::from_f64_lossy(rng.random_range(-bound..bound))
            });
            Dense { weight, bias }
        })
        .collect();
    Ok(Network {
        arch: arch.clone(),
        layers,
        init_seed: seed,
    })
}

impl<F: Real> Network<F> {
    fn head_index(&self) -> usize {
        1 + 2 * self.arch.n_rb
    }

    pub fn n_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<F> {
        self.layers
            .iter()
            .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
            .collect()
    }

    /// Sum of squared parameters.
    pub fn squared_norm(&self) -> F {
        self.layers.iter().fold(F::zero(), |acc, l| {
            acc + l.weight.iter().map(|&w| w * w).fold(F::zero(), |a, b| a + b)
                + l.bias.iter().map(|&b| b * b).fold(F::zero(), |a, b| a + b)
        })
    }

    fn check_inputs(&self, features: &ArrayView2<F>, jaw: Option<&ArrayView2<F>>) -> Result<()> {
        if features.ncols() != self.arch.input_dim {
            return Err(Error::Dimension(format!(
                "features have {} columns, network expects {}",
                features.ncols(),
                self.arch.input_dim
            )));
        }
        match (self.arch.jaw_cond, jaw) {
            (true, None) => Err(Error::Dimension("jaw-conditioned network needs jaw values".into())),
            (false, Some(_)) => Err(Error::Dimension(
                "network is not jaw-conditioned but jaw values were given".into(),
            )),
            (true, Some(j)) if j.ncols() != self.arch.jaw_dim || j.nrows() != features.nrows() => {
                Err(Error::Dimension(format!(
                    "jaw block is {}x{}, expected {}x{}",
                    j.nrows(),
                    j.ncols(),
                    features.nrows(),
                    self.arch.jaw_dim
                )))
            }
            _ => Ok(()),
        }
    }

    fn activate(&self, pre: &Array2<F>, mode: &mut Mode<'_>) -> (Array2<F>, Option<Array2<F>>) {
        let mut post = pre.mapv(leaky);
        let p = self.arch.dropout;
        let mask = match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = F::from_f64_lossy(1.0 / (1.0 - p));
                let mask = Array2::from_shape_simple_fn(post.raw_dim(), || {
                    if rng.random::<f64>() >= p {
                        keep
                    } else {
                        F::zero()
                    }
                });
                post = post * &mask;
                Some(mask)
            }
            _ => None,
        };
        (post, mask)
    }

    fn forward_trace(
        &self,
        features: ArrayView2<F>,
        jaw: Option<ArrayView2<F>>,
        mut mode: Mode<'_>,
    ) -> Result<(Array2<F>, Trace<F>)> {
        self.check_inputs(&features, jaw.as_ref())?;
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut masks = Vec::new();
        let mut block_in = Vec::new();

        let a0 = self.layers[0].apply(&features);
        let (mut h, m) = self.activate(&a0, &mut mode);
        pre.push(a0);
        post.push(h.clone());
        masks.push(m);

        for b in 0..self.arch.n_rb {
            let inner = &self.layers[1 + 2 * b];
            let outer = &self.layers[2 + 2 * b];
            let u = inner.apply(&h.view());
            let (v, m) = self.activate(&u, &mut mode);
            let r = outer.apply(&v.view());
            block_in.push(h.clone());
            h = h + r;
            pre.push(u);
            post.push(v);
            masks.push(m);
        }

        let head_in = match jaw {
            Some(j) => ndarray::concatenate(Axis(1), &[h.view(), j]).expect("row counts match"),
            None => h,
        };
        let head = &self.layers[self.head_index()];
        let ah = head.apply(&head_in.view());
        let (g, m) = self.activate(&ah, &mut mode);
        let out = self.layers[self.head_index() + 1].apply(&g.view());
        pre.push(ah);
        post.push(g);
        masks.push(m);

        Ok((
            out,
            Trace {
                input: features.to_owned(),
                pre,
                post,
                masks,
                block_in,
                head_in,
            },
        ))
    }

    /// Raw (unclamped) outputs for a batch of standardized features.
    pub fn forward(
        &self,
        features: ArrayView2<F>,
        jaw: Option<ArrayView2<F>>,
        mode: Mode<'_>,
    ) -> Result<Array2<F>> {
        self.forward_trace(features, jaw, mode).map(|(out, _)| out)
    }

    /// Single-sample evaluation-mode forward pass in `f64`.
    pub fn predict(&self, features: &[f64], jaw: Option<&[f64]>) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec(
            (1, features.len()),
            features.iter().map(|&v| F::from_f64_lossy(v)).collect(),
        )
        .expect("row vector");
        let j = jaw.map(|j| {
            Array2::from_shape_vec((1, j.len()), j.iter().map(|&v| F::from_f64_lossy(v)).collect())
                .expect("row vector")
        });
        let out = self.forward(x.view(), j.as_ref().map(|j| j.view()), Mode::Eval)?;
        Ok(out.iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// Backpropagate `d_out` (gradient of the loss w.r.t. the outputs).
    fn backward(&self, trace: &Trace<F>, d_out: &Array2<F>) -> Gradients<F> {
        let mut grads = self.zero_gradients();
        let hi = self.head_index();
        let n_act = trace.pre.len();

        let g = &trace.post[n_act - 1];
        grads[hi + 1].weight = g.t().dot(d_out);
        grads[hi + 1].bias = d_out.sum_axis(Axis(0));
        let mut dg = d_out.dot(&self.layers[hi + 1].weight.t());
        if let Some(m) = &trace.masks[n_act - 1] {
            dg = dg * m;
        }
        let dah = dg * &trace.pre[n_act - 1].mapv(leaky_grad);
        grads[hi].weight = trace.head_in.t().dot(&dah);
        grads[hi].bias = dah.sum_axis(Axis(0));
        let d_head_in = dah.dot(&self.layers[hi].weight.t());
        let mut dh = d_head_in.slice(s![.., ..self.arch.rb_dim]).to_owned();

        for b in (0..self.arch.n_rb).rev() {
            let a = 1 + b; // activation slot of this block
            let inner = 1 + 2 * b;
            let outer = 2 + 2 * b;
            grads[outer].weight = trace.post[a].t().dot(&dh);
            grads[outer].bias = dh.sum_axis(Axis(0));
            let mut dv = dh.dot(&self.layers[outer].weight.t());
            if let Some(m) = &trace.masks[a] {
                dv = dv * m;
            }
            let du = dv * &trace.pre[a].mapv(leaky_grad);
            grads[inner].weight = trace.block_in[b].t().dot(&du);
            grads[inner].bias = du.sum_axis(Axis(0));
            dh = dh + du.dot(&self.layers[inner].weight.t());
        }

        if let Some(m) = &trace.masks[0] {
            dh = dh * m;
        }
        let da0 = dh * &trace.pre[0].mapv(leaky_grad);
        grads[0].weight = trace.input.t().dot(&da0);
        grads[0].bias = da0.sum_axis(Axis(0));
        grads
    }
}

/// Mean squared error over all batch entries plus `l2 * |theta|^2`, and its
/// gradient. Dropout is applied only when `mode` is [`Mode::Train`].
pub fn loss_and_grad<F: Real>(
    net: &Network<F>,
    batch: &Batch<F>,
    l2: F,
    mode: Mode<'_>,
) -> Result<(F, F, Gradients<F>)> {
    let b = batch.features.nrows();
    if b == 0 {
        return Err(Error::Empty("batch has no rows".into()));
    }
    if batch.targets.dim() != (b, net.arch.output_dim) {
        return Err(Error::Dimension(format!(
            "targets are {:?}, expected ({b}, {})",
            batch.targets.dim(),
            net.arch.output_dim
        )));
    }
    let (out, trace) = net.forward_trace(batch.features.view(), batch.jaw.as_ref().map(|j| j.view()), mode)?;
    let diff = &out - &batch.targets;
    let count = F::from_usize(diff.len()).expect("count");
    let mse = diff.iter().map(|&d| d * d).fold(F::zero(), |a, c| a + c) / count;
    let d_out = diff * (F::from_f64_lossy(2.0) / count);
    let mut grads = net.backward(&trace, &d_out);
    let two_l2 = l2 + l2;
    if l2 != F::zero() {
        for (g, p) in grads.iter_mut().zip(&net.layers) {
            g.weight.scaled_add(two_l2, &p.weight);
            g.bias.scaled_add(two_l2, &p.bias);
        }
    }
    let loss = mse + l2 * net.squared_norm();
    Ok((loss, mse, grads))
}

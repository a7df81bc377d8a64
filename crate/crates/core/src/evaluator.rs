//! The spatial-error evaluator: a network `E(reference, moving)` trained to
//! predict `reference - moving` where the moving image has been pushed into a
//! different intensity distribution, so the prediction only reflects spatial
//! disagreement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ErrorMap, ImageGrid};
use crate::nn::evaluator_net::{EvaluatorArch, EvaluatorNet, EvaluatorTrace};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::transforms::{make_training_pair, NoiseMode, PairConfig};

const TRAIN_STREAM: u64 = 0x7472_6169;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub channels: [usize; 3],
    pub residual_blocks: usize,
    pub learning_rate: f64,
    /// Cosine-anneal the learning rate down to this fraction of its initial
    /// value over the run (1.0 keeps it constant).
    pub final_lr_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Tag of the single modality the source images come from.
    pub modality: String,
    pub pairs: PairConfig,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        let arch = EvaluatorArch::default();
        Self {
            channels: arch.channels,
            residual_blocks: arch.residual_blocks,
            learning_rate: 1e-3,
            final_lr_fraction: 0.05,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            modality: "a".into(),
            pairs: PairConfig::default(),
        }
    }
}

impl EvaluatorConfig {
    pub fn arch(&self) -> EvaluatorArch {
        EvaluatorArch {
            channels: self.channels,
            residual_blocks: self.residual_blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::BadConfig("evaluator channels must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::BadConfig("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::BadConfig("final_lr_fraction must be in [0, 1]".into()));
        }
        self.pairs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub modality: String,
    pub noise: NoiseMode,
    pub n_min: usize,
    pub n_max: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EvaluatorModel<T> {
    net: EvaluatorNet,
    params: Vec<T>,
    pub meta: TrainingMeta,
}

/// Mean absolute evaluator output together with its gradients with respect
/// to both inputs.
#[derive(Debug, Clone)]
pub struct ImseGradient<T> {
    pub loss: T,
    pub reference: Vec<T>,
    pub moving: Vec<T>,
}

fn stack<T: Scalar>(reference: &ImageGrid<T>, moving: &ImageGrid<T>) -> Tensor<T> {
    let (h, w) = reference.shape();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend_from_slice(reference.values());
    data.extend_from_slice(moving.values());
    Tensor::from_data(2, h, w, data)
}

impl<T: Scalar> EvaluatorModel<T> {
    pub fn from_parts(arch: EvaluatorArch, params: Vec<T>, meta: TrainingMeta) -> Result<Self> {
        let net = EvaluatorNet::new(arch);
        if params.len() != net.param_len() {
            return Err(Error::BadConfig(format!(
                "evaluator expects {} parameters, got {}",
                net.param_len(),
                params.len()
            )));
        }
        Ok(Self { net, params, meta })
    }

    pub fn arch(&self) -> EvaluatorArch {
        self.net.arch()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn cast<U: Scalar>(&self) -> EvaluatorModel<U> {
        EvaluatorModel {
            net: self.net.clone(),
            params: self.params.iter().map(|&v| U::lit(v.as_f64())).collect(),
            meta: self.meta.clone(),
        }
    }

    fn run(&self, reference: &ImageGrid<T>, moving: &ImageGrid<T>) -> Result<EvaluatorTrace<T>> {
        reference.ensure_same_shape(moving)?;
        Ok(self.net.forward(&self.params, &stack(reference, moving)))
    }

    /// `E(reference, moving)`: the predicted signed error `reference - moving`
    /// with the moving content expressed in the reference distribution.
    pub fn predict_error_map(&self, reference: &ImageGrid<T>, moving: &ImageGrid<T>) -> Result<ErrorMap<T>> {
        let (h, w) = reference.shape();
        let out = self.run(reference, moving)?.output;
        Ok(ErrorMap::from_raw_unchecked(h, w, out.data))
    }

    /// Mean `|E(reference, moving)|` over all pixels with input gradients.
    pub fn mean_abs_with_grad(&self, reference: &ImageGrid<T>, moving: &ImageGrid<T>) -> Result<ImseGradient<T>> {
        self.weighted_abs_with_grad(reference, moving, None)
    }

    /// Mean `|E|` restricted to pixels where `weights` is nonzero (weighted
    /// by it), with gradients with respect to both inputs.
    pub fn weighted_abs_with_grad(
        &self,
        reference: &ImageGrid<T>,
        moving: &ImageGrid<T>,
        weights: Option<&[T]>,
    ) -> Result<ImseGradient<T>> {
        let trace = self.run(reference, moving)?;
        let (h, w) = reference.shape();
        let n = h * w;
        let total = match weights {
            Some(wts) => wts.iter().copied().sum::<T>(),
            None => T::from_usize_lossy(n),
        };
        if !(total > T::zero()) {
            return Err(Error::EmptyRegion);
        }
        let mut loss = T::zero();
        let mut upstream = vec![T::zero(); n];
        for (i, &e) in trace.output.data.iter().enumerate() {
            let wt = weights.map_or(T::one(), |wts| wts[i]);
            loss += wt * e.abs();
            upstream[i] = wt * e.signum() / total;
        }
        loss /= total;
        let up = Tensor::from_data(1, h, w, upstream);
        let grad = self
            .net
            .backward(&self.params, &trace, &up, None, true)
            .expect("input gradient requested");
        let mut parts = grad.split(&[1, 1]).into_iter();
        Ok(ImseGradient {
            loss,
            reference: parts.next().expect("two channels").data,
            moving: parts.next().expect("two channels").data,
        })
    }

    /// Re-expresses `source` in the intensity distribution of `reference`:
    /// `clamp(reference - E(reference, source), -1, 1)`.
    pub fn translate(&self, reference: &ImageGrid<T>, source: &ImageGrid<T>) -> Result<ImageGrid<T>> {
        let e = self.predict_error_map(reference, source)?;
        let (h, w) = reference.shape();
        let values = reference.values().iter().zip(e.values()).map(|(&r, &d)| r - d).collect();
        ImageGrid::from_clamped(h, w, values)
    }
}

pub fn init_evaluator<T: Scalar>(config: &EvaluatorConfig) -> Result<EvaluatorModel<T>> {
    config.validate()?;
    let net = EvaluatorNet::new(config.arch());
    let params = net.init_params(&mut SeedStream::derive(config.seed, &[INIT_STREAM]));
    Ok(EvaluatorModel {
        net,
        params,
        meta: TrainingMeta {
            steps: 0,
            final_loss: None,
            modality: config.modality.clone(),
            noise: config.pairs.noise,
            n_min: config.pairs.n_min,
            n_max: config.pairs.n_max,
            seed: config.seed,
        },
    })
}

/// L1 loss of one synthesized sample plus its parameter gradient (if asked).
fn sample_loss<T: Scalar>(
    model: &EvaluatorModel<T>,
    source: &ImageGrid<T>,
    stream: &mut SeedStream,
    pairs: &PairConfig,
    scale: T,
    with_grad: bool,
) -> Result<(f64, Option<Vec<T>>)> {
    let sample = make_training_pair(source, stream, pairs)?;
    let trace = model.run(&sample.reference, &sample.noisy_moving)?;
    let n = sample.label.values().len();
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(n);
    for (&e, &l) in trace.output.data.iter().zip(sample.label.values()) {
        let d = e - l;
        loss += d.abs().as_f64();
        upstream.push(d.signum() * scale);
    }
    loss /= n as f64;
    if !with_grad {
        return Ok((loss, None));
    }
    let (h, w) = sample.label.shape();
    let mut grads = vec![T::zero(); model.params.len()];
    model
        .net
        .backward(&model.params, &trace, &Tensor::from_data(1, h, w, upstream), Some(&mut grads), false);
    Ok((loss, Some(grads)))
}

/// Cosine schedule from `lr` at step 0 to `lr * final_fraction` at the end.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, steps: usize) -> f64 {
    let t = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
    lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Trains on freshly synthesized pairs every step; returns the per-step mean
/// L1 loss. Each sample has its own derived stream, so the result does not
/// depend on thread count.
pub fn train_evaluator<T: Scalar>(
    model: &mut EvaluatorModel<T>,
    sources: &[ImageGrid<T>],
    config: &EvaluatorConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = sources[0].shape();
    for s in sources {
        s.ensure_same_shape(&sources[0])?;
    }
    let mut opt = Adam::new(model.params.len(), AdamConfig::with_lr(config.learning_rate));
    let batch = config.batch_size;
    let scale = T::one() / T::from_usize_lossy(batch * shape.0 * shape.1);
    let first_step = model.meta.steps;
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        opt.set_learning_rate(cosine_lr(config.learning_rate, config.final_lr_fraction, step, config.steps));
        let global = (first_step + step) as u64;
        let results = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut stream = SeedStream::derive(config.seed, &[TRAIN_STREAM, global, b as u64]);
                let idx = stream.uniform_usize(0, sources.len() - 1);
                sample_loss(model, &sources[idx], &mut stream, &config.pairs, scale, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = vec![T::zero(); model.params.len()];
        let mut loss = 0.0;
        for (l, g) in results {
            loss += l;
            for (acc, v) in grads.iter_mut().zip(g.expect("gradient requested")) {
                *acc += v;
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedTraining { step });
        }
        opt.step(&mut model.params, &grads);
        trace.push(loss);
        on_step(step, loss);
    }
    model.meta.steps = first_step + config.steps;
    model.meta.final_loss = trace.last().copied().or(model.meta.final_loss);
    Ok(trace)
}

/// Mean label L1 over `count` synthesized pairs drawn from a stream family
/// disjoint from the training streams.
pub fn held_out_l1<T: Scalar>(
    model: &EvaluatorModel<T>,
    sources: &[ImageGrid<T>],
    pairs: &PairConfig,
    count: usize,
    seed: u64,
) -> Result<f64> {
    if sources.is_empty() || count == 0 {
        return Err(Error::EmptyDataset);
    }
    let losses = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut stream = SeedStream::derive(seed, &[i as u64]);
            let idx = stream.uniform_usize(0, sources.len() - 1);
            sample_loss(model, &sources[idx], &mut stream, pairs, T::one(), false).map(|(l, _)| l)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / count as f64)
}

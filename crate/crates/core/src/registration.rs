//! Deformable registration driven by a similarity loss plus a smoothness
//! penalty: per-pair iterative optimization of a dense field, and a learned
//! U-shaped network that predicts the field in one pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{dice, field_smoothness, hd95, BinaryMask};
use crate::evaluator::EvaluatorModel;
use crate::image::{warp, warp_vjp, DeformationField, ImageGrid};
use crate::metrics::{Metric, MetricKind};
use crate::nn::unet::{UNet, UNetArch};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::rng::SeedStream;
use crate::scalar::Scalar;

const TRAIN_STREAM: u64 = 0x7265_6774;
const INIT_STREAM: u64 = 0x756e_6574;

/// Mean squared forward difference over all `4 * H * W` gradient entries
/// (trailing row/column differences are zero).
pub fn smoothness_loss<T: Scalar>(field: &DeformationField<T>) -> T {
    smoothness_with_grad(field, false).0
}

fn smoothness_with_grad<T: Scalar>(field: &DeformationField<T>, want_grad: bool) -> (T, Vec<T>) {
    let (h, w) = field.shape();
    let v = field.as_slice();
    let inv = T::one() / T::from_usize_lossy(4 * h * w);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grad = if want_grad { vec![T::zero(); v.len()] } else { Vec::new() };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut neighbours = [None, None];
            if y + 1 < h {
                neighbours[0] = Some(p + w);
            }
            if x + 1 < w {
                neighbours[1] = Some(p + 1);
            }
            for q in neighbours.into_iter().flatten() {
                for c in 0..2 {
                    let d = v[2 * q + c] - v[2 * p + c];
                    loss += d * d;
                    if want_grad {
                        let g = two * d * inv;
                        grad[2 * q + c] += g;
                        grad[2 * p + c] -= g;
                    }
                }
            }
        }
    }
    (loss * inv, grad)
}

/// Which evaluator input receives the warped image. The reference slot
/// should hold the image from the modality the evaluator was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImseReference {
    /// `E(target, warped)`.
    #[default]
    Target,
    /// `E(warped, target)`.
    Warped,
}

impl std::str::FromStr for ImseReference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Self::Target),
            "warped" => Ok(Self::Warped),
            other => Err(Error::BadConfig(format!("unknown imse reference {other:?}"))),
        }
    }
}

/// Similarity term of the registration objective (lower is better).
#[derive(Debug, Clone, Copy)]
pub enum Similarity<'a, T> {
    Metric(Metric),
    Imse {
        model: &'a EvaluatorModel<T>,
        reference: ImseReference,
    },
}

impl<T: Scalar> Similarity<'_, T> {
    /// Loss and gradient with respect to the warped image.
    pub fn loss_and_grad(&self, warped: &ImageGrid<T>, target: &ImageGrid<T>) -> Result<(T, Vec<T>)> {
        match self {
            Similarity::Metric(m) => m.loss_and_grad(warped, target),
            Similarity::Imse { model, reference } => match reference {
                ImseReference::Target => {
                    let g = model.mean_abs_with_grad(target, warped)?;
                    Ok((g.loss, g.moving))
                }
                ImseReference::Warped => {
                    let g = model.mean_abs_with_grad(warped, target)?;
                    Ok((g.loss, g.reference))
                }
            },
        }
    }
}

/// Loss key accepted in configs: a metric key or `"imse"`.
pub fn parse_loss_key(key: &str) -> Result<Option<MetricKind>> {
    if key == "imse" {
        Ok(None)
    } else {
        key.parse().map(Some)
    }
}

/// Total objective `similarity(warp(moving, field), target) + lambda *
/// smoothness(field)` and its gradient with respect to the field.
pub fn objective<T: Scalar>(
    moving: &ImageGrid<T>,
    target: &ImageGrid<T>,
    field: &DeformationField<T>,
    similarity: &Similarity<'_, T>,
    lambda: T,
) -> Result<(T, Vec<T>)> {
    moving.ensure_same_shape(target)?;
    let warped = warp(moving, field)?;
    let (sim, g_warped) = similarity.loss_and_grad(&warped, target)?;
    let g = warp_vjp(moving, field, &g_warped)?;
    let (smooth, g_smooth) = smoothness_with_grad(field, true);
    let grad = g.field.iter().zip(&g_smooth).map(|(&a, &b)| a + lambda * b).collect();
    Ok((sim + lambda * smooth, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// `mae`, `mse`, `ncc`, `mi`, `mind` or `imse`.
    pub loss: String,
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub ncc_window: usize,
    pub mi_bins: usize,
    pub imse_reference: ImseReference,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        let m = Metric::new(MetricKind::Mae);
        Self {
            loss: "mae".into(),
            lambda: 1.0,
            iterations: 200,
            learning_rate: 1.0,
            seed: 0,
            ncc_window: m.ncc_window,
            mi_bins: m.mi_bins,
            imse_reference: ImseReference::Target,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        parse_loss_key(&self.loss)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::BadConfig("lambda must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::BadConfig("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::BadConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Resolves the configured loss; `imse` requires an evaluator.
    pub fn similarity<'a, T: Scalar>(&self, evaluator: Option<&'a EvaluatorModel<T>>) -> Result<Similarity<'a, T>> {
        match parse_loss_key(&self.loss)? {
            Some(kind) => Ok(Similarity::Metric(Metric {
                kind,
                ncc_window: self.ncc_window,
                mi_bins: self.mi_bins,
            })),
            None => {
                let model = evaluator.ok_or_else(|| Error::BadConfig("loss \"imse\" needs an evaluator".into()))?;
                Ok(Similarity::Imse {
                    model,
                    reference: self.imse_reference,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub dice: f64,
    pub hd95: f64,
    pub smoothness: f64,
}

impl QualityMetrics {
    /// Scores `field` by warping the moving mask and comparing with the
    /// target mask.
    pub fn compute<T: Scalar>(
        field: &DeformationField<T>,
        mask_moving: &BinaryMask,
        mask_target: &BinaryMask,
    ) -> Result<Self> {
        let warped = mask_moving.warp_nearest(field)?;
        Ok(Self {
            dice: dice(&warped, mask_target)?,
            hd95: hd95(&warped, mask_target)?,
            smoothness: field_smoothness(field),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult<T> {
    pub field: DeformationField<T>,
    pub warped: ImageGrid<T>,
    pub trace: Vec<f64>,
    pub metrics: Option<QualityMetrics>,
}

impl<T: Scalar> RegistrationResult<T> {
    fn new(moving: &ImageGrid<T>, field: DeformationField<T>, trace: Vec<f64>) -> Result<Self> {
        Ok(Self {
            warped: warp(moving, &field)?,
            field,
            trace,
            metrics: None,
        })
    }

    pub fn with_metrics(mut self, mask_moving: &BinaryMask, mask_target: &BinaryMask) -> Result<Self> {
        self.metrics = Some(QualityMetrics::compute(&self.field, mask_moving, mask_target)?);
        Ok(self)
    }
}

/// Optimizes a zero-initialized field with Adam for a fixed number of
/// iterations and returns the lowest-loss iterate seen.
pub fn register_iterative<T: Scalar>(
    moving: &ImageGrid<T>,
    target: &ImageGrid<T>,
    config: &RegistrationConfig,
    evaluator: Option<&EvaluatorModel<T>>,
) -> Result<RegistrationResult<T>> {
    config.validate()?;
    moving.ensure_same_shape(target)?;
    let similarity = config.similarity(evaluator)?;
    let (h, w) = moving.shape();
    let lambda = T::lit(config.lambda);
    let mut field = DeformationField::zeros(h, w);
    let mut opt = Adam::new(2 * h * w, AdamConfig::with_lr(config.learning_rate));
    let mut trace = Vec::with_capacity(config.iterations);
    let mut best: Option<(f64, DeformationField<T>)> = None;
    for iteration in 0..=config.iterations {
        let (loss, grad) = objective(moving, target, &field, &similarity, lambda)?;
        let loss = loss.as_f64();
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration });
        }
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, field.clone()));
        }
        if iteration == config.iterations {
            break;
        }
        trace.push(loss);
        opt.step(field.as_mut_slice(), &grad);
    }
    let (_, field) = best.expect("at least one evaluation");
    RegistrationResult::new(moving, field, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkTrainingConfig {
    pub base_channels: usize,
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NetworkTrainingConfig {
    fn default() -> Self {
        Self {
            base_channels: UNetArch::default().base_channels,
            lambda: 1.0,
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl NetworkTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::BadConfig("base_channels and batch_size must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::BadConfig("lambda must be >= 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationNetwork<T> {
    net: UNet,
    params: Vec<T>,
    pub steps: usize,
}

fn stack<T: Scalar>(moving: &ImageGrid<T>, target: &ImageGrid<T>) -> Tensor<T> {
    let (h, w) = moving.shape();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend_from_slice(moving.values());
    data.extend_from_slice(target.values());
    Tensor::from_data(2, h, w, data)
}

fn flow_to_field<T: Scalar>(flow: &Tensor<T>) -> DeformationField<T> {
    let p = flow.plane();
    let (dy, dx) = (flow.channel(0), flow.channel(1));
    let mut v = Vec::with_capacity(2 * p);
    for i in 0..p {
        v.push(dy[i]);
        v.push(dx[i]);
    }
    DeformationField::from_interleaved(flow.height, flow.width, v).expect("flow has matching size")
}

fn field_grad_to_flow<T: Scalar>(grad: &[T], h: usize, w: usize) -> Tensor<T> {
    let p = h * w;
    let mut data = vec![T::zero(); 2 * p];
    for i in 0..p {
        data[i] = grad[2 * i];
        data[p + i] = grad[2 * i + 1];
    }
    Tensor::from_data(2, h, w, data)
}

impl<T: Scalar> RegistrationNetwork<T> {
    /// New network whose flow layer is zero, i.e. the identity transform.
    pub fn new(arch: UNetArch, seed: u64) -> Self {
        let net = UNet::new(arch);
        let params = net.init_params(&mut SeedStream::derive(seed, &[INIT_STREAM]));
        Self { net, params, steps: 0 }
    }

    pub fn from_parts(arch: UNetArch, params: Vec<T>, steps: usize) -> Result<Self> {
        let net = UNet::new(arch);
        if params.len() != net.param_len() {
            return Err(Error::BadConfig(format!(
                "registration network expects {} parameters, got {}",
                net.param_len(),
                params.len()
            )));
        }
        Ok(Self { net, params, steps })
    }

    pub fn arch(&self) -> UNetArch {
        self.net.arch()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn predict_field(&self, moving: &ImageGrid<T>, target: &ImageGrid<T>) -> Result<DeformationField<T>> {
        moving.ensure_same_shape(target)?;
        Ok(flow_to_field(&self.net.forward(&self.params, &stack(moving, target)).output))
    }
}

pub fn register_with_network<T: Scalar>(
    network: &RegistrationNetwork<T>,
    moving: &ImageGrid<T>,
    target: &ImageGrid<T>,
) -> Result<RegistrationResult<T>> {
    let field = network.predict_field(moving, target)?;
    RegistrationResult::new(moving, field, Vec::new())
}

/// Trains the network on `(moving, target)` pairs with a frozen similarity;
/// returns the per-step mean objective.
pub fn train_registration_network<T: Scalar>(
    network: &mut RegistrationNetwork<T>,
    pairs: &[(ImageGrid<T>, ImageGrid<T>)],
    similarity: &Similarity<'_, T>,
    config: &NetworkTrainingConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (m, t) in pairs {
        m.ensure_same_shape(t)?;
    }
    let lambda = T::lit(config.lambda);
    let scale = T::one() / T::from_usize_lossy(config.batch_size);
    let mut opt = Adam::new(network.params.len(), AdamConfig::with_lr(config.learning_rate));
    let mut trace = Vec::with_capacity(config.steps);
    let first_step = network.steps;
    for step in 0..config.steps {
        let global = (first_step + step) as u64;
        let net = &*network;
        let results = (0..config.batch_size)
            .into_par_iter()
            .map(|b| {
                let mut stream = SeedStream::derive(config.seed, &[TRAIN_STREAM, global, b as u64]);
                let (moving, target) = &pairs[stream.uniform_usize(0, pairs.len() - 1)];
                let (h, w) = moving.shape();
                let trace = net.net.forward(&net.params, &stack(moving, target));
                let field = flow_to_field(&trace.output);
                let (loss, g_field) = objective(moving, target, &field, similarity, lambda)?;
                let g_flow: Vec<T> = field_grad_to_flow(&g_field, h, w).data.into_iter().map(|g| g * scale).collect();
                let mut grads = vec![T::zero(); net.params.len()];
                net.net
                    .backward(&net.params, &trace, &Tensor::from_data(2, h, w, g_flow), &mut grads, false);
                Ok((loss.as_f64(), grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = vec![T::zero(); network.params.len()];
        let mut loss = 0.0;
        for (l, g) in results {
            loss += l;
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v;
            }
        }
        loss /= config.batch_size as f64;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedTraining { step });
        }
        opt.step(&mut network.params, &grads);
        trace.push(loss);
        on_step(step, loss);
    }
    network.steps = first_step + config.steps;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{init_evaluator, EvaluatorConfig};

    fn blob(h: usize, w: usize, cy: f64, cx: f64) -> ImageGrid<f64> {
        ImageGrid::from_fn(h, w, |y, x| {
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            (1.6 * (-r2 / 40.0).exp() - 0.8).clamp(-1.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_loss(&DeformationField::<f64>::zeros(5, 6)), 0.0);
        assert_eq!(smoothness_loss(&DeformationField::<f64>::constant(5, 6, 3.0, -2.0)), 0.0);
        let (h, w) = (5, 6);
        let ramp = DeformationField::<f64>::from_fn(h, w, |_, x| (0.0, x as f64));
        let expected = (h * (w - 1)) as f64 / (4 * h * w) as f64;
        assert!((smoothness_loss(&ramp) - expected).abs() < 1e-15);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let moving = blob(8, 8, 3.5, 4.2);
        let target = blob(8, 8, 4.1, 3.6);
        let mut s = SeedStream::new(3);
        let field = DeformationField::from_fn(8, 8, |_, _| (s.uniform(-0.7, 0.7), s.uniform(-0.7, 0.7)));
        let ev: EvaluatorModel<f64> = init_evaluator(&EvaluatorConfig {
            channels: [3, 4, 4],
            residual_blocks: 1,
            ..EvaluatorConfig::default()
        })
        .unwrap();
        let sims = [
            Similarity::Metric(Metric::new(MetricKind::Mse)),
            Similarity::Metric(Metric::new(MetricKind::Ncc)),
            Similarity::Imse {
                model: &ev,
                reference: ImseReference::Target,
            },
            Similarity::Imse {
                model: &ev,
                reference: ImseReference::Warped,
            },
        ];
        for sim in &sims {
            let (_, grad) = objective(&moving, &target, &field, sim, 0.5).unwrap();
            let h = 1e-6;
            for i in 0..grad.len() {
                let mut p = field.as_slice().to_vec();
                p[i] += h;
                let mut m = field.as_slice().to_vec();
                m[i] -= h;
                let fp = DeformationField::from_interleaved(8, 8, p).unwrap();
                let fm = DeformationField::from_interleaved(8, 8, m).unwrap();
                let num = (objective(&moving, &target, &fp, sim, 0.5).unwrap().0
                    - objective(&moving, &target, &fm, sim, 0.5).unwrap().0)
                    / (2.0 * h);
                let err = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-4);
                assert!(err < 1e-3, "entry {i}: {num} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn identical_images_stay_put() {
        let img = blob(16, 16, 7.0, 8.0);
        let res = register_iterative(&img, &img, &RegistrationConfig::default(), None).unwrap();
        assert!(res.field.mean_magnitude() < 0.1);
        assert_eq!(res.trace.len(), 200);
    }

    #[test]
    fn best_iterate_is_returned() {
        let moving = blob(16, 16, 7.0, 9.0);
        let target = blob(16, 16, 7.5, 7.0);
        let cfg = RegistrationConfig {
            iterations: 30,
            ..RegistrationConfig::default()
        };
        let res = register_iterative(&moving, &target, &cfg, None).unwrap();
        let sim = cfg.similarity::<f64>(None).unwrap();
        let (final_loss, _) = objective(&moving, &target, &res.field, &sim, 1.0).unwrap();
        let best_in_trace = res.trace.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(final_loss <= best_in_trace + 1e-12);
        assert_eq!(res.warped, warp(&moving, &res.field).unwrap());
    }

    #[test]
    fn imse_loss_requires_an_evaluator() {
        let img = blob(8, 8, 3.0, 3.0);
        let cfg = RegistrationConfig {
            loss: "imse".into(),
            ..RegistrationConfig::default()
        };
        assert!(matches!(
            register_iterative(&img, &img, &cfg, None),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            RegistrationConfig {
                loss: "l2".into(),
                ..RegistrationConfig::default()
            }
            .validate(),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn untrained_network_is_identity() {
        let net = RegistrationNetwork::<f64>::new(UNetArch { base_channels: 4 }, 1);
        let moving = blob(12, 12, 5.0, 6.0);
        let target = blob(12, 12, 6.0, 5.0);
        let res = register_with_network(&net, &moving, &target).unwrap();
        assert_eq!(res.field.shape(), (12, 12));
        assert!(res.field.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(res.warped, moving);
    }

    #[test]
    fn network_training_leaves_the_evaluator_untouched() {
        let ev: EvaluatorModel<f32> = init_evaluator(&EvaluatorConfig {
            channels: [3, 4, 4],
            residual_blocks: 1,
            ..EvaluatorConfig::default()
        })
        .unwrap();
        let before = ev.params().to_vec();
        let pairs = vec![(blob(12, 12, 5.0, 6.0).cast::<f32>(), blob(12, 12, 6.0, 5.0).cast::<f32>())];
        let mut net = RegistrationNetwork::<f32>::new(UNetArch { base_channels: 4 }, 0);
        let cfg = NetworkTrainingConfig {
            steps: 3,
            batch_size: 2,
            ..NetworkTrainingConfig::default()
        };
        let sim = Similarity::Imse {
            model: &ev,
            reference: ImseReference::Target,
        };
        let trace = train_registration_network(&mut net, &pairs, &sim, &cfg, |_, _| {}).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(ev.params(), &before[..]);
        assert_eq!(net.steps, 3);
    }
}

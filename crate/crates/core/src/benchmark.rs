//! Synthetic registration suite: evaluator training data, registration
//! training pairs, held-out test pairs, and the loss-comparison benchmark.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::field_smoothness;
use crate::evaluator::{init_evaluator, train_evaluator, EvaluatorConfig, EvaluatorModel};
use crate::image::ImageGrid;
use crate::metrics::{Metric, MetricKind};
use crate::nn::unet::UNetArch;
use crate::phantom::{generate_ground_truth_pair, generate_phantom, simulate_modality, GroundTruthPair, ModalityMap};
use crate::registration::{
    register_with_network, train_registration_network, ImseReference, NetworkTrainingConfig, RegistrationNetwork,
    Similarity,
};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::transforms::{DeformationConfig, NoiseMode};

const SOURCE_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;

pub const DEFAULT_LOSSES: [&str; 6] = ["mae", "ncc", "mi", "mind", "imse-bc", "imse-sr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub size: usize,
    pub classes: usize,
    /// Single-modality images the evaluators are trained on.
    pub source_phantoms: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub deformation: DeformationConfig,
    /// Shared evaluator settings; the noise mode is set per loss variant.
    pub evaluator: EvaluatorConfig,
    pub network: NetworkTrainingConfig,
    pub losses: Vec<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            classes: 4,
            source_phantoms: 200,
            train_pairs: 200,
            test_pairs: 20,
            deformation: DeformationConfig::default(),
            evaluator: EvaluatorConfig::default(),
            network: NetworkTrainingConfig::default(),
            losses: DEFAULT_LOSSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A benchmark loss variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchLoss {
    Metric(MetricKind),
    ImseBezier,
    ImseShuffle,
}

impl BenchLoss {
    pub fn parse(key: &str) -> Result<Self> {
        match key {
            "imse-bc" => Ok(Self::ImseBezier),
            "imse-sr" => Ok(Self::ImseShuffle),
            other => other.parse().map(Self::Metric),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Metric(k) => k.key(),
            Self::ImseBezier => "imse-bc",
            Self::ImseShuffle => "imse-sr",
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_phantoms == 0 || self.train_pairs == 0 || self.test_pairs == 0 {
            return Err(Error::BadConfig("suite needs source images, training and test pairs".into()));
        }
        if self.losses.is_empty() {
            return Err(Error::BadConfig("suite needs at least one loss".into()));
        }
        for l in &self.losses {
            BenchLoss::parse(l)?;
        }
        self.deformation.validate()?;
        self.evaluator.validate()?;
        self.network.validate()
    }

    /// Evaluator configuration for a given augmentation.
    pub fn evaluator_config(&self, noise: NoiseMode) -> EvaluatorConfig {
        let mut cfg = self.evaluator.clone();
        cfg.pairs.noise = noise;
        cfg
    }
}

/// Generated data of a suite.
#[derive(Debug, Clone)]
pub struct SyntheticSuite<T> {
    pub sources: Vec<ImageGrid<T>>,
    pub train: Vec<GroundTruthPair<T>>,
    pub test: Vec<GroundTruthPair<T>>,
}

fn make_pair<T: Scalar>(config: &SuiteConfig, stream_tag: u64, index: usize) -> Result<GroundTruthPair<T>> {
    let mut stream = SeedStream::derive(config.seed, &[stream_tag, index as u64]);
    let phantom = generate_phantom(&mut stream, config.size, config.classes)?;
    let (a, b) = (ModalityMap::modality_a(config.classes), ModalityMap::modality_b(config.classes));
    generate_ground_truth_pair(&phantom, (&a, &b), &config.deformation, &mut stream)
}

/// Source image `index`: a fresh phantom rendered in modality A.
pub fn source_image<T: Scalar>(config: &SuiteConfig, index: usize) -> Result<ImageGrid<T>> {
    let mut stream = SeedStream::derive(config.seed, &[SOURCE_STREAM, index as u64]);
    let phantom = generate_phantom(&mut stream, config.size, config.classes)?;
    simulate_modality(&phantom, &ModalityMap::modality_a(config.classes), &mut stream)
}

impl<T: Scalar> SyntheticSuite<T> {
    pub fn generate(config: &SuiteConfig) -> Result<Self> {
        config.validate()?;
        let sources = (0..config.source_phantoms)
            .into_par_iter()
            .map(|i| source_image(config, i))
            .collect::<Result<Vec<_>>>()?;
        let train = (0..config.train_pairs)
            .into_par_iter()
            .map(|i| make_pair(config, TRAIN_STREAM, i))
            .collect::<Result<Vec<_>>>()?;
        let test = (0..config.test_pairs)
            .into_par_iter()
            .map(|i| make_pair(config, TEST_STREAM, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sources, train, test })
    }

    pub fn train_images(&self) -> Vec<(ImageGrid<T>, ImageGrid<T>)> {
        self.train.iter().map(|p| (p.moving.clone(), p.target.clone())).collect()
    }
}

pub fn train_suite_evaluator<T: Scalar>(
    suite: &SyntheticSuite<T>,
    evaluator: &EvaluatorConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<EvaluatorModel<T>> {
    let mut model = init_evaluator(evaluator)?;
    train_evaluator(&mut model, &suite.sources, evaluator, on_step)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub dice: f64,
    pub dice_std: f64,
    pub hd95: f64,
    pub smoothness: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean Dice (over structures, then pairs), HD95 and field smoothness of a
/// network on the test pairs.
pub fn score_network<T: Scalar>(network: &RegistrationNetwork<T>, test: &[GroundTruthPair<T>]) -> Result<RowMetrics> {
    let rows = test
        .par_iter()
        .map(|pair| {
            let res = register_with_network(network, &pair.moving, &pair.target)?;
            let mut dice = 0.0;
            let mut hd = 0.0;
            for ((_, m), (_, t)) in pair.masks_moving.iter().zip(&pair.masks_target) {
                let q = crate::registration::QualityMetrics::compute(&res.field, m, t)?;
                dice += q.dice;
                hd += q.hd95;
            }
            let k = pair.masks_target.len() as f64;
            Ok((dice / k, hd / k, field_smoothness(&res.field)))
        })
        .collect::<Result<Vec<_>>>()?;
    let dices: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let (dice, dice_std) = mean_std(&dices);
    let n = rows.len() as f64;
    Ok(RowMetrics {
        dice,
        dice_std,
        hd95: rows.iter().map(|r| r.1).sum::<f64>() / n,
        smoothness: rows.iter().map(|r| r.2).sum::<f64>() / n,
    })
}

/// Trains a fresh registration network with `similarity` and scores it.
pub fn run_network_variant<T: Scalar>(
    config: &SuiteConfig,
    suite: &SyntheticSuite<T>,
    similarity: &Similarity<'_, T>,
    on_step: impl FnMut(usize, f64),
) -> Result<(RegistrationNetwork<T>, Vec<f64>, RowMetrics)> {
    let arch = UNetArch {
        base_channels: config.network.base_channels,
    };
    let mut network = RegistrationNetwork::new(arch, config.network.seed);
    let trace = train_registration_network(&mut network, &suite.train_images(), similarity, &config.network, on_step)?;
    let metrics = score_network(&network, &suite.test)?;
    Ok((network, trace, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub loss: String,
    #[serde(flatten)]
    pub metrics: RowMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    /// Scores of the identity transform (before registration).
    pub initial: RowMetrics,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn row(&self, loss: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.loss == loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("loss,dice,dice_std,hd95,smoothness\n");
        let line = |name: &str, m: &RowMetrics| format!("{name},{},{},{},{}\n", m.dice, m.dice_std, m.hd95, m.smoothness);
        s.push_str(&line("initial", &self.initial));
        for r in &self.rows {
            s.push_str(&line(&r.loss, &r.metrics));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| loss | Dice | HD95 (px) | mean squared field gradient |\n|---|---|---|---|\n");
        let line = |name: &str, m: &RowMetrics| {
            format!(
                "| {name} | {:.3} ± {:.3} | {:.2} | {:.5} |\n",
                m.dice, m.dice_std, m.hd95, m.smoothness
            )
        };
        s.push_str(&line("initial", &self.initial));
        for r in &self.rows {
            s.push_str(&line(&r.loss, &r.metrics));
        }
        s
    }
}

/// Evaluators for the two augmentation variants, trained on demand.
#[derive(Debug, Default)]
pub struct EvaluatorSet<T> {
    pub shuffle_remap: Option<EvaluatorModel<T>>,
    pub bezier: Option<EvaluatorModel<T>>,
}

impl<T: Scalar> EvaluatorSet<T> {
    fn get(
        &mut self,
        noise: NoiseMode,
        config: &SuiteConfig,
        suite: &SyntheticSuite<T>,
        log: &mut dyn FnMut(&str),
    ) -> Result<&EvaluatorModel<T>> {
        let slot = match noise {
            NoiseMode::Bezier => &mut self.bezier,
            _ => &mut self.shuffle_remap,
        };
        if slot.is_none() {
            log(&format!("training evaluator ({noise:?})"));
            *slot = Some(train_suite_evaluator(suite, &config.evaluator_config(noise), |_, _| {})?);
        }
        Ok(slot.as_ref().expect("just filled"))
    }
}

/// Trains one registration network per configured loss on the same data
/// and reports held-out quality for each.
pub fn run_benchmark<T: Scalar>(
    config: &SuiteConfig,
    suite: &SyntheticSuite<T>,
    evaluators: &mut EvaluatorSet<T>,
    log: &mut dyn FnMut(&str),
) -> Result<BenchmarkReport> {
    config.validate()?;
    let identity = RegistrationNetwork::new(
        UNetArch {
            base_channels: config.network.base_channels,
        },
        config.network.seed,
    );
    let initial = score_network(&identity, &suite.test)?;
    let mut rows = Vec::new();
    for key in &config.losses {
        let loss = BenchLoss::parse(key)?;
        let model;
        let similarity = match loss {
            BenchLoss::Metric(kind) => Similarity::Metric(Metric::new(kind)),
            BenchLoss::ImseBezier | BenchLoss::ImseShuffle => {
                let noise = if loss == BenchLoss::ImseBezier {
                    NoiseMode::Bezier
                } else {
                    NoiseMode::ShuffleRemap
                };
                model = evaluators.get(noise, config, suite, log)?;
                Similarity::Imse {
                    model,
                    reference: ImseReference::Target,
                }
            }
        };
        log(&format!("training registration network ({})", loss.key()));
        let (_, _, metrics) = run_network_variant(config, suite, &similarity, |_, _| {})?;
        log(&format!("{}: dice {:.4}", loss.key(), metrics.dice));
        rows.push(BenchmarkRow {
            loss: loss.key().to_string(),
            metrics,
        });
    }
    Ok(BenchmarkReport {
        seed: config.seed,
        initial,
        rows,
    })
}

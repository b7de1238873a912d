//! Minibatch training loop: per-epoch shuffling, random crops, AM-softmax, Adam.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig, LrSchedule};
use super::am_softmax::{AmSoftmaxParams, DEFAULT_MARGIN, DEFAULT_SCALE};
use super::corpus::Utterance;
use crate::aggregation::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::Mode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Name of the classifier weights in the parameter store.
pub const CLASSIFIER_NAME: &str = "classifier.weight";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(rename = "batch")]
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    #[serde(rename = "m")]
    pub margin: f64,
    #[serde(rename = "s")]
    pub scale: f64,
    /// Training crops are drawn with an even length in `[crop_min, crop_max]`.
    pub crop_min: usize,
    pub crop_max: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr_start: 1e-3,
            lr_end: 1e-4,
            margin: DEFAULT_MARGIN,
            scale: DEFAULT_SCALE,
            crop_min: 200,
            crop_max: 400,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.crop_min < 2 || self.crop_min > self.crop_max {
            return Err(Error::Config(format!(
                "bad crop range [{}, {}]",
                self.crop_min, self.crop_max
            )));
        }
        LrSchedule::new(self.lr_start, self.lr_end, self.steps)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr_start, self.lr_end, self.steps)
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl StepMetrics {
    /// Header line of the metrics file.
    pub const HEADER: &'static str = "# step lr loss accuracy";

    /// `step lr loss accuracy`, whitespace separated, full precision.
    pub fn to_line(&self) -> String {
        format!("{} {:e} {:e} {}", self.step, self.lr, self.loss, self.accuracy)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad metrics line `{line}`"));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(StepMetrics {
            step: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            accuracy: f[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Writes metric lines, starting with [`StepMetrics::HEADER`].
pub fn write_metrics<W: Write>(w: &mut W, history: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{}", StepMetrics::HEADER)?;
    for m in history {
        writeln!(w, "{}", m.to_line())?;
    }
    Ok(())
}

/// A model together with its parameters and classifier.
#[derive(Debug, Clone)]
pub struct Trained {
    pub store: ParamStore<f32>,
    pub network: Network,
    pub classifier: AmSoftmaxParams,
    pub history: Vec<StepMetrics>,
}

/// Builds the network and classifier with fresh parameters.
pub fn init_model(
    model: &ModelConfig,
    train: &TrainConfig,
    n_classes: usize,
) -> Result<(ParamStore<f32>, Network, AmSoftmaxParams)> {
    let mut store = ParamStore::new();
    let network = Network::new(&mut store, model.clone(), train.seed)?;
    let classifier = AmSoftmaxParams::new(
        &mut store,
        CLASSIFIER_NAME,
        model.embedding_dim,
        n_classes,
        train.margin,
        train.scale,
        train.seed,
    )?;
    Ok((store, network, classifier))
}

/// Rebuilds a trained model from checkpoint entries. The class count is read
/// off the stored classifier matrix.
pub fn restore_model(
    model: &ModelConfig,
    train: &TrainConfig,
    entries: Vec<(String, crate::tensor::AnyTensor)>,
) -> Result<(ParamStore<f32>, Network, AmSoftmaxParams)> {
    let n_classes = entries
        .iter()
        .find(|(n, _)| n == CLASSIFIER_NAME)
        .map(|(_, t)| t.shape().c())
        .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks `{CLASSIFIER_NAME}`")))?;
    let (mut store, network, classifier) = init_model(model, train, n_classes)?;
    crate::checkpoint::restore(&mut store, entries)?;
    Ok((store, network, classifier))
}

/// Draws minibatches: shuffled epochs over utterance indices, one crop length per batch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11),
            order: (0..n).collect(),
            pos: 0,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    fn batch(&mut self, utts: &[Utterance], cfg: &TrainConfig) -> Result<(Tensor<f32>, Vec<usize>)> {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| self.next_index()).collect();
        let shortest = idx.iter().map(|&i| utts[i].frames()).min().unwrap_or(0);
        let hi = cfg.crop_max.min(shortest) & !1;
        let lo = cfg.crop_min.div_ceil(2) * 2;
        if hi < lo {
            return Err(Error::InvalidInput(format!(
                "utterance of {shortest} frames is shorter than the minimum crop {lo}"
            )));
        }
        let len = 2 * self.rng.random_range(lo / 2..=hi / 2);
        let mut crops = Vec::with_capacity(idx.len());
        for &i in &idx {
            let start = self.rng.random_range(0..=utts[i].frames() - len);
            crops.push(utts[i].features.slice_time(start, start + len)?);
        }
        let labels = idx.iter().map(|&i| utts[i].speaker).collect();
        Ok((Tensor::stack(&crops)?, labels))
    }
}

/// One forward/backward/update step; returns (loss, accuracy, lr).
pub fn train_step(
    store: &mut ParamStore<f32>,
    network: &Network,
    classifier: &AmSoftmaxParams,
    adam: &mut Adam<f32>,
    x: Tensor<f32>,
    labels: &[usize],
) -> Result<(f64, f64, f64)> {
    store.zero_grads();
    let mut g = Graph::new(store, Mode::Train);
    let xv = g.input(x);
    let trace = network.forward(&mut g, xv)?;
    let (loss, acc) = g.am_softmax(
        trace.embedding,
        classifier.class_weights,
        labels,
        classifier.margin,
        classifier.scale,
    )?;
    let loss_value = g.value(loss).data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss diverged at step {}",
            adam.steps_taken()
        )));
    }
    g.backward(loss)?;
    drop(g);
    let lr = adam.step(store)?;
    Ok((loss_value, acc, lr))
}

/// Trains from scratch on `utts` (labels in `0..n_classes`).
///
/// `on_step` sees every step's metrics as they are produced. With `steps = 0`
/// the returned parameters are the initialization.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    utts: &[Utterance],
    n_classes: usize,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Trained> {
    cfg.validate()?;
    if utts.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if let Some(u) = utts.iter().find(|u| u.speaker >= n_classes) {
        return Err(Error::InvalidInput(format!(
            "utterance `{}` has label {} >= {n_classes}",
            u.id, u.speaker
        )));
    }
    let (mut store, network, classifier) = init_model(model, cfg, n_classes)?;
    let mut adam = Adam::new(&store, AdamConfig::default(), cfg.schedule()?);
    let mut sampler = Sampler::new(utts.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, labels) = sampler.batch(utts, cfg)?;
        let (loss, accuracy, lr) = train_step(&mut store, &network, &classifier, &mut adam, x, &labels)?;
        let m = StepMetrics {
            step,
            lr,
            loss,
            accuracy,
        };
        on_step(&m);
        history.push(m);
    }
    store.zero_grads();
    Ok(Trained {
        store,
        network,
        classifier,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{Branches, Fusion, Strategy};
    use crate::backbone::BackboneConfig;
    use crate::training::corpus::{gen_corpus, CorpusConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            strategy: Strategy::Bmfa,
            fusion: Some(Fusion::Afm),
            r: 4,
            embedding_dim: 16,
            backbone: BackboneConfig {
                base_channels: 4,
                blocks: [1, 1, 1, 1],
            },
            lowest_stage: 1,
            branches: Branches::Both,
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            crop_min: 16,
            crop_max: 24,
            ..Default::default()
        }
    }

    fn corpus() -> Vec<Utterance> {
        let c = gen_corpus(&CorpusConfig {
            n_speakers: 3,
            utts_per_speaker: 3,
            heldout_per_speaker: 0,
            min_frames: 30,
            max_frames: 40,
            ..Default::default()
        })
        .unwrap();
        c.utterances
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let utts = corpus();
        let t = train(&tiny_model(), &tiny_train(0), &utts, 3, |_| {}).unwrap();
        let (init, _, _) = init_model(&tiny_model(), &tiny_train(0), 3).unwrap();
        for (a, b) in t.store.entries().iter().zip(init.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert!(t.history.is_empty());
    }

    #[test]
    fn deterministic_loss_curve() {
        let utts = corpus();
        let a = train(&tiny_model(), &tiny_train(3), &utts, 3, |_| {}).unwrap();
        let b = train(&tiny_model(), &tiny_train(3), &utts, 3, |_| {}).unwrap();
        let bits = |t: &Trained| t.history.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn metrics_round_trip() {
        let m = StepMetrics {
            step: 7,
            lr: 1e-3,
            loss: 2.5e-1,
            accuracy: 0.75,
        };
        assert_eq!(StepMetrics::parse_line(&m.to_line()).unwrap(), m);
        assert!(StepMetrics::parse_line("1 2 3").is_err());
    }

    #[test]
    fn rejects_bad_config_and_labels() {
        let utts = corpus();
        let mut cfg = tiny_train(1);
        cfg.batch_size = 1;
        assert!(matches!(train(&tiny_model(), &cfg, &utts, 3, |_| {}), Err(Error::Config(_))));
        assert!(matches!(
            train(&tiny_model(), &tiny_train(1), &utts, 2, |_| {}),
            Err(Error::InvalidInput(_))
        ));
    }
}

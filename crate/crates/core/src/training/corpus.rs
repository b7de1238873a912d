//! Synthetic speaker corpus for desk-scale training.
//!
//! Every speaker owns a 64-dim template drawn from a seeded Gaussian. Frame `t`
//! of an utterance is `template + noise·ε_t + noise·(c_u + a_u·sin(2πt/P_u + φ_u))`:
//! white frame noise, a static per-utterance channel offset `c_u` and a slow
//! sinusoidal drift. All nuisance terms scale with `noise_scale`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::N_MELS;
use crate::error::{Error, Result};
use crate::manifest::{self, ManifestEntry};
use crate::tensor::{read_tensor, write_tensor, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of speaker templates.
    pub template_scale: f64,
    /// Scale of all within-speaker variation.
    pub noise_scale: f64,
    /// Standard deviation of the per-utterance channel offset, relative to `noise_scale`.
    pub channel_scale: f64,
    /// Trailing utterances per speaker reserved for evaluation.
    pub heldout_per_speaker: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 20,
            utts_per_speaker: 50,
            min_frames: 200,
            max_frames: 400,
            template_scale: 1.0,
            noise_scale: 0.5,
            channel_scale: 1.0,
            heldout_per_speaker: 10,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Config(format!(
                "corpus needs at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.utts_per_speaker == 0 || self.heldout_per_speaker >= self.utts_per_speaker {
            return Err(Error::Config(format!(
                "need 0 <= heldout ({}) < utts_per_speaker ({})",
                self.heldout_per_speaker, self.utts_per_speaker
            )));
        }
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "bad frame range [{}, {}]",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and >= 0".into()));
        }
        if !(self.template_scale > 0.0 && self.channel_scale >= 0.0) {
            return Err(Error::Config("template_scale must be > 0 and channel_scale >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub speaker_id: String,
    /// (1, 1, T, 64) log-mel-like features.
    pub features: Tensor<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape().t()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub n_speakers: usize,
    /// Indices into `utterances` used for training.
    pub train: Vec<usize>,
    /// Indices reserved for evaluation.
    pub heldout: Vec<usize>,
    pub templates: Vec<Vec<f64>>,
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s:03}")
}

pub fn utterance_name(s: usize, u: usize) -> String {
    format!("spk{s:03}-utt{u:03}")
}

/// Generates the corpus in memory. Deterministic in the config.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let templates: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| (0..N_MELS).map(|_| cfg.template_scale * normal(&mut rng)).collect())
        .collect();
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    let ns = cfg.noise_scale;
    for (s, template) in templates.iter().enumerate() {
        for u in 0..cfg.utts_per_speaker {
            let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let channel: Vec<f64> = (0..N_MELS).map(|_| cfg.channel_scale * normal(&mut rng)).collect();
            let amp: f64 = rng.random_range(0.0..1.0);
            let period: f64 = rng.random_range(100.0..400.0);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let mut data = Vec::with_capacity(frames * N_MELS);
            for t in 0..frames {
                let drift = amp * (2.0 * PI * t as f64 / period + phase).sin();
                for f in 0..N_MELS {
                    let v = template[f] + ns * (normal(&mut rng) + channel[f] + drift);
                    data.push(v as f32);
                }
            }
            let idx = utterances.len();
            if u + cfg.heldout_per_speaker >= cfg.utts_per_speaker {
                heldout.push(idx);
            } else {
                train.push(idx);
            }
            utterances.push(Utterance {
                id: utterance_name(s, u),
                speaker: s,
                speaker_id: speaker_name(s),
                features: Tensor::from_vec(Shape::new(1, 1, frames, N_MELS), data)?,
            });
        }
    }
    Ok(Corpus {
        utterances,
        n_speakers: cfg.n_speakers,
        train,
        heldout,
        templates,
    })
}

/// File names written by [`write_corpus`].
pub const MANIFEST_ALL: &str = "manifest.txt";
pub const MANIFEST_TRAIN: &str = "train.txt";
pub const MANIFEST_HELDOUT: &str = "heldout.txt";
pub const TRIALS_HELDOUT: &str = "trials.txt";

/// Writes BTF1 features under `dir/features/`, manifests, and an all-pairs trial list of held-out utterances.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let path = feat_dir.join(format!("{}.btf", u.id));
        write_tensor(&path, &u.features)?;
        entries.push(ManifestEntry {
            utt_id: u.id.clone(),
            speaker_id: u.speaker_id.clone(),
            path,
        });
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| entries[i].clone()).collect::<Vec<_>>();
    manifest::write_manifest(dir.join(MANIFEST_ALL), &entries)?;
    manifest::write_manifest(dir.join(MANIFEST_TRAIN), &pick(&corpus.train))?;
    manifest::write_manifest(dir.join(MANIFEST_HELDOUT), &pick(&corpus.heldout))?;
    let held: Vec<&Utterance> = corpus.heldout.iter().map(|&i| &corpus.utterances[i]).collect();
    let trials = crate::evaluation::all_pairs_trials(
        &held.iter().map(|u| (u.id.clone(), u.speaker_id.clone())).collect::<Vec<_>>(),
    );
    crate::evaluation::write_trials(dir.join(TRIALS_HELDOUT), &trials)?;
    Ok(())
}

/// Loads utterances listed in a manifest; labels come from sorted speaker ids.
pub fn load_utterances(manifest_path: &Path) -> Result<(Vec<Utterance>, usize)> {
    let entries = manifest::read_manifest(manifest_path)?;
    let labels = manifest::speaker_labels(&entries);
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let features = read_tensor(&e.path)?.into_precision::<f32>();
        let s = features.shape();
        if s.n() != 1 || s.c() != 1 || s.f() != N_MELS {
            return Err(Error::format(&e.path, format!("expected (1, 1, T, {N_MELS}), got {s}")));
        }
        out.push(Utterance {
            speaker: labels[&e.speaker_id],
            id: e.utt_id,
            speaker_id: e.speaker_id,
            features,
        });
    }
    Ok((out, labels.len()))
}

/// Paths of a corpus directory.
pub fn corpus_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(MANIFEST_TRAIN),
        dir.join(MANIFEST_HELDOUT),
        dir.join(TRIALS_HELDOUT),
    )
}

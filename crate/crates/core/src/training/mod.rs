//! Objective, optimizer, synthetic corpus and the training loop.

pub mod adam;
pub mod am_softmax;
pub mod corpus;
pub mod trainer;

pub use adam::{Adam, AdamConfig, LrSchedule};
pub use am_softmax::{AmSoftmaxParams, DEFAULT_MARGIN, DEFAULT_SCALE};
pub use corpus::{gen_corpus, load_utterances, write_corpus, Corpus, CorpusConfig, Utterance};
pub use trainer::{init_model, restore_model, train, write_metrics, StepMetrics, TrainConfig, Trained, CLASSIFIER_NAME};

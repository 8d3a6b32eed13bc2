//! Training loop: seeded SGD over per-sentence CRF negative log-likelihood,
//! per-epoch learning-rate decay, dev-set model selection with early stopping.
//!
//! One seed fixes everything random — parameter init, epoch shuffles and
//! dropout masks — so a rerun reproduces the final parameters bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::corpus::Corpus;
use crate::crf::CrfError;
use crate::encoders::{collect_char_vocab, collect_word_vocab, ArchitectureConfig, EncoderError};
use crate::eval::{evaluate, EvalError};
use crate::model::{ModelError, TaggerModel};
use crate::schema::Tag;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("Divergence: non-finite loss at epoch {0}, sentence {1}")]
    Divergence(usize, usize),
    #[error("EmptyData: {0}")]
    EmptyData(String),
    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error("TagOutsideSchema: {0}")]
    TagOutsideSchema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Optimization settings. The seed drives init, shuffling and dropout.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.015,
            decay: 0.05,
            batch_size: 1,
            seed: 42,
            patience: 10,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.decay < 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be positive, decay non-negative".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::BadConfig("patience must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training history, emitted as JSON per epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TaggerModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

fn tag_indices(corpus: &Corpus) -> Result<Vec<Vec<usize>>, TrainError> {
    corpus
        .sentences
        .iter()
        .map(|s| {
            s.tags()
                .iter()
                .map(|t| {
                    corpus
                        .schema
                        .tag_index(t)
                        .ok_or_else(|| TrainError::TagOutsideSchema(t.to_string()))
                })
                .collect()
        })
        .collect()
}

fn dev_micro_f1(model: &TaggerModel, dev: &Corpus) -> Result<f64, TrainError> {
    let mut predictions: Vec<Vec<Tag>> = Vec::with_capacity(dev.sentences.len());
    for sent in &dev.sentences {
        let tokens: Vec<String> = sent.tokens.iter().map(|t| t.surface.clone()).collect();
        predictions.push(model.tag_tokens(&tokens)?);
    }
    Ok(evaluate(dev, &predictions)?.micro.f1)
}

/// Trains one architecture on the given splits. Keeps the parameters of the
/// best dev epoch; stops early after `patience` epochs without improvement or
/// once dev F1 reaches 100.
pub fn train<B: std::io::BufRead>(
    arch: ArchitectureConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    tc: &TrainConfig,
    pretrained: Option<B>,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    if train_corpus.is_empty() || dev_corpus.is_empty() {
        return Err(TrainError::EmptyData(
            "train and dev corpora must be non-empty".into(),
        ));
    }

    let surfaces: Vec<Vec<String>> = train_corpus
        .sentences
        .iter()
        .map(|s| s.tokens.iter().map(|t| t.surface.clone()).collect())
        .collect();
    let word_vocab = collect_word_vocab(surfaces.iter().map(|s| s.as_slice()));
    let char_vocab = collect_char_vocab(surfaces.iter().map(|s| s.as_slice()));

    let mut model = TaggerModel::init(
        arch,
        train_corpus.schema.clone(),
        &word_vocab,
        &char_vocab,
        tc.seed,
        pretrained,
    )?;
    let gold = tag_indices(train_corpus)?;

    // separate stream from init (init consumed its own seeded rng)
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..surfaces.len()).collect();

    let mut history = Vec::with_capacity(tc.epochs);
    let mut best_params = model.store.clone();
    let mut best_dev_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs_without_gain = 0;

    for epoch in 1..=tc.epochs {
        let lr = tc.learning_rate / (1.0 + tc.decay * (epoch - 1) as f64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            model.store.zero_grads();
            for &i in batch {
                let mut tape = Tape::new();
                let em = model
                    .encoder
                    .emissions(&mut tape, &model.store, &surfaces[i], true, &mut rng)?;
                let loss = model.crf.nll(&mut tape, &model.store, em, &gold[i])?;
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(TrainError::Divergence(epoch, i));
                }
                epoch_loss += loss_value;
                tape.backward(loss).map_err(CrfError::from)?;
                tape.apply_param_grads(&mut model.store);
            }
            if model.store.grads_nonfinite() {
                return Err(TrainError::Divergence(epoch, batch[0]));
            }
            model.store.sgd_step(lr / batch.len() as f64);
        }

        let train_loss = epoch_loss / surfaces.len() as f64;
        let dev_f1 = dev_micro_f1(&model, dev_corpus)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_micro_f1: dev_f1,
        });

        if dev_f1 > best_dev_f1 {
            best_dev_f1 = dev_f1;
            best_epoch = epoch;
            best_params = model.store.clone();
            epochs_without_gain = 0;
        } else {
            epochs_without_gain += 1;
        }
        if epochs_without_gain >= tc.patience || best_dev_f1 >= 100.0 {
            break;
        }
    }

    model.store = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_dev_f1,
    })
}

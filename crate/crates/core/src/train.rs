//! Mini-batch training and evaluation for the detector.
//!
//! Each batch runs forward and backward data-parallel across documents,
//! one tape per document; gradients are then summed in document-index
//! order so a run is reproducible regardless of thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embed::{EntityVecStore, Vocab};
use crate::error::{Error, Result};
use crate::model::{
    document_loss, predicted_label, prepare, Detector, DetectorBound, DocInput, FastConfig,
    WordsSource,
};
use crate::nsp::NspScorer;
use crate::optim::{clip_global_norm, AdamW};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text::{Document, Label};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub model: FastConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl TrainOptions {
    pub fn full() -> TrainOptions {
        TrainOptions {
            model: FastConfig::full(),
            learning_rate: 1e-5,
            batch_size: 4,
            epochs: 10,
            seed: 42,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }

    /// Small dimensions and a faster learning rate for CPU-scale runs.
    pub fn desk() -> TrainOptions {
        TrainOptions {
            model: FastConfig::desk(),
            learning_rate: 1e-3,
            batch_size: 8,
            ..TrainOptions::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip_norm must be finite and positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidMetrics {
    pub loss: f64,
    pub unpaired_accuracy: f64,
    /// Absent when the validation split is not fully paired by title.
    pub paired_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Option<ValidMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: Option<Label>,
    pub title: Option<String>,
    pub p_human: f64,
    pub p_machine: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    /// Rows are true classes, columns predicted, in (human, machine) order.
    pub confusion: [[usize; 2]; 2],
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedEval {
    pub correct: usize,
    pub total: usize,
}

impl PairedEval {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters restored from the epoch with the best validation
    /// accuracy (earliest such epoch on ties); final-epoch parameters
    /// when there is no validation split.
    pub detector: Detector,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Per-document accuracy over a labeled prediction set.
/// A document counts as correct when the argmax class matches its label;
/// an exact 0.5 resolves to Human.
pub fn evaluate_unpaired(preds: &[Prediction]) -> Result<EvalResult> {
    if preds.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    let mut confusion = [[0usize; 2]; 2];
    for p in preds {
        let label = p
            .label
            .ok_or_else(|| Error::document(&p.id, "needs a label for evaluation"))?;
        let predicted = predicted_label(p.p_machine);
        confusion[label.class_index()][predicted.class_index()] += 1;
    }
    Ok(EvalResult {
        correct: confusion[0][0] + confusion[1][1],
        total: preds.len(),
        confusion,
    })
}

/// Accuracy over (human, machine) pairs sharing a `title`. A pair counts
/// as correct only when the machine document scores strictly higher
/// p_machine than its human counterpart, so any monotone rescale of the
/// scores leaves the result unchanged.
pub fn evaluate_paired(preds: &[Prediction]) -> Result<PairedEval> {
    let mut groups: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in preds {
        let title = p.title.as_deref().ok_or_else(|| {
            Error::document(&p.id, "missing title metadata for paired evaluation")
        })?;
        groups.entry(title).or_default().push(p);
    }
    let mut offending: Vec<&str> = Vec::new();
    let mut correct = 0;
    let mut total = 0;
    for (title, docs) in &groups {
        let human: Vec<&&Prediction> = docs
            .iter()
            .filter(|p| p.label == Some(Label::Human))
            .collect();
        let machine: Vec<&&Prediction> = docs
            .iter()
            .filter(|p| p.label == Some(Label::Machine))
            .collect();
        if docs.len() != 2 || human.len() != 1 || machine.len() != 1 {
            offending.push(title);
            continue;
        }
        total += 1;
        if machine[0].p_machine > human[0].p_machine {
            correct += 1;
        }
    }
    if !offending.is_empty() {
        return Err(Error::invalid(format!(
            "paired evaluation needs exactly one human and one machine document per title; \
             offending titles: {}",
            offending.join(", ")
        )));
    }
    if total == 0 {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    Ok(PairedEval { correct, total })
}

/// Forward passes over prepared inputs, in input order.
pub fn predict_inputs(detector: &Detector, inputs: &[DocInput]) -> Result<Vec<Prediction>> {
    inputs
        .par_iter()
        .map(|input| {
            let trace = detector.forward_trace(input)?;
            Ok(Prediction {
                id: input.id.clone(),
                label: input.label,
                title: input.title.clone(),
                p_human: trace.p_human,
                p_machine: trace.p_machine,
            })
        })
        .collect()
}

fn mean_true_class_loss(preds: &[Prediction]) -> f64 {
    let total: f64 = preds
        .iter()
        .map(|p| match p.label {
            Some(Label::Machine) => -p.p_machine.ln(),
            _ => -p.p_human.ln(),
        })
        .sum();
    total / preds.len() as f64
}

fn doc_grads(detector: &Detector, input: &DocInput) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let values = detector.bind_values(&tape, true);
    let bound = DetectorBound::from_values(detector.config(), &values)?;
    let loss = document_loss(&tape, &bound, detector.config(), input)?;
    let loss_scalar = loss.value().item()?;
    let mut grads_map = loss.backward()?;
    let grads = values
        .iter()
        .map(|v| {
            grads_map.take(*v).unwrap_or_else(|| {
                let shape = v.shape();
                Tensor::zeros(shape[0], shape[1])
            })
        })
        .collect();
    Ok((loss_scalar, grads))
}

fn check_labels(docs: &[Document], split: &str) -> Result<(usize, usize)> {
    let mut humans = 0;
    let mut machines = 0;
    for doc in docs {
        match doc.label {
            Some(Label::Human) => humans += 1,
            Some(Label::Machine) => machines += 1,
            None => {
                return Err(Error::document(
                    &doc.id,
                    format!("unlabeled document in the {split} split"),
                ))
            }
        }
    }
    Ok((humans, machines))
}

/// Trains a detector from scratch on the given corpus. The vocabulary is
/// built from the training split only, so unseen tokens map to the
/// unknown id at validation and prediction time.
pub fn train(
    train_docs: &[Document],
    valid_docs: &[Document],
    store: Option<&EntityVecStore>,
    scorer: Option<&NspScorer>,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    options.validate()?;
    if train_docs.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let (humans, machines) = check_labels(train_docs, "train")?;
    if humans == 0 || machines == 0 {
        return Err(Error::invalid(format!(
            "training corpus has {humans} human and {machines} machine documents; \
             both classes are required"
        )));
    }
    check_labels(valid_docs, "valid")?;

    let vocab = Vocab::build(train_docs);
    let mut detector = Detector::new(options.model, vocab, options.seed)?;
    let words = WordsSource::Trainable(&detector.embedding);
    let train_inputs: Vec<DocInput> = train_docs
        .iter()
        .map(|d| prepare(d, &words, store, scorer, &options.model))
        .collect::<Result<_>>()?;
    let valid_inputs: Vec<DocInput> = valid_docs
        .iter()
        .map(|d| prepare(d, &words, store, scorer, &options.model))
        .collect::<Result<_>>()?;

    let mut optimizer = AdamW::new(options.learning_rate, options.weight_decay);
    // Stream 1 keeps batch shuffling independent of parameter init,
    // which drew from stream 0 of the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(1);

    let mut metrics = Vec::with_capacity(options.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut indices: Vec<usize> = (0..train_inputs.len()).collect();

    for epoch in 1..=options.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in indices.chunks(options.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| doc_grads(&detector, &train_inputs[i]))
                .collect::<Result<_>>()?;
            let mut grad_sum: Vec<Tensor> = Vec::new();
            for (loss, grads) in results {
                loss_sum += loss;
                if grad_sum.is_empty() {
                    grad_sum = grads;
                } else {
                    for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                        acc.add_assign(g)?;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_sum {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            clip_global_norm(&mut grad_sum, options.clip_norm)?;
            let mut params: Vec<&mut Tensor> = detector
                .param_entries_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            optimizer.step(&mut params, &grad_sum)?;
        }
        let train_loss = loss_sum / train_inputs.len() as f64;

        let valid = if valid_inputs.is_empty() {
            None
        } else {
            let preds = predict_inputs(&detector, &valid_inputs)?;
            let unpaired = evaluate_unpaired(&preds)?;
            let improved = best
                .as_ref()
                .is_none_or(|(acc, _, _)| unpaired.accuracy() > *acc);
            if improved {
                best = Some((unpaired.accuracy(), epoch, detector.param_tensors()));
            }
            Some(ValidMetrics {
                loss: mean_true_class_loss(&preds),
                unpaired_accuracy: unpaired.accuracy(),
                paired_accuracy: evaluate_paired(&preds).ok().map(|p| p.accuracy()),
            })
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            valid,
        });
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            for ((_, slot), saved) in detector.param_entries_mut().into_iter().zip(params) {
                *slot = saved;
            }
            epoch
        }
        None => options.epochs,
    };
    Ok(TrainOutcome {
        detector,
        metrics,
        best_epoch,
    })
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,unpaired_acc,paired_acc\n");
    for m in metrics {
        out.push_str(&format!("{},train,{:.6},,\n", m.epoch, m.train_loss));
        if let Some(v) = &m.valid {
            let paired = v
                .paired_accuracy
                .map(|p| format!("{p:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},valid,{:.6},{:.6},{}\n",
                m.epoch, v.loss, v.unpaired_accuracy, paired
            ));
        }
    }
    out
}

pub fn write_metrics(path: impl AsRef<std::path::Path>, metrics: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path.as_ref(), metrics_csv(metrics)).map_err(|e| Error::io(path.as_ref(), e))
}

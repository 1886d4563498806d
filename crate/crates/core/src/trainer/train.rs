use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{build_gold_matrix, AdamW, Config, DatasetLabels, DatasetSampler, GoldActionMatrix, LabelRegistry};
use crate::autograd::{Gradients, ParamGroup};
use crate::codec::Sentence;
use crate::corpus::{DatasetSpec, Example};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Scenario};
use crate::model::{derive_seed, SruNer};

/// A sentence with its packed gold matrix, ready for teacher forcing.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub sentence: Sentence,
    pub gold: GoldActionMatrix,
}

/// Registry over the datasets' declared types, in dataset order.
pub fn registry_for(datasets: &[DatasetSpec]) -> Result<LabelRegistry> {
    if datasets.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    LabelRegistry::new(datasets.iter().map(|d| DatasetLabels { name: d.name.clone(), types: d.types.clone() }).collect())
}

fn fits(model: &SruNer, sentence: &Sentence) -> bool {
    let enc = model.encoder();
    let needed: usize = sentence.tokens.iter().map(|w| enc.tokenize_word(w).len()).sum::<usize>() + 2;
    !sentence.is_empty() && needed <= enc.max_positions()
}

/// Builds gold matrices, skipping (with a warning) sentences that are empty,
/// too long for the encoder, or hold crossing same-type mentions.
pub fn prepare_examples(model: &SruNer, dataset: &str, examples: &[Example]) -> Result<Vec<TrainingExample>> {
    let registry = model.registry();
    let mut out = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if !fits(model, &ex.sentence) {
            log::warn!("{dataset}: sentence {i} is empty or exceeds the encoder window; skipped");
            continue;
        }
        let mentions = registry.to_union(dataset, &ex.mentions)?;
        match build_gold_matrix(&ex.sentence, &mentions, dataset, registry) {
            Ok(gold) => out.push(TrainingExample { sentence: ex.sentence.clone(), gold }),
            Err(e @ Error::CrossingSpans { .. }) => log::warn!("{dataset}: sentence {i}: {e}; skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub loss: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,split,micro_P,micro_R,micro_F1,loss";

    fn new(epoch: usize, split: &str, report: Option<&EvalReport>, loss: Option<f64>) -> Self {
        Self {
            epoch,
            split: split.into(),
            precision: report.map(|r| r.precision()),
            recall: report.map(|r| r.recall()),
            f1: report.map(|r| r.f1()),
            loss,
        }
    }

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.epoch, self.split, f(self.precision), f(self.recall), f(self.f1), f(self.loss))
    }
}

pub struct TrainOutcome {
    /// The model restored to its best dev epoch.
    pub model: SruNer,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub epochs_run: usize,
}

/// Mean teacher-forced loss without dropout.
pub fn mean_loss(model: &SruNer, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| model.sample_gradients(&ex.sentence, &ex.gold, None).map(|r| r.loss))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains on all datasets jointly and returns the checkpoint with the best
/// merged dev micro-F1. `on_log` sees every log line as it is produced.
pub fn train(config: &Config, datasets: &[DatasetSpec], mut on_log: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    let registry = registry_for(datasets)?;
    let mut model = SruNer::new(config.clone(), registry)?;
    let tc = &config.train;

    let mut train_sets = Vec::with_capacity(datasets.len());
    let mut dev_examples: Vec<Example> = Vec::new();
    let mut dev_gold = Vec::new();
    let mut train_eval: Vec<Example> = Vec::new();
    for ds in datasets {
        let set = prepare_examples(&model, &ds.name, &ds.train)?;
        if set.is_empty() {
            return Err(Error::Config(format!("dataset `{}` has no usable training sentences", ds.name)));
        }
        train_sets.push(set);
        train_eval.extend(ds.train.iter().filter(|e| fits(&model, &e.sentence)).cloned());
        dev_gold.extend(prepare_examples(&model, &ds.name, &ds.dev)?);
        dev_examples.extend(ds.dev.iter().filter(|e| fits(&model, &e.sentence)).cloned());
    }
    let (select_split, select_examples) = if dev_examples.is_empty() {
        log::warn!("no dev split configured; selecting checkpoints on the training split");
        ("train", &train_eval)
    } else {
        ("dev", &dev_examples)
    };

    let sizes: Vec<usize> = train_sets.iter().map(Vec::len).collect();
    let sampler = DatasetSampler::new(&sizes)?;
    let steps_per_epoch = sampler.epoch_len().div_ceil(tc.batch_size);
    let mut encoder_opt = AdamW::new(ParamGroup::Encoder, &tc.encoder_optimizer, tc.betas, tc.eps, steps_per_epoch);
    let mut head_opt = AdamW::new(ParamGroup::Head, &tc.head_optimizer, tc.betas, tc.eps, steps_per_epoch);
    log::info!(
        "training {} parameters over {} datasets; {} samples per epoch in {steps_per_epoch} steps",
        model.store().num_scalars(),
        datasets.len(),
        sampler.epoch_len()
    );

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::autograd::ParamStore)> = None;
    let mut epochs_run = 0;
    for epoch in 1..=tc.epochs {
        epochs_run = epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[3, epoch as u64]));
        let draws = sampler.epoch(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in draws.chunks(tc.batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &(d, i))| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[4, epoch as u64, step as u64, k as u64]));
                    let ex = &train_sets[d][i];
                    model.sample_gradients(&ex.sentence, &ex.gold, Some(&mut rng))
                })
                .collect();
            let mut grads = Gradients::zeros_like(model.store());
            for r in results {
                let r = r?;
                if !r.loss.is_finite() || !r.grads.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step: step + 1 });
                }
                loss_sum += r.loss;
                grads.accumulate(&r.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.clip_global_norm(tc.clip_norm);
            log::trace!("epoch {epoch} step {} grad norm {norm:.4}", step + 1);
            encoder_opt.apply(model.store_mut(), &grads);
            head_opt.apply(model.store_mut(), &grads);
        }
        let train_loss = loss_sum / draws.len() as f64;

        let train_report = if tc.eval_train { Some(model.evaluate(&train_eval, Scenario::Merged)?) } else { None };
        let select_report = model.evaluate(select_examples, Scenario::Merged)?;
        let train_line = EpochLog::new(
            epoch,
            "train",
            train_report.as_ref().or((select_split == "train").then_some(&select_report)),
            Some(train_loss),
        );
        on_log(&train_line);
        history.push(train_line);
        if select_split == "dev" {
            let dev_line = EpochLog::new(epoch, "dev", Some(&select_report), Some(mean_loss(&model, &dev_gold)?));
            on_log(&dev_line);
            history.push(dev_line);
        }

        let f1 = select_report.f1();
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.store().clone()));
        }
        let (best_f1, best_epoch) = best.as_ref().map(|(f, e, _)| (*f, *e)).expect("set above");
        if tc.target_f1.is_some_and(|t| best_f1 >= t) {
            log::info!("target F1 reached at epoch {epoch}");
            break;
        }
        if epoch - best_epoch >= tc.patience {
            log::info!("no {select_split} improvement for {} epochs; stopping", tc.patience);
            break;
        }
    }
    let (best_f1, best_epoch, store) = best.ok_or_else(|| Error::Config("train.epochs must be positive".into()))?;
    *model.store_mut() = store;
    Ok(TrainOutcome { model, history, best_epoch, best_f1, epochs_run })
}

//! Teacher-forced training, step-level evaluation and ablation grids.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{derive_seed, Corpus, Episode, ModalityMask, Split};
use crate::error::{Error, Result};
use crate::heads::{decode_subgoal, subgoal_loss, SubGoal};
use crate::model::{PlannerConfig, PlannerModel, PreparedEpisode};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub planner: PlannerConfig,
    pub epochs: usize,
    /// Steps per optimizer update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mask: ModalityMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            mask: ModalityMask::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !self.mask.use_instruction {
            return Err(Error::Config("the instruction modality cannot be disabled".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Global optimizer step (1-based).
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    /// 1-based, counting epochs from earlier (resumed) runs.
    pub epoch: usize,
    /// Step-weighted mean batch loss over the epoch.
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Model, optimizer state and progress; everything needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PlannerModel,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(model: PlannerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamState::for_store(config.adam(), &model.params);
        Ok(Self {
            model,
            optimizer,
            config,
            epochs_done: 0,
        })
    }

    /// Fresh model from the config seed.
    pub fn from_scratch(corpus_vocab: (crate::heads::Vocabularies, crate::encoders::TokenVocab), config: TrainConfig) -> Result<Self> {
        let model = PlannerModel::new(config.planner.clone(), corpus_vocab.0, corpus_vocab.1, config.seed)?;
        Self::new(model, config)
    }

    /// Trains until `config.epochs` epochs are done in total (or the
    /// callback stops early). Returns the loss of every optimizer step.
    pub fn train(
        &mut self,
        episodes: &[PreparedEpisode],
        mut on_epoch: impl FnMut(&EpochSummary, &PlannerModel, &[LossPoint]) -> Control,
    ) -> Result<Vec<LossPoint>> {
        if episodes.is_empty() && self.epochs_done < self.config.epochs {
            return Err(Error::Validation("training needs at least one episode".into()));
        }
        if let Some(bad) = episodes.iter().position(|e| e.targets.len() != e.len() || e.is_empty()) {
            return Err(Error::Validation(format!("episode {bad} has no targets")));
        }
        let mut trace = Vec::new();
        while self.epochs_done < self.config.epochs {
            let epoch = self.epochs_done + 1;
            let mut order: Vec<usize> = (0..episodes.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64));
            order.shuffle(&mut rng);
            let steps: Vec<(usize, usize)> = order
                .iter()
                .flat_map(|&e| (0..episodes[e].len()).map(move |n| (e, n)))
                .collect();
            let start = trace.len();
            let mut weighted = 0.0;
            for batch in steps.chunks(self.config.batch_size) {
                let loss = self.batch_update(episodes, batch).map_err(|err| match err {
                    Error::NonFinite { op } => Error::Numeric(format!(
                        "non-finite value in {op} at epoch {epoch}, optimizer step {}",
                        self.optimizer.step + 1
                    )),
                    other => other,
                })?;
                weighted += loss * batch.len() as f64;
                trace.push(LossPoint {
                    step: self.optimizer.step,
                    loss,
                });
            }
            self.epochs_done = epoch;
            let summary = EpochSummary {
                epoch,
                mean_loss: weighted / steps.len() as f64,
                steps: steps.len(),
            };
            if on_epoch(&summary, &self.model, &trace[start..]) == Control::Stop {
                break;
            }
        }
        Ok(trace)
    }

    fn batch_update(&mut self, episodes: &[PreparedEpisode], batch: &[(usize, usize)]) -> Result<f64> {
        let grads = {
            let mut tape = Tape::new(&self.model.params);
            let mut losses = Vec::with_capacity(batch.len());
            let mut i = 0;
            while i < batch.len() {
                let e = batch[i].0;
                let mut j = i;
                while j < batch.len() && batch[j].0 == e {
                    j += 1;
                }
                let idx: Vec<usize> = batch[i..j].iter().map(|&(_, n)| n).collect();
                let outs = self.model.episode_logits(&mut tape, &episodes[e], &idx, &self.config.mask)?;
                for (o, &n) in outs.iter().zip(&idx) {
                    losses.push(subgoal_loss(&mut tape, o, &episodes[e].targets[n])?);
                }
                i = j;
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let mean = tape.scale(total, 1.0 / losses.len() as f64)?;
            let loss = tape.value(mean).item();
            let grads = tape.backward(mean)?;
            if !grads.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            (grads, loss)
        };
        adam_step(&mut self.model.params, &grads.0, &mut self.optimizer)?;
        Ok(grads.1)
    }
}

pub fn prepare_episodes<'a>(model: &PlannerModel, episodes: impl IntoIterator<Item = &'a Episode>) -> Result<Vec<PreparedEpisode>> {
    episodes
        .into_iter()
        .map(|e| model.prepare(&e.instruction, &e.observations(), &e.subgoals()))
        .collect()
}

/// Teacher-forced predictions for every step of an episode.
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<SubGoal>>;
}

/// A planner evaluated under a modality mask.
pub struct MaskedPlanner<'m> {
    pub model: &'m PlannerModel,
    pub mask: ModalityMask,
}

impl Predictor for MaskedPlanner<'_> {
    fn predict(&self, episode: &Episode) -> Result<Vec<SubGoal>> {
        let ep = self.model.prepare(&episode.instruction, &episode.observations(), &episode.subgoals())?;
        Ok(self
            .model
            .predict_episode(&ep, &self.mask)?
            .iter()
            .map(|l| decode_subgoal(l).subgoal)
            .collect())
    }
}

/// Counts for one split. Accuracies are percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub steps: usize,
    pub action: usize,
    pub object: usize,
    pub receptacle: usize,
    pub total: usize,
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

impl SplitReport {
    pub fn action_accuracy(&self) -> f64 {
        percent(self.action, self.steps)
    }

    pub fn object_accuracy(&self) -> f64 {
        percent(self.object, self.steps)
    }

    pub fn receptacle_accuracy(&self) -> f64 {
        percent(self.receptacle, self.steps)
    }

    pub fn total_accuracy(&self) -> f64 {
        percent(self.total, self.steps)
    }

    pub fn add(&mut self, predicted: &SubGoal, target: &SubGoal) {
        let a = predicted.action == target.action;
        let o = predicted.object == target.object;
        let r = predicted.receptacle == target.receptacle;
        self.steps += 1;
        self.action += usize::from(a);
        self.object += usize::from(o);
        self.receptacle += usize::from(r);
        self.total += usize::from(a && o && r);
    }
}

/// Scores every step of `episodes` against its ground truth.
pub fn evaluate<'a>(predictor: &dyn Predictor, episodes: impl IntoIterator<Item = &'a Episode>) -> Result<SplitReport> {
    let mut report = SplitReport::default();
    for e in episodes {
        let predicted = predictor.predict(e)?;
        if predicted.len() != e.steps.len() {
            return Err(Error::Contract(format!(
                "predictor returned {} sub-goals for a {}-step episode",
                predicted.len(),
                e.steps.len()
            )));
        }
        for (p, s) in predicted.iter().zip(&e.steps) {
            report.add(p, &s.subgoal);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mask: ModalityMask,
    pub splits: Vec<(Split, SplitReport)>,
}

impl EvalReport {
    pub fn split(&self, s: Split) -> Option<&SplitReport> {
        self.splits.iter().find(|(k, _)| *k == s).map(|(_, r)| r)
    }
}

pub fn evaluate_splits(
    predictor: &dyn Predictor,
    corpus: &Corpus,
    splits: &[Split],
    label: &str,
    mask: ModalityMask,
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(splits.len());
    for &s in splits {
        out.push((s, evaluate(predictor, corpus.split(s))?));
    }
    Ok(EvalReport {
        label: label.into(),
        mask,
        splits: out,
    })
}

/// Trains and evaluates one model per named mask with the same seed,
/// dimensions and epoch budget.
pub fn ablation_grid(
    corpus: &Corpus,
    base: &TrainConfig,
    rows: &[(String, ModalityMask)],
    vocab: &(crate::heads::Vocabularies, crate::encoders::TokenVocab),
    mut on_epoch: impl FnMut(&str, &EpochSummary),
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(rows.len());
    for (label, mask) in rows {
        let config = TrainConfig {
            mask: *mask,
            ..base.clone()
        };
        let mut trainer = Trainer::from_scratch(vocab.clone(), config)?;
        let train = prepare_episodes(&trainer.model, corpus.split(Split::Train))?;
        trainer.train(&train, |s, _, _| {
            on_epoch(label, s);
            Control::Continue
        })?;
        let predictor = MaskedPlanner {
            model: &trainer.model,
            mask: *mask,
        };
        reports.push(evaluate_splits(
            &predictor,
            corpus,
            &[Split::ValidSeen, Split::ValidUnseen],
            label,
            *mask,
        )?);
    }
    Ok(reports)
}

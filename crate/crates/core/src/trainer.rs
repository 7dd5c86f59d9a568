//! Interleaved state search and backpropagation.
//!
//! Every training iteration of the exploration phase re-scores the
//! population on the current batch, runs one binary-DE generation and trains
//! the best state's sub-network. Exploration stops for good once the
//! population collapses to a single state or the stagnation budget of epochs
//! is spent; from then on only the last best sub-network is fine-tuned.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bde::{self, BdeConfig, Population};
use crate::data::{Batch, Dataset};
use crate::energy::{class_energies, energy_loss, population_energies};
use crate::error::{Error, Result};
use crate::nn::optim::{sgd_step_masked, StepDecay};
use crate::nn::{cross_entropy, Network};
use crate::state::PruningState;
use crate::unitmap::UnitMap;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepDecay,
    pub weight_decay: f64,
    pub bde: BdeConfig,
    /// Epoch budget for exploration.
    pub stagnation_epochs: usize,
    pub seed: u64,
    pub topk: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: StepDecay { base: 0.1, step: 50, gamma: 0.1 },
            weight_decay: 1e-6,
            bde: BdeConfig::default(),
            stagnation_epochs: 100,
            seed: 0,
            topk: vec![1, 3, 5],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.bde.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.stagnation_epochs > self.epochs {
            return Err(Error::Config(format!(
                "stagnation epochs {} exceed the epoch budget {}",
                self.stagnation_epochs, self.epochs
            )));
        }
        if !(self.lr.base.is_finite() && self.lr.base > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        if self.topk.contains(&0) {
            return Err(Error::Config("top-k values must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Exploration,
    FineTune,
}

/// Per-epoch observables; one metrics CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Top-1, Top-3 and Top-5 validation accuracy in percent.
    pub top: [f64; 3],
    pub best_energy: f64,
    pub mean_energy: f64,
    pub delta_s: f64,
    pub kept_ratio: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: f64,
    pub best_energy: f64,
    pub delta_s: f64,
}

/// Forward passes issued by the training loop, by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferenceCalls {
    /// Scoring of trial states, one per member per exploration iteration.
    pub trial_evaluations: u64,
    /// Re-scoring of the current members against updated weights.
    pub parent_refreshes: u64,
    /// Forward passes of the sub-network being trained.
    pub training_forwards: u64,
}

impl InferenceCalls {
    /// Trial evaluations plus training forwards: `S + 1` per exploration
    /// iteration and 1 per fine-tuning iteration.
    pub fn calls(&self) -> u64 {
        self.trial_evaluations + self.training_forwards
    }

    pub fn total(&self) -> u64 {
        self.calls() + self.parent_refreshes
    }
}

#[derive(Debug, Default)]
pub struct InferenceCounter {
    trial: AtomicU64,
    refresh: AtomicU64,
    training: AtomicU64,
}

impl InferenceCounter {
    pub fn snapshot(&self) -> InferenceCalls {
        InferenceCalls {
            trial_evaluations: self.trial.load(Ordering::Relaxed),
            parent_refreshes: self.refresh.load(Ordering::Relaxed),
            training_forwards: self.training.load(Ordering::Relaxed),
        }
    }
}

/// Closed-form forward-pass count for `batches_per_epoch` iterations per
/// epoch, exploration ending after `convergence_epoch` if the population
/// collapses before the stagnation budget.
pub fn count_inference_calls(
    config: &TrainConfig,
    batches_per_epoch: usize,
    convergence_epoch: Option<usize>,
) -> InferenceCalls {
    let s = config.bde.pop_size as u64;
    let nb = batches_per_epoch as u64;
    let explore = match convergence_epoch {
        Some(e) => config.stagnation_epochs.min(e),
        None => config.stagnation_epochs,
    } as u64;
    let explore_iters = explore * nb;
    InferenceCalls {
        trial_evaluations: explore_iters * s,
        // Without exploration the initial population is still scored once.
        parent_refreshes: if explore_iters == 0 { s } else { explore_iters * s },
        training_forwards: config.epochs as u64 * nb,
    }
}

/// `E_b − mean(E)`, formed as `−mean(E_i − E_b)` so it is never positive.
pub fn delta_s(energies: &[f64]) -> Result<f64> {
    let b = bde::best_index(energies)?;
    let min = energies[b];
    let spread: f64 = energies.iter().map(|&e| e - min).sum();
    Ok(-(spread / energies.len() as f64))
}

pub fn converged(pop: &Population) -> bool {
    pop.converged()
}

/// Loss, Top-k accuracies (percent) and energy loss of `net` under `state`
/// (`None` evaluates the full network).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub topk: Vec<(usize, f64)>,
    pub energy: f64,
}

impl EvalMetrics {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|&&(kk, _)| kk == k).map(|&(_, a)| a)
    }
}

const EVAL_CHUNK: usize = 256;

pub fn evaluate(
    net: &Network,
    state: Option<&PruningState>,
    dataset: &Dataset,
    indices: &[usize],
    topk: &[usize],
) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut energy = 0.0;
    let mut hits = vec![0usize; topk.len()];
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk);
        let logits = net.forward(&batch.images, state)?;
        let n = chunk.len() as f64;
        loss += cross_entropy(&logits, &batch.labels)? * n;
        energy += energy_loss(&class_energies(&logits), &batch.labels)? * n;
        for (s, &t) in batch.labels.iter().enumerate() {
            let row = logits.sample(s);
            let rank = row.iter().filter(|&&v| v > row[t]).count();
            for (h, &k) in hits.iter_mut().zip(topk) {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    let n = indices.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        topk: topk.iter().zip(hits).map(|(&k, h)| (k, 100.0 * h as f64 / n)).collect(),
        energy: energy / n,
    })
}

/// Stateful training loop.
pub struct Trainer {
    pub net: Network,
    pub unit_map: UnitMap,
    pub population: Population,
    config: TrainConfig,
    best: Option<(PruningState, f64)>,
    phase: Phase,
    rng: ChaCha8Rng,
    counter: InferenceCounter,
    iteration: usize,
    epoch: usize,
    convergence_epoch: Option<usize>,
    iterations: Vec<IterationMetrics>,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let unit_map = UnitMap::build(&net)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let population = bde::init_population(config.bde.pop_size, unit_map.len(), config.bde.init_p, &mut rng)?;
        let phase = if config.stagnation_epochs == 0 { Phase::FineTune } else { Phase::Exploration };
        Ok(Self {
            net,
            unit_map,
            population,
            config,
            best: None,
            phase,
            rng,
            counter: InferenceCounter::default(),
            iteration: 0,
            epoch: 0,
            convergence_epoch: None,
            iterations: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_state(&self) -> Option<&PruningState> {
        self.best.as_ref().map(|(s, _)| s)
    }

    /// Last epoch of exploration when the population collapsed early.
    pub fn convergence_epoch(&self) -> Option<usize> {
        self.convergence_epoch
    }

    pub fn inference_calls(&self) -> InferenceCalls {
        self.counter.snapshot()
    }

    pub fn iterations(&self) -> &[IterationMetrics] {
        &self.iterations
    }

    fn score(&self, states: &[PruningState], batch: &Batch, slot: &AtomicU64) -> Result<Vec<f64>> {
        slot.fetch_add(states.len() as u64, Ordering::Relaxed);
        population_energies(&self.net, states, batch)
    }

    /// One training iteration on `batch` in the current phase.
    pub fn train_iteration(&mut self, batch: &Batch) -> Result<IterationMetrics> {
        self.iteration += 1;
        match self.phase {
            Phase::Exploration => {
                let energies = self.score(&self.population.states, batch, &self.counter.refresh)?;
                self.population.energies = energies;
                let mut pop = std::mem::replace(&mut self.population, Population::new(Vec::new()));
                let (net, trial) = (&self.net, &self.counter.trial);
                let eval = |t: &[PruningState]| {
                    trial.fetch_add(t.len() as u64, Ordering::Relaxed);
                    population_energies(net, t, batch)
                };
                let result = bde::evolve_step(&mut pop, eval, &self.config.bde, &mut self.rng);
                self.population = pop;
                let b = result?;
                self.best = Some((self.population.states[b].clone(), self.population.energies[b]));
            }
            Phase::FineTune if self.best.is_none() => {
                // No exploration budget: train the initial population's best member.
                let energies = self.score(&self.population.states, batch, &self.counter.refresh)?;
                self.population.energies = energies;
                self.best = Some(bde::best_state(&self.population)?);
            }
            Phase::FineTune => {}
        }
        let (state, best_energy) = self.best.clone().expect("best state chosen above");
        self.counter.training.fetch_add(1, Ordering::Relaxed);
        let masked = self.unit_map.apply_mask(&self.net, &state)?;
        let (loss, grads) = masked.backward(&batch.images, &batch.labels)?;
        let active = masked.active_params().to_vec();
        let lr = self.config.lr.lr(self.epoch.max(1));
        sgd_step_masked(&mut self.net, &grads, lr, self.config.weight_decay, &active);
        let metrics = IterationMetrics {
            iteration: self.iteration,
            phase: self.phase,
            loss,
            best_energy,
            delta_s: delta_s(&self.population.energies)?,
        };
        self.iterations.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs one epoch over the training split, then applies the phase switch
    /// and records validation metrics.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochMetrics> {
        if dataset.splits.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.epoch += 1;
        let mut order = dataset.splits.train.clone();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = dataset.batch(chunk);
            loss_sum += self.train_iteration(&batch)?.loss * chunk.len() as f64;
        }
        let is_converged = self.population.converged();
        if self.phase == Phase::Exploration && (is_converged || self.epoch >= self.config.stagnation_epochs) {
            if is_converged && self.epoch < self.config.stagnation_epochs {
                self.convergence_epoch = Some(self.epoch);
            }
            self.phase = Phase::FineTune;
        }
        let state = self.best_state().cloned().expect("at least one iteration ran");
        let val_idx = if dataset.splits.val.is_empty() { &dataset.splits.train } else { &dataset.splits.val };
        let val = evaluate(&self.net, Some(&state), dataset, val_idx, &[1, 3, 5])?;
        let energies = &self.population.energies;
        let (b, mean) = (bde::best_index(energies)?, energies.iter().sum::<f64>() / energies.len() as f64);
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss: val.loss,
            top: [val.topk[0].1, val.topk[1].1, val.topk[2].1],
            best_energy: energies[b],
            mean_energy: mean,
            delta_s: delta_s(energies)?,
            kept_ratio: self.unit_map.kept_ratio(&state)?,
            converged: is_converged,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub best_state: PruningState,
    pub history: Vec<EpochMetrics>,
    pub iterations: Vec<IterationMetrics>,
    pub inference_calls: InferenceCalls,
    pub convergence_epoch: Option<usize>,
    pub batches_per_epoch: usize,
}

/// Full training run.
pub fn train(net: Network, dataset: &Dataset, config: TrainConfig) -> Result<TrainOutcome> {
    train_with(net, dataset, config, |_| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(net: Network, dataset: &Dataset, config: TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics) -> Result<()>,
{
    if dataset.splits.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let epochs = config.epochs;
    let batches_per_epoch = dataset.splits.train.len().div_ceil(config.batch_size.max(1));
    let mut trainer = Trainer::new(net, config)?;
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let m = trainer.run_epoch(dataset)?;
        on_epoch(&m)?;
        history.push(m);
    }
    let inference_calls = trainer.inference_calls();
    let best_state = trainer.best_state().cloned().ok_or(Error::EmptyDataset)?;
    Ok(TrainOutcome {
        best_state,
        history,
        inference_calls,
        convergence_epoch: trainer.convergence_epoch,
        batches_per_epoch,
        iterations: trainer.iterations,
        net: trainer.net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::nn::presets;
    use crate::state::PruningState;

    #[test]
    fn delta_s_cases() {
        assert_eq!(delta_s(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(delta_s(&[-2.0, 0.0]).unwrap(), -1.0);
        assert!(delta_s(&[]).is_err());
        assert!(delta_s(&[0.1, 0.7, -0.3, 0.2]).unwrap() <= 0.0);
    }

    #[test]
    fn closed_form_counts() {
        let cfg = TrainConfig {
            epochs: 2,
            stagnation_epochs: 1,
            bde: BdeConfig { pop_size: 8, ..BdeConfig::default() },
            ..TrainConfig::default()
        };
        assert_eq!(count_inference_calls(&cfg, 10, None).calls(), 100);
        let none = TrainConfig { stagnation_epochs: 0, ..cfg.clone() };
        assert_eq!(count_inference_calls(&none, 10, None).calls(), 20);
        let long = TrainConfig { epochs: 10, stagnation_epochs: 6, ..cfg };
        assert_eq!(count_inference_calls(&long, 3, None).calls(), 6 * 3 * 9 + 4 * 3);
        assert_eq!(count_inference_calls(&long, 3, Some(2)).calls(), 2 * 3 * 9 + 8 * 3);
    }

    #[test]
    fn topk_is_monotone() {
        let mut data = synth_dataset(6, 10, 8, 1).unwrap();
        data.split(0.2, 0.2, 1).unwrap();
        let net = Network::build(&presets::by_name("toy10", 6).unwrap(), &[1, 8, 8], 6, 3).unwrap();
        let m = evaluate(&net, None, &data, &data.splits.test, &[1, 3, 5]).unwrap();
        let (a, b, c) = (m.top(1).unwrap(), m.top(3).unwrap(), m.top(5).unwrap());
        assert!(a <= b && b <= c);
        let ones = evaluate(&net, Some(&PruningState::ones(10)), &data, &data.splits.test, &[1, 3, 5]).unwrap();
        assert_eq!(ones, m);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { stagnation_epochs: 300, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn empty_training_split_rejected() {
        let mut data = synth_dataset(2, 4, 8, 1).unwrap();
        data.splits.train.clear();
        let net = Network::build(&presets::by_name("toy10", 2).unwrap(), &[1, 8, 8], 2, 3).unwrap();
        assert!(matches!(train(net, &data, TrainConfig::default()), Err(Error::EmptyDataset)));
    }
}

//! Binary differential evolution over pruning states.
//!
//! Mutation flips a donor's bit where two other members disagree:
//!
//! ```text
//! v[d] = 1 - s_i1[d]   if s_i2[d] != s_i3[d] and r[d] < F
//!        s_i1[d]       otherwise
//! ```
//!
//! Crossover takes `v[d]` when `r'[d] <= Cr` and the parent bit otherwise,
//! with no forced dimension. A trial replaces its parent when its energy is
//! lower or equal.
//!
//! Every individual draws from its own ChaCha stream keyed by a per-generation
//! seed, so trial generation does not depend on evaluation order or thread
//! count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::state::PruningState;

pub const MIN_POPULATION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MutationFactor {
    Fixed(f64),
    /// `F` drawn uniformly from `[0, 1]` for every mutant vector.
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdeConfig {
    pub pop_size: usize,
    pub mutation: MutationFactor,
    pub crossover_rate: f64,
    pub init_p: f64,
    /// Repair every trial to exactly this many kept units.
    pub active_units: Option<usize>,
}

impl Default for BdeConfig {
    fn default() -> Self {
        Self { pop_size: 8, mutation: MutationFactor::Random, crossover_rate: 0.1, init_p: 0.5, active_units: None }
    }
}

impl BdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < MIN_POPULATION {
            return Err(Error::PopulationTooSmall(self.pop_size));
        }
        if let MutationFactor::Fixed(f) = self.mutation {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("mutation factor {f} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::Config(format!("crossover rate {} outside [0, 1]", self.crossover_rate)));
        }
        if !(0.0..=1.0).contains(&self.init_p) {
            return Err(Error::Config(format!("init probability {} outside [0, 1]", self.init_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub states: Vec<PruningState>,
    /// Energy of each state at the last evaluation; empty until evaluated.
    pub energies: Vec<f64>,
}

impl Population {
    pub fn new(states: Vec<PruningState>) -> Self {
        Self { states, energies: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_evaluated(&self) -> bool {
        !self.states.is_empty() && self.energies.len() == self.states.len()
    }

    /// Whether every member is bit-identical.
    pub fn converged(&self) -> bool {
        self.states.windows(2).all(|w| w[0] == w[1])
    }
}

/// Population of `size` states with i.i.d. Bernoulli(`p`) bits.
pub fn init_population<R: Rng>(size: usize, units: usize, p: f64, rng: &mut R) -> Result<Population> {
    if size < MIN_POPULATION {
        return Err(Error::PopulationTooSmall(size));
    }
    if units == 0 {
        return Err(Error::NothingPrunable);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("init probability {p} outside [0, 1]")));
    }
    let states =
        (0..size).map(|_| PruningState::from_bits((0..units).map(|_| rng.gen::<f64>() < p).collect())).collect();
    Ok(Population::new(states))
}

/// Three mutually different member indices, all different from `i`.
pub fn pick_donors<R: Rng>(size: usize, i: usize, rng: &mut R) -> [usize; 3] {
    debug_assert!(size >= MIN_POPULATION && i < size);
    let mut picked = [usize::MAX; 3];
    let mut n = 0;
    while n < 3 {
        let k = rng.gen_range(0..size);
        if k != i && !picked[..n].contains(&k) {
            picked[n] = k;
            n += 1;
        }
    }
    picked
}

/// The flip rule applied to explicit donors.
pub fn mutant_from<R: Rng>(
    base: &PruningState,
    a: &PruningState,
    b: &PruningState,
    factor: MutationFactor,
    rng: &mut R,
) -> PruningState {
    let f = match factor {
        MutationFactor::Fixed(f) => f,
        MutationFactor::Random => rng.gen::<f64>(),
    };
    let bits = (0..base.len())
        .map(|d| {
            let r: f64 = rng.gen();
            if a.get(d) != b.get(d) && r < f {
                !base.get(d)
            } else {
                base.get(d)
            }
        })
        .collect();
    PruningState::from_bits(bits)
}

/// Mutant vector for member `i`.
pub fn mutate<R: Rng>(pop: &Population, i: usize, factor: MutationFactor, rng: &mut R) -> Result<PruningState> {
    if pop.len() < MIN_POPULATION {
        return Err(Error::PopulationTooSmall(pop.len()));
    }
    let [i1, i2, i3] = pick_donors(pop.len(), i, rng);
    Ok(mutant_from(&pop.states[i1], &pop.states[i2], &pop.states[i3], factor, rng))
}

pub fn crossover<R: Rng>(parent: &PruningState, mutant: &PruningState, rate: f64, rng: &mut R) -> PruningState {
    assert_eq!(parent.len(), mutant.len(), "crossover of unequal lengths");
    let bits =
        parent.bits().iter().zip(mutant.bits()).map(|(&p, &m)| if rng.gen::<f64>() <= rate { m } else { p }).collect();
    PruningState::from_bits(bits)
}

/// Flips randomly chosen bits until exactly `target` units are kept.
pub fn repair_active_count<R: Rng>(state: &mut PruningState, target: usize, rng: &mut R) {
    let target = target.min(state.len());
    let ones = state.count_ones();
    if ones == target {
        return;
    }
    let surplus = ones > target;
    let mut candidates: Vec<usize> = (0..state.len()).filter(|&d| state.get(d) == surplus).collect();
    candidates.shuffle(rng);
    for &d in candidates.iter().take(ones.abs_diff(target)) {
        state.set(d, !surplus);
    }
}

/// Trial replaces parent on ties.
pub fn select(parent_energy: f64, trial_energy: f64) -> bool {
    trial_energy <= parent_energy
}

/// Lowest-energy member, lowest index on ties.
pub fn best_index(energies: &[f64]) -> Result<usize> {
    if energies.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let mut best = 0;
    for (i, &e) in energies.iter().enumerate().skip(1) {
        if e < energies[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn best_state(pop: &Population) -> Result<(PruningState, f64)> {
    if !pop.is_evaluated() {
        return Err(Error::EmptyPopulation);
    }
    let b = best_index(&pop.energies)?;
    Ok((pop.states[b].clone(), pop.energies[b]))
}

/// Per-individual RNG for one generation.
pub fn individual_rng(generation_seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(generation_seed);
    rng.set_stream(i as u64);
    rng
}

/// Trial states for one generation, one per member.
pub fn trials(pop: &Population, config: &BdeConfig, generation_seed: u64) -> Result<Vec<PruningState>> {
    if pop.len() < MIN_POPULATION {
        return Err(Error::PopulationTooSmall(pop.len()));
    }
    (0..pop.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = individual_rng(generation_seed, i);
            let mutant = mutate(pop, i, config.mutation, &mut rng)?;
            let mut trial = crossover(&pop.states[i], &mutant, config.crossover_rate, &mut rng);
            if let Some(k) = config.active_units {
                repair_active_count(&mut trial, k, &mut rng);
            }
            Ok(trial)
        })
        .collect()
}

/// One generation: build trials, score them with `eval` (which receives all
/// trials at once) and keep each trial that does not raise its member's
/// energy. Returns the best index afterwards.
pub fn evolve_step<R, E>(pop: &mut Population, eval: E, config: &BdeConfig, rng: &mut R) -> Result<usize>
where
    R: Rng,
    E: FnOnce(&[PruningState]) -> Result<Vec<f64>>,
{
    if !pop.is_evaluated() {
        return Err(Error::Config("population energies must be evaluated before evolving".into()));
    }
    let trial_states = trials(pop, config, rng.gen())?;
    let trial_energies = eval(&trial_states)?;
    if trial_energies.len() != trial_states.len() {
        return Err(Error::Config("evaluator returned the wrong number of energies".into()));
    }
    for (i, (state, energy)) in trial_states.into_iter().zip(trial_energies).enumerate() {
        if select(pop.energies[i], energy) {
            pop.states[i] = state;
            pop.energies[i] = energy;
        }
    }
    best_index(&pop.energies)
}

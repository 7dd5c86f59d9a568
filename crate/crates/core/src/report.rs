//! Metrics CSV output and the mutation-diversity study.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;

use crate::bde::{mutate, MutationFactor, Population};
use crate::error::Result;
use crate::oracle::Landscape;
use crate::state::PruningState;
use crate::trainer::EpochMetrics;

pub const METRICS_HEADER: &str =
    "epoch,train_loss,val_loss,top1,top3,top5,best_energy,mean_energy,delta_s,kept_ratio,converged";

pub fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
        m.epoch,
        m.train_loss,
        m.val_loss,
        m.top[0],
        m.top[1],
        m.top[2],
        m.best_energy,
        m.mean_energy,
        m.delta_s,
        m.kept_ratio,
        u8::from(m.converged)
    )
}

pub fn write_metrics_csv<W: Write>(mut out: W, history: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in history {
        writeln!(out, "{}", metrics_row(m))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub factor: MutationFactor,
    pub runs: usize,
    /// Distinct mutant vectors produced over all runs.
    pub distinct: usize,
    /// `distinct / 2^D`.
    pub visited_fraction: f64,
    /// Share of mutants whose landscape energy is at most their parent's.
    pub improved_fraction: Option<f64>,
}

/// Mutates every member of `initial` once per run, `runs` times over, and
/// counts the distinct mutant vectors.
pub fn mutation_diversity<R: Rng>(
    initial: &Population,
    factor: MutationFactor,
    runs: usize,
    landscape: Option<&Landscape>,
    rng: &mut R,
) -> Result<DiversityReport> {
    let units = initial.states.first().map_or(0, PruningState::len);
    let mut seen = HashSet::new();
    let mut improved = 0usize;
    for _ in 0..runs {
        for (i, parent) in initial.states.iter().enumerate() {
            let v = mutate(initial, i, factor, rng)?;
            if let Some(l) = landscape {
                if l.energy_of(&v) <= l.energy_of(parent) {
                    improved += 1;
                }
            }
            seen.insert(v);
        }
    }
    let space = (1u64 << units) as f64;
    let total = (runs * initial.len()).max(1) as f64;
    Ok(DiversityReport {
        factor,
        runs,
        distinct: seen.len(),
        visited_fraction: seen.len() as f64 / space,
        improved_fraction: landscape.map(|_| improved as f64 / total),
    })
}

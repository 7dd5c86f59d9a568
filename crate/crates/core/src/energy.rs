//! Energy view of a softmax classifier.
//!
//! With unit temperature the class energy is the negated logit,
//! `F(y_c, X) = -ε_c`, and the energy loss of a sample is the target energy
//! minus the lowest non-target energy. A negative loss means the target class
//! is strictly the most likely one. Batches reduce by the arithmetic mean.

use rayon::prelude::*;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::state::PruningState;
use crate::tensor::Tensor;

/// Class energies `[N, C]`: the elementwise negation of the logits.
pub fn class_energies(logits: &Tensor) -> Tensor {
    let data = logits.data().iter().map(|&v| -v).collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Energy loss of one sample's class energies.
pub fn sample_energy_loss(energies: &[f64], target: usize) -> Result<f64> {
    if energies.len() < 2 {
        return Err(Error::TooFewClasses(energies.len()));
    }
    if target >= energies.len() {
        return Err(Error::Target { target, classes: energies.len() });
    }
    let rival =
        energies.iter().enumerate().filter(|&(c, _)| c != target).map(|(_, &e)| e).fold(f64::INFINITY, f64::min);
    Ok(energies[target] - rival)
}

/// Mean energy loss over a batch of class energies.
pub fn energy_loss(energies: &Tensor, targets: &[usize]) -> Result<f64> {
    if energies.batch() != targets.len() {
        return Err(Error::Shape { expected: vec![targets.len()], found: energies.shape().to_vec() });
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (n, &t) in targets.iter().enumerate() {
        total += sample_energy_loss(energies.sample(n), t)?;
    }
    Ok(total / targets.len() as f64)
}

/// Energy loss of `net` under `state` on one batch.
pub fn state_energy(net: &Network, state: &PruningState, batch: &Batch) -> Result<f64> {
    let logits = net.forward(&batch.images, Some(state))?;
    energy_loss(&class_energies(&logits), &batch.labels)
}

/// Energy loss of every state against frozen weights. Order-independent, so
/// the states are scored in parallel.
pub fn population_energies(net: &Network, states: &[PruningState], batch: &Batch) -> Result<Vec<f64>> {
    states.par_iter().map(|s| state_energy(net, s, batch)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn negation() {
        assert_eq!(class_energies(&row(&[2.0, -1.0, 0.0])).data(), &[-2.0, 1.0, 0.0]);
        assert!(class_energies(&row(&[0.0, 0.0])).data().iter().all(|&v| v == 0.0));
        let batch = Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap();
        assert_eq!(class_energies(&batch).batch(), 3);
    }

    #[test]
    fn direct_substitution() {
        let e = class_energies(&row(&[2.0, 1.0, 0.0]));
        assert_eq!(energy_loss(&e, &[0]).unwrap(), -1.0);
    }

    #[test]
    fn equal_logits_give_zero() {
        let e = class_energies(&row(&[0.7, 0.7, 0.7]));
        for t in 0..3 {
            assert_eq!(energy_loss(&e, &[t]).unwrap(), 0.0);
        }
    }

    #[test]
    fn batch_mean() {
        // Per-sample losses -1 and +3.
        let e = class_energies(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        assert_eq!(energy_loss(&e, &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn needs_two_classes() {
        assert!(matches!(sample_energy_loss(&[1.0], 0), Err(Error::TooFewClasses(1))));
    }

    proptest! {
        #[test]
        fn negative_iff_target_strictly_best(logits in prop::collection::vec(-5i32..5, 2..6), t in 0usize..6) {
            let t = t % logits.len();
            let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
            let e = sample_energy_loss(&class_energies(&row(&logits)).into_data(), t).unwrap();
            let strictly_max = logits.iter().enumerate().all(|(c, &v)| c == t || v < logits[t]);
            prop_assert_eq!(e < 0.0, strictly_max);
            let ties = logits.iter().enumerate().filter(|&(c, _)| c != t).any(|(_, &v)| v == logits[t]);
            let not_beaten = logits.iter().all(|&v| v <= logits[t]);
            prop_assert_eq!(e == 0.0, ties && not_beaten);
        }
    }
}

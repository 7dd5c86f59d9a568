//! Independent checks: exhaustive energy landscapes, brute-force optima,
//! central finite differences and physically pruned networks.

use std::io::Write;

use rayon::prelude::*;

use crate::data::Batch;
use crate::energy::state_energy;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, Param};
use crate::state::PruningState;
use crate::tensor::Tensor;

pub const MAX_LANDSCAPE_UNITS: usize = 20;

/// Energy loss of every pruning state, indexed by [`PruningState::to_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub units: usize,
    pub energies: Vec<f64>,
}

impl Landscape {
    pub fn state(&self, index: usize) -> PruningState {
        PruningState::from_index(index as u64, self.units)
    }

    pub fn energy_of(&self, state: &PruningState) -> f64 {
        self.energies[state.to_index() as usize]
    }

    /// Fraction of states with energy strictly below `energy`.
    pub fn fraction_below(&self, energy: f64) -> f64 {
        self.energies.iter().filter(|&&e| e < energy).count() as f64 / self.energies.len() as f64
    }

    /// CSV with columns `index,state_bits,energy`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,state_bits,energy")?;
        for (k, e) in self.energies.iter().enumerate() {
            writeln!(out, "{},{},{:.6}", k, self.state(k), e)?;
        }
        Ok(())
    }
}

pub fn enumerate_landscape(net: &Network, batch: &Batch) -> Result<Landscape> {
    let units = net.num_units();
    if units > MAX_LANDSCAPE_UNITS {
        return Err(Error::LandscapeTooLarge(units));
    }
    if units == 0 {
        return Err(Error::NothingPrunable);
    }
    let energies = (0..1usize << units)
        .into_par_iter()
        .map(|k| state_energy(net, &PruningState::from_index(k as u64, units), batch))
        .collect::<Result<Vec<_>>>()?;
    Ok(Landscape { units, energies })
}

/// Global minimum, lowest index on ties.
pub fn brute_force_best(landscape: &Landscape) -> (PruningState, f64) {
    let mut best = 0;
    for (k, &e) in landscape.energies.iter().enumerate() {
        if e < landscape.energies[best] {
            best = k;
        }
    }
    (landscape.state(best), landscape.energies[best])
}

/// Central-difference gradient of the masked mean cross-entropy, in flat
/// parameter order.
pub fn finite_diff_gradient(
    net: &Network,
    x: &Tensor,
    targets: &[usize],
    mask: Option<&PruningState>,
    h: f64,
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step {h} must be positive")));
    }
    net.loss(x, targets, mask)?;
    (0..net.num_params())
        .into_par_iter()
        .map_init(
            || net.clone(),
            |probe, i| {
                let orig = *probe.flat_param_mut(i);
                *probe.flat_param_mut(i) = orig + h;
                let plus = probe.loss(x, targets, mask)?;
                *probe.flat_param_mut(i) = orig - h;
                let minus = probe.loss(x, targets, mask)?;
                *probe.flat_param_mut(i) = orig;
                Ok((plus - minus) / (2.0 * h))
            },
        )
        .collect()
}

/// Gradients below this magnitude are compared absolutely rather than
/// relatively; central differences at `h = 1e-5` carry roughly `1e-10` of
/// rounding and truncation error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR)).fold(0.0, f64::max)
}

/// Copy of `net` with every unit switched off in `state` deleted from the
/// weight tensors. Layers may end up with zero units.
pub fn physically_prune(net: &Network, state: &PruningState) -> Result<Network> {
    state.check_len(net.num_units())?;
    let prunable = net.prunable_layers();
    let mut keep_units: Vec<Option<Vec<usize>>> = vec![None; net.specs().len()];
    let mut d = 0;
    for &(layer, units) in &prunable {
        keep_units[layer] = Some((0..units).filter(|&u| state.get(d + u)).collect());
        d += units;
    }

    let input = net.input_shape();
    // Kept input channels (feature maps) or features (flat) entering each layer.
    let mut kept_in: Vec<usize> = (0..input[0]).collect();
    let mut spatial: usize = input[1..].iter().product();
    let mut cur_shape = input.to_vec();
    let mut specs = Vec::new();
    let mut shapes = Vec::new();
    let mut params = Vec::new();
    for (i, spec) in net.specs().iter().enumerate() {
        let orig_shape = &net.layer_shapes()[i];
        match *spec {
            LayerSpec::Conv2d { kernel_h, kernel_w, stride, padding, filters } => {
                let keep = keep_units[i].clone().unwrap_or_else(|| (0..filters).collect());
                let p = net.params()[i].as_ref().expect("params");
                let in_c = p.weight.shape()[1];
                let k = kernel_h * kernel_w;
                let mut w = Vec::new();
                for &f in &keep {
                    for &c in &kept_in {
                        let start = (f * in_c + c) * k;
                        w.extend_from_slice(&p.weight.data()[start..start + k]);
                    }
                }
                let bias: Vec<f64> = keep.iter().map(|&f| p.bias.data()[f]).collect();
                params.push(Some(Param {
                    weight: Tensor::new(vec![keep.len(), kept_in.len(), kernel_h, kernel_w], w)?,
                    bias: Tensor::new(vec![keep.len()], bias)?,
                }));
                specs.push(LayerSpec::Conv2d { filters: keep.len(), kernel_h, kernel_w, stride, padding });
                cur_shape = vec![keep.len(), orig_shape[1], orig_shape[2]];
                spatial = orig_shape[1] * orig_shape[2];
                kept_in = keep;
            }
            LayerSpec::Dense { units } => {
                let keep = keep_units[i].clone().unwrap_or_else(|| (0..units).collect());
                let p = net.params()[i].as_ref().expect("params");
                let in_f = p.weight.shape()[1];
                let mut w = Vec::new();
                for &u in &keep {
                    w.extend(kept_in.iter().map(|&c| p.weight.data()[u * in_f + c]));
                }
                let bias: Vec<f64> = keep.iter().map(|&u| p.bias.data()[u]).collect();
                params.push(Some(Param {
                    weight: Tensor::new(vec![keep.len(), kept_in.len()], w)?,
                    bias: Tensor::new(vec![keep.len()], bias)?,
                }));
                specs.push(LayerSpec::Dense { units: keep.len() });
                cur_shape = vec![keep.len()];
                kept_in = keep;
            }
            LayerSpec::Flatten => {
                kept_in = kept_in.iter().flat_map(|&c| c * spatial..(c + 1) * spatial).collect();
                params.push(None);
                specs.push(*spec);
                cur_shape = vec![kept_in.len()];
            }
            LayerSpec::MaxPool2d { .. } => {
                params.push(None);
                specs.push(*spec);
                cur_shape = vec![cur_shape[0], orig_shape[1], orig_shape[2]];
                spatial = orig_shape[1] * orig_shape[2];
            }
            LayerSpec::Relu => {
                params.push(None);
                specs.push(*spec);
            }
        }
        shapes.push(cur_shape.clone());
    }
    Ok(Network::from_raw(specs, input.to_vec(), net.num_classes(), shapes, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{loss::softmax, presets};

    #[test]
    fn brute_force_tie_break() {
        let flat = Landscape { units: 3, energies: vec![1.0; 8] };
        assert_eq!(brute_force_best(&flat).0.to_index(), 0);
        let mut e = vec![0.0; 8];
        e[5] = -2.0;
        let (s, v) = brute_force_best(&Landscape { units: 3, energies: e });
        assert_eq!((s.to_index(), v), (5, -2.0));
    }

    #[test]
    fn refuses_large_landscapes() {
        let specs = [LayerSpec::Flatten, LayerSpec::dense(21), LayerSpec::dense(2)];
        let net = Network::build(&specs, &[1, 2, 2], 2, 0).unwrap();
        let batch = Batch { images: Tensor::zeros(vec![1, 1, 2, 2]), labels: vec![0] };
        assert!(matches!(enumerate_landscape(&net, &batch), Err(Error::LandscapeTooLarge(21))));
    }

    #[test]
    fn analytic_logit_pair() {
        // A single bias-driven logit pair: logits [θ, 0] with θ the first bias.
        let mut net = Network::build(&[LayerSpec::dense(2)], &[1], 2, 0).unwrap();
        *net.flat_param_mut(0) = 0.0;
        *net.flat_param_mut(1) = 0.0;
        let theta = 0.7;
        *net.flat_param_mut(2) = theta;
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let fd = finite_diff_gradient(&net, &x, &[0], None, 1e-5).unwrap();
        let expected = softmax(&[theta, 0.0])[0] - 1.0;
        assert!((fd[2] - expected).abs() < 1e-9);
        let (_, g) = net.backward(&x, &[0], None).unwrap();
        assert!((g.flatten()[2] - expected).abs() < 1e-15);
    }

    #[test]
    fn gated_parameters_have_flat_loss() {
        let net = Network::build(&presets::by_name("toy10", 3).unwrap(), &[1, 8, 8], 3, 2).unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let mut state = PruningState::ones(10);
        state.set(0, false);
        let fd = finite_diff_gradient(&net, &x, &[1], Some(&state), 1e-5).unwrap();
        assert!(fd[..9].iter().all(|g| g.abs() < 1e-9));
    }
}

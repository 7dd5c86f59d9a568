//! What one state bit gates: every conv filter and every hidden dense unit
//! owns its incoming weights, its bias and its outgoing weights into the next
//! parameterized layer. The final classifier is never prunable.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerSpec, Network};
use crate::state::PruningState;
use crate::tensor::Tensor;

/// Parameter groups gated by one state bit, as flat parameter index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitEntry {
    pub layer: usize,
    pub unit: usize,
    pub incoming: Range<usize>,
    pub bias: usize,
    pub outgoing: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitMap {
    entries: Vec<UnitEntry>,
    total_params: usize,
}

impl UnitMap {
    pub fn build(net: &Network) -> Result<Self> {
        let offsets = net.param_offsets();
        let specs = net.specs();
        let mut entries = Vec::new();
        for (layer, units) in net.prunable_layers() {
            let (w_off, b_off) = offsets[layer].expect("prunable layer has params");
            let per_unit = net.params()[layer].as_ref().expect("params").weight.len() / units;
            let next = (layer + 1..specs.len()).find(|&j| specs[j].has_params()).expect("classifier follows");
            let (next_w, _) = offsets[next].expect("params");
            let next_shape = net.params()[next].as_ref().expect("params").weight.shape().to_vec();
            // Features per unit as seen by the next layer's input.
            let span = match (specs[layer], specs[next]) {
                (LayerSpec::Conv2d { .. }, LayerSpec::Dense { .. }) => {
                    let flat_in = next_shape[1];
                    flat_in / units
                }
                _ => 1,
            };
            for unit in 0..units {
                let outgoing = match specs[next] {
                    LayerSpec::Conv2d { .. } => {
                        let (f2, c, kh, kw) = (next_shape[0], next_shape[1], next_shape[2], next_shape[3]);
                        let k = kh * kw;
                        (0..f2)
                            .map(|f| {
                                let start = next_w + (f * c + unit) * k;
                                start..start + k
                            })
                            .collect()
                    }
                    LayerSpec::Dense { .. } => {
                        let (rows, cols) = (next_shape[0], next_shape[1]);
                        (0..rows)
                            .map(|r| {
                                let start = next_w + r * cols + unit * span;
                                start..start + span
                            })
                            .collect()
                    }
                    _ => unreachable!("only conv and dense layers carry parameters"),
                };
                entries.push(UnitEntry {
                    layer,
                    unit,
                    incoming: w_off + unit * per_unit..w_off + (unit + 1) * per_unit,
                    bias: b_off + unit,
                    outgoing,
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::NothingPrunable);
        }
        Ok(Self { entries, total_params: net.num_params() })
    }

    /// Number of state bits `D`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[UnitEntry] {
        &self.entries
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    /// Flat activity flags: a parameter is inactive when any unit gating it
    /// (as incoming, bias or outgoing weight) is switched off.
    pub fn active_params(&self, state: &PruningState) -> Result<Vec<bool>> {
        state.check_len(self.len())?;
        let mut active = vec![true; self.total_params];
        for (entry, &kept) in self.entries.iter().zip(state.bits()) {
            if kept {
                continue;
            }
            active[entry.incoming.clone()].fill(false);
            active[entry.bias] = false;
            for r in &entry.outgoing {
                active[r.clone()].fill(false);
            }
        }
        Ok(active)
    }

    pub fn kept_params(&self, state: &PruningState) -> Result<usize> {
        Ok(self.active_params(state)?.into_iter().filter(|&a| a).count())
    }

    /// Fraction `R` of trainable parameters surviving `state`.
    pub fn kept_ratio(&self, state: &PruningState) -> Result<f64> {
        Ok(self.kept_params(state)? as f64 / self.total_params as f64)
    }

    pub fn apply_mask<'a>(&self, net: &'a Network, state: &PruningState) -> Result<MaskedNetwork<'a>> {
        let active = self.active_params(state)?;
        Ok(MaskedNetwork { net, state: state.clone(), active })
    }
}

/// A network viewed through a pruning state.
#[derive(Debug, Clone)]
pub struct MaskedNetwork<'a> {
    net: &'a Network,
    state: PruningState,
    active: Vec<bool>,
}

impl MaskedNetwork<'_> {
    pub fn state(&self) -> &PruningState {
        &self.state
    }

    pub fn active_params(&self) -> &[bool] {
        &self.active
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x, Some(&self.state))
    }

    pub fn loss(&self, x: &Tensor, targets: &[usize]) -> Result<f64> {
        self.net.loss(x, targets, Some(&self.state))
    }

    pub fn backward(&self, x: &Tensor, targets: &[usize]) -> Result<(f64, Gradients)> {
        self.net.backward(x, targets, Some(&self.state))
    }
}

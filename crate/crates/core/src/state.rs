//! Binary pruning-state vectors. Bit `d` set means prunable unit `d` is kept.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PruningState {
    bits: Vec<bool>,
}

impl PruningState {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, d: usize) -> bool {
        self.bits[d]
    }

    pub fn set(&mut self, d: usize, value: bool) {
        self.bits[d] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self { bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Landscape index: bit 0 is the most significant binary digit.
    ///
    /// Under this order `(1,1,1,1,0,0,0,1,1,1)` encodes to 967, which is 968
    /// when counted from one (see [`PruningState::one_based_index`]).
    pub fn to_index(&self) -> u64 {
        self.bits.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b))
    }

    pub fn one_based_index(&self) -> u64 {
        self.to_index() + 1
    }

    pub fn from_index(index: u64, len: usize) -> Self {
        let bits = (0..len).map(|d| (index >> (len - 1 - d)) & 1 == 1).collect();
        Self { bits }
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.bits.len() != expected {
            return Err(Error::StateLength { expected, found: self.bits.len() });
        }
        Ok(())
    }
}

impl fmt::Display for PruningState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for PruningState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::StateParse(format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bits)
    }
}

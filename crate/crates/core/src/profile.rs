//! Horizon-stacked signal trajectories.
//!
//! A [`Profile`] stores `[p(k), p(k+1), ..., p(k+N-1)]` contiguously, so step
//! `i` occupies `values[i*dim .. (i+1)*dim]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    values: Vec<f64>,
    dim: usize,
}

impl Profile {
    pub fn new(values: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            if !values.is_empty() {
                return Err(Error::InvalidArgument(
                    "zero-dimension profile with values".into(),
                ));
            }
        } else if values.len() % dim != 0 {
            return Err(Error::dims("profile length", dim, values.len() % dim));
        }
        Ok(Self { values, dim })
    }

    /// Zero-dimension profiles carry no values but still need a horizon.
    pub fn empty() -> Self {
        Self {
            values: Vec::new(),
            dim: 0,
        }
    }

    pub fn constant(step: &[f64], horizon: usize) -> Self {
        let mut values = Vec::with_capacity(step.len() * horizon);
        for _ in 0..horizon {
            values.extend_from_slice(step);
        }
        Self {
            values,
            dim: step.len(),
        }
    }

    pub fn zeros(dim: usize, horizon: usize) -> Self {
        Self {
            values: vec![0.0; dim * horizon],
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of steps. Zero-dimension profiles report 0.
    pub fn horizon(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn step_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Drop the first step and repeat the last one (receding-horizon shift).
    pub fn shifted(&self) -> Self {
        let n = self.horizon();
        if n <= 1 {
            return self.clone();
        }
        let mut values = self.values[self.dim..].to_vec();
        values.extend_from_slice(self.step(n - 1));
        Self {
            values,
            dim: self.dim,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Converts edge-block stacking (each block a full time-major profile of one
/// coupling edge) into a per-step profile whose step vector is the
/// concatenation of all blocks at that step.
pub fn blocks_to_steps(stacked: &[f64], block_dims: &[usize], horizon: usize) -> Result<Profile> {
    let total: usize = block_dims.iter().sum();
    if stacked.len() != total * horizon {
        return Err(Error::dims(
            "stacked coupling profile",
            total * horizon,
            stacked.len(),
        ));
    }
    let mut values = vec![0.0; total * horizon];
    let mut block_start = 0;
    let mut col = 0;
    for &d in block_dims {
        for k in 0..horizon {
            let src = &stacked[block_start + k * d..block_start + (k + 1) * d];
            values[k * total + col..k * total + col + d].copy_from_slice(src);
        }
        block_start += d * horizon;
        col += d;
    }
    Ok(Profile { values, dim: total })
}

/// Inverse of [`blocks_to_steps`].
pub fn steps_to_blocks(profile: &Profile, block_dims: &[usize]) -> Result<Vec<f64>> {
    let total: usize = block_dims.iter().sum();
    if profile.dim != total {
        return Err(Error::dims("per-step coupling profile", total, profile.dim));
    }
    let horizon = profile.horizon();
    let mut out = Vec::with_capacity(total * horizon);
    let mut col = 0;
    for &d in block_dims {
        for k in 0..horizon {
            out.extend_from_slice(&profile.step(k)[col..col + d]);
        }
        col += d;
    }
    Ok(out)
}

/// Euclidean norm scaled by `1/sqrt(len)`.
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_slices() {
        let p = Profile::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        assert_eq!(p.horizon(), 3);
        assert_eq!(p.step(1), &[3.0, 4.0]);
    }

    #[test]
    fn rejects_ragged_length() {
        assert!(Profile::new(vec![1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn shift_repeats_last() {
        let p = Profile::new(vec![1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(p.shifted().values(), &[2.0, 3.0, 3.0]);
    }

    #[test]
    fn block_conversion() {
        // two edges: dim 1 and dim 2, horizon 2
        let stacked = [1.0, 2.0, 10.0, 11.0, 20.0, 21.0];
        let p = blocks_to_steps(&stacked, &[1, 2], 2).unwrap();
        assert_eq!(p.values(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
        assert_eq!(steps_to_blocks(&p, &[1, 2]).unwrap(), stacked.to_vec());
    }
}

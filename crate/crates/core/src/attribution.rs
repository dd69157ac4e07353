use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a map came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
    /// Hash of the resolved configuration that produced the map.
    pub config_hash: String,
}

/// Per-input-element importance scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub provenance: Provenance,
}

/// Min-max normalization to `[0, 1]`; a flat input becomes all 0.5.
pub fn normalize(raw: &Tensor) -> Tensor {
    let (lo, hi) = (raw.min(), raw.max());
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return Tensor::full(raw.shape().to_vec(), 0.5);
    }
    raw.map(|v| (v - lo) / (hi - lo))
}

impl AttributionMap {
    /// Normalizes `raw` and wraps it.
    pub fn from_raw(raw: &Tensor, provenance: Provenance) -> Self {
        AttributionMap {
            values: normalize(raw),
            provenance,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    /// Checks the `[0, 1]` range with min 0 / max 1, or a flat 0.5 map.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.values.min(), self.values.max());
        let flat = self.values.data().iter().all(|&v| v == 0.5);
        if flat || (lo == 0.0 && hi == 1.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("map not normalized: range [{lo}, {hi}]")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_map_is_half() {
        let m = normalize(&Tensor::full([3, 3], 2.0));
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn min_max() {
        let m = normalize(&Tensor::new([3], vec![2.0, 4.0, 3.0]).unwrap());
        assert_eq!(m.data(), &[0.0, 1.0, 0.5]);
    }
}

//! Which encoder layer's [CLS] is written into the decoder before which layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered `(encoder_layer, decoder_layer)` pairs, 0-based, strictly increasing
/// in both coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pairs: Vec<(usize, usize)>,
}

/// Last `k` encoder layers into decoder layers `n_l − stride·k, …, n_l − stride`.
///
/// With `(12, 24, 6, 2)` this reads [CLS] from encoder layers 6..=11 and writes
/// before decoder layers 12, 14, …, 22, so the slot is live through layer 23.
pub fn build_schedule(n_e: usize, n_l: usize, k: usize, stride: usize) -> Result<InjectionSchedule> {
    if k == 0 || stride == 0 {
        return Err(Error::Config("schedule needs k ≥ 1 and stride ≥ 1".into()));
    }
    if stride * k > n_l || k > n_e {
        return Err(Error::Config(format!(
            "infeasible schedule: k={k}, stride={stride} for N_E={n_e}, N_L={n_l}"
        )));
    }
    let first_dec = n_l - stride * k;
    let pairs = (0..k).map(|i| (n_e - k + i, first_dec + stride * i)).collect();
    Ok(InjectionSchedule { pairs })
}

impl InjectionSchedule {
    /// Last encoder layer into the decoder input, as in the prepend-at-input baselines.
    pub fn input_only(n_e: usize) -> Result<Self> {
        if n_e == 0 {
            return Err(Error::Config("encoder has no layers".into()));
        }
        Ok(InjectionSchedule {
            pairs: vec![(n_e - 1, 0)],
        })
    }

    pub fn from_pairs(pairs: Vec<(usize, usize)>, n_e: usize, n_l: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("schedule pairs"));
        }
        for w in pairs.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::Config(format!("schedule pairs not strictly increasing: {pairs:?}")));
            }
        }
        if pairs.iter().any(|&(e, d)| e >= n_e || d >= n_l) {
            return Err(Error::Config(format!("schedule pair out of range for N_E={n_e}, N_L={n_l}")));
        }
        Ok(InjectionSchedule { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn encoder_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn decoder_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Level index `k` whose injection happens right before decoder layer `layer`.
    pub fn level_at(&self, layer: usize) -> Option<usize> {
        self.pairs.iter().position(|&(_, d)| d == layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_24_layers() {
        let s = build_schedule(12, 24, 6, 2).unwrap();
        assert_eq!(s.encoder_layers(), vec![6, 7, 8, 9, 10, 11]);
        assert_eq!(s.decoder_layers(), vec![12, 14, 16, 18, 20, 22]);
    }

    #[test]
    fn reference_schedule_32_layers() {
        let s = build_schedule(12, 32, 6, 2).unwrap();
        assert_eq!(s.decoder_layers(), vec![20, 22, 24, 26, 28, 30]);
    }

    #[test]
    fn minimal_schedule() {
        let s = build_schedule(4, 4, 1, 2).unwrap();
        assert_eq!(s.pairs(), &[(3, 2)]);
    }

    #[test]
    fn infeasible_schedules_rejected() {
        assert!(build_schedule(12, 10, 6, 2).is_err());
        assert!(build_schedule(4, 24, 6, 2).is_err());
        assert!(build_schedule(4, 24, 0, 2).is_err());
    }

    #[test]
    fn level_lookup() {
        let s = build_schedule(4, 6, 3, 2).unwrap();
        assert_eq!(s.level_at(0), Some(0));
        assert_eq!(s.level_at(1), None);
        assert_eq!(s.level_at(4), Some(2));
    }
}

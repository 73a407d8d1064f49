//! Exact parameter accounting from declared shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::Layout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub trainable: u64,
    pub frozen: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub trainable_count: u64,
    pub frozen_count: u64,
    /// Trainable share of all parameters, 4 significant digits.
    pub fraction: f64,
    pub per_group: BTreeMap<String, GroupCount>,
}

impl ParamBudget {
    pub fn total(&self) -> u64 {
        self.trainable_count + self.frozen_count
    }

    pub fn percent(&self) -> f64 {
        round_sig(self.fraction * 100.0, 4)
    }
}

/// Group of a parameter: the first dotted component of its name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - mag);
    (x * factor).round() / factor
}

pub fn count_params(layout: &Layout) -> ParamBudget {
    let mut per_group: BTreeMap<String, GroupCount> = BTreeMap::new();
    let (mut tr, mut fr) = (0u64, 0u64);
    for d in layout.decls() {
        let n = d.numel();
        let g = per_group.entry(group_of(&d.name).to_string()).or_default();
        if d.trainable {
            tr += n;
            g.trainable += n;
        } else {
            fr += n;
            g.frozen += n;
        }
    }
    let total = tr + fr;
    let fraction = if total == 0 { 0.0 } else { round_sig(tr as f64 / total as f64, 4) };
    ParamBudget {
        trainable_count: tr,
        frozen_count: fr,
        fraction,
        per_group,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_to_significant_digits() {
        assert_eq!(round_sig(0.0060863, 4), 0.006086);
        assert_eq!(round_sig(123456.0, 4), 123500.0);
        assert_eq!(round_sig(0.0, 4), 0.0);
    }
}

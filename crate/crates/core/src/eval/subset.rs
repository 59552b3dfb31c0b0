use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub per_class_counts: Vec<usize>,
    pub seed: u64,
}

/// Picks `fraction` of every class. Each class receives the floor or the
/// ceiling of its exact share; the ceilings go to the largest remainders
/// (seeded tie-break) until the total equals the rounded overall target.
/// Returned indices are ascending.
pub fn class_balanced_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<(SubsetSpec, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no labels to subsample"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let present: Vec<usize> = (0..classes).filter(|&c| !members[c].is_empty()).collect();
    if let Some(&c) = present.iter().find(|&&c| fraction * members[c].len() as f64 + 1e-9 < 1.0) {
        return Err(Error::invalid(format!(
            "fraction {fraction} of class {c} ({} samples) selects nothing",
            members[c].len()
        )));
    }
    let exact: Vec<f64> = members.iter().map(|m| fraction * m.len() as f64).collect();
    // a hair of slack keeps 0.1 * 50 from flooring to 4
    let mut counts: Vec<usize> = exact.iter().map(|&e| (e + 1e-9).floor() as usize).collect();
    let target = ((fraction * labels.len() as f64) + 1e-9).round() as usize;
    let mut r = rng::child_rng(seed, &[0x5b]);
    let mut by_remainder: Vec<(f64, u64, usize)> = present
        .iter()
        .map(|&c| (exact[c] - counts[c] as f64, r.gen::<u64>(), c))
        .filter(|&(rem, _, c)| rem > 1e-9 && counts[c] < members[c].len())
        .collect();
    by_remainder.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut total: usize = counts.iter().sum();
    for &(_, _, c) in &by_remainder {
        if total >= target {
            break;
        }
        counts[c] += 1;
        total += 1;
    }
    let mut indices = Vec::with_capacity(total);
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng::child_rng(seed, &[0x5c, c as u64]));
        indices.extend_from_slice(&m[..counts[c]]);
    }
    indices.sort_unstable();
    Ok((
        SubsetSpec {
            fraction,
            per_class_counts: counts,
            seed,
        },
        indices,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imbalanced_pair_rounds_per_class() {
        let labels: Vec<usize> = std::iter::repeat_n(0, 100).chain(std::iter::repeat_n(1, 99)).collect();
        let (spec, idx) = class_balanced_subset(&labels, 0.1, 3).unwrap();
        assert_eq!(spec.per_class_counts, vec![10, 10]);
        assert_eq!(idx.len(), 20);
    }

    #[test]
    fn full_fraction_is_identity() {
        let labels = vec![2, 0, 1, 1, 0, 2];
        let (_, idx) = class_balanced_subset(&labels, 1.0, 0).unwrap();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn too_small_fraction_is_rejected() {
        assert!(class_balanced_subset(&[0, 0, 1, 1], 0.4, 0).is_err());
        assert!(class_balanced_subset(&[0, 1], 0.0, 0).is_err());
        assert!(class_balanced_subset(&[0, 1], 1.5, 0).is_err());
    }
}

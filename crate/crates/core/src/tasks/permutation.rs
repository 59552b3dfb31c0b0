//! Jigsaw permutation sets: greedy farthest-point construction, prefix nesting
//! and the CSV interchange format.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// A bijection on `0..n`, stored as the image of each position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<u8>);

impl Permutation {
    pub fn new(order: Vec<u8>) -> Result<Self> {
        let n = order.len();
        if n == 0 || n > 255 {
            return Err(Error::invalid(format!("permutation length {n} out of range")));
        }
        let mut seen = vec![false; n];
        for &i in &order {
            let i = i as usize;
            if i >= n || seen[i] {
                return Err(Error::invalid(format!("{order:?} is not a permutation of 0..{n}")));
            }
            seen[i] = true;
        }
        Ok(Permutation(order))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n as u8).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn hamming(&self, other: &Permutation) -> usize {
        hamming(&self.0, &other.0)
    }
}

#[inline]
fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Pairwise Hamming statistics of a permutation collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HammingStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

pub fn hamming_stats(members: &[Permutation]) -> HammingStats {
    let mut sum = 0u64;
    let mut pairs = 0u64;
    let mut min = usize::MAX;
    let mut max = 0;
    for (i, a) in members.iter().enumerate() {
        for b in &members[i + 1..] {
            let d = a.hamming(b);
            sum += d as u64;
            pairs += 1;
            min = min.min(d);
            max = max.max(d);
        }
    }
    if pairs == 0 {
        return HammingStats {
            mean: 0.0,
            min: 0,
            max: 0,
        };
    }
    HammingStats {
        mean: sum as f64 / pairs as f64,
        min,
        max,
    }
}

/// An ordered set of distinct permutations over `n_elements` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSet {
    n_elements: usize,
    members: Vec<Permutation>,
    seed: u64,
    avg_hamming: f64,
    min_hamming: usize,
}

impl PermutationSet {
    /// Validates members (distinct, equal length) and caches their statistics.
    pub fn from_members(n_elements: usize, members: Vec<Permutation>, seed: u64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("permutation set must not be empty"));
        }
        let mut seen = HashSet::with_capacity(members.len());
        for m in &members {
            if m.len() != n_elements {
                return Err(Error::invalid(format!(
                    "member of length {} in a set over {n_elements} elements",
                    m.len()
                )));
            }
            if !seen.insert(m.as_slice()) {
                return Err(Error::invalid(format!("duplicate member {:?}", m.as_slice())));
            }
        }
        let stats = hamming_stats(&members);
        Ok(PermutationSet {
            n_elements,
            members,
            seed,
            avg_hamming: stats.mean,
            min_hamming: stats.min,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Permutation] {
        &self.members
    }

    pub fn get(&self, index: usize) -> Option<&Permutation> {
        self.members.get(index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn avg_hamming(&self) -> f64 {
        self.avg_hamming
    }

    /// Minimum pairwise Hamming distance (0 for a singleton set).
    pub fn min_hamming(&self) -> usize {
        self.min_hamming
    }

    /// Serializes to the interchange CSV: a `#` header line followed by one
    /// zero-based permutation per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.members.len() * (2 * self.n_elements + 1) + 64);
        let _ = writeln!(
            out,
            "# n={} cardinality={} seed={} avg_hamming={:.6}",
            self.n_elements,
            self.members.len(),
            self.seed,
            self.avg_hamming
        );
        for m in &self.members {
            for (i, v) in m.as_slice().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the interchange CSV, validating the header against the rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("permutation csv", "empty input"))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::format("permutation csv", "missing '#' header"))?;
        let (mut n, mut card, mut seed, mut avg) = (None, None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::format("permutation csv", format!("bad header field {field:?}")))?;
            let bad = || Error::format("permutation csv", format!("bad header value {field:?}"));
            match key {
                "n" => n = Some(value.parse::<usize>().map_err(|_| bad())?),
                "cardinality" => card = Some(value.parse::<usize>().map_err(|_| bad())?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                "avg_hamming" => avg = Some(value.parse::<f64>().map_err(|_| bad())?),
                _ => return Err(Error::format("permutation csv", format!("unknown header key {key:?}"))),
            }
        }
        let missing = |k: &str| Error::format("permutation csv", format!("header lacks {k}"));
        let n = n.ok_or_else(|| missing("n"))?;
        let card = card.ok_or_else(|| missing("cardinality"))?;
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let avg = avg.ok_or_else(|| missing("avg_hamming"))?;
        if !(1..=255).contains(&n) {
            return Err(Error::format("permutation csv", format!("n={n} out of range")));
        }

        let mut members = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if members.len() == card {
                return Err(Error::format("permutation csv", "more rows than cardinality"));
            }
            let order = line
                .split(',')
                .map(|t| t.trim().parse::<u8>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format("permutation csv", format!("row {}: {e}", row + 1)))?;
            if order.len() != n {
                return Err(Error::format(
                    "permutation csv",
                    format!("row {} has {} entries, expected {n}", row + 1, order.len()),
                ));
            }
            members.push(
                Permutation::new(order)
                    .map_err(|e| Error::format("permutation csv", format!("row {}: {e}", row + 1)))?,
            );
        }
        if members.len() != card {
            return Err(Error::format(
                "permutation csv",
                format!("header says {card} rows, found {}", members.len()),
            ));
        }
        let set = PermutationSet::from_members(n, members, seed)
            .map_err(|e| Error::format("permutation csv", e.to_string()))?;
        if (set.avg_hamming - avg).abs() > 5e-6 {
            return Err(Error::format(
                "permutation csv",
                format!("header avg_hamming {avg} disagrees with rows ({:.6})", set.avg_hamming),
            ));
        }
        Ok(set)
    }
}

/// Candidate pool drawn per greedy step when the symmetric group is too large
/// to enumerate.
const CANDIDATE_POOL: usize = 128;
/// Groups up to this size are enumerated exhaustively instead of sampled.
const EXHAUSTIVE_LIMIT: usize = 5040;
const MAX_STALLED_ROUNDS: usize = 64;

fn factorial_capped(n: usize, cap: usize) -> usize {
    let mut f = 1usize;
    for i in 2..=n {
        f = f.saturating_mul(i);
        if f > cap {
            return f;
        }
    }
    f
}

fn all_permutations(n: usize) -> Vec<Vec<u8>> {
    // Heap's algorithm
    let mut a: Vec<u8> = (0..n as u8).collect();
    let mut c = vec![0usize; n];
    let mut out = vec![a.clone()];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Builds `cardinality` distinct permutations of `n_elements` by greedy
/// farthest-point selection: start from a seeded random permutation, then
/// repeatedly add the candidate that maximizes its minimum Hamming distance to
/// the chosen set. Every member keeps at least `min_pairwise_hamming` from all
/// others.
pub fn generate_permutation_set(
    n_elements: usize,
    cardinality: usize,
    seed: u64,
    min_pairwise_hamming: usize,
) -> Result<PermutationSet> {
    if !(2..=255).contains(&n_elements) {
        return Err(Error::Infeasible(format!("n_elements={n_elements} must lie in 2..=255")));
    }
    if cardinality == 0 {
        return Err(Error::Infeasible("cardinality must be positive".into()));
    }
    let group = factorial_capped(n_elements, usize::MAX / 2);
    if cardinality > group {
        return Err(Error::Infeasible(format!(
            "cardinality {cardinality} exceeds {n_elements}! = {group}"
        )));
    }
    if min_pairwise_hamming > n_elements {
        return Err(Error::Infeasible(format!(
            "minimum Hamming distance {min_pairwise_hamming} exceeds permutation length {n_elements}"
        )));
    }

    let mut rng = rng::child_rng(seed, &[0x9e7a]);
    let mut chosen: Vec<Vec<u8>> = Vec::with_capacity(cardinality);
    let mut first: Vec<u8> = (0..n_elements as u8).collect();
    first.shuffle(&mut rng);
    chosen.push(first);

    let exhaustive = group <= EXHAUSTIVE_LIMIT;
    let mut remaining: Vec<Vec<u8>> = if exhaustive {
        let mut all = all_permutations(n_elements);
        all.shuffle(&mut rng);
        all.retain(|p| p != &chosen[0]);
        all
    } else {
        Vec::new()
    };
    // running minimum distance from each remaining candidate to the chosen set
    let mut remaining_min: Vec<usize> = remaining.iter().map(|p| hamming(p, &chosen[0])).collect();
    let mut chosen_lookup: HashSet<Vec<u8>> = chosen.iter().cloned().collect();

    let mut stalled = 0;
    let mut best_seen = usize::MAX;
    while chosen.len() < cardinality {
        let (best, best_min) = if exhaustive {
            let Some((idx, &d)) = remaining_min
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            else {
                break;
            };
            (remaining[idx].clone(), d)
        } else {
            let mut best: Option<(Vec<u8>, usize)> = None;
            for _ in 0..CANDIDATE_POOL {
                let mut cand: Vec<u8> = (0..n_elements as u8).collect();
                cand.shuffle(&mut rng);
                if chosen_lookup.contains(&cand) {
                    continue;
                }
                let mut d_min = usize::MAX;
                for c in &chosen {
                    let d = hamming(&cand, c);
                    if d < d_min {
                        d_min = d;
                        if best.as_ref().is_some_and(|(_, bd)| d_min <= *bd) {
                            break;
                        }
                    }
                }
                if best.as_ref().is_none_or(|(_, bd)| d_min > *bd) {
                    best = Some((cand, d_min));
                }
            }
            match best {
                Some(b) => b,
                None => {
                    stalled += 1;
                    if stalled > MAX_STALLED_ROUNDS {
                        break;
                    }
                    continue;
                }
            }
        };

        if best_min < min_pairwise_hamming {
            if exhaustive {
                break;
            }
            stalled += 1;
            best_seen = best_seen.min(best_min);
            if stalled > MAX_STALLED_ROUNDS {
                break;
            }
            continue;
        }
        stalled = 0;
        if exhaustive {
            let idx = remaining.iter().position(|p| p == &best).expect("candidate present");
            remaining.swap_remove(idx);
            remaining_min.swap_remove(idx);
            for (p, m) in remaining.iter().zip(remaining_min.iter_mut()) {
                *m = (*m).min(hamming(p, &best));
            }
        }
        chosen_lookup.insert(best.clone());
        chosen.push(best);
    }

    let members: Vec<Permutation> = chosen.into_iter().map(Permutation).collect();
    if members.len() < cardinality {
        let stats = hamming_stats(&members);
        return Err(Error::Infeasible(format!(
            "reached only {} of {cardinality} permutations with minimum Hamming >= {min_pairwise_hamming} \
             (achieved avg {:.4}, min {}, best rejected candidate distance {})",
            members.len(),
            stats.mean,
            stats.min,
            if best_seen == usize::MAX { 0 } else { best_seen },
        )));
    }
    PermutationSet::from_members(n_elements, members, seed)
}

/// Splits `base` into nested prefix sets of the given ascending cardinalities.
pub fn nest_levels(base: &PermutationSet, cardinalities: &[usize]) -> Result<Vec<PermutationSet>> {
    if cardinalities.is_empty() {
        return Err(Error::invalid("no level cardinalities given"));
    }
    if cardinalities.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "level cardinalities {cardinalities:?} must be strictly ascending"
        )));
    }
    let max = *cardinalities.last().expect("non-empty");
    if max > base.len() {
        return Err(Error::invalid(format!(
            "level cardinality {max} exceeds base set size {}",
            base.len()
        )));
    }
    if cardinalities[0] == 0 {
        return Err(Error::invalid("level cardinality must be positive"));
    }
    cardinalities
        .iter()
        .map(|&k| PermutationSet::from_members(base.n_elements, base.members[..k].to_vec(), base.seed))
        .collect()
}

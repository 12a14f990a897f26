//! Rank allocation across layers.
//!
//! Each `(layer, kind)` entry holds the descending singular values of its
//! whitened weight. Water-filling starts every entry at `min_rank` and then
//! hands out single rank units to the entry whose next singular value removes
//! the largest *fraction* of that entry's remaining tail energy:
//!
//! ```text
//! s(r) = σ_{r+1}² / Σ_{m>r} σ_m²
//! ```
//!
//! K and V are scheduled independently with their own budgets.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{invalid, mismatch, CareError, Result};
use crate::linalg::{svd, Matrix};

/// Tail energy below this fraction of an entry's total energy counts as
/// fully captured.
pub const CAPTURED_TAIL: f64 = 1e-12;

/// Rank floor recommended for production-sized layers.
pub const DEFAULT_MIN_RANK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    K,
    V,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::K => "k",
            Kind::V => "v",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Kind {
    type Err = CareError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Kind::K),
            "v" => Ok(Kind::V),
            other => Err(invalid(format!(
                "unknown matrix kind {other:?}, expected k or v"
            ))),
        }
    }
}

/// Singular values of `whitener · w`, non-increasing.
pub fn whitened_spectrum(whitener: &Matrix, w: &Matrix) -> Result<Vec<f64>> {
    if !whitener.is_square() || whitener.cols() != w.rows() {
        return Err(mismatch(format!(
            "whitener {}x{} does not match weight {}x{}",
            whitener.rows(),
            whitener.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(svd(&whitener.matmul(w)?)?.singular_values)
}

/// `Σ_{i>r} σ_i²`.
pub fn tail_energy(sigma: &[f64], r: usize) -> Result<f64> {
    if r > sigma.len() {
        return Err(invalid(format!(
            "rank {r} exceeds spectrum length {}",
            sigma.len()
        )));
    }
    Ok(sigma[r..].iter().map(|s| s * s).sum())
}

/// Normalized residual reduction of granting rank `r + 1`.
pub fn priority(sigma: &[f64], r: usize) -> Result<f64> {
    if r >= sigma.len() {
        return Err(invalid(format!(
            "rank {r} is already full for spectrum of length {}",
            sigma.len()
        )));
    }
    let tail = tail_energy(sigma, r)?;
    if tail <= 0.0 {
        return Err(invalid(
            "tail energy is zero: entry fully captured, exclude from allocation",
        ));
    }
    Ok(sigma[r] * sigma[r] / tail)
}

/// Whitened spectra keyed by `(layer, kind)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectrumTable {
    entries: BTreeMap<(usize, Kind), Vec<f64>>,
}

impl SpectrumTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, kind: Kind, sigma: Vec<f64>) -> Result<()> {
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(invalid(format!(
                "spectrum ({layer}, {kind}) has negative or non-finite values"
            )));
        }
        if sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(invalid(format!(
                "spectrum ({layer}, {kind}) is not non-increasing"
            )));
        }
        self.entries.insert((layer, kind), sigma);
        Ok(())
    }

    pub fn get(&self, layer: usize, kind: Kind) -> Option<&[f64]> {
        self.entries.get(&(layer, kind)).map(Vec::as_slice)
    }

    pub fn full_rank(&self, layer: usize, kind: Kind) -> Option<usize> {
        self.get(layer, kind).map(<[f64]>::len)
    }

    /// Entries of one kind in ascending layer order.
    pub fn of_kind(&self, kind: Kind) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries
            .iter()
            .filter(move |((_, k), _)| *k == kind)
            .map(|((l, _), s)| (*l, s.as_slice()))
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.entries.keys().map(|(l, _)| *l).collect();
        ls.dedup();
        ls
    }
}

/// Ranks for one kind, plus the order in which units were granted.
#[derive(Debug, Clone, PartialEq)]
pub struct KindAllocation {
    pub kind: Kind,
    pub budget: usize,
    pub min_rank: usize,
    /// Per layer `(rank, full_rank)`.
    pub ranks: BTreeMap<usize, (usize, usize)>,
    /// Layer index of each increment after the initial `min_rank` floor.
    pub steps: Vec<usize>,
}

impl KindAllocation {
    pub fn total(&self) -> usize {
        self.ranks.values().map(|(r, _)| r).sum()
    }

    pub fn rank(&self, layer: usize) -> Option<usize> {
        self.ranks.get(&layer).map(|(r, _)| *r)
    }
}

struct Entry<'a> {
    layer: usize,
    sigma: &'a [f64],
    rank: usize,
    floor: f64,
    priority: Option<f64>,
}

impl Entry<'_> {
    fn refresh(&mut self) {
        self.priority = if self.rank >= self.sigma.len() {
            None
        } else {
            let tail: f64 = self.sigma[self.rank..].iter().map(|s| s * s).sum();
            (tail > self.floor && tail > 0.0)
                .then(|| self.sigma[self.rank] * self.sigma[self.rank] / tail)
        };
    }
}

/// Greedy water-filling of `budget` rank units over all entries of `kind`.
///
/// Ties go to the lowest layer index. Entries whose remaining tail energy is
/// below [`CAPTURED_TAIL`] of their total leave the greedy phase; if budget is
/// still left once no entry has a defined priority, those captured entries
/// are topped up towards full rank in layer order so that the allocated total
/// is always `min(budget, Σ full ranks)`.
pub fn waterfill(
    spectra: &SpectrumTable,
    kind: Kind,
    budget: usize,
    min_rank: usize,
) -> Result<KindAllocation> {
    if min_rank == 0 {
        return Err(invalid("min_rank must be at least 1"));
    }
    let mut entries: Vec<Entry> = spectra
        .of_kind(kind)
        .map(|(layer, sigma)| {
            let energy: f64 = sigma.iter().map(|s| s * s).sum();
            Entry {
                layer,
                sigma,
                rank: min_rank,
                floor: CAPTURED_TAIL * energy,
                priority: None,
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(invalid(format!("no {kind} spectra to schedule")));
    }
    if let Some(e) = entries.iter().find(|e| e.sigma.len() < min_rank) {
        return Err(invalid(format!(
            "min_rank {min_rank} exceeds full rank {} of layer {}",
            e.sigma.len(),
            e.layer
        )));
    }
    let required = entries.len() * min_rank;
    if budget < required {
        return Err(CareError::InfeasibleBudget { budget, required });
    }
    for e in &mut entries {
        e.refresh();
    }

    let mut remaining = budget - required;
    let mut steps = Vec::new();
    while remaining > 0 {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in entries.iter().enumerate() {
            if let Some(p) = e.priority {
                // strict > keeps the lowest layer on ties
                if best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((i, p));
                }
            }
        }
        let Some((i, _)) = best else { break };
        let e = &mut entries[i];
        e.rank += 1;
        e.refresh();
        steps.push(e.layer);
        remaining -= 1;
    }
    for e in &mut entries {
        while remaining > 0 && e.rank < e.sigma.len() {
            e.rank += 1;
            steps.push(e.layer);
            remaining -= 1;
        }
    }

    Ok(KindAllocation {
        kind,
        budget,
        min_rank,
        ranks: entries
            .iter()
            .map(|e| (e.layer, (e.rank, e.sigma.len())))
            .collect(),
        steps,
    })
}

/// Every entry at `min(rank, full rank)`.
pub fn uniform_profile(spectra: &SpectrumTable, kind: Kind, rank: usize) -> Result<KindAllocation> {
    if rank == 0 {
        return Err(invalid("uniform rank must be at least 1"));
    }
    let ranks: BTreeMap<usize, (usize, usize)> = spectra
        .of_kind(kind)
        .map(|(l, s)| (l, (rank.min(s.len()), s.len())))
        .collect();
    let total = ranks.values().map(|(r, _)| r).sum();
    let min_rank = ranks.values().map(|(r, _)| *r).min().unwrap_or(rank);
    Ok(KindAllocation {
        kind,
        budget: total,
        min_rank,
        ranks,
        steps: Vec::new(),
    })
}

/// `min_rank` of [`DEFAULT_MIN_RANK`] when every entry and both budgets
/// allow it, otherwise 1.
pub fn default_min_rank(spectra: &SpectrumTable, budget_k: usize, budget_v: usize) -> usize {
    let fits = |kind: Kind, budget: usize| {
        let entries: Vec<usize> = spectra.of_kind(kind).map(|(_, s)| s.len()).collect();
        entries.iter().all(|&r| r >= DEFAULT_MIN_RANK) && budget >= entries.len() * DEFAULT_MIN_RANK
    };
    if fits(Kind::K, budget_k) && fits(Kind::V, budget_v) {
        DEFAULT_MIN_RANK
    } else {
        1
    }
}

/// Allocated K and V ranks for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProfile {
    pub min_rank: usize,
    pub budget_k: usize,
    pub budget_v: usize,
    /// `(layer, kind) → (rank, full_rank)`.
    pub ranks: BTreeMap<(usize, Kind), (usize, usize)>,
}

impl RankProfile {
    pub fn from_allocations(k: &KindAllocation, v: &KindAllocation) -> Result<Self> {
        if k.kind != Kind::K || v.kind != Kind::V {
            return Err(invalid("expected one K and one V allocation"));
        }
        let mut ranks = BTreeMap::new();
        for a in [k, v] {
            for (&l, &rf) in &a.ranks {
                ranks.insert((l, a.kind), rf);
            }
        }
        let profile = Self {
            min_rank: k.min_rank.min(v.min_rank),
            budget_k: k.budget,
            budget_v: v.budget,
            ranks,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn rank(&self, layer: usize, kind: Kind) -> Option<usize> {
        self.ranks.get(&(layer, kind)).map(|(r, _)| *r)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.ranks.keys().map(|(l, _)| *l).collect();
        ls.dedup();
        ls
    }

    pub fn total(&self, kind: Kind) -> usize {
        self.ranks
            .iter()
            .filter(|((_, k), _)| *k == kind)
            .map(|(_, (r, _))| r)
            .sum()
    }

    /// Bounds and budget conservation.
    pub fn validate(&self) -> Result<()> {
        for (&(l, kind), &(r, full)) in &self.ranks {
            if r < self.min_rank.min(full) || r > full {
                return Err(invalid(format!(
                    "rank {r} of ({l}, {kind}) outside [{}, {full}]",
                    self.min_rank
                )));
            }
        }
        for (kind, budget) in [(Kind::K, self.budget_k), (Kind::V, self.budget_v)] {
            let full: usize = self
                .ranks
                .iter()
                .filter(|((_, k), _)| *k == kind)
                .map(|(_, (_, f))| f)
                .sum();
            let total = self.total(kind);
            if total != budget.min(full) {
                return Err(invalid(format!(
                    "{kind} ranks sum to {total}, expected min(budget {budget}, full {full})"
                )));
            }
        }
        Ok(())
    }
}

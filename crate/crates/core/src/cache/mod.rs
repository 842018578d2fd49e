//! Policy caches: per-region sets of policies with their affine value
//! functions, the points at which each policy is known optimal, and an
//! optional optimality certificate.

mod grid;
mod search;

pub use grid::{build_grid_cache, grid_axis, raw_grid_count, DEFAULT_GRID_BUDGET};
pub use search::{
    build_vss_cache, certify, find_worst, find_worst_memo, FindWorstMemo, Scope, VssOptions, Witness, WorstPoint,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{Mdp, Policy};
use crate::region::{linear_value_function, optimal_region_values, LinearValueFunction, OutSpaceValues, Region, ValueBounds};

/// Slack used when comparing anchor coordinates against the bounds.
const ANCHOR_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub policy: Policy,
    pub f: LinearValueFunction,
    /// Out-space values at which `policy` was computed as optimal.
    pub anchors: Vec<OutSpaceValues>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMethod {
    Grid,
    Vss,
    Hull,
    Seed,
    Prioritized,
}

/// What a certificate promises about the dominating policy at every `vo` in
/// bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guarantee {
    /// Bellman error at most `eps` at every internal state.
    AllStates,
    /// Bellman error at most `eps` at every in-space state.
    InSpaceOnly,
    /// Upper/lower hull gap at most `eps` at every in-space state.
    HighLevelGap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub method: BuildMethod,
    pub eps: f64,
    pub guarantee: Guarantee,
    pub worst_error: f64,
    pub worst_point: OutSpaceValues,
    pub certified: bool,
    /// Worst error observed at each build iteration.
    pub history: Vec<f64>,
}

/// SHA-256 digests of a region's dynamics and rewards.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub dynamics: String,
    pub rewards: String,
}

impl Fingerprint {
    pub fn of(mdp: &Mdp, region: &Region) -> Self {
        let mut dynamics = Sha256::new();
        dynamics.update((mdp.n_actions() as u64).to_le_bytes());
        dynamics.update(mdp.discount().to_le_bytes());
        for list in [&region.internal_states, &region.out_space] {
            dynamics.update((list.len() as u64).to_le_bytes());
            for &s in list.iter() {
                dynamics.update((s as u64).to_le_bytes());
            }
        }
        let mut rewards = Sha256::new();
        for &s in &region.internal_states {
            for a in 0..mdp.n_actions() {
                for (next, &p) in mdp.row(s, a).iter().enumerate() {
                    if p != 0.0 {
                        dynamics.update((next as u64).to_le_bytes());
                        dynamics.update(p.to_le_bytes());
                    }
                }
                dynamics.update(u64::MAX.to_le_bytes());
                rewards.update(mdp.reward(s, a).to_le_bytes());
            }
        }
        Self { dynamics: hex::encode(dynamics.finalize()), rewards: hex::encode(rewards.finalize()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCache {
    pub region: Region,
    pub bounds: ValueBounds,
    pub discount: f64,
    pub entries: Vec<CacheEntry>,
    /// Optimal internal values with every out-space state at `v_min`.
    pub base: Vec<f64>,
    pub certificate: Option<Certificate>,
    pub fingerprint: Fingerprint,
}

impl PolicyCache {
    /// An empty cache for `region`.
    pub fn new(mdp: &Mdp, region: &Region, bounds: ValueBounds) -> Result<Self> {
        let (_, base) = optimal_region_values(mdp, region, &bounds.floor(region.fan_out()))?;
        Ok(Self {
            region: region.clone(),
            bounds,
            discount: mdp.discount(),
            entries: Vec::new(),
            base,
            certificate: None,
            fingerprint: Fingerprint::of(mdp, region),
        })
    }

    /// A cache holding only the policy optimal with every out-space state at
    /// `v_min`.
    pub fn seeded(mdp: &Mdp, region: &Region, bounds: ValueBounds) -> Result<Self> {
        let mut cache = Self::new(mdp, region, bounds)?;
        cache.insert_optimal_at(mdp, &bounds.floor(region.fan_out()))?;
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fan_out(&self) -> usize {
        self.region.fan_out()
    }

    pub fn position(&self, policy: &Policy) -> Option<usize> {
        self.entries.iter().position(|e| &e.policy == policy)
    }

    /// Adds `policy` anchored at `anchor`. An identical policy already in the
    /// cache absorbs the anchor instead. Returns the entry index and whether a
    /// new entry was created.
    pub fn insert(&mut self, mdp: &Mdp, policy: Policy, anchor: OutSpaceValues) -> Result<(usize, bool)> {
        if anchor.dim() != self.fan_out() {
            return Err(Error::DimensionMismatch {
                what: "anchor",
                expected: self.fan_out(),
                actual: anchor.dim(),
            });
        }
        if !self.bounds.contains(&anchor, ANCHOR_TOL) {
            return Err(Error::InvalidBounds { v_min: self.bounds.v_min, v_max: self.bounds.v_max });
        }
        if let Some(i) = self.position(&policy) {
            let anchors = &mut self.entries[i].anchors;
            if !anchors.contains(&anchor) {
                anchors.push(anchor);
            }
            return Ok((i, false));
        }
        let f = linear_value_function(mdp, &self.region, &policy)?;
        self.entries.push(CacheEntry { policy, f, anchors: vec![anchor] });
        self.certificate = None;
        Ok((self.entries.len() - 1, true))
    }

    /// Solves the region at `vo` and inserts the optimal policy anchored there.
    pub fn insert_optimal_at(&mut self, mdp: &Mdp, vo: &OutSpaceValues) -> Result<(usize, bool)> {
        let (pi, _) = optimal_region_values(mdp, &self.region, vo)?;
        self.insert(mdp, pi, vo.clone())
    }

    /// Drops every entry and keeps only the policy optimal at `vo`.
    pub fn replace_with_optimal_at(&mut self, mdp: &Mdp, vo: &OutSpaceValues) -> Result<()> {
        self.entries.clear();
        self.certificate = None;
        self.insert_optimal_at(mdp, vo)?;
        Ok(())
    }

    /// Index of the entry with the highest value at internal position `local`;
    /// ties go to the lowest index.
    pub fn dominating_local(&self, local: usize, vo: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let v = e.f.value(local, vo);
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }

    /// Highest cached value at internal position `local`.
    pub fn value_at(&self, local: usize, vo: &[f64]) -> Option<f64> {
        self.dominating_local(local, vo).map(|i| self.entries[i].f.value(local, vo))
    }

    /// True when a stored certificate covers `eps` with at least the
    /// strength of `guarantee`.
    pub fn certified_for(&self, eps: f64, guarantee: Guarantee) -> bool {
        match &self.certificate {
            Some(c) if c.certified && c.eps <= eps => match guarantee {
                Guarantee::AllStates => c.guarantee == Guarantee::AllStates,
                Guarantee::InSpaceOnly => c.guarantee != Guarantee::HighLevelGap,
                Guarantee::HighLevelGap => true,
            },
            _ => false,
        }
    }

    /// Checks that this cache was built for `mdp`'s version of its region.
    pub fn verify(&self, mdp: &Mdp) -> Result<()> {
        let fresh = Region::from_states(mdp, self.region.id, &self.region.internal_states)?;
        if fresh.out_space != self.region.out_space {
            return Err(Error::FingerprintMismatch {
                region: self.region.id,
                detail: "out-space differs".into(),
            });
        }
        if fresh.in_space.iter().any(|s| self.region.in_space.binary_search(s).is_err()) {
            return Err(Error::FingerprintMismatch {
                region: self.region.id,
                detail: "in-space differs".into(),
            });
        }
        let fp = Fingerprint::of(mdp, &self.region);
        if fp.dynamics != self.fingerprint.dynamics {
            return Err(Error::FingerprintMismatch { region: self.region.id, detail: "dynamics differ".into() });
        }
        if fp.rewards != self.fingerprint.rewards {
            return Err(Error::FingerprintMismatch { region: self.region.id, detail: "rewards differ".into() });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a cache and verifies it against `mdp` before returning it.
    pub fn from_json(mdp: &Mdp, json: &str) -> Result<Self> {
        let cache: Self = serde_json::from_str(json)?;
        cache.verify(mdp)?;
        Ok(cache)
    }
}

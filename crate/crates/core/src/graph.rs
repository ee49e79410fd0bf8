//! Two-layer multiplex graph over the signal set.
//!
//! Layer 1 is complete and carries the latest similarity matrix. Layer 2 is
//! sparse: pairs are admitted when their smoothed similarity crosses an
//! upper threshold and evicted below a lower one, and admitted edges carry
//! the most recent coherence field computed for the pair.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::CoherenceField;
use crate::spectral::SimilarityMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("similarity matrix is {got}x{got}, graph has {expected} nodes")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid thresholds: theta_on={theta_on}, theta_off={theta_off}, alpha={alpha}")]
    InvalidThresholds {
        theta_on: f64,
        theta_off: f64,
        alpha: f64,
    },
    #[error("pair {0} is not in layer 2")]
    EdgeNotAdmitted(Pair),
    #[error("pair ({0}, {1}) is not a valid node pair")]
    UnknownPair(usize, usize),
}

/// Unordered node pair, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
}

impl Pair {
    /// Normalises the order. Panics on a self pair.
    pub fn new(i: usize, j: usize) -> Self {
        assert_ne!(i, j, "self pairs are not edges");
        Self {
            a: i.min(j),
            b: i.max(j),
        }
    }

    pub fn checked(i: usize, j: usize, m: usize) -> Result<Self, GraphError> {
        if i == j || i >= m || j >= m {
            return Err(GraphError::UnknownPair(i, j));
        }
        Ok(Self::new(i, j))
    }

    /// Position in the row-major upper-triangle enumeration for `m` nodes.
    pub fn index(&self, m: usize) -> usize {
        self.a * (2 * m - self.a - 1) / 2 + (self.b - self.a - 1)
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.a, self.b)
    }
}

/// Every pair of `m` nodes in lexicographic order.
pub fn all_pairs(m: usize) -> impl Iterator<Item = Pair> {
    (0..m).flat_map(move |a| ((a + 1)..m).map(move |b| Pair { a, b }))
}

/// Admission and eviction rule for layer 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingParams {
    pub theta_on: f64,
    pub theta_off: f64,
    /// EMA weight of the newest similarity; 1 disables smoothing.
    pub alpha: f64,
}

impl Default for GatingParams {
    fn default() -> Self {
        Self {
            theta_on: 0.9,
            theta_off: 0.8,
            alpha: 0.3,
        }
    }
}

impl GatingParams {
    /// The memoryless rule `W1 >= theta`.
    pub fn instantaneous(theta: f64) -> Self {
        Self {
            theta_on: theta,
            theta_off: theta,
            alpha: 1.0,
        }
    }

    /// `theta_on` above 1 is allowed and keeps layer 2 empty.
    pub fn validate(&self) -> Result<(), GraphError> {
        let ok = self.theta_off >= 0.0
            && self.theta_off <= self.theta_on
            && self.theta_off <= 1.0
            && !self.theta_on.is_nan()
            && self.alpha > 0.0
            && self.alpha <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(GraphError::InvalidThresholds {
                theta_on: self.theta_on,
                theta_off: self.theta_off,
                alpha: self.alpha,
            })
        }
    }
}

/// A layer-2 edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState {
    pub pair: Pair,
    pub ema: f64,
    pub admitted_at: u64,
    pub last_coherence_at: Option<u64>,
    pub coherence: Option<Arc<CoherenceField>>,
}

/// Layer-2 changes made by one gating pass, each list in pair order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GateEvents {
    pub admissions: Vec<Pair>,
    pub evictions: Vec<Pair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplexGraph {
    m: usize,
    layer1: SimilarityMatrix,
    ema: Vec<Option<f64>>,
    layer2: BTreeMap<Pair, EdgeState>,
    pinned: BTreeSet<Pair>,
    dropped_attachments: u64,
}

impl MultiplexGraph {
    /// Layer 1 starts at zero weight, layer 2 empty.
    pub fn new(m: usize) -> Self {
        Self {
            m,
            layer1: SimilarityMatrix::from_fn(m, |_, _| 0.0),
            ema: vec![None; m * m.saturating_sub(1) / 2],
            layer2: BTreeMap::new(),
            pinned: BTreeSet::new(),
            dropped_attachments: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn layer1(&self) -> &SimilarityMatrix {
        &self.layer1
    }

    pub fn weight(&self, p: Pair) -> f64 {
        self.layer1.get(p.a, p.b)
    }

    /// Layer-1 edges `(pair, weight)` for all `i < j`.
    pub fn layer1_edges(&self) -> impl Iterator<Item = (Pair, f64)> + '_ {
        all_pairs(self.m).map(|p| (p, self.weight(p)))
    }

    pub fn layer2(&self) -> &BTreeMap<Pair, EdgeState> {
        &self.layer2
    }

    pub fn edge(&self, p: Pair) -> Option<&EdgeState> {
        self.layer2.get(&p)
    }

    pub fn ema(&self, p: Pair) -> Option<f64> {
        self.ema[p.index(self.m)]
    }

    pub fn pinned(&self) -> &BTreeSet<Pair> {
        &self.pinned
    }

    /// Coherence results dropped because their edge was gone.
    pub fn dropped_attachments(&self) -> u64 {
        self.dropped_attachments
    }

    pub fn update_layer1(&mut self, s: &SimilarityMatrix) -> Result<(), GraphError> {
        if s.dim() != self.m {
            return Err(GraphError::DimensionMismatch {
                expected: self.m,
                got: s.dim(),
            });
        }
        self.layer1 = s.clone();
        Ok(())
    }

    /// Updates every pair's EMA from layer 1 and applies the hysteresis rule.
    ///
    /// A pair's EMA is seeded with its first observed weight. Pinned pairs
    /// are never evicted.
    pub fn gate_layer2(&mut self, params: GatingParams, tick: u64) -> Result<GateEvents, GraphError> {
        params.validate()?;
        let mut events = GateEvents::default();
        for p in all_pairs(self.m) {
            let w = self.weight(p);
            let slot = &mut self.ema[p.index(self.m)];
            let ema = match *slot {
                Some(prev) => params.alpha * w + (1.0 - params.alpha) * prev,
                None => w,
            }
            .clamp(0.0, 1.0);
            *slot = Some(ema);

            match self.layer2.get_mut(&p) {
                Some(edge) => {
                    edge.ema = ema;
                    if ema < params.theta_off && !self.pinned.contains(&p) {
                        self.layer2.remove(&p);
                        events.evictions.push(p);
                    }
                }
                None if ema >= params.theta_on => {
                    self.layer2.insert(p, Self::fresh_edge(p, ema, tick));
                    events.admissions.push(p);
                }
                None => {}
            }
        }
        Ok(events)
    }

    fn fresh_edge(pair: Pair, ema: f64, tick: u64) -> EdgeState {
        EdgeState {
            pair,
            ema,
            admitted_at: tick,
            last_coherence_at: None,
            coherence: None,
        }
    }

    /// Pins `p`: admits it to layer 2 if absent and exempts it from eviction.
    /// Returns whether the pair was newly admitted.
    pub fn pin(&mut self, p: Pair, tick: u64) -> bool {
        self.pinned.insert(p);
        if self.layer2.contains_key(&p) {
            return false;
        }
        let ema = self.ema(p).unwrap_or(0.0);
        self.layer2.insert(p, Self::fresh_edge(p, ema, tick));
        true
    }

    /// Removes the pin; the pair returns to normal gating on the next pass.
    pub fn unpin(&mut self, p: Pair) -> bool {
        self.pinned.remove(&p)
    }

    /// Pairs due for coherence at `tick`: pinned due pairs first (pair
    /// order), then up to `budget` unpinned due pairs by descending EMA with
    /// ties in pair order.
    pub fn select_coherence_pairs(&self, budget: usize, interval: u64, tick: u64) -> Vec<Pair> {
        let due = |e: &&EdgeState| match e.last_coherence_at {
            None => true,
            Some(t) => tick.saturating_sub(t) >= interval,
        };
        let mut out: Vec<Pair> = self
            .layer2
            .values()
            .filter(due)
            .filter(|e| self.pinned.contains(&e.pair))
            .map(|e| e.pair)
            .collect();
        let mut rest: Vec<&EdgeState> = self
            .layer2
            .values()
            .filter(due)
            .filter(|e| !self.pinned.contains(&e.pair))
            .collect();
        rest.sort_by(|x, y| y.ema.total_cmp(&x.ema).then(x.pair.cmp(&y.pair)));
        out.extend(rest.into_iter().take(budget).map(|e| e.pair));
        out
    }

    /// Stores `field` on an admitted edge. Results for evicted pairs are
    /// dropped and counted.
    pub fn attach_coherence(
        &mut self,
        p: Pair,
        field: Arc<CoherenceField>,
        tick: u64,
    ) -> Result<(), GraphError> {
        match self.layer2.get_mut(&p) {
            Some(edge) => {
                edge.coherence = Some(field);
                edge.last_coherence_at = Some(tick);
                Ok(())
            }
            None => {
                self.dropped_attachments += 1;
                Err(GraphError::EdgeNotAdmitted(p))
            }
        }
    }

    /// Marks a pair as serviced without a payload (for failed jobs), so
    /// the scheduler does not retry it every tick.
    pub fn mark_coherence_attempt(&mut self, p: Pair, tick: u64) {
        if let Some(edge) = self.layer2.get_mut(&p) {
            edge.last_coherence_at = Some(tick);
        }
    }
}

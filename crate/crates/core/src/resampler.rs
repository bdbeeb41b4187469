//! Safety-critical resampling of opponent candidates.
//!
//! The posterior of candidate `i` is its prior times the buffer-weighted sum of
//! collision likelihoods against every buffered ego rollout:
//! `post_i = P_op_i * sum_j w_j * P_coll_ij`, with `P_coll_ij = alpha^k` at the
//! earliest overlapping step `k` and 0 when the boxes never overlap.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{closest_approach, earliest_collision_step, Dims, GeometryError};
use crate::predictor::CandidateSet;
use crate::scenario::VehicleState;

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_BUFFER_CAPACITY: usize = 5;

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("ego rollout buffer is empty; seed it with the logged ego trajectory first")]
    EmptyBuffer,
    #[error("no scores to select from")]
    EmptyScores,
    #[error("decay factor must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("joint table has no collision mass and cannot be conditioned")]
    NotNormalizable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    alpha: f64,
}

impl DecayConfig {
    pub fn new(alpha: f64) -> Result<Self, ResampleError> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self { alpha })
        } else {
            Err(ResampleError::BadAlpha(alpha))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA }
    }
}

/// `alpha^k` at the earliest overlap step, 0 without overlap.
pub fn collision_likelihood(
    ego: &[VehicleState],
    ego_dims: Dims,
    op: &[VehicleState],
    op_dims: Dims,
    alpha: f64,
) -> Result<f64, ResampleError> {
    Ok(collision_term(ego, ego_dims, op, op_dims, alpha)?.likelihood)
}

fn collision_term(
    ego: &[VehicleState],
    ego_dims: Dims,
    op: &[VehicleState],
    op_dims: Dims,
    alpha: f64,
) -> Result<CollisionTerm, ResampleError> {
    let step = earliest_collision_step(ego, ego_dims, op, op_dims)?;
    Ok(CollisionTerm {
        step,
        likelihood: step.map_or(0.0, |k| alpha.powi(k as i32)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoEntry {
    pub trajectory: Vec<VehicleState>,
    pub log_prob: f64,
}

/// The latest `capacity` ego rollouts of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoRolloutBuffer {
    capacity: usize,
    entries: VecDeque<EgoEntry>,
}

impl EgoRolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    /// Buffer holding only the logged ego future, weight from log-prob 0.
    pub fn seeded(capacity: usize, logged: Vec<VehicleState>) -> Self {
        let mut buf = Self::new(capacity);
        buf.push(logged, 0.0);
        buf
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, trajectory: Vec<VehicleState>, log_prob_sum: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(EgoEntry {
            trajectory,
            log_prob: log_prob_sum,
        });
    }

    pub fn entries(&self) -> impl Iterator<Item = &EgoEntry> {
        self.entries.iter()
    }

    /// Softmax over stored log-prob sums, oldest first.
    pub fn weights(&self) -> Vec<f64> {
        let max = self
            .entries
            .iter()
            .map(|e| e.log_prob)
            .fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = self.entries.iter().map(|e| (e.log_prob - max).exp()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }
}

/// Functional form of [`EgoRolloutBuffer::push`].
pub fn update_ego_buffer(mut buf: EgoRolloutBuffer, trajectory: Vec<VehicleState>, log_prob_sum: f64) -> EgoRolloutBuffer {
    buf.push(trajectory, log_prob_sum);
    buf
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionTerm {
    pub step: Option<usize>,
    pub likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorScore {
    pub index: usize,
    pub prior: f64,
    /// One term per buffered ego rollout, oldest first.
    pub terms: Vec<CollisionTerm>,
    pub posterior: f64,
    /// Smallest footprint gap to any buffered ego rollout.
    pub closest_approach: f64,
}

impl PosteriorScore {
    pub fn recompute(&self, weights: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (w, t) in weights.iter().zip(&self.terms) {
            sum += w * t.likelihood;
        }
        self.prior * sum
    }

    /// Earliest collision step against any buffered rollout.
    pub fn earliest_step(&self) -> Option<usize> {
        self.terms.iter().filter_map(|t| t.step).min()
    }
}

/// Scores every candidate against the buffer; candidates are scored in parallel.
pub fn posterior_scores(
    cands: &CandidateSet,
    buf: &EgoRolloutBuffer,
    ego_dims: Dims,
    op_dims: Dims,
    alpha: f64,
) -> Result<Vec<PosteriorScore>, ResampleError> {
    if buf.is_empty() {
        return Err(ResampleError::EmptyBuffer);
    }
    DecayConfig::new(alpha)?;
    let weights = buf.weights();
    let entries: Vec<&EgoEntry> = buf.entries().collect();
    cands
        .candidates()
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut terms = Vec::with_capacity(entries.len());
            let mut sum = 0.0;
            let mut closest = f64::INFINITY;
            for (e, w) in entries.iter().zip(&weights) {
                let term = collision_term(&e.trajectory, ego_dims, &c.states, op_dims, alpha)?;
                sum += w * term.likelihood;
                closest = closest.min(closest_approach(&e.trajectory, ego_dims, &c.states, op_dims));
                terms.push(term);
            }
            Ok(PosteriorScore {
                index: i,
                prior: c.probability,
                terms,
                posterior: c.probability * sum,
                closest_approach: closest,
            })
        })
        .collect()
}

/// Argmax posterior with tie-breaks on prior, earliest collision and index.
/// When every posterior is zero the near-miss candidate is returned.
pub fn select_adversarial(scores: &[PosteriorScore]) -> Result<usize, ResampleError> {
    if scores.is_empty() {
        return Err(ResampleError::EmptyScores);
    }
    if scores.iter().all(|s| s.posterior == 0.0) {
        let best = scores
            .iter()
            .min_by(|a, b| {
                a.closest_approach
                    .total_cmp(&b.closest_approach)
                    .then(a.index.cmp(&b.index))
            })
            .expect("nonempty");
        return Ok(best.index);
    }
    let best = scores
        .iter()
        .min_by(|a, b| {
            b.posterior
                .total_cmp(&a.posterior)
                .then(b.prior.total_cmp(&a.prior))
                .then(
                    a.earliest_step()
                        .unwrap_or(usize::MAX)
                        .cmp(&b.earliest_step().unwrap_or(usize::MAX)),
                )
                .then(a.index.cmp(&b.index))
        })
        .expect("nonempty");
    Ok(best.index)
}

/// A finite world with opponent prior `P(op)`, ego conditional `P(ego | op)`
/// and collision probability `P(coll | ego, op)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteWorld {
    pub p_op: Vec<f64>,
    /// `p_ego_given_op[i][j]`
    pub p_ego_given_op: Vec<Vec<f64>>,
    /// `p_coll[i][j]`
    pub p_coll: Vec<Vec<f64>>,
}

fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

impl DiscreteWorld {
    pub fn random<R: Rng>(n_ego: usize, n_op: usize, rng: &mut R) -> Self {
        Self {
            p_op: random_simplex(n_op, rng),
            p_ego_given_op: (0..n_op).map(|_| random_simplex(n_ego, rng)).collect(),
            p_coll: (0..n_op)
                .map(|_| (0..n_ego).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect(),
        }
    }

    /// Same as [`DiscreteWorld::random`] but the ego ignores the opponent.
    pub fn random_independent<R: Rng>(n_ego: usize, n_op: usize, rng: &mut R) -> Self {
        let mut w = Self::random(n_ego, n_op, rng);
        let row = random_simplex(n_ego, rng);
        w.p_ego_given_op = vec![row; n_op];
        w
    }

    fn n_ego(&self) -> usize {
        self.p_ego_given_op.first().map_or(0, Vec::len)
    }

    /// `P(op, ego | coll)` by Bayes over the full joint table including the no-collision outcome.
    pub fn brute_force_posterior(&self) -> Result<Vec<Vec<f64>>, ResampleError> {
        let (n_op, n_ego) = (self.p_op.len(), self.n_ego());
        // Flat joint over (op, ego, coll) with coll in {false, true}.
        let mut joint = Vec::with_capacity(n_op * n_ego * 2);
        for i in 0..n_op {
            for j in 0..n_ego {
                let base = self.p_op[i] * self.p_ego_given_op[i][j];
                joint.push(((i, j, false), base * (1.0 - self.p_coll[i][j])));
                joint.push(((i, j, true), base * self.p_coll[i][j]));
            }
        }
        let evidence: f64 = joint.iter().filter(|((_, _, c), _)| *c).map(|(_, p)| p).sum();
        if !(evidence > 0.0) {
            return Err(ResampleError::NotNormalizable);
        }
        let mut post = vec![vec![0.0; n_ego]; n_op];
        for ((i, j, c), p) in joint {
            if c {
                post[i][j] = p / evidence;
            }
        }
        Ok(post)
    }

    /// The normalized three-term product `P(op) P(ego | op) P(coll | ego, op)`.
    pub fn factorized_posterior(&self) -> Result<Vec<Vec<f64>>, ResampleError> {
        let terms: Vec<Vec<f64>> = self
            .p_op
            .iter()
            .zip(&self.p_ego_given_op)
            .zip(&self.p_coll)
            .map(|((po, pe), pc)| pe.iter().zip(pc).map(|(e, c)| po * e * c).collect())
            .collect();
        let z: f64 = terms.iter().flatten().sum();
        if !(z > 0.0) {
            return Err(ResampleError::NotNormalizable);
        }
        Ok(terms
            .into_iter()
            .map(|row| row.into_iter().map(|t| t / z).collect())
            .collect())
    }
}

/// Largest relative error between the brute-force and factorized posteriors.
pub fn factorization_check(world: &DiscreteWorld) -> Result<f64, ResampleError> {
    let brute = world.brute_force_posterior()?;
    let fact = world.factorized_posterior()?;
    let mut worst: f64 = 0.0;
    for (rb, rf) in brute.iter().zip(&fact) {
        for (b, f) in rb.iter().zip(rf) {
            let err = if *b == 0.0 && *f == 0.0 {
                0.0
            } else {
                (b - f).abs() / b.abs().max(f.abs())
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

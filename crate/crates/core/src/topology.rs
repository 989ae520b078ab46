//! Communication graph between followers and the leader.
//!
//! Follower weights `w_ij` (edge j → i) and leader weights `w_im` are stored
//! raw; [`Topology::matrices`] turns them into the Laplacian-like matrix
//! 𝕃 = 𝔻 − 𝔸 and the diagonal leader matrix 𝔸_m, with 𝔻 = I enforced by
//! requiring every agent's incoming weights to sum to one.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{kron, symmetric_eigenvalues, Mat};

/// Row sums may deviate from one by at most this much.
pub const BALANCE_TOLERANCE: f64 = 1e-12;
/// Eigenvalues smaller than this in magnitude count as structural zeros.
pub const ZERO_EIGENVALUE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    num_agents: usize,
    follower_weights: Mat,
    leader_weights: Vec<f64>,
    threshold: f64,
}

impl Topology {
    /// Validates shapes and signs. Balancedness is checked by [`Topology::matrices`].
    pub fn new(follower_weights: Mat, leader_weights: Vec<f64>, threshold: f64) -> Result<Self> {
        let l = leader_weights.len();
        if follower_weights.rows() != l || follower_weights.cols() != l {
            return Err(Error::DimensionMismatch(format!(
                "follower weights {}x{} for {} agents",
                follower_weights.rows(),
                follower_weights.cols(),
                l
            )));
        }
        if l == 0 {
            return Err(Error::Validation("topology needs at least one agent".into()));
        }
        for i in 0..l {
            if follower_weights[(i, i)] != 0.0 {
                return Err(Error::Validation(format!(
                    "agent {} has a self-loop weight {}",
                    i + 1,
                    follower_weights[(i, i)]
                )));
            }
        }
        if follower_weights
            .as_slice()
            .iter()
            .chain(&leader_weights)
            .any(|w| *w < 0.0 || !w.is_finite())
        {
            return Err(Error::Validation("edge weights must be finite and nonnegative".into()));
        }
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::Validation(format!(
                "connectivity threshold must be positive, got {threshold}"
            )));
        }
        Ok(Topology {
            num_agents: l,
            follower_weights,
            leader_weights,
            threshold,
        })
    }

    /// Every agent listens only to the leader with weight one.
    pub fn star(num_agents: usize, threshold: f64) -> Result<Self> {
        Topology::new(
            Mat::zeros(num_agents, num_agents),
            vec![1.0; num_agents],
            threshold,
        )
    }

    /// Undirected ring with neighbour weight `gamma` and leader weight `leader`.
    pub fn ring(num_agents: usize, gamma: f64, leader: f64, threshold: f64) -> Result<Self> {
        let mut w = Mat::zeros(num_agents, num_agents);
        if num_agents > 1 {
            for i in 0..num_agents {
                let next = (i + 1) % num_agents;
                let prev = (i + num_agents - 1) % num_agents;
                w[(i, next)] = gamma;
                w[(i, prev)] = gamma;
            }
        }
        Topology::new(w, vec![leader; num_agents], threshold)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn follower_weights(&self) -> &Mat {
        &self.follower_weights
    }

    pub fn leader_weights(&self) -> &[f64] {
        &self.leader_weights
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Returns a copy with an extra follower edge `from → to`.
    pub fn with_edge(&self, to: usize, from: usize, weight: f64) -> Result<Self> {
        let mut w = self.follower_weights.clone();
        w[(to, from)] = weight;
        Topology::new(w, self.leader_weights.clone(), self.threshold)
    }

    pub fn with_leader_weight(&self, agent: usize, weight: f64) -> Result<Self> {
        let mut lw = self.leader_weights.clone();
        lw[agent] = weight;
        Topology::new(self.follower_weights.clone(), lw, self.threshold)
    }

    /// Builds 𝕃, 𝔸_m and their lifts `⊗ I_n`.
    pub fn matrices(&self, state_dim: usize) -> Result<TopologyMatrices> {
        let l = self.num_agents;
        for i in 0..l {
            let sum: f64 = self.follower_weights.row(i).iter().sum::<f64>() + self.leader_weights[i];
            if (sum - 1.0).abs() > BALANCE_TOLERANCE {
                return Err(Error::UnbalancedTopology { agent: i + 1, sum });
            }
        }
        // 𝔻 = I by balancedness.
        let laplacian_like = Mat::identity(l).sub(&self.follower_weights)?;
        let leader_diag = Mat::from_diag(&self.leader_weights);
        Ok(TopologyMatrices::from_parts(laplacian_like, leader_diag, state_dim))
    }

    /// BFS from the leader along leader→i and j→i edges.
    pub fn leader_reachable(&self) -> bool {
        let l = self.num_agents;
        let mut seen = vec![false; l];
        let mut queue: VecDeque<usize> = (0..l).filter(|&i| self.leader_weights[i] > 0.0).collect();
        for &i in &queue {
            seen[i] = true;
        }
        while let Some(j) = queue.pop_front() {
            for (i, s) in seen.iter_mut().enumerate() {
                if !*s && self.follower_weights[(i, j)] > 0.0 {
                    *s = true;
                    queue.push_back(i);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyMatrices {
    pub laplacian_like: Mat,
    pub leader_diag: Mat,
    pub laplacian_lifted: Mat,
    pub leader_lifted: Mat,
    state_dim: usize,
}

impl TopologyMatrices {
    /// Assembles the lifted forms from raw ℓ×ℓ matrices without any balance check.
    pub fn from_parts(laplacian_like: Mat, leader_diag: Mat, state_dim: usize) -> Self {
        let eye = Mat::identity(state_dim);
        TopologyMatrices {
            laplacian_lifted: kron(&laplacian_like, &eye),
            leader_lifted: kron(&leader_diag, &eye),
            laplacian_like,
            leader_diag,
            state_dim,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.laplacian_like.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// `‖((𝕃 − 𝔸_m) ⊗ I_n) 1‖_∞ ≤ 1e−12`.
    pub fn check_balanced(&self) -> bool {
        let Ok(diff) = self.laplacian_lifted.sub(&self.leader_lifted) else {
            return false;
        };
        let ones = vec![1.0; diff.cols()];
        diff.matvec_unchecked(&ones).norm_inf() <= BALANCE_TOLERANCE
    }

    pub fn check_threshold(&self, theta: f64) -> ThresholdReport {
        let sym = self
            .laplacian_like
            .symmetric_part()
            .expect("square by construction");
        let eigs = symmetric_eigenvalues(&sym).expect("symmetric part is symmetric");
        let min_laplacian_eigenvalue = eigs
            .iter()
            .copied()
            .filter(|v| v.abs() >= ZERO_EIGENVALUE)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
        let diag = self.leader_diag.diag();
        let zero_leader_weights: Vec<usize> = diag
            .iter()
            .enumerate()
            .filter(|(_, w)| w.abs() < ZERO_EIGENVALUE)
            .map(|(i, _)| i + 1)
            .collect();
        let min_leader_weight = diag
            .iter()
            .copied()
            .filter(|w| w.abs() >= ZERO_EIGENVALUE)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
        let pass = min_laplacian_eigenvalue.is_some_and(|v| v >= theta)
            && min_leader_weight.is_some_and(|v| v >= theta)
            && zero_leader_weights.is_empty();
        ThresholdReport {
            theta,
            min_laplacian_eigenvalue,
            min_leader_weight,
            zero_leader_weights,
            pass,
        }
    }
}

/// Outcome of the connectivity-threshold check.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    pub theta: f64,
    /// Smallest nonzero eigenvalue of (𝕃 + 𝕃ᵀ)/2.
    pub min_laplacian_eigenvalue: Option<f64>,
    /// Smallest nonzero diagonal entry of 𝔸_m.
    pub min_leader_weight: Option<f64>,
    /// 1-based agents with no direct leader link.
    pub zero_leader_weights: Vec<usize>,
    pub pass: bool,
}

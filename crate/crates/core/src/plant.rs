//! Follower agents, the leader model and the auxiliary model.
//!
//! The matching-gain solver lives here because it needs the true agent
//! matrices; the controller never sees them.

use crate::error::{Error, Result};
use crate::numerics::{cholesky, solve_linear, solve_lyapunov, Mat, Vector};
use crate::topology::TopologyMatrices;

/// Residual gate for the matching conditions.
pub const MATCHING_TOLERANCE: f64 = 1e-9;

/// One follower: `ẋ = A x + A^ζ x(t − τ_x) + B u(t − τ_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDynamics {
    pub a: Mat,
    pub a_zeta: Mat,
    pub b: Mat,
}

impl AgentDynamics {
    pub fn new(a: Mat, a_zeta: Mat, b: Mat) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() || a_zeta.rows() != n || a_zeta.cols() != n || b.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "agent with A {}x{}, A_zeta {}x{}, B {}x{}",
                a.rows(),
                a.cols(),
                a_zeta.rows(),
                a_zeta.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(AgentDynamics { a, a_zeta, b })
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }
}

/// Heterogeneous set of followers sharing state and input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    agents: Vec<AgentDynamics>,
}

impl Fleet {
    pub fn new(agents: Vec<AgentDynamics>) -> Result<Self> {
        let Some(first) = agents.first() else {
            return Err(Error::Validation("fleet needs at least one agent".into()));
        };
        let (n, p) = (first.state_dim(), first.input_dim());
        if let Some((i, _)) = agents
            .iter()
            .enumerate()
            .find(|(_, a)| a.state_dim() != n || a.input_dim() != p)
        {
            return Err(Error::DimensionMismatch(format!(
                "agent {} does not share n={n}, p={p} with agent 1",
                i + 1
            )));
        }
        Ok(Fleet { agents })
    }

    pub fn agents(&self) -> &[AgentDynamics] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.agents[0].state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.agents[0].input_dim()
    }

    /// `𝐀 x̄ + 𝐀^ζ x̄(t − τ_x) + 𝐁 ū(t − τ_u)`, block by block.
    pub fn derivative(&self, x_now: &[f64], x_delayed: &[f64], u_delayed: &[f64]) -> Result<Vector> {
        let (n, p, l) = (self.state_dim(), self.input_dim(), self.len());
        if x_now.len() != l * n || x_delayed.len() != l * n || u_delayed.len() != l * p {
            return Err(Error::DimensionMismatch(format!(
                "fleet of {l} agents (n={n}, p={p}) given x {}, x_delayed {}, u {}",
                x_now.len(),
                x_delayed.len(),
                u_delayed.len()
            )));
        }
        let mut out = vec![0.0; l * n];
        for (i, agent) in self.agents.iter().enumerate() {
            let dst = &mut out[i * n..(i + 1) * n];
            agent.a.matvec_add_into(&x_now[i * n..(i + 1) * n], dst);
            agent.a_zeta.matvec_add_into(&x_delayed[i * n..(i + 1) * n], dst);
            agent.b.matvec_add_into(&u_delayed[i * p..(i + 1) * p], dst);
        }
        Ok(out.into())
    }

    /// Solves the matching conditions for every agent against `leader`.
    pub fn matching_gains(&self, leader: &LeaderModel) -> Result<MatchingGains> {
        let n = self.state_dim();
        if leader.state_dim() != n || leader.input_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "leader (n={}, p={}) vs fleet (n={n}, p={})",
                leader.state_dim(),
                leader.input_dim(),
                self.input_dim()
            )));
        }
        let mut gains = Vec::with_capacity(self.len());
        for (i, agent) in self.agents.iter().enumerate() {
            let fail = |residual: f64| Error::NoMatchingSolution {
                agent: i + 1,
                residual,
            };
            let mismatch = leader.a_m.sub(&agent.a)?;
            let theta_x_t = least_squares(&agent.b, &mismatch).map_err(|_| fail(f64::INFINITY))?;
            let theta_zeta_t =
                least_squares(&agent.b, &agent.a_zeta.scale(-1.0)).map_err(|_| fail(f64::INFINITY))?;
            let theta_r = least_squares(&agent.b, &leader.b_m).map_err(|_| fail(f64::INFINITY))?;
            let theta_phi = least_squares(&leader.b_m, &agent.b).map_err(|_| fail(f64::INFINITY))?;
            let g = AgentMatchingGains {
                theta_x: theta_x_t.transpose(),
                theta_zeta: theta_zeta_t.transpose(),
                theta_r,
                theta_phi,
            };
            let residual = g.residual(agent, leader)?;
            if residual > MATCHING_TOLERANCE {
                return Err(fail(residual));
            }
            gains.push(g);
        }
        Ok(MatchingGains { agents: gains })
    }
}

/// Least-squares solution of `b X = rhs` through the normal equations.
fn least_squares(b: &Mat, rhs: &Mat) -> Result<Mat> {
    let bt = b.transpose();
    let normal = bt.matmul(b)?;
    let projected = bt.matmul(rhs)?;
    let mut x = Mat::zeros(b.cols(), rhs.cols());
    for j in 0..rhs.cols() {
        let col: Vec<f64> = (0..projected.rows()).map(|i| projected[(i, j)]).collect();
        let sol = solve_linear(&normal, &col)?;
        for (i, v) in sol.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    Ok(x)
}

/// Known, stable reference model `ẋ_m = A_m x_m + B_m r(t − τ_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderModel {
    pub a_m: Mat,
    pub b_m: Mat,
}

impl LeaderModel {
    pub fn new(a_m: Mat, b_m: Mat) -> Result<Self> {
        if !a_m.is_square() || b_m.rows() != a_m.rows() {
            return Err(Error::DimensionMismatch(format!(
                "leader with A_m {}x{}, B_m {}x{}",
                a_m.rows(),
                a_m.cols(),
                b_m.rows(),
                b_m.cols()
            )));
        }
        Ok(LeaderModel { a_m, b_m })
    }

    pub fn state_dim(&self) -> usize {
        self.a_m.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_m.cols()
    }

    /// Certifies `A_m` Hurwitz: the Lyapunov solution for `Q = I` must be positive definite.
    pub fn check_hurwitz(&self) -> Result<()> {
        let p = solve_lyapunov(&self.a_m, &Mat::identity(self.state_dim())).map_err(|_| Error::NotHurwitz)?;
        cholesky(&p).map(|_| ()).map_err(|_| Error::NotHurwitz)
    }

    /// Derivative of one leader block.
    pub fn block_derivative(&self, x_m: &[f64], r_delayed: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.a_m.matvec_add_into(x_m, out);
        self.b_m.matvec_add_into(r_delayed, out);
    }

    /// `(I_ℓ ⊗ A_m) x̄_m + (I_ℓ ⊗ B_m) r̄(t − τ_u)`.
    pub fn derivative(&self, x_m: &[f64], r_delayed: &[f64]) -> Result<Vector> {
        let (n, p) = (self.state_dim(), self.input_dim());
        if !x_m.len().is_multiple_of(n) || r_delayed.len() != x_m.len() / n * p {
            return Err(Error::DimensionMismatch(format!(
                "leader blocks: x_m {} and r {} for n={n}, p={p}",
                x_m.len(),
                r_delayed.len()
            )));
        }
        let l = x_m.len() / n;
        let mut out = vec![0.0; l * n];
        for i in 0..l {
            self.block_derivative(
                &x_m[i * n..(i + 1) * n],
                &r_delayed[i * p..(i + 1) * p],
                &mut out[i * n..(i + 1) * n],
            );
        }
        Ok(out.into())
    }

    /// Auxiliary model: `𝐀_m x̄_a + (𝕃 ⊗ I_n) 𝐁_m ū_a`.
    pub fn aux_derivative(&self, topo: &TopologyMatrices, x_a: &[f64], u_a: &[f64]) -> Result<Vector> {
        let (n, p, l) = (self.state_dim(), self.input_dim(), topo.num_agents());
        if topo.state_dim() != n || x_a.len() != l * n || u_a.len() != l * p {
            return Err(Error::DimensionMismatch(format!(
                "auxiliary model for {l} agents (n={n}, p={p}) given x_a {}, u_a {}",
                x_a.len(),
                u_a.len()
            )));
        }
        let mut bu = vec![0.0; l * n];
        for i in 0..l {
            self.b_m
                .matvec_add_into(&u_a[i * p..(i + 1) * p], &mut bu[i * n..(i + 1) * n]);
        }
        let mut out = topo.laplacian_lifted.matvec_unchecked(&bu).into_inner();
        for i in 0..l {
            self.a_m
                .matvec_add_into(&x_a[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        Ok(out.into())
    }
}

/// Ideal gains for one agent. `theta_x` and `theta_zeta` are n×p.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMatchingGains {
    pub theta_x: Mat,
    pub theta_zeta: Mat,
    pub theta_r: Mat,
    pub theta_phi: Mat,
}

impl AgentMatchingGains {
    /// Largest Frobenius residual over the four matching conditions.
    pub fn residual(&self, agent: &AgentDynamics, leader: &LeaderModel) -> Result<f64> {
        let r1 = agent
            .a
            .add(&agent.b.matmul(&self.theta_x.transpose())?)?
            .sub(&leader.a_m)?;
        let r2 = agent.a_zeta.add(&agent.b.matmul(&self.theta_zeta.transpose())?)?;
        let r3 = agent.b.matmul(&self.theta_r)?.sub(&leader.b_m)?;
        let r4 = agent.b.sub(&leader.b_m.matmul(&self.theta_phi)?)?;
        Ok([r1, r2, r3, r4]
            .iter()
            .map(Mat::frobenius_norm)
            .fold(0.0, f64::max))
    }

    /// Stacked per-agent gain `Θ^i = [θ_x; θ_ζ; θ_r]`, q×p, flattened row-major.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.theta_x.as_slice().to_vec();
        v.extend_from_slice(self.theta_zeta.as_slice());
        v.extend_from_slice(self.theta_r.as_slice());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingGains {
    pub agents: Vec<AgentMatchingGains>,
}

impl MatchingGains {
    /// Signs of the scalar `θ_r*` per agent (diagonal entries when p > 1).
    pub fn r_signs(&self) -> Vec<f64> {
        self.agents
            .iter()
            .map(|g| if g.theta_r[(0, 0)] < 0.0 { -1.0 } else { 1.0 })
            .collect()
    }
}

//! The distributed adaptive controller.
//!
//! Everything in this module works from the leader model, the topology
//! matrices, the known signs of `θ_r*` and measured signals. None of it takes
//! the follower matrices, which are unknown to the controller.
//!
//! Gains are flattened into one vector so they can ride along in the
//! integrator state: for each agent the q×p block `Θ^i` (row-major), followed
//! by the p×p blocks `θ_φ^i` of every agent.

use crate::error::{Error, Result};
use crate::numerics::{cholesky, kron, solve_lyapunov, Mat, Vector};
use crate::plant::LeaderModel;
use crate::topology::TopologyMatrices;

/// Network dimensions: ℓ agents, n states and p inputs per agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub agents: usize,
    pub n: usize,
    pub p: usize,
}

impl Dims {
    /// Regressor length `2n + p`.
    pub fn q(&self) -> usize {
        2 * self.n + self.p
    }

    pub fn theta_len(&self) -> usize {
        self.agents * self.q() * self.p
    }

    pub fn phi_len(&self) -> usize {
        self.agents * self.p * self.p
    }

    pub fn gains_len(&self) -> usize {
        self.theta_len() + self.phi_len()
    }
}

/// Adaptive gains `Θ` (block diagonal) and `Φ_φ` (diagonal blocks), flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    dims: Dims,
    data: Vec<f64>,
}

impl ControllerState {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.gains_len() {
            return Err(Error::DimensionMismatch(format!(
                "{} gain entries, expected {}",
                data.len(),
                dims.gains_len()
            )));
        }
        Ok(ControllerState { dims, data })
    }

    /// Per-agent `Θ^i` (q×p) and `θ_φ^i` (p×p) blocks.
    pub fn from_blocks(dims: Dims, theta: &[Mat], phi: &[Mat]) -> Result<Self> {
        if theta.len() != dims.agents || phi.len() != dims.agents {
            return Err(Error::DimensionMismatch("one gain block per agent".into()));
        }
        let mut data = Vec::with_capacity(dims.gains_len());
        for t in theta {
            if t.rows() != dims.q() || t.cols() != dims.p {
                return Err(Error::DimensionMismatch(format!(
                    "Theta block {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    dims.q(),
                    dims.p
                )));
            }
            data.extend_from_slice(t.as_slice());
        }
        for f in phi {
            if f.rows() != dims.p || f.cols() != dims.p {
                return Err(Error::DimensionMismatch("Phi block must be p x p".into()));
            }
            data.extend_from_slice(f.as_slice());
        }
        Ok(ControllerState { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        theta_block(self.dims, &self.data, i)
    }

    pub fn phi(&self, i: usize) -> &[f64] {
        phi_block(self.dims, &self.data, i)
    }
}

fn theta_block(dims: Dims, gains: &[f64], i: usize) -> &[f64] {
    let len = dims.q() * dims.p;
    &gains[i * len..(i + 1) * len]
}

fn phi_block(dims: Dims, gains: &[f64], i: usize) -> &[f64] {
    let len = dims.p * dims.p;
    let off = dims.theta_len();
    &gains[off + i * len..off + (i + 1) * len]
}

/// `out += Mᵀ v` for row-major `rows × cols` M.
fn transpose_mul_add(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let vr = v[r];
        for c in 0..cols {
            out[c] += m[r * cols + c] * vr;
        }
    }
}

/// `out += M v` for row-major square p×p M.
fn mul_add(m: &[f64], p: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..p {
        out[r] += (0..p).map(|c| m[r * p + c] * v[c]).sum::<f64>();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub gamma_theta: Mat,
    pub gamma_phi: Mat,
    /// ℓn×ℓn solution of `𝐀_mᵀ P + P 𝐀_m = −(Q + Q_a)`.
    pub p_matrix: Mat,
    /// Known sign of `θ_r*` per agent, ±1.
    pub r_sign: Vec<f64>,
    pub tau_x: f64,
    pub tau_u: f64,
}

impl ControllerConfig {
    /// Solves for P from the lifted leader and `q_tilde` (either n×n, lifted
    /// by `I_ℓ ⊗ ·`, or already ℓn×ℓn) and validates all invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        leader: &LeaderModel,
        agents: usize,
        gamma_theta: Mat,
        gamma_phi: Mat,
        q_tilde: &Mat,
        r_sign: Vec<f64>,
        tau_x: f64,
        tau_u: f64,
    ) -> Result<Self> {
        let n = leader.state_dim();
        let q_global = if q_tilde.rows() == n && q_tilde.cols() == n {
            kron(&Mat::identity(agents), q_tilde)
        } else {
            q_tilde.clone()
        };
        cholesky(&q_global).map_err(|_| Error::Validation("Q + Q_a must be symmetric positive definite".into()))?;
        let a_global = kron(&Mat::identity(agents), &leader.a_m);
        let p_matrix = solve_lyapunov(&a_global, &q_global)?;
        let cfg = ControllerConfig {
            gamma_theta,
            gamma_phi,
            p_matrix,
            r_sign,
            tau_x,
            tau_u,
        };
        cfg.validate(agents, n)?;
        Ok(cfg)
    }

    pub fn validate(&self, agents: usize, n: usize) -> Result<()> {
        if !(self.tau_x >= 0.0 && self.tau_x <= self.tau_u) {
            return Err(Error::Validation(format!(
                "delays must satisfy 0 <= tau_x <= tau_u, got tau_x={} tau_u={}",
                self.tau_x, self.tau_u
            )));
        }
        for (name, g) in [("gamma_theta", &self.gamma_theta), ("gamma_phi", &self.gamma_phi)] {
            if g.rows() != agents || g.cols() != agents {
                return Err(Error::DimensionMismatch(format!("{name} must be {agents}x{agents}")));
            }
            cholesky(g).map_err(|_| Error::Validation(format!("{name} must be symmetric positive definite")))?;
        }
        if self.p_matrix.rows() != agents * n || self.p_matrix.cols() != agents * n {
            return Err(Error::DimensionMismatch("P must be (l n) x (l n)".into()));
        }
        cholesky(&self.p_matrix).map_err(|_| Error::NotHurwitz)?;
        if self.r_sign.len() != agents || self.r_sign.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::Validation("r_sign needs one entry of +1 or -1 per agent".into()));
        }
        Ok(())
    }
}

/// `[x_i(t); x_i(t − τ_x); r(t − τ_u)]`.
pub fn regressor(x_now: &[f64], x_delayed: &[f64], r_delayed: &[f64]) -> Result<Vector> {
    if x_now.len() != x_delayed.len() {
        return Err(Error::DimensionMismatch(format!(
            "regressor states of length {} and {}",
            x_now.len(),
            x_delayed.len()
        )));
    }
    let mut v = Vec::with_capacity(2 * x_now.len() + r_delayed.len());
    v.extend_from_slice(x_now);
    v.extend_from_slice(x_delayed);
    v.extend_from_slice(r_delayed);
    Ok(v.into())
}

/// One RK4 step of a single leader block from grid time `t`; the same
/// arithmetic as the global integrator so predictions track it to round-off.
fn leader_rk4_step(m: &LeaderModel, x: &Vector, t: f64, h: f64, tau_u: f64, r: &dyn Fn(f64) -> Vector) -> Vector {
    let n = x.dim();
    let f = |s: f64, y: &Vector| {
        let mut out = vec![0.0; n];
        m.block_derivative(y, &r(s - tau_u), &mut out);
        Vector::from(out)
    };
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &x.axpy(0.5 * h, &k1));
    let k3 = f(t + 0.5 * h, &x.axpy(0.5 * h, &k2));
    let k4 = f(t + h, &x.axpy(h, &k3));
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect::<Vec<_>>()
        .into()
}

/// Leader-model prediction of the regressor one input delay ahead:
/// `[x_m(t + τ_u | t); x_m(t + τ_u − τ_x | t); r(t)]`.
///
/// Inputs `r(s − τ_u)` over the horizon all lie in `[t − τ_u, t]`, so the
/// prediction is exact up to integration error.
pub fn predict_leader_regressor(
    m: &LeaderModel,
    x_m_now: &[f64],
    r: &dyn Fn(f64) -> Vector,
    t: f64,
    tau_u: f64,
    tau_x: f64,
    h: f64,
) -> Result<Vector> {
    if x_m_now.len() != m.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "leader block of length {} for n={}",
            x_m_now.len(),
            m.state_dim()
        )));
    }
    if tau_x > tau_u {
        return Err(Error::Validation("tau_x must not exceed tau_u".into()));
    }
    let total = (tau_u / h).round() as usize;
    let mid = ((tau_u - tau_x) / h).round() as usize;
    let mut x = Vector::from_slice(x_m_now);
    let mut x_mid = x.clone();
    for k in 0..total {
        if k == mid {
            x_mid = x.clone();
        }
        x = leader_rk4_step(m, &x, t + k as f64 * h, h, tau_u, r);
    }
    if mid == total {
        x_mid = x.clone();
    }
    regressor(&x, &x_mid, &r(t))
}

/// [`predict_leader_regressor`] for a fixed horizon, with the RK4 recursion
/// unrolled into precomputed linear maps.
///
/// Over one step with the reference linear between grid samples, RK4 is
/// `x⁺ = M x + N₀ r_k + N₁ r_{k+1}`; a prediction is then
/// `M^K x + Σ_j C_j r_j` over the `K + 1` reference samples in the horizon.
#[derive(Debug, Clone)]
pub struct LeaderPredictor {
    n: usize,
    p: usize,
    steps: usize,
    step: f64,
    tau_u: f64,
    transition: Mat,
    transition_mid: Mat,
    /// `C_j` for the full horizon, n×p each.
    weights: Vec<Mat>,
    weights_mid: Vec<Mat>,
}

impl LeaderPredictor {
    pub fn new(m: &LeaderModel, tau_u: f64, tau_x: f64, h: f64) -> Result<Self> {
        if !(tau_x >= 0.0 && tau_x <= tau_u) {
            return Err(Error::Validation("tau_x must not exceed tau_u".into()));
        }
        let (n, p) = (m.state_dim(), m.input_dim());
        let steps = (tau_u / h).round() as usize;
        let mid = ((tau_u - tau_x) / h).round() as usize;

        let step_map = |x: &[f64], r0: &[f64], r1: &[f64]| -> Vec<f64> {
            let rm: Vec<f64> = r0.iter().zip(r1).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
            let f = |y: &[f64], r: &[f64]| {
                let mut out = vec![0.0; n];
                m.block_derivative(y, r, &mut out);
                out
            };
            let shifted = |k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + c * b).collect() };
            let k1 = f(x, r0);
            let k2 = f(&shifted(&k1, 0.5 * h), &rm);
            let k3 = f(&shifted(&k2, 0.5 * h), &rm);
            let k4 = f(&shifted(&k3, h), r1);
            (0..n)
                .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        };
        let unit = |len: usize, j: usize| {
            let mut e = vec![0.0; len];
            e[j] = 1.0;
            e
        };
        let (zn, zp) = (vec![0.0; n], vec![0.0; p]);
        let mut m_step = Mat::zeros(n, n);
        for j in 0..n {
            for (i, v) in step_map(&unit(n, j), &zp, &zp).into_iter().enumerate() {
                m_step[(i, j)] = v;
            }
        }
        let mut n0 = Mat::zeros(n, p);
        let mut n1 = Mat::zeros(n, p);
        for j in 0..p {
            for (i, v) in step_map(&zn, &unit(p, j), &zp).into_iter().enumerate() {
                n0[(i, j)] = v;
            }
            for (i, v) in step_map(&zn, &zp, &unit(p, j)).into_iter().enumerate() {
                n1[(i, j)] = v;
            }
        }

        // powers[k] = M^k
        let mut powers = Vec::with_capacity(steps + 1);
        powers.push(Mat::identity(n));
        for k in 0..steps {
            let next = m_step.matmul(&powers[k])?;
            powers.push(next);
        }
        let horizon_weights = |len: usize| -> Result<Vec<Mat>> {
            let mut w = vec![Mat::zeros(n, p); len + 1];
            for k in 0..len {
                let pw = &powers[len - 1 - k];
                w[k] = w[k].add(&pw.matmul(&n0)?)?;
                w[k + 1] = w[k + 1].add(&pw.matmul(&n1)?)?;
            }
            Ok(w)
        };
        Ok(LeaderPredictor {
            n,
            p,
            steps,
            step: h,
            tau_u,
            transition: powers[steps].clone(),
            transition_mid: powers[mid].clone(),
            weights: horizon_weights(steps)?,
            weights_mid: horizon_weights(mid)?,
        })
    }

    /// Number of reference samples a prediction needs.
    pub fn horizon_samples(&self) -> usize {
        self.steps + 1
    }

    /// Grid times of those samples, relative to the prediction time.
    pub fn sample_offset(&self, j: usize) -> f64 {
        j as f64 * self.step - self.tau_u
    }

    /// `r_samples[j]` holds `r(t + j h − τ_u)` (p values each).
    pub fn predict(&self, x_m_now: &[f64], r_samples: &[f64]) -> Result<Vector> {
        let (n, p) = (self.n, self.p);
        if x_m_now.len() != n || r_samples.len() != (self.steps + 1) * p {
            return Err(Error::DimensionMismatch(format!(
                "prediction needs a leader block of {n} and {} reference values",
                (self.steps + 1) * p
            )));
        }
        let apply = |transition: &Mat, weights: &[Mat]| {
            let mut x = vec![0.0; n];
            transition.matvec_add_into(x_m_now, &mut x);
            for (j, w) in weights.iter().enumerate() {
                w.matvec_add_into(&r_samples[j * p..(j + 1) * p], &mut x);
            }
            x
        };
        let end = apply(&self.transition, &self.weights);
        let mid = apply(&self.transition_mid, &self.weights_mid);
        regressor(&end, &mid, &r_samples[self.steps * p..])
    }
}

/// `u_i = Θ^{iᵀ} η_{m,i}` for every agent.
pub fn control(cs: &ControllerState, eta_m_pred: &[Vector]) -> Result<Vector> {
    control_from(cs.dims, &cs.data, eta_m_pred)
}

pub(crate) fn control_from(dims: Dims, gains: &[f64], eta: &[Vector]) -> Result<Vector> {
    check_regressors(dims, eta)?;
    let (q, p) = (dims.q(), dims.p);
    let mut u = vec![0.0; dims.agents * p];
    for (i, e) in eta.iter().enumerate() {
        transpose_mul_add(theta_block(dims, gains, i), q, p, e, &mut u[i * p..(i + 1) * p]);
    }
    Ok(u.into())
}

fn check_regressors(dims: Dims, eta: &[Vector]) -> Result<()> {
    if eta.len() != dims.agents || eta.iter().any(|e| e.dim() != dims.q()) {
        return Err(Error::DimensionMismatch(format!(
            "expected {} regressors of length {}",
            dims.agents,
            dims.q()
        )));
    }
    Ok(())
}

/// `φ_i = Θ^{iᵀ}(t) η_i(t) − Θ^{iᵀ}(t − τ_u) η_{m,i}(t)`.
///
/// `delayed_gains` is the flattened gain vector at `t − τ_u`.
pub fn mismatch(cs: &ControllerState, delayed_gains: &[f64], eta_now: &[Vector], eta_m_now: &[Vector]) -> Result<Vector> {
    mismatch_from(cs.dims, &cs.data, delayed_gains, eta_now, eta_m_now)
}

pub(crate) fn mismatch_from(
    dims: Dims,
    gains: &[f64],
    delayed_gains: &[f64],
    eta_now: &[Vector],
    eta_m_now: &[Vector],
) -> Result<Vector> {
    if delayed_gains.len() != dims.gains_len() {
        return Err(Error::DimensionMismatch("delayed gain vector length".into()));
    }
    let current = control_from(dims, gains, eta_now)?;
    let delayed = control_from(dims, delayed_gains, eta_m_now)?;
    Ok(current.sub(&delayed))
}

/// `u_{a,i} = θ_φ^i φ_i`.
pub fn auxiliary_input(cs: &ControllerState, phi: &[f64]) -> Result<Vector> {
    auxiliary_input_from(cs.dims, &cs.data, phi)
}

pub(crate) fn auxiliary_input_from(dims: Dims, gains: &[f64], phi: &[f64]) -> Result<Vector> {
    let p = dims.p;
    if phi.len() != dims.agents * p {
        return Err(Error::DimensionMismatch(format!(
            "mismatch of length {}, expected {}",
            phi.len(),
            dims.agents * p
        )));
    }
    let mut out = vec![0.0; dims.agents * p];
    for i in 0..dims.agents {
        mul_add(phi_block(dims, gains, i), p, &phi[i * p..(i + 1) * p], &mut out[i * p..(i + 1) * p]);
    }
    Ok(out.into())
}

/// Synchronization error `ē = (𝕃 ⊗ I) x̄ − (𝔸_m ⊗ I) x̄_m`.
pub fn sync_error(topo: &TopologyMatrices, x_bar: &[f64], x_m_bar: &[f64]) -> Result<Vector> {
    let dim = topo.laplacian_lifted.rows();
    if x_bar.len() != dim || x_m_bar.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "state vectors of length {} and {}, expected {dim}",
            x_bar.len(),
            x_m_bar.len()
        )));
    }
    let mut e = topo.laplacian_lifted.matvec_unchecked(x_bar);
    let lead = topo.leader_lifted.matvec_unchecked(x_m_bar);
    e.iter_mut().zip(lead.iter()).for_each(|(a, b)| *a -= b);
    Ok(e)
}

/// Augmented error `ē_a = ē + x̄_a`.
pub fn augmented_error(topo: &TopologyMatrices, x_bar: &[f64], x_m_bar: &[f64], x_a: &[f64]) -> Result<Vector> {
    let e = sync_error(topo, x_bar, x_m_bar)?;
    if x_a.len() != e.dim() {
        return Err(Error::DimensionMismatch("auxiliary state length".into()));
    }
    Ok(e.axpy(1.0, &Vector::from_slice(x_a)))
}

/// Adaptive update laws projected onto the block structure of `Θ` and `Φ_φ`.
///
/// With `s = 𝐁_mᵀ (𝕃 ⊗ I_n)ᵀ P ē_a` and `g = (Γ ⊗ I_p) s`:
/// `dΘ^i = −sign(θ_r*ⁱ) η_i g_θ,iᵀ` and `dθ_φ^i = −g_φ,i φ_iᵀ`.
/// Returns the flattened derivative in the same layout as the gains.
pub fn gain_derivatives(
    cfg: &ControllerConfig,
    topo: &TopologyMatrices,
    m: &LeaderModel,
    e_a: &[f64],
    eta: &[Vector],
    phi: &[f64],
) -> Result<Vector> {
    let dims = Dims {
        agents: topo.num_agents(),
        n: m.state_dim(),
        p: m.input_dim(),
    };
    check_regressors(dims, eta)?;
    let (l, n, p, q) = (dims.agents, dims.n, dims.p, dims.q());
    if e_a.len() != l * n || phi.len() != l * p || cfg.r_sign.len() != l {
        return Err(Error::DimensionMismatch("gain derivative inputs".into()));
    }
    let pe = cfg.p_matrix.matvec(e_a)?;
    // (𝕃 ⊗ I)ᵀ P ē_a
    let mut lpe = vec![0.0; l * n];
    transpose_mul_add(topo.laplacian_lifted.as_slice(), l * n, l * n, &pe, &mut lpe);
    // 𝐁_mᵀ, block by block
    let mut s = vec![0.0; l * p];
    for i in 0..l {
        transpose_mul_add(m.b_m.as_slice(), n, p, &lpe[i * n..(i + 1) * n], &mut s[i * p..(i + 1) * p]);
    }
    let lift = |g: &Mat| -> Vec<f64> {
        let mut out = vec![0.0; l * p];
        for i in 0..l {
            for j in 0..l {
                let w = g[(i, j)];
                if w == 0.0 {
                    continue;
                }
                for k in 0..p {
                    out[i * p + k] += w * s[j * p + k];
                }
            }
        }
        out
    };
    let g_theta = lift(&cfg.gamma_theta);
    let g_phi = lift(&cfg.gamma_phi);

    let mut d = vec![0.0; dims.gains_len()];
    for i in 0..l {
        let sign = cfg.r_sign[i];
        let block = &mut d[i * q * p..(i + 1) * q * p];
        for r in 0..q {
            for c in 0..p {
                block[r * p + c] = -sign * eta[i][r] * g_theta[i * p + c];
            }
        }
    }
    let off = dims.theta_len();
    for i in 0..l {
        let block = &mut d[off + i * p * p..off + (i + 1) * p * p];
        for r in 0..p {
            for c in 0..p {
                block[r * p + c] = -g_phi[i * p + r] * phi[i * p + c];
            }
        }
    }
    Ok(d.into())
}

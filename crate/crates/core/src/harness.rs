//! Closed-loop assembly: plant, leader, auxiliary model and adaptive gains
//! integrated as one delay system, plus the Lyapunov monitor and run metrics.
//!
//! Integration state layout: `[x̄ (ℓn) | x_m (n) | x̄_a (ℓn) | gains]`. The
//! leader is integrated once; every agent tracks the same `x̄_m = 1_ℓ ⊗ x_m`.

use std::cell::RefCell;

use crate::adaptive::{
    self, auxiliary_input_from, control_from, gain_derivatives, mismatch_from, regressor, ControllerConfig, Dims,
    LeaderPredictor,
};
use crate::dde::{self, DdeState, DelaySystem, Histories, HistoryId};
use crate::error::{Error, Result};
use crate::numerics::{inverse, Mat, Vector};
use crate::plant::{AgentMatchingGains, Fleet, LeaderModel, MatchingGains};
use crate::topology::{Topology, TopologyMatrices};

/// Any integrated quantity (states, auxiliary states, gains) above this in
/// magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Tracking settles once ‖ē‖₂ stays below this fraction of its peak.
pub const SETTLING_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Constant,
    Sine,
    Square,
}

impl ReferenceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceKind::Constant => "constant",
            ReferenceKind::Sine => "sine",
            ReferenceKind::Square => "square",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(ReferenceKind::Constant),
            "sine" => Some(ReferenceKind::Sine),
            "square" => Some(ReferenceKind::Square),
            _ => None,
        }
    }
}

/// Scalar reference waveform, applied to every input channel. Zero before t = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSignal {
    pub kind: ReferenceKind,
    pub amplitude: f64,
    pub period: f64,
    pub offset: f64,
}

impl Default for ReferenceSignal {
    fn default() -> Self {
        ReferenceSignal {
            kind: ReferenceKind::Square,
            amplitude: 1.0,
            period: 40.0,
            offset: 0.0,
        }
    }
}

impl ReferenceSignal {
    pub fn zero() -> Self {
        ReferenceSignal {
            kind: ReferenceKind::Constant,
            amplitude: 0.0,
            period: 1.0,
            offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ReferenceKind::Constant && !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Validation(format!(
                "reference period must be positive, got {}",
                self.period
            )));
        }
        if !self.amplitude.is_finite() || !self.offset.is_finite() {
            return Err(Error::Validation("reference amplitude and offset must be finite".into()));
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let shape = match self.kind {
            ReferenceKind::Constant => 1.0,
            ReferenceKind::Sine => (2.0 * std::f64::consts::PI * t / self.period).sin(),
            ReferenceKind::Square => {
                let phase = (t / self.period).fract();
                if phase < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        self.offset + self.amplitude * shape
    }
}

/// The reference as seen by the simulation: exact on grid points, linearly
/// interpolated in between, so that leader, predictor and the stored control
/// history all see the same signal at half-step stages.
#[derive(Debug, Clone, Copy)]
struct GridReference {
    signal: ReferenceSignal,
    step: f64,
    channels: usize,
}

impl GridReference {
    fn scalar(&self, t: f64) -> f64 {
        let pos = t / self.step;
        let k = pos.round();
        if (pos - k).abs() <= 1e-9 {
            return self.signal.value(k * self.step);
        }
        let lo = pos.floor();
        let frac = pos - lo;
        let a = self.signal.value(lo * self.step);
        let b = self.signal.value((lo + 1.0) * self.step);
        a + frac * (b - a)
    }

    fn at(&self, t: f64) -> Vector {
        Vector::filled(self.channels, self.scalar(t))
    }
}

/// Designer-side controller settings as they appear in a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSettings {
    pub gamma_theta: Mat,
    pub gamma_phi: Mat,
    /// `Q + Q_a`, either n×n (lifted per agent) or ℓn×ℓn.
    pub q_tilde: Mat,
    /// Initial `Θ^i`, q×p per agent.
    pub theta0: Vec<Mat>,
    /// Initial `θ_φ^i`, p×p per agent.
    pub phi0: Vec<Mat>,
    pub r_sign: Vec<f64>,
    /// When false the gains stay at their initial values.
    pub adapt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub fleet: Fleet,
    pub leader: LeaderModel,
    pub topology: Topology,
    pub controller: ControllerSettings,
    pub tau_x: f64,
    pub tau_u: f64,
    pub step: f64,
    pub duration: f64,
    pub reference: ReferenceSignal,
    /// x̄(0), ℓn.
    pub x0: Vector,
    /// Leader x_m(0), n.
    pub xm0: Vector,
    /// x̄_a(0), ℓn.
    pub xa0: Vector,
}

/// Everything derived from a validated scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dims: Dims,
    pub topology: TopologyMatrices,
    pub config: ControllerConfig,
    /// Ideal gains, when the fleet admits them. Diagnostic only.
    pub matching: Option<MatchingGains>,
    pub predictor: LeaderPredictor,
}

impl Scenario {
    pub fn dims(&self) -> Dims {
        Dims {
            agents: self.fleet.len(),
            n: self.fleet.state_dim(),
            p: self.fleet.input_dim(),
        }
    }

    /// Checks every scenario invariant and builds the derived matrices.
    pub fn prepare(&self) -> Result<Prepared> {
        let dims = self.dims();
        if self.topology.num_agents() != dims.agents {
            return Err(Error::Validation(format!(
                "topology has {} agents, fleet has {}",
                self.topology.num_agents(),
                dims.agents
            )));
        }
        if self.leader.state_dim() != dims.n || self.leader.input_dim() != dims.p {
            return Err(Error::Validation("leader and fleet dimensions differ".into()));
        }
        if !(self.tau_x >= 0.0 && self.tau_x <= self.tau_u) {
            return Err(Error::Validation(format!(
                "delays must satisfy tau_x <= tau_u (got tau_x={}, tau_u={})",
                self.tau_x, self.tau_u
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Validation(format!("step must be positive, got {}", self.step)));
        }
        for (name, d) in [("tau_x", self.tau_x), ("tau_u", self.tau_u)] {
            let ratio = d / self.step;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                return Err(Error::Validation(format!(
                    "{name}={d} is not an integer multiple of the step {}",
                    self.step
                )));
            }
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::Validation(format!("duration must be nonnegative, got {}", self.duration)));
        }
        self.reference.validate()?;
        if self.x0.dim() != dims.agents * dims.n || self.xa0.dim() != dims.agents * dims.n || self.xm0.dim() != dims.n {
            return Err(Error::Validation("initial state dimensions do not match the fleet".into()));
        }
        self.leader
            .check_hurwitz()
            .map_err(|_| Error::Validation("leader matrix A_m is not Hurwitz".into()))?;

        let topology = self.topology.matrices(dims.n).map_err(|e| Error::Validation(e.to_string()))?;
        if !topology.check_balanced() {
            return Err(Error::Validation("topology is not balanced".into()));
        }
        let report = topology.check_threshold(self.topology.threshold());
        if !report.pass {
            return Err(Error::Validation(format!(
                "connectivity threshold {} violated: {report:?}",
                self.topology.threshold()
            )));
        }
        if !self.topology.leader_reachable() {
            return Err(Error::Validation("some agent has no directed path from the leader".into()));
        }

        let c = &self.controller;
        let config = ControllerConfig::new(
            &self.leader,
            dims.agents,
            c.gamma_theta.clone(),
            c.gamma_phi.clone(),
            &c.q_tilde,
            c.r_sign.clone(),
            self.tau_x,
            self.tau_u,
        )
        .map_err(|e| match e {
            Error::Validation(_) => e,
            other => Error::Validation(other.to_string()),
        })?;
        adaptive::ControllerState::from_blocks(dims, &c.theta0, &c.phi0)?;

        let matching = self.fleet.matching_gains(&self.leader).ok();
        let predictor = LeaderPredictor::new(&self.leader, self.tau_u, self.tau_x, self.step)?;
        Ok(Prepared {
            predictor,
            dims,
            topology,
            config,
            matching,
        })
    }

    /// Initial gains flattened in controller layout.
    pub fn initial_gains(&self) -> Result<Vec<f64>> {
        Ok(adaptive::ControllerState::from_blocks(self.dims(), &self.controller.theta0, &self.controller.phi0)?
            .as_slice()
            .to_vec())
    }

    /// Replaces the initial gains with the ideal ones and freezes adaptation.
    pub fn with_matched_gains(&self) -> Result<Scenario> {
        let m = self.fleet.matching_gains(&self.leader)?;
        let mut s = self.clone();
        s.controller.theta0 = m.agents.iter().map(stacked_theta).collect();
        s.controller.phi0 = m.agents.iter().map(|g| g.theta_phi.clone()).collect();
        s.controller.adapt = false;
        Ok(s)
    }
}

fn stacked_theta(g: &AgentMatchingGains) -> Mat {
    let p = g.theta_r.cols();
    let rows = g.theta_x.rows() + g.theta_zeta.rows() + g.theta_r.rows();
    Mat::from_row_major(rows, p, g.stacked()).expect("stacked gain shape")
}

/// Column layout of a [`SimTrace`] row (time excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceLayout {
    pub dims: Dims,
}

impl TraceLayout {
    fn sizes(&self) -> [usize; 12] {
        let Dims { agents: l, n, p } = self.dims;
        let q = self.dims.q();
        [
            l * n,     // x
            n,         // xm
            l * n,     // xa
            l * n,     // e
            l * n,     // ea
            l * p,     // u
            l * p,     // ua
            l * p,     // phi
            l * q * p, // theta
            l * p * p, // phi_phi
            1,         // V_d
            p,         // r
        ]
    }

    fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let sizes = self.sizes();
        let start: usize = sizes[..idx].iter().sum();
        start..start + sizes[idx]
    }

    pub fn width(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Column names, `t` first.
    pub fn header(&self) -> Vec<String> {
        let Dims { agents: l, n, p } = self.dims;
        let q = self.dims.q();
        let mut h = vec!["t".to_string()];
        let per_state = |prefix: &str, h: &mut Vec<String>| {
            for i in 1..=l {
                for j in 1..=n {
                    h.push(format!("{prefix}_{i}_{j}"));
                }
            }
        };
        let per_input = |prefix: &str, h: &mut Vec<String>| {
            for i in 1..=l {
                if p == 1 {
                    h.push(format!("{prefix}_{i}"));
                } else {
                    for k in 1..=p {
                        h.push(format!("{prefix}_{i}_{k}"));
                    }
                }
            }
        };
        per_state("x", &mut h);
        for j in 1..=n {
            h.push(format!("xm_{j}"));
        }
        per_state("xa", &mut h);
        per_state("e", &mut h);
        per_state("ea", &mut h);
        per_input("u", &mut h);
        per_input("ua", &mut h);
        per_input("phi", &mut h);
        for i in 1..=l {
            for r in 1..=q {
                if p == 1 {
                    h.push(format!("theta_{i}_{r}"));
                } else {
                    for c in 1..=p {
                        h.push(format!("theta_{i}_{r}_{c}"));
                    }
                }
            }
        }
        for i in 1..=l {
            if p == 1 {
                h.push(format!("phi_phi_{i}"));
            } else {
                for r in 1..=p {
                    for c in 1..=p {
                        h.push(format!("phi_phi_{i}_{r}_{c}"));
                    }
                }
            }
        }
        h.push("V_d".to_string());
        if p == 1 {
            h.push("r".to_string());
        } else {
            for k in 1..=p {
                h.push(format!("r_{k}"));
            }
        }
        h
    }
}

/// Time series of every closed-loop signal, one row per grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub layout: TraceLayout,
    pub tau_u: f64,
    pub times: Vec<f64>,
    /// Row-major, `layout.width()` values per row.
    pub data: Vec<f64>,
    /// Predicted leader regressor `η_m(t + τ_u | t)` per row (q values).
    pub predictions: Vec<f64>,
}

macro_rules! column_accessor {
    ($name:ident, $idx:expr) => {
        pub fn $name(&self, k: usize) -> &[f64] {
            &self.row(k)[self.layout.range($idx)]
        }
    };
}

impl SimTrace {
    pub fn new(layout: TraceLayout, tau_u: f64) -> Self {
        SimTrace {
            layout,
            tau_u,
            times: Vec::new(),
            data: Vec::new(),
            predictions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.layout.width();
        &self.data[k * w..(k + 1) * w]
    }

    column_accessor!(x, 0);
    column_accessor!(xm, 1);
    column_accessor!(xa, 2);
    column_accessor!(e, 3);
    column_accessor!(ea, 4);
    column_accessor!(u, 5);
    column_accessor!(ua, 6);
    column_accessor!(phi, 7);
    column_accessor!(theta, 8);
    column_accessor!(phi_phi, 9);
    column_accessor!(r, 11);

    pub fn v_d(&self, k: usize) -> f64 {
        self.row(k)[self.layout.range(10).start]
    }

    pub fn prediction(&self, k: usize) -> &[f64] {
        let q = self.layout.dims.q();
        &self.predictions[k * q..(k + 1) * q]
    }

    /// Actual leader regressor `[x_m(t); x_m(t − τ_x); r(t − τ_u)]` at row k,
    /// recovered from the recorded leader trajectory. Needs rows back to t − τ_u.
    pub fn leader_regressor(&self, k: usize, tau_x: f64, step: f64) -> Option<Vec<f64>> {
        let back_x = (tau_x / step).round() as usize;
        let back_u = (self.tau_u / step).round() as usize;
        if k < back_x.max(back_u) {
            return None;
        }
        let mut v = self.xm(k).to_vec();
        v.extend_from_slice(self.xm(k - back_x));
        v.extend_from_slice(self.r(k - back_u));
        Some(v)
    }

    /// ‖ē‖₂ per row.
    pub fn error_norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|k| self.e(k).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn push_row(&mut self, t: f64, row: &[f64], prediction: &[f64]) {
        debug_assert_eq!(row.len(), self.layout.width());
        self.times.push(t);
        self.data.extend_from_slice(row);
        self.predictions.extend_from_slice(prediction);
    }
}

/// Non-integral Lyapunov monitor
/// `V_d = ē_aᵀ P ē_a + tr[Θ̃ Γ_θ⁻¹ |Φ_r*⁻¹| Θ̃ᵀ] + tr[Φ̃_φ Γ_φ⁻¹ Φ̃_φᵀ]`
/// with block-diagonal `Θ̃` and `Φ̃_φ`.
#[derive(Debug, Clone)]
pub struct LyapunovMonitor {
    dims: Dims,
    p_matrix: Mat,
    ideal: Vec<f64>,
    /// p×p weight `(Γ_θ⁻¹)_ii |θ_r*ⁱ⁻¹|` per agent.
    theta_weights: Vec<Mat>,
    phi_weights: Vec<f64>,
}

impl LyapunovMonitor {
    pub fn new(cfg: &ControllerConfig, dims: Dims, matching: &MatchingGains) -> Result<Self> {
        let gi_theta = inverse(&cfg.gamma_theta)?;
        let gi_phi = inverse(&cfg.gamma_phi)?;
        let mut theta_weights = Vec::with_capacity(dims.agents);
        for (i, g) in matching.agents.iter().enumerate() {
            let singular = || Error::SingularWeight {
                agent: i + 1,
                value: g.theta_r.max_abs(),
            };
            if g.theta_r.max_abs() < 1e-12 {
                return Err(singular());
            }
            let inv = inverse(&g.theta_r).map_err(|_| singular())?;
            let abs = Mat::from_row_major(inv.rows(), inv.cols(), inv.as_slice().iter().map(|v| v.abs()).collect())?;
            theta_weights.push(abs.scale(gi_theta[(i, i)]));
        }
        let theta: Vec<Mat> = matching.agents.iter().map(stacked_theta).collect();
        let phi: Vec<Mat> = matching.agents.iter().map(|g| g.theta_phi.clone()).collect();
        let ideal = adaptive::ControllerState::from_blocks(dims, &theta, &phi)?.as_slice().to_vec();
        Ok(LyapunovMonitor {
            dims,
            p_matrix: cfg.p_matrix.clone(),
            ideal,
            theta_weights,
            phi_weights: (0..dims.agents).map(|i| gi_phi[(i, i)]).collect(),
        })
    }

    /// Ideal gains in controller layout.
    pub fn ideal_gains(&self) -> &[f64] {
        &self.ideal
    }

    pub fn value(&self, e_a: &[f64], gains: &[f64]) -> f64 {
        let err: Vec<f64> = gains.iter().zip(&self.ideal).map(|(g, s)| g - s).collect();
        let q = self.dims.q();
        let p = self.dims.p;
        let theta_len = self.dims.theta_len();
        lyapunov_monitor(
            &self.p_matrix,
            e_a,
            (0..self.dims.agents).map(|i| &err[i * q * p..(i + 1) * q * p]),
            (0..self.dims.agents).map(|i| &err[theta_len + i * p * p..theta_len + (i + 1) * p * p]),
            &self.theta_weights,
            &self.phi_weights,
            p,
        )
    }
}

/// `ē_aᵀ P ē_a + Σ_i tr[W_i Θ̃^{iᵀ}Θ̃^i] + Σ_i w_i tr[Φ̃^i Φ̃^{iᵀ}]`.
///
/// `theta_err` yields q×p row-major blocks, `phi_err` p×p blocks.
pub fn lyapunov_monitor<'a>(
    p_matrix: &Mat,
    e_a: &[f64],
    theta_err: impl Iterator<Item = &'a [f64]>,
    phi_err: impl Iterator<Item = &'a [f64]>,
    theta_weights: &[Mat],
    phi_weights: &[f64],
    p: usize,
) -> f64 {
    let pe = p_matrix.matvec_unchecked(e_a);
    let mut v: f64 = e_a.iter().zip(pe.iter()).map(|(a, b)| a * b).sum();
    for (block, w) in theta_err.zip(theta_weights) {
        let q = block.len() / p;
        // tr(W Θ̃ᵀΘ̃) = Σ_{a,b} W_ab (Θ̃ᵀΘ̃)_ba
        for a in 0..p {
            for b in 0..p {
                let gram: f64 = (0..q).map(|r| block[r * p + b] * block[r * p + a]).sum();
                v += w[(a, b)] * gram;
            }
        }
    }
    for (block, w) in phi_err.zip(phi_weights) {
        v += w * block.iter().map(|x| x * x).sum::<f64>();
    }
    v
}

/// Every signal evaluated at one instant.
struct Signals {
    e: Vector,
    e_a: Vector,
    u_a: Vector,
    phi: Vector,
    derivative: Vector,
}

struct Ids {
    x: HistoryId,
    xm: HistoryId,
    gains: HistoryId,
    u: HistoryId,
    /// Predicted `x_m(t + τ_u | t)`, its time derivative along the leader
    /// ODE, and the remaining regressor entries `[x_m(t + τ_u − τ_x | t); r(t)]`.
    pred_x: HistoryId,
    pred_x_rate: HistoryId,
    pred_rest: HistoryId,
}

struct ClosedLoop<'a> {
    scenario: &'a Scenario,
    prepared: &'a Prepared,
    reference: GridReference,
    ids: Ids,
    last_prediction: RefCell<Vector>,
}

impl ClosedLoop<'_> {
    fn dims(&self) -> Dims {
        self.prepared.dims
    }


    fn evaluate(&self, t: f64, y: &[f64], hist: &Histories) -> Result<Signals> {
        let s = self.scenario;
        let dims = self.dims();
        let (l, n) = (dims.agents, dims.n);
        let ln = l * n;
        let x = &y[..ln];
        let xm = &y[ln..ln + n];
        let xa = &y[ln + n..2 * ln + n];
        let gains = &y[2 * ln + n..];
        check_divergence(y)?;

        let delayed = |id: HistoryId, now: &[f64]| -> Result<Vector> {
            if s.tau_x == 0.0 {
                Ok(Vector::from_slice(now))
            } else {
                hist.sample(id, t - s.tau_x)
            }
        };
        let x_d = delayed(self.ids.x, x)?;
        let xm_d = delayed(self.ids.xm, xm)?;
        let r_d = self.reference.at(t - s.tau_u);

        let eta: Vec<Vector> = (0..l)
            .map(|i| regressor(&x[i * n..(i + 1) * n], &x_d[i * n..(i + 1) * n], &r_d))
            .collect::<Result<_>>()?;
        let eta_m_block = regressor(xm, &xm_d, &r_d)?;
        let eta_m = vec![eta_m_block; l];

        let (gains_d, u_d) = if s.tau_u == 0.0 {
            let g = Vector::from_slice(gains);
            let u = control_from(dims, gains, &eta_m)?;
            (g, u)
        } else {
            let past = t - s.tau_u;
            let g = hist.sample(self.ids.gains, past)?;
            let u = if past <= -s.step * (1.0 + 1e-9) {
                hist.sample(self.ids.u, past)?
            } else {
                self.applied_control(past, &g, hist)?
            };
            (g, u)
        };

        let x_dot = s.fleet.derivative(x, &x_d, &u_d)?;
        let xm_dot = s.leader.derivative(xm, &r_d)?;
        let phi = mismatch_from(dims, gains, &gains_d, &eta, &eta_m)?;
        let u_a = auxiliary_input_from(dims, gains, &phi)?;
        let xa_dot = s.leader.aux_derivative(&self.prepared.topology, xa, &u_a)?;
        let xm_bar: Vec<f64> = xm.iter().copied().cycle().take(ln).collect();
        let e = adaptive::sync_error(&self.prepared.topology, x, &xm_bar)?;
        let e_a = e.axpy(1.0, &Vector::from_slice(xa));
        let gains_dot = if s.controller.adapt {
            gain_derivatives(&self.prepared.config, &self.prepared.topology, &s.leader, &e_a, &eta, &phi)?
        } else {
            Vector::zeros(dims.gains_len())
        };

        let mut derivative = Vec::with_capacity(y.len());
        derivative.extend_from_slice(&x_dot);
        derivative.extend_from_slice(&xm_dot);
        derivative.extend_from_slice(&xa_dot);
        derivative.extend_from_slice(&gains_dot);
        Ok(Signals {
            e,
            e_a,
            u_a,
            phi,
            derivative: derivative.into(),
        })
    }

    /// The control applied at `past > −h`, `Θ(past)ᵀ η_m(past + τ_u | past)`,
    /// rebuilt from the recorded predictions. Equals the recorded `u` on grid
    /// points; between them the predicted leader state is interpolated as a
    /// cubic with the leader ODE as slope, which keeps the plant's RK4 midpoint
    /// stages consistent with the leader's.
    fn applied_control(&self, past: f64, gains: &[f64], hist: &Histories) -> Result<Vector> {
        let dims = self.dims();
        let mut eta = hist.sample_hermite(self.ids.pred_x, self.ids.pred_x_rate, past)?.into_inner();
        eta.extend_from_slice(&hist.sample(self.ids.pred_rest, past)?);
        control_from(dims, gains, &vec![Vector::from(eta); dims.agents])
    }

    /// History samples recorded at grid time `t`.
    fn grid_samples(&self, t: f64, y: &[f64]) -> Result<Vec<(HistoryId, Vector)>> {
        let n = self.dims().n;
        let (u, pred) = control_at(&self.prepared.predictor, &self.reference, self.dims(), t, y)?;
        let rate = self.scenario.leader.derivative(&pred[..n], &pred[2 * n..])?;
        let samples = vec![
            (self.ids.u, u),
            (self.ids.pred_x, pred.segment(0, n)),
            (self.ids.pred_x_rate, rate),
            (self.ids.pred_rest, pred.segment(n, pred.dim() - n)),
        ];
        *self.last_prediction.borrow_mut() = pred;
        Ok(samples)
    }
}

fn check_divergence(x: &[f64]) -> Result<()> {
    let norm = x.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) });
    if norm > DIVERGENCE_LIMIT {
        return Err(Error::DivergenceDetected { norm });
    }
    Ok(())
}

/// `u(t)` from the predicted leader regressor; returns the prediction too.
fn control_at(
    predictor: &LeaderPredictor,
    reference: &GridReference,
    dims: Dims,
    t: f64,
    y: &[f64],
) -> Result<(Vector, Vector)> {
    let ln = dims.agents * dims.n;
    let mut samples = Vec::with_capacity(predictor.horizon_samples() * dims.p);
    for j in 0..predictor.horizon_samples() {
        let v = reference.scalar(t + predictor.sample_offset(j));
        samples.extend(std::iter::repeat_n(v, dims.p));
    }
    let pred = predictor.predict(&y[ln..ln + dims.n], &samples)?;
    let u = control_from(dims, &y[2 * ln + dims.n..], &vec![pred.clone(); dims.agents])?;
    Ok((u, pred))
}

impl DelaySystem for ClosedLoop<'_> {
    fn derivative(&self, t: f64, state: &[f64], histories: &Histories) -> Result<Vector> {
        Ok(self.evaluate(t, state, histories)?.derivative)
    }

    fn derived_samples(&self, t: f64, state: &[f64], _histories: &Histories) -> Result<Vec<(HistoryId, Vector)>> {
        self.grid_samples(t, state)
    }
}

/// Integrates a scenario and records every signal at every grid step.
pub fn run_scenario(scenario: &Scenario) -> Result<SimTrace> {
    let prepared = scenario.prepare()?;
    run_prepared(scenario, &prepared)
}

pub fn run_prepared(scenario: &Scenario, prepared: &Prepared) -> Result<SimTrace> {
    let dims = prepared.dims;
    let (l, n, p) = (dims.agents, dims.n, dims.p);
    let ln = l * n;
    let gains0 = scenario.initial_gains()?;

    let mut y0 = Vec::with_capacity(2 * ln + n + gains0.len());
    y0.extend_from_slice(&scenario.x0);
    y0.extend_from_slice(&scenario.xm0);
    y0.extend_from_slice(&scenario.xa0);
    y0.extend_from_slice(&gains0);

    let mut state = DdeState::new(0.0, scenario.step, y0.into(), &[scenario.tau_x, scenario.tau_u])?;
    let x_id = state.track_state("x", 0, ln, scenario.x0.clone())?;
    let xm_id = state.track_state("xm", ln, n, scenario.xm0.clone())?;
    let gains_id = state.track_state("gains", 2 * ln + n, gains0.len(), Vector::from_slice(&gains0))?;
    let reference = GridReference {
        signal: scenario.reference,
        step: scenario.step,
        channels: p,
    };
    let (u0, pred0) = control_at(&prepared.predictor, &reference, dims, 0.0, state.state())?;
    let u_id = state.track_derived("u", u0, Vector::zeros(l * p))?;
    let pred_x0 = pred0.segment(0, n);
    // Zero prediction pre-history, consistent with the zero control pre-history.
    let pred_id = state.track_derived("pred_x", pred_x0.clone(), Vector::zeros(n))?;
    let rate0 = scenario.leader.derivative(&pred_x0, &pred0[2 * n..])?;
    let rate_id = state.track_derived("pred_x_rate", rate0, Vector::zeros(n))?;
    let rest0 = pred0.segment(n, pred0.dim() - n);
    let rest_id = state.track_derived("pred_rest", rest0, Vector::zeros(n + p))?;

    let system = ClosedLoop {
        scenario,
        prepared,
        reference,
        ids: Ids {
            x: x_id,
            xm: xm_id,
            gains: gains_id,
            u: u_id,
            pred_x: pred_id,
            pred_x_rate: rate_id,
            pred_rest: rest_id,
        },
        last_prediction: RefCell::new(pred0),
    };

    let monitor = match &prepared.matching {
        Some(m) => Some(LyapunovMonitor::new(&prepared.config, dims, m)?),
        None => None,
    };
    let layout = TraceLayout { dims };
    let mut trace = SimTrace::new(layout, scenario.tau_u);
    let steps = (scenario.duration / scenario.step).round() as usize;
    trace.times.reserve(steps + 1);
    trace.data.reserve((steps + 1) * layout.width());

    let mut record = |st: &DdeState| -> Result<()> {
        let y = st.state();
        check_divergence(y)?;
        let t = st.time();
        let sig = system.evaluate(t, y, st.histories())?;
        let u_now = st.histories().sample(u_id, t)?;
        let gains = &y[2 * ln + n..];
        let v_d = monitor.as_ref().map_or(f64::NAN, |m| m.value(&sig.e_a, gains));
        let mut row = Vec::with_capacity(layout.width());
        row.extend_from_slice(&y[..ln]);
        row.extend_from_slice(&y[ln..ln + n]);
        row.extend_from_slice(&y[ln + n..2 * ln + n]);
        row.extend_from_slice(&sig.e);
        row.extend_from_slice(&sig.e_a);
        row.extend_from_slice(&u_now);
        row.extend_from_slice(&sig.u_a);
        row.extend_from_slice(&sig.phi);
        row.extend_from_slice(gains);
        row.push(v_d);
        row.extend_from_slice(&system.reference.at(t));
        trace.push_row(t, &row, &system.last_prediction.borrow());
        Ok(())
    };

    record(&state)?;
    dde::run(&system, state, scenario.duration, &mut record)?;
    Ok(trace)
}

/// Summary statistics of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub peak_error: f64,
    pub final_mean_error: f64,
    pub settling_time: f64,
    pub final_gains: Vec<f64>,
    /// Largest positive finite-difference slope of V_d after the transient window.
    pub max_vd_slope: f64,
    /// Largest per-gain ratio of final-window range to total excursion.
    pub max_gain_range_ratio: f64,
    pub final_window: f64,
    pub transient_window: f64,
}

/// Metrics with the default windows: final 10% of the run, transient `2 τ_u`.
pub fn metrics(trace: &SimTrace) -> Result<Metrics> {
    let span = trace.times.last().copied().unwrap_or(0.0) - trace.times.first().copied().unwrap_or(0.0);
    metrics_with(trace, 0.1 * span, 2.0 * trace.tau_u)
}

pub fn metrics_with(trace: &SimTrace, final_window: f64, transient_window: f64) -> Result<Metrics> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let norms = trace.error_norms();
    let t_end = *trace.times.last().unwrap();
    let t0 = trace.times[0];
    let peak_error = norms.iter().copied().fold(0.0, f64::max);

    let window_start = t_end - final_window;
    let in_window: Vec<usize> = (0..trace.len())
        .filter(|&k| trace.times[k] >= window_start - 1e-9)
        .collect();
    let final_mean_error = in_window.iter().map(|&k| norms[k]).sum::<f64>() / in_window.len() as f64;

    let limit = SETTLING_FRACTION * peak_error;
    let settling_time = match norms.iter().rposition(|&v| v > limit) {
        None => t0,
        Some(k) if k + 1 < trace.len() => trace.times[k + 1],
        Some(_) => f64::INFINITY,
    };

    let last = trace.len() - 1;
    let mut final_gains = trace.theta(last).to_vec();
    final_gains.extend_from_slice(trace.phi_phi(last));

    let mut max_vd_slope = f64::NEG_INFINITY;
    for k in 1..trace.len() {
        if trace.times[k - 1] < t0 + transient_window - 1e-9 {
            continue;
        }
        let slope = (trace.v_d(k) - trace.v_d(k - 1)) / (trace.times[k] - trace.times[k - 1]);
        max_vd_slope = max_vd_slope.max(slope);
    }
    if max_vd_slope == f64::NEG_INFINITY {
        max_vd_slope = 0.0;
    }

    let mut max_gain_range_ratio: f64 = 0.0;
    for g in 0..final_gains.len() {
        let value = |k: usize| {
            let theta = trace.theta(k);
            if g < theta.len() {
                theta[g]
            } else {
                trace.phi_phi(k)[g - theta.len()]
            }
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut wlo, mut whi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..trace.len() {
            let v = value(k);
            lo = lo.min(v);
            hi = hi.max(v);
            if trace.times[k] >= window_start - 1e-9 {
                wlo = wlo.min(v);
                whi = whi.max(v);
            }
        }
        let excursion = hi - lo;
        if excursion > 0.0 {
            max_gain_range_ratio = max_gain_range_ratio.max((whi - wlo) / excursion);
        }
    }

    Ok(Metrics {
        peak_error,
        final_mean_error,
        settling_time,
        final_gains,
        max_vd_slope,
        max_gain_range_ratio,
        final_window,
        transient_window,
    })
}

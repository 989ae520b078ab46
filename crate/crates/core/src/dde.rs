//! Fixed-step RK4 for delay differential equations (method of steps).
//!
//! Delayed values come from [`HistoryBuffer`]s sampled on the integration
//! grid. Every delay must be an integer multiple of the step, so lookups from
//! grid-time stages land exactly on stored samples and half-step stages land
//! halfway between two samples (linear interpolation).

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Relative slack (in units of h) for grid alignment and future-query checks.
const GRID_SLACK: f64 = 1e-9;

/// Uniformly sampled signal history with constant pre-history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    sample_period: f64,
    start_time: f64,
    /// Grid index of `samples[0]`.
    first_index: u64,
    samples: VecDeque<Vector>,
    capacity: usize,
    pre_history: Vector,
}

impl HistoryBuffer {
    /// `max_delay` fixes how much history is retained: `ceil(max_delay/h) + 2` samples.
    pub fn new(sample_period: f64, start_time: f64, max_delay: f64, pre_history: Vector) -> Self {
        assert!(sample_period > 0.0, "sample period must be positive");
        let capacity = (max_delay / sample_period - GRID_SLACK).ceil().max(0.0) as usize + 2;
        HistoryBuffer {
            sample_period,
            start_time,
            first_index: 0,
            samples: VecDeque::with_capacity(capacity + 1),
            capacity,
            pre_history,
        }
    }

    pub fn dim(&self) -> usize {
        self.pre_history.dim()
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn time_of(&self, index: u64) -> f64 {
        self.start_time + index as f64 * self.sample_period
    }

    /// Time of the most recent sample, if any.
    pub fn latest_time(&self) -> Option<f64> {
        (!self.samples.is_empty()).then(|| self.time_of(self.first_index + self.samples.len() as u64 - 1))
    }

    pub fn oldest_time(&self) -> Option<f64> {
        (!self.samples.is_empty()).then(|| self.time_of(self.first_index))
    }

    /// Appends the sample for the next grid time.
    pub fn push(&mut self, value: Vector) -> Result<()> {
        if value.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "history of dimension {} got a sample of dimension {}",
                self.dim(),
                value.dim()
            )));
        }
        self.samples.push_back(value);
        if self.samples.len() > self.capacity {
            self.samples.pop_front();
            self.first_index += 1;
        }
        Ok(())
    }

    /// Value at time `t`: pre-history up to one period before the start, the
    /// stored sample on grid points, linear interpolation otherwise (the last
    /// pre-history grid point and the first sample bracket the start).
    pub fn sample(&self, t: f64) -> Result<Vector> {
        let first_pre = self.start_time - self.sample_period;
        if t <= first_pre + GRID_SLACK * self.sample_period {
            return Ok(self.pre_history.clone());
        }
        let Some(latest) = self.latest_time() else {
            return Ok(self.pre_history.clone());
        };
        if t < self.start_time - GRID_SLACK * self.sample_period {
            let frac = (t - first_pre) / self.sample_period;
            let first = self.stored(0, t)?;
            return Ok(self.pre_history.axpy(frac, &first.sub(&self.pre_history)));
        }
        if t > latest + GRID_SLACK * self.sample_period {
            return Err(Error::FutureQuery { query: t, latest });
        }
        let pos = (t - self.start_time) / self.sample_period;
        let nearest = pos.round();
        let last_index = self.first_index + self.samples.len() as u64 - 1;
        if (pos - nearest).abs() <= GRID_SLACK {
            let k = (nearest as u64).min(last_index);
            return self.stored(k, t).cloned();
        }
        let k = pos.floor() as u64;
        let frac = pos - k as f64;
        let lo = self.stored(k, t)?;
        let hi = self.stored(k + 1, t)?;
        Ok(lo.axpy(frac, &hi.sub(lo)))
    }

    /// Cubic Hermite value using `slopes`, a buffer of the time derivative
    /// on the same grid. Exact for cubics. Like [`sample`](Self::sample), the
    /// pre-history stands at the grid point one period before the start.
    pub fn sample_hermite(&self, t: f64, slopes: &HistoryBuffer) -> Result<Vector> {
        if slopes.dim() != self.dim() || slopes.start_time != self.start_time || slopes.sample_period != self.sample_period
        {
            return Err(Error::DimensionMismatch("slope history does not share the value grid".into()));
        }
        let h = self.sample_period;
        let first_pre = self.start_time - h;
        if t <= first_pre + GRID_SLACK * h {
            return Ok(self.pre_history.clone());
        }
        let latest = self.latest_time().unwrap_or(self.start_time);
        if t > latest + GRID_SLACK * h {
            return Err(Error::FutureQuery { query: t, latest });
        }
        // grid index relative to the pre-history point
        let pos = (t - first_pre) / h;
        let nearest = pos.round();
        let at = |buf: &'_ HistoryBuffer, idx: u64| -> Result<Vector> {
            if idx == 0 {
                Ok(buf.pre_history.clone())
            } else {
                buf.stored(idx - 1, t).cloned()
            }
        };
        if (pos - nearest).abs() <= GRID_SLACK {
            return at(self, nearest as u64);
        }
        let k = pos.floor() as u64;
        let s = pos - k as f64;
        let (p0, p1) = (at(self, k)?, at(self, k + 1)?);
        let (m0, m1) = (at(slopes, k)?, at(slopes, k + 1)?);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok((0..self.dim())
            .map(|i| h00 * p0[i] + h10 * h * m0[i] + h01 * p1[i] + h11 * h * m1[i])
            .collect::<Vec<_>>()
            .into())
    }

    fn stored(&self, index: u64, query: f64) -> Result<&Vector> {
        if index < self.first_index {
            return Err(Error::ExpiredQuery {
                query,
                oldest: self.time_of(self.first_index),
            });
        }
        self.samples
            .get((index - self.first_index) as usize)
            .ok_or_else(|| Error::FutureQuery {
                query,
                latest: self.latest_time().unwrap_or(self.start_time),
            })
    }
}

/// Handle to a registered history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HistoryId(usize);

#[derive(Debug, Clone, PartialEq)]
enum Source {
    /// Filled automatically from `state[start..start + len]` after every step.
    StateSlice { start: usize, len: usize },
    /// Filled by [`DelaySystem::derived_samples`].
    Derived,
}

#[derive(Debug, Clone, PartialEq)]
struct Registered {
    name: String,
    buffer: HistoryBuffer,
    source: Source,
}

/// Named collection of history buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Histories {
    entries: Vec<Registered>,
}

impl Histories {
    pub fn get(&self, id: HistoryId) -> &HistoryBuffer {
        &self.entries[id.0].buffer
    }

    pub fn sample(&self, id: HistoryId, t: f64) -> Result<Vector> {
        self.entries[id.0].buffer.sample(t)
    }

    /// Hermite sample of `id` with slopes from `slopes`.
    pub fn sample_hermite(&self, id: HistoryId, slopes: HistoryId, t: f64) -> Result<Vector> {
        self.get(id).sample_hermite(t, self.get(slopes))
    }

    pub fn id(&self, name: &str) -> Option<HistoryId> {
        self.entries.iter().position(|e| e.name == name).map(HistoryId)
    }

    pub fn by_name(&self, name: &str) -> Option<&HistoryBuffer> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A delay differential equation `ẏ(t) = f(t, y(t), history)`.
pub trait DelaySystem {
    fn derivative(&self, t: f64, state: &[f64], histories: &Histories) -> Result<Vector>;

    /// Samples for derived histories at grid time `t`, computed from the state
    /// there. Histories fed from state slices are handled by the integrator.
    fn derived_samples(
        &self,
        _t: f64,
        _state: &[f64],
        _histories: &Histories,
    ) -> Result<Vec<(HistoryId, Vector)>> {
        Ok(Vec::new())
    }
}

/// Adapter turning a closure into a [`DelaySystem`] without derived histories.
pub struct FnSystem<F>(pub F);

impl<F> DelaySystem for FnSystem<F>
where
    F: Fn(f64, &[f64], &Histories) -> Result<Vector>,
{
    fn derivative(&self, t: f64, state: &[f64], histories: &Histories) -> Result<Vector> {
        (self.0)(t, state, histories)
    }
}

/// Integration state: time, the flattened state vector and all histories.
#[derive(Debug, Clone, PartialEq)]
pub struct DdeState {
    start_time: f64,
    step: f64,
    steps_taken: u64,
    state: Vector,
    histories: Histories,
    max_delay: f64,
}

impl DdeState {
    /// Checks that every delay is a nonnegative integer multiple of `step`.
    pub fn new(start_time: f64, step: f64, state: Vector, delays: &[f64]) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Validation(format!("step must be positive, got {step}")));
        }
        for &d in delays {
            let ratio = d / step;
            if d < 0.0 || (ratio - ratio.round()).abs() > GRID_SLACK * ratio.max(1.0) {
                return Err(Error::Validation(format!(
                    "delay {d} is not an integer multiple of the step {step}"
                )));
            }
        }
        if !state.is_finite() {
            return Err(Error::NonFiniteState);
        }
        Ok(DdeState {
            start_time,
            step,
            steps_taken: 0,
            state,
            histories: Histories::default(),
            max_delay: delays.iter().copied().fold(0.0, f64::max),
        })
    }

    /// Registers a history fed from `state[start..start + len]`, seeded with
    /// the current value and using `pre_history` before the start time.
    pub fn track_state(&mut self, name: &str, start: usize, len: usize, pre_history: Vector) -> Result<HistoryId> {
        if start + len > self.state.dim() || pre_history.dim() != len {
            return Err(Error::DimensionMismatch(format!(
                "history '{name}' over state[{start}..{}] with pre-history of length {}",
                start + len,
                pre_history.dim()
            )));
        }
        let mut buffer = HistoryBuffer::new(self.step, self.time(), self.max_delay, pre_history);
        buffer.push(self.state.segment(start, len))?;
        Ok(self.register(name, buffer, Source::StateSlice { start, len }))
    }

    /// Registers a history whose samples come from [`DelaySystem::derived_samples`].
    /// `initial` is the sample at the current time.
    pub fn track_derived(&mut self, name: &str, initial: Vector, pre_history: Vector) -> Result<HistoryId> {
        let mut buffer = HistoryBuffer::new(self.step, self.time(), self.max_delay, pre_history);
        buffer.push(initial)?;
        Ok(self.register(name, buffer, Source::Derived))
    }

    fn register(&mut self, name: &str, buffer: HistoryBuffer, source: Source) -> HistoryId {
        self.histories.entries.push(Registered {
            name: name.to_string(),
            buffer,
            source,
        });
        HistoryId(self.histories.entries.len() - 1)
    }

    pub fn time(&self) -> f64 {
        self.start_time + self.steps_taken as f64 * self.step
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn state(&self) -> &Vector {
        &self.state
    }

    pub fn histories(&self) -> &Histories {
        &self.histories
    }
}

/// One classical RK4 step of size h, then history updates at t + h.
pub fn step_rk4<S: DelaySystem + ?Sized>(system: &S, s: &mut DdeState) -> Result<()> {
    let t = s.time();
    let h = s.step;
    let y = &s.state;
    let hist = &s.histories;

    let k1 = system.derivative(t, y, hist)?;
    let k2 = system.derivative(t + 0.5 * h, &y.axpy(0.5 * h, &k1), hist)?;
    let k3 = system.derivative(t + 0.5 * h, &y.axpy(0.5 * h, &k2), hist)?;
    let k4 = system.derivative(t + h, &y.axpy(h, &k3), hist)?;
    let next: Vector = y
        .iter()
        .enumerate()
        .map(|(i, yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect::<Vec<_>>()
        .into();
    if !next.is_finite() {
        return Err(Error::NonFiniteState);
    }

    s.state = next;
    s.steps_taken += 1;
    let t_next = s.time();
    for entry in &mut s.histories.entries {
        if let Source::StateSlice { start, len } = entry.source {
            entry.buffer.push(s.state.segment(start, len))?;
        }
    }
    let derived = system.derived_samples(t_next, &s.state, &s.histories)?;
    for (id, value) in derived {
        let entry = &mut s.histories.entries[id.0];
        debug_assert_eq!(entry.source, Source::Derived);
        entry.buffer.push(value)?;
    }
    Ok(())
}

/// Steps until the time reaches `t_end`, calling `observer` after every step.
pub fn run<S, O>(system: &S, mut s: DdeState, t_end: f64, mut observer: O) -> Result<DdeState>
where
    S: DelaySystem + ?Sized,
    O: FnMut(&DdeState) -> Result<()>,
{
    if t_end < s.time() {
        return Err(Error::Validation(format!(
            "end time {t_end} precedes start time {}",
            s.time()
        )));
    }
    let slack = GRID_SLACK * s.step.max(1.0);
    while s.time() < t_end - slack {
        let t = s.time();
        step_rk4(system, &mut s).map_err(|e| e.at(t))?;
        observer(&s).map_err(|e| e.at(s.time()))?;
    }
    Ok(s)
}

//! Scenario files and the built-in four-agent examples.
//!
//! Line-oriented format: `[section]` headers, `key = value` lines, `#`
//! comments. Matrices are row-major comma-separated lists whose shape follows
//! from the declared dimensions. Every key is checked; unknown or repeated
//! keys are parse errors.
//!
//! ```text
//! [leader]
//! state_dim = 2
//! input_dim = 1
//! a_m = 0, 1, -2, -3
//! b_m = 0, -2
//!
//! [agent.1]
//! a = 0, 1, -3, -2
//! a_zeta = 0, 0, 0.3, 0.15
//! b = 0, 3
//!
//! [topology]
//! agents = 1
//! follower_weights = 0
//! leader_weights = 1
//! threshold = 0.1
//!
//! [controller]
//! gamma_theta = 1
//! gamma_phi = 1
//! q_tilde = 0.2, 0, 0, 0.2
//! theta0 = 0, 0, 0, 0, 0
//! phi0 = 0
//! r_sign = -1
//!
//! [simulation]
//! tau_x = 3
//! tau_u = 5
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::harness::{ControllerSettings, ReferenceKind, ReferenceSignal, Scenario};
use crate::numerics::{Mat, Vector};
use crate::plant::{AgentDynamics, Fleet, LeaderModel};
use crate::topology::Topology;

pub const BUILTINS: [&str; 2] = ["example1", "example2"];

const DEFAULT_STEP: f64 = 0.005;
const DEFAULT_DURATION: f64 = 200.0;
const DEFAULT_THRESHOLD: f64 = 0.1;

const LEADER_KEYS: [&str; 4] = ["state_dim", "input_dim", "a_m", "b_m"];
const AGENT_KEYS: [&str; 3] = ["a", "a_zeta", "b"];
const TOPOLOGY_KEYS: [&str; 4] = ["agents", "follower_weights", "leader_weights", "threshold"];
const CONTROLLER_KEYS: [&str; 7] = ["gamma_theta", "gamma_phi", "q_tilde", "theta0", "phi0", "r_sign", "adapt"];
const SIMULATION_KEYS: [&str; 7] = ["tau_x", "tau_u", "step", "duration", "x0", "xm0", "xa0"];
const REFERENCE_KEYS: [&str; 4] = ["kind", "amplitude", "period", "offset"];

/// Raw `section.key → (value, line)` table.
#[derive(Debug, Clone, Default)]
struct Table {
    entries: BTreeMap<String, (String, usize)>,
    agents_seen: Vec<usize>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn known_key(section: &str, key: &str) -> bool {
    let keys: &[&str] = match section {
        "leader" => &LEADER_KEYS,
        "topology" => &TOPOLOGY_KEYS,
        "controller" => &CONTROLLER_KEYS,
        "simulation" => &SIMULATION_KEYS,
        "reference" => &REFERENCE_KEYS,
        s if agent_index(s).is_some() => &AGENT_KEYS,
        _ => return false,
    };
    keys.contains(&key)
}

fn agent_index(section: &str) -> Option<usize> {
    section.strip_prefix("agent.")?.parse::<usize>().ok().filter(|&i| i >= 1)
}

impl Table {
    fn parse(text: &str) -> Result<Table> {
        let mut table = Table::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(line_no, "unterminated section header"))?
                    .trim();
                let valid = matches!(name, "leader" | "topology" | "controller" | "simulation" | "reference")
                    || agent_index(name).is_some();
                if !valid {
                    return Err(parse_err(line_no, format!("unknown section [{name}]")));
                }
                if let Some(i) = agent_index(name) {
                    if table.agents_seen.contains(&i) {
                        return Err(parse_err(line_no, format!("duplicate section [{name}]")));
                    }
                    table.agents_seen.push(i);
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(line_no, format!("expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            let sec = section
                .as_deref()
                .ok_or_else(|| parse_err(line_no, format!("key '{key}' outside any section")))?;
            if !known_key(sec, key) {
                return Err(parse_err(line_no, format!("unknown key '{key}' in [{sec}]")));
            }
            let full = format!("{sec}.{key}");
            if table.entries.contains_key(&full) {
                return Err(parse_err(line_no, format!("duplicate key '{full}'")));
            }
            table.entries.insert(full, (value.trim().to_string(), line_no));
        }
        Ok(table)
    }

    /// Applies a `section.key=value` override. Line 0 marks override-sourced values.
    fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| parse_err(0, format!("override '{spec}' is not key=value")))?;
        let key = key.trim();
        let (sec, name) = key
            .rsplit_once('.')
            .ok_or_else(|| parse_err(0, format!("override key '{key}' must be section.key")))?;
        if !known_key(sec, name) {
            return Err(parse_err(0, format!("unknown override key '{key}'")));
        }
        if let Some(i) = agent_index(sec) {
            if !self.agents_seen.contains(&i) {
                self.agents_seen.push(i);
            }
        }
        self.entries.insert(key.to_string(), (value.trim().to_string(), 0));
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        self.entries.get(key)
    }

    fn required(&self, key: &str) -> Result<&(String, usize)> {
        self.raw(key).ok_or_else(|| Error::Validation(format!("missing required key '{key}'")))
    }

    fn numbers(&self, key: &str) -> Result<Option<(Vec<f64>, usize)>> {
        let Some((value, line)) = self.raw(key) else {
            return Ok(None);
        };
        let nums = value
            .split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(*line, format!("'{key}': '{s}' is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Some((nums, *line)))
    }

    fn scalar(&self, key: &str) -> Result<Option<f64>> {
        match self.numbers(key)? {
            None => Ok(None),
            Some((v, _)) if v.len() == 1 => Ok(Some(v[0])),
            Some((v, line)) => Err(parse_err(line, format!("'{key}' expects one number, got {}", v.len()))),
        }
    }

    fn required_scalar(&self, key: &str) -> Result<f64> {
        self.required(key)?;
        Ok(self.scalar(key)?.expect("checked present"))
    }

    fn count(&self, key: &str) -> Result<usize> {
        let v = self.required_scalar(key)?;
        let line = self.required(key)?.1;
        if v < 1.0 || v.fract() != 0.0 {
            return Err(parse_err(line, format!("'{key}' must be a positive integer, got {v}")));
        }
        Ok(v as usize)
    }

    fn list(&self, key: &str, len: usize) -> Result<Option<Vec<f64>>> {
        match self.numbers(key)? {
            None => Ok(None),
            Some((v, _)) if v.len() == len => Ok(Some(v)),
            Some((v, line)) => Err(parse_err(line, format!("'{key}' expects {len} values, got {}", v.len()))),
        }
    }

    fn required_list(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        self.required(key)?;
        Ok(self.list(key, len)?.expect("checked present"))
    }

    fn matrix(&self, key: &str, rows: usize, cols: usize) -> Result<Mat> {
        let v = self.required_list(key, rows * cols)?;
        Mat::from_row_major(rows, cols, v)
    }
}

/// Parses scenario text, then applies `section.key=value` overrides, and
/// checks every scenario invariant.
pub fn parse_scenario(text: &str, name: &str, overrides: &[String]) -> Result<Scenario> {
    let scenario = parse_unchecked(text, name, overrides)?;
    scenario.prepare()?;
    Ok(scenario)
}

/// Like [`parse_scenario`] but only enforces what is needed to build the
/// data types (shapes, finite numbers, nonnegative weights).
pub fn parse_unchecked(text: &str, name: &str, overrides: &[String]) -> Result<Scenario> {
    let mut table = Table::parse(text)?;
    for o in overrides {
        table.apply_override(o)?;
    }
    build(&table, name)
}

fn build(t: &Table, name: &str) -> Result<Scenario> {
    let n = t.count("leader.state_dim")?;
    let p = t.count("leader.input_dim")?;
    let l = t.count("topology.agents")?;
    let q = 2 * n + p;

    let leader = LeaderModel::new(t.matrix("leader.a_m", n, n)?, t.matrix("leader.b_m", n, p)?)?;

    let mut seen = t.agents_seen.clone();
    seen.sort_unstable();
    if seen != (1..=l).collect::<Vec<_>>() {
        return Err(Error::Validation(format!(
            "expected sections [agent.1]..[agent.{l}], found {seen:?}"
        )));
    }
    let agents = (1..=l)
        .map(|i| {
            AgentDynamics::new(
                t.matrix(&format!("agent.{i}.a"), n, n)?,
                t.matrix(&format!("agent.{i}.a_zeta"), n, n)?,
                t.matrix(&format!("agent.{i}.b"), n, p)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let fleet = Fleet::new(agents)?;

    let threshold = t.scalar("topology.threshold")?.unwrap_or(DEFAULT_THRESHOLD);
    let topology = Topology::new(
        t.matrix("topology.follower_weights", l, l)?,
        t.required_list("topology.leader_weights", l)?,
        threshold,
    )?;

    let q_tilde = match t.numbers("controller.q_tilde")? {
        Some((v, _)) if v.len() == n * n => Mat::from_row_major(n, n, v)?,
        Some((v, _)) if v.len() == l * n * l * n => Mat::from_row_major(l * n, l * n, v)?,
        Some((v, line)) => {
            return Err(parse_err(
                line,
                format!("'controller.q_tilde' expects {} or {} values, got {}", n * n, l * l * n * n, v.len()),
            ))
        }
        None => return Err(Error::Validation("missing required key 'controller.q_tilde'".into())),
    };
    let theta_flat = t.required_list("controller.theta0", l * q * p)?;
    let phi_flat = t.required_list("controller.phi0", l * p * p)?;
    let theta0 = theta_flat
        .chunks(q * p)
        .map(|c| Mat::from_row_major(q, p, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let phi0 = phi_flat
        .chunks(p * p)
        .map(|c| Mat::from_row_major(p, p, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let adapt = match t.raw("controller.adapt") {
        None => true,
        Some((v, line)) => match v.as_str() {
            "true" => true,
            "false" => false,
            _ => return Err(parse_err(*line, format!("'controller.adapt' must be true or false, got '{v}'"))),
        },
    };
    let controller = ControllerSettings {
        gamma_theta: t.matrix("controller.gamma_theta", l, l)?,
        gamma_phi: t.matrix("controller.gamma_phi", l, l)?,
        q_tilde,
        theta0,
        phi0,
        r_sign: t.required_list("controller.r_sign", l)?,
        adapt,
    };

    let kind = match t.raw("reference.kind") {
        None => ReferenceSignal::default().kind,
        Some((v, line)) => ReferenceKind::parse(v)
            .ok_or_else(|| parse_err(*line, format!("unknown reference kind '{v}' (constant, sine, square)")))?,
    };
    let defaults = ReferenceSignal::default();
    let reference = ReferenceSignal {
        kind,
        amplitude: t.scalar("reference.amplitude")?.unwrap_or(defaults.amplitude),
        period: t.scalar("reference.period")?.unwrap_or(defaults.period),
        offset: t.scalar("reference.offset")?.unwrap_or(defaults.offset),
    };

    let state = |key: &str, len: usize| -> Result<Vector> {
        Ok(t.list(key, len)?.map(Vector::from).unwrap_or_else(|| Vector::zeros(len)))
    };
    let scenario = Scenario {
        name: name.to_string(),
        fleet,
        leader,
        topology,
        controller,
        tau_x: t.required_scalar("simulation.tau_x")?,
        tau_u: t.required_scalar("simulation.tau_u")?,
        step: t.scalar("simulation.step")?.unwrap_or(DEFAULT_STEP),
        duration: t.scalar("simulation.duration")?.unwrap_or(DEFAULT_DURATION),
        reference,
        x0: state("simulation.x0", l * n)?,
        xm0: state("simulation.xm0", n)?,
        xa0: state("simulation.xa0", l * n)?,
    };
    Ok(scenario)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")
}

/// Serializes a scenario in the file format; `parse_scenario` reads it back exactly.
pub fn to_text(s: &Scenario) -> String {
    let mut out = String::new();
    let mut line = |text: String| {
        out.push_str(&text);
        out.push('\n');
    };
    line(format!("# scenario {}", s.name));
    line("[leader]".into());
    line(format!("state_dim = {}", s.leader.state_dim()));
    line(format!("input_dim = {}", s.leader.input_dim()));
    line(format!("a_m = {}", join(s.leader.a_m.as_slice())));
    line(format!("b_m = {}", join(s.leader.b_m.as_slice())));
    for (i, a) in s.fleet.agents().iter().enumerate() {
        line(String::new());
        line(format!("[agent.{}]", i + 1));
        line(format!("a = {}", join(a.a.as_slice())));
        line(format!("a_zeta = {}", join(a.a_zeta.as_slice())));
        line(format!("b = {}", join(a.b.as_slice())));
    }
    line(String::new());
    line("[topology]".into());
    line(format!("agents = {}", s.topology.num_agents()));
    line(format!("follower_weights = {}", join(s.topology.follower_weights().as_slice())));
    line(format!("leader_weights = {}", join(s.topology.leader_weights())));
    line(format!("threshold = {:?}", s.topology.threshold()));
    line(String::new());
    let c = &s.controller;
    line("[controller]".into());
    line(format!("gamma_theta = {}", join(c.gamma_theta.as_slice())));
    line(format!("gamma_phi = {}", join(c.gamma_phi.as_slice())));
    line(format!("q_tilde = {}", join(c.q_tilde.as_slice())));
    let theta: Vec<f64> = c.theta0.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let phi: Vec<f64> = c.phi0.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    line(format!("theta0 = {}", join(&theta)));
    line(format!("phi0 = {}", join(&phi)));
    line(format!("r_sign = {}", join(&c.r_sign)));
    line(format!("adapt = {}", c.adapt));
    line(String::new());
    line("[simulation]".into());
    line(format!("tau_x = {:?}", s.tau_x));
    line(format!("tau_u = {:?}", s.tau_u));
    line(format!("step = {:?}", s.step));
    line(format!("duration = {:?}", s.duration));
    line(format!("x0 = {}", join(&s.x0)));
    line(format!("xm0 = {}", join(&s.xm0)));
    line(format!("xa0 = {}", join(&s.xa0)));
    line(String::new());
    line("[reference]".into());
    line(format!("kind = {}", s.reference.kind.name()));
    line(format!("amplitude = {:?}", s.reference.amplitude));
    line(format!("period = {:?}", s.reference.period));
    line(format!("offset = {:?}", s.reference.offset));
    out
}

/// The four heterogeneous second-order agents shared by both examples.
pub fn example_fleet() -> Fleet {
    let agents = (1..=4)
        .map(|i| {
            let k = i as f64;
            AgentDynamics::new(
                Mat::from_rows(&[&[0.0, 1.0], &[-2.0 - k, -1.0 - k]]),
                Mat::from_rows(&[&[0.0, 0.0], &[(2.0 + k) / 10.0, (2.0 + k) / 20.0]]),
                Mat::column(&[0.0, 2.0 + k]),
            )
            .expect("example agent")
        })
        .collect();
    Fleet::new(agents).expect("example fleet")
}

pub fn example_leader() -> LeaderModel {
    LeaderModel::new(Mat::from_rows(&[&[0.0, 1.0], &[-2.0, -3.0]]), Mat::column(&[0.0, -2.0])).expect("example leader")
}

fn example_controller() -> ControllerSettings {
    let l = 4;
    let q = 5;
    let theta_scale = [12.5, 10.0, 7.5, 5.0];
    let phi_scale = [4.0, 3.0, 2.0, 1.0];
    ControllerSettings {
        gamma_theta: Mat::identity(l),
        gamma_phi: Mat::identity(l),
        q_tilde: Mat::identity(2).scale(0.2),
        theta0: theta_scale
            .iter()
            .map(|c| Mat::from_row_major(q, 1, vec![-0.001 * c; q]).expect("theta0"))
            .collect(),
        phi0: phi_scale
            .iter()
            .map(|c| Mat::from_row_major(1, 1, vec![-0.1 * c]).expect("phi0"))
            .collect(),
        r_sign: vec![-1.0; l],
        adapt: true,
    }
}

fn example_scenario(name: &str, topology: Topology) -> Scenario {
    Scenario {
        name: name.to_string(),
        fleet: example_fleet(),
        leader: example_leader(),
        topology,
        controller: example_controller(),
        tau_x: 3.0,
        tau_u: 5.0,
        step: DEFAULT_STEP,
        duration: DEFAULT_DURATION,
        reference: ReferenceSignal::default(),
        x0: Vector::zeros(8),
        xm0: Vector::zeros(2),
        xa0: Vector::zeros(8),
    }
}

/// Built-in scenario by name, before overrides.
pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "example1" => Some(example_scenario(name, Topology::star(4, DEFAULT_THRESHOLD).expect("star"))),
        "example2" => Some(example_scenario(
            name,
            Topology::ring(4, 0.3, 0.4, DEFAULT_THRESHOLD).expect("ring"),
        )),
        _ => None,
    }
}

/// Resolves a built-in name or reads a scenario file, applies overrides and
/// checks every scenario invariant.
pub fn load(source: &str, overrides: &[String]) -> Result<Scenario> {
    let scenario = load_unchecked(source, overrides)?;
    scenario.prepare()?;
    Ok(scenario)
}

/// [`load`] without the scenario invariant checks.
pub fn load_unchecked(source: &str, overrides: &[String]) -> Result<Scenario> {
    if let Some(s) = builtin(source) {
        if overrides.is_empty() {
            return Ok(s);
        }
        return parse_unchecked(&to_text(&s), source, overrides);
    }
    let text = std::fs::read_to_string(source).map_err(|e| Error::Io(format!("{source}: {e}")))?;
    let name = std::path::Path::new(source)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(source);
    parse_unchecked(&text, name, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_round_trip_through_text() {
        for name in BUILTINS {
            let s = builtin(name).unwrap();
            let parsed = parse_scenario(&to_text(&s), name, &[]).unwrap();
            assert_eq!(parsed, s);
        }
    }

    #[test]
    fn example1_data() {
        let s = builtin("example1").unwrap();
        assert_eq!((s.tau_x, s.tau_u), (3.0, 5.0));
        let topo = s.topology.matrices(2).unwrap();
        assert_eq!(topo.laplacian_like, Mat::identity(4));
        assert_eq!(topo.leader_diag, Mat::identity(4));
        assert_eq!(s.controller.gamma_theta, Mat::identity(4));
        assert_eq!(s.controller.theta0[0].as_slice(), &[-0.0125; 5]);
        assert_eq!(s.controller.theta0[3].as_slice(), &[-0.005; 5]);
        assert_eq!(s.controller.phi0[1].as_slice(), &[-0.30000000000000004]);
    }

    #[test]
    fn example2_data() {
        let s = builtin("example2").unwrap();
        let topo = s.topology.matrices(2).unwrap();
        assert_eq!(topo.leader_diag, Mat::identity(4).scale(0.4));
        assert_eq!(topo.laplacian_like[(0, 1)], -0.3);
        assert_eq!(topo.laplacian_like[(0, 3)], -0.3);
        assert_eq!(topo.laplacian_like[(0, 2)], 0.0);
    }

    #[test]
    fn inverted_delays_rejected() {
        let err = load("example1", &["simulation.tau_x=6".into()]).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("tau_x <= tau_u"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_apply() {
        let s = load(
            "example1",
            &["simulation.duration=0".into(), "reference.kind=sine".into()],
        )
        .unwrap();
        assert_eq!(s.duration, 0.0);
        assert_eq!(s.reference.kind, ReferenceKind::Sine);
    }

    #[test]
    fn misspelled_key_fails_with_line() {
        let text = to_text(&builtin("example1").unwrap()).replace("tau_u =", "tau_uu =");
        let line = text.lines().position(|l| l.starts_with("tau_uu")).unwrap() + 1;
        assert_eq!(
            parse_scenario(&text, "x", &[]).unwrap_err(),
            Error::Parse {
                line,
                message: "unknown key 'tau_uu' in [simulation]".into()
            }
        );
    }

    #[test]
    fn misspelled_override_fails() {
        assert!(matches!(
            load("example1", &["simulation.durration=1".into()]),
            Err(Error::Parse { line: 0, .. })
        ));
    }

    #[test]
    fn parse_errors() {
        let cases = [
            ("[leader\n", 1),
            ("[nope]\n", 1),
            ("state_dim = 2\n", 1),
            ("[leader]\nstate_dim 2\n", 2),
            ("[leader]\nstate_dim = 2\nstate_dim = 3\n", 3),
            ("[agent.1]\n[agent.1]\n", 2),
        ];
        for (text, line) in cases {
            match parse_scenario(text, "x", &[]) {
                Err(Error::Parse { line: got, .. }) => assert_eq!(got, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let text = to_text(&builtin("example1").unwrap()).replace("step = 0.005", "step = fast");
        let line = text.lines().position(|l| l.starts_with("step =")).unwrap() + 1;
        assert!(matches!(parse_scenario(&text, "x", &[]), Err(Error::Parse { line: l, .. }) if l == line));
    }

    #[test]
    fn missing_agent_section() {
        let s = builtin("example1").unwrap();
        let text = to_text(&s);
        let cut = text.find("[agent.4]").unwrap();
        let end = text.find("[topology]").unwrap();
        let text = format!("{}{}", &text[..cut], &text[end..]);
        assert!(matches!(parse_scenario(&text, "x", &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn unbalanced_file_is_validation_error() {
        assert!(matches!(
            load("example1", &["topology.leader_weights=1, 1, 1, 0.5".into()]),
            Err(Error::Validation(_))
        ));
    }
}

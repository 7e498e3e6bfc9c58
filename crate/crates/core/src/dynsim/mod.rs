//! Fixed-step RMS-phasor simulation of the study system.
//!
//! Each machine is a two-axis model with algebraic stator, driven by an
//! IEEEG3 governor and a SEXS exciter. The network (lines, transformers and
//! constant-impedance loads) is Kron-reduced onto the machine terminal buses
//! and re-reduced whenever a load is switched.

mod avr;
mod governor;
mod network;
mod trace;

pub use avr::{avr_step, AvrState};
pub use governor::{governor_step, GovernorState};
pub use network::network_solve;
pub use trace::{Grid, Trace, TraceError};
pub(crate) use trace::{read_two_columns, uniform_grid};

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::model::{
    compute_setpoints, network_admittance, MachinePoint, MachineUnit, ModelError, OperatingPoint,
    SetpointError, SystemModel,
};
use crate::params::ParameterVector;
use network::ReducedNetwork;

type C64 = Complex<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Setpoint(#[from] SetpointError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid channel `{0}`")]
    InvalidChannel(String),
    #[error("numerical instability at t = {time:.4} s (non-finite state); reduce dt or check parameters")]
    NumericalInstability { time: f64 },
    #[error("network admittance matrix is singular")]
    SingularNetwork,
    #[error("unknown load `{0}`")]
    UnknownLoad(String),
    #[error("operating point does not belong to this model: {0}")]
    OperatingPointMismatch(String),
}

/// Recordable quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantity {
    /// Mechanical rotor speed, rad/s.
    #[serde(rename = "omega_m")]
    OmegaM,
    /// Electrical angular frequency `n_p/2 * omega_m`, rad/s.
    #[serde(rename = "omega_e")]
    OmegaE,
    /// Electrical active power at the terminal, MW.
    #[serde(rename = "p_e")]
    Pe,
    /// Mechanical power, p.u. on the machine rating.
    #[serde(rename = "p_m")]
    Pm,
    /// Mechanical torque, p.u. on the machine rating.
    #[serde(rename = "t_m")]
    Tm,
    /// Air-gap torque, p.u. on the machine rating.
    #[serde(rename = "t_e")]
    Te,
    /// Voltage magnitude, p.u.
    #[serde(rename = "v_rms")]
    VRms,
    /// Field voltage, p.u.
    #[serde(rename = "e_fd")]
    Efd,
}

impl Quantity {
    pub const ALL: [Quantity; 8] = [
        Quantity::OmegaM,
        Quantity::OmegaE,
        Quantity::Pe,
        Quantity::Pm,
        Quantity::Tm,
        Quantity::Te,
        Quantity::VRms,
        Quantity::Efd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::OmegaM => "omega_m",
            Quantity::OmegaE => "omega_e",
            Quantity::Pe => "p_e",
            Quantity::Pm => "p_m",
            Quantity::Tm => "t_m",
            Quantity::Te => "t_e",
            Quantity::VRms => "v_rms",
            Quantity::Efd => "e_fd",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Quantity::OmegaM | Quantity::OmegaE => "rad/s",
            Quantity::Pe => "MW",
            _ => "p.u.",
        }
    }
}

impl FromStr for Quantity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Quantity::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| format!("unknown quantity `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Element {
    Machine(String),
    Bus(u32),
}

/// A recorded signal, written `SM1.omega_m` or `bus6.v_rms`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChannelSpec {
    pub element: Element,
    pub quantity: Quantity,
}

impl ChannelSpec {
    pub fn machine(name: &str, quantity: Quantity) -> Self {
        Self {
            element: Element::Machine(name.to_string()),
            quantity,
        }
    }

    pub fn bus(id: u32) -> Self {
        Self {
            element: Element::Bus(id),
            quantity: Quantity::VRms,
        }
    }

    pub fn unit(&self) -> &'static str {
        self.quantity.unit()
    }

    /// Checks that the element exists and carries this quantity.
    pub fn check(&self, model: &SystemModel) -> Result<(), SimError> {
        match &self.element {
            Element::Machine(name) => {
                model
                    .machine_index(name)
                    .map_err(|_| SimError::InvalidChannel(self.to_string()))?;
            }
            Element::Bus(id) => {
                if model.bus_index(*id).is_none() || self.quantity != Quantity::VRms {
                    return Err(SimError::InvalidChannel(self.to_string()));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.element {
            Element::Machine(m) => write!(f, "{m}.{}", self.quantity.name()),
            Element::Bus(b) => write!(f, "bus{b}.{}", self.quantity.name()),
        }
    }
}

impl FromStr for ChannelSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (elem, q) = s
            .rsplit_once('.')
            .ok_or_else(|| format!("expected `<element>.<quantity>`, got `{s}`"))?;
        let quantity: Quantity = q.parse()?;
        let element = match elem.strip_prefix("bus").map(str::parse::<u32>) {
            Some(Ok(id)) => Element::Bus(id),
            _ if elem.is_empty() => return Err(format!("missing element in `{s}`")),
            _ => Element::Machine(elem.to_string()),
        };
        Ok(Self { element, quantity })
    }
}

impl TryFrom<String> for ChannelSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ChannelSpec> for String {
    fn from(c: ChannelSpec) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    /// Explicit trapezoidal rule.
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefTarget {
    PRef,
    VRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    EnergizeLoad { load: String },
    TripLoad { load: String },
    SetReference { machine: String, target: RefTarget, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub action: Action,
}

fn default_t_end() -> f64 {
    20.0
}

fn default_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub events: Vec<Event>,
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub integrator: Integrator,
    /// Holds `P_m` and `E_fd` at their initial values.
    #[serde(default)]
    pub freeze_controllers: bool,
}

impl Scenario {
    /// Quiescent run with no events.
    pub fn steady(channels: Vec<ChannelSpec>) -> Self {
        Self {
            t_end: default_t_end(),
            dt: default_dt(),
            events: Vec::new(),
            channels,
            integrator: Integrator::default(),
            freeze_controllers: false,
        }
    }

    /// One energization event per switched load block, at its configured time.
    pub fn load_energization(model: &SystemModel, channels: Vec<ChannelSpec>) -> Self {
        let events = model
            .loads
            .iter()
            .filter_map(|l| {
                l.energize_time.map(|t| Event {
                    time: t,
                    action: Action::EnergizeLoad { load: l.name.clone() },
                })
            })
            .collect();
        Self {
            events,
            ..Self::steady(channels)
        }
    }

    pub fn with_grid(mut self, t_end: f64, dt: f64) -> Self {
        self.t_end = t_end;
        self.dt = dt;
        self
    }

    /// Number of recorded samples.
    pub fn sample_count(&self) -> usize {
        (self.t_end / self.dt + 1e-9).floor() as usize + 1
    }

    pub fn validate(&self, model: &SystemModel) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return bad(format!("t_end must be at least dt, got {}", self.t_end));
        }
        if self.channels.is_empty() {
            return bad("no channels to record".into());
        }
        for ch in &self.channels {
            ch.check(model)?;
        }
        for ev in &self.events {
            if !(ev.time >= 0.0 && ev.time <= self.t_end) {
                return bad(format!("event time {} outside [0, {}]", ev.time, self.t_end));
            }
            match &ev.action {
                Action::EnergizeLoad { load } | Action::TripLoad { load } => {
                    if !model.loads.iter().any(|l| &l.name == load) {
                        return Err(SimError::UnknownLoad(load.clone()));
                    }
                }
                Action::SetReference { machine, .. } => {
                    model.machine_index(machine)?;
                }
            }
        }
        Ok(())
    }
}

const NS: usize = 10;

/// Per-machine constants used in the derivative evaluation.
#[derive(Debug, Clone)]
struct Unit {
    bus: usize,
    omega_b: f64,
    omega_m_nom: f64,
    pole_count: f64,
    h: f64,
    d: f64,
    r: f64,
    x_d: f64,
    x_dp: f64,
    x_q: f64,
    x_qp: f64,
    t_d0p: f64,
    t_q0p: f64,
    ratio: f64,
    gov: crate::model::GovernorIeeeg3,
    avr: crate::model::AvrSexs,
    p_ref: f64,
    v_ref: f64,
}

impl Unit {
    fn new(m: &MachineUnit, model: &SystemModel, p_ref: f64, v_ref: f64) -> Self {
        let e = &m.electrical;
        Self {
            bus: model.bus_index(m.bus).expect("validated"),
            omega_b: std::f64::consts::TAU * model.base_freq,
            omega_m_nom: m.omega_m_nominal(model.base_freq),
            pole_count: m.pole_count as f64,
            h: m.h,
            d: m.d,
            r: e.r_a,
            x_d: e.x_d,
            x_dp: e.x_dp,
            x_q: e.x_q,
            x_qp: e.x_qp,
            t_d0p: e.t_d0p,
            t_q0p: e.t_q0p,
            ratio: m.rating_ratio(model.base_mva),
            gov: m.governor.clone(),
            avr: m.avr.clone(),
            p_ref,
            v_ref,
        }
    }

    fn initial_state(&self, pt: &MachinePoint) -> [f64; NS] {
        let g = GovernorState::equilibrium(&self.gov, pt.p_mss).to_array();
        let a = AvrState::equilibrium(&self.avr, pt.e_fdss);
        [
            pt.delta, 1.0, pt.e_qp, pt.e_dp, g[0], g[1], g[2], g[3], a.lead_lag, a.e_fd,
        ]
    }
}

/// Algebraic quantities of one machine at one instant.
#[derive(Debug, Clone, Copy, Default)]
struct Algebraic {
    v_t: C64,
    p_e: f64,
    t_e: f64,
    p_m: f64,
    e_fd: f64,
}

struct System {
    units: Vec<Unit>,
    net: ReducedNetwork,
    freeze: bool,
    held: Vec<(f64, f64)>,
}

impl System {
    /// Evaluates `dx/dt` into `dx` and returns the terminal-side algebraic
    /// quantities.
    fn eval(&self, x: &[f64], dx: &mut [f64], alg: &mut [Algebraic]) -> Result<(), SimError> {
        let m = self.units.len();
        let mut a = self.net.y_real.clone();
        let mut rhs = DVector::zeros(2 * m);
        let mut zinv = Vec::with_capacity(m);
        for (k, u) in self.units.iter().enumerate() {
            let s = &x[k * NS..(k + 1) * NS];
            let (sd, cd) = s[0].sin_cos();
            let t = [[sd, -cd], [cd, sd]];
            let det = u.r * u.r + u.x_dp * u.x_qp;
            let zi = [[u.r / det, u.x_qp / det], [-u.x_dp / det, u.r / det]];
            // M = T^T Zinv T, rhs = T^T Zinv E'
            let mut tz = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    tz[i][j] = t[0][i] * zi[0][j] + t[1][i] * zi[1][j];
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    a[(2 * k + i, 2 * k + j)] += tz[i][0] * t[0][j] + tz[i][1] * t[1][j];
                }
                rhs[2 * k + i] = tz[i][0] * s[3] + tz[i][1] * s[2];
            }
            zinv.push((t, zi));
        }
        let v = a.lu().solve(&rhs).ok_or(SimError::SingularNetwork)?;

        for (k, u) in self.units.iter().enumerate() {
            let s = &x[k * NS..(k + 1) * NS];
            let d = &mut dx[k * NS..(k + 1) * NS];
            let (t, zi) = zinv[k];
            let (vr, vi) = (v[2 * k], v[2 * k + 1]);
            let v_d = t[0][0] * vr + t[0][1] * vi;
            let v_q = t[1][0] * vr + t[1][1] * vi;
            let (ed, eq) = (s[3] - v_d, s[2] - v_q);
            let i_d = zi[0][0] * ed + zi[0][1] * eq;
            let i_q = zi[1][0] * ed + zi[1][1] * eq;
            let t_e = s[3] * i_d + s[2] * i_q + (u.x_qp - u.x_dp) * i_d * i_q;
            let p_e = v_d * i_d + v_q * i_q;
            let v_mag = vr.hypot(vi);
            let omega = s[1];

            let gov = GovernorState::from_slice(&s[4..8]);
            let avr = AvrState {
                lead_lag: s[8],
                e_fd: s[9],
            };
            let (p_m, e_fd) = if self.freeze {
                self.held[k]
            } else {
                (gov.output(&u.gov), avr.output(&u.avr))
            };
            let t_m = p_m * u.ratio / omega;

            d[0] = u.omega_b * (omega - 1.0);
            d[1] = (t_m - t_e - u.d * (omega - 1.0)) / (2.0 * u.h);
            d[2] = (e_fd - s[2] - (u.x_d - u.x_dp) * i_d) / u.t_d0p;
            d[3] = (-s[3] + (u.x_q - u.x_qp) * i_q) / u.t_q0p;
            if self.freeze {
                d[4..10].iter_mut().for_each(|v| *v = 0.0);
            } else {
                let dg = gov.derivatives(&u.gov, u.p_ref, omega - 1.0).to_array();
                d[4..8].copy_from_slice(&dg);
                let da = avr.derivatives(&u.avr, u.v_ref, v_mag);
                d[8] = da.lead_lag;
                d[9] = da.e_fd;
            }
            alg[k] = Algebraic {
                v_t: C64::new(vr, vi),
                p_e,
                t_e,
                p_m,
                e_fd,
            };
        }
        Ok(())
    }

    fn clamp(&self, x: &mut [f64]) {
        for (k, u) in self.units.iter().enumerate() {
            let s = &mut x[k * NS..(k + 1) * NS];
            let mut g = GovernorState::from_slice(&s[4..8]);
            g.clamp(&u.gov);
            s[4..8].copy_from_slice(&g.to_array());
            s[9] = s[9].clamp(u.avr.e_min, u.avr.e_max);
        }
    }
}

/// Prepared simulation: model with overrides applied, initial state and
/// controller setpoints.
struct Prepared {
    model: SystemModel,
    system: System,
    x0: Vec<f64>,
    y_base: DMatrix<C64>,
    load_y: Vec<C64>,
    load_bus: Vec<usize>,
    active: Vec<bool>,
    gen_bus: Vec<usize>,
}

fn assemble(y_base: &DMatrix<C64>, load_y: &[C64], load_bus: &[usize], active: &[bool]) -> DMatrix<C64> {
    let mut y = y_base.clone();
    for ((&yl, &b), &on) in load_y.iter().zip(load_bus).zip(active) {
        if on {
            y[(b, b)] += yl;
        }
    }
    y
}

fn prepare(
    model: &SystemModel,
    op: &OperatingPoint,
    overrides: &ParameterVector,
    freeze: bool,
) -> Result<Prepared, SimError> {
    let mut model = model.clone();
    overrides.apply(&mut model)?;
    model.validate()?;
    if op.machines.len() != model.machines.len()
        || op.bus_ids.len() != model.buses.len()
        || op.load_admittances.len() != model.loads.len()
        || op.bus_ids.iter().zip(&model.buses).any(|(a, b)| *a != b.id)
    {
        return Err(SimError::OperatingPointMismatch(
            "element counts or bus ids differ".into(),
        ));
    }

    let mut units = Vec::with_capacity(model.machines.len());
    let mut x0 = Vec::with_capacity(NS * model.machines.len());
    let mut held = Vec::new();
    for (m, lf) in model.machines.iter().zip(&op.machines) {
        let pt = MachinePoint::solve(m, model.base_mva, lf.v_t, C64::new(lf.p, lf.q));
        let sp = compute_setpoints(&pt, &m.governor, &m.avr)?;
        let p_ref = m.governor.p_ref.unwrap_or(sp.p_ref);
        let v_ref = m.avr.v_ref.unwrap_or(sp.v_ref);
        let u = Unit::new(m, &model, p_ref, v_ref);
        x0.extend_from_slice(&u.initial_state(&pt));
        held.push((pt.p_mss, pt.e_fdss));
        units.push(u);
    }

    let y_base = network_admittance(&model);
    let load_bus: Vec<usize> = model
        .loads
        .iter()
        .map(|l| model.bus_index(l.bus).expect("validated"))
        .collect();
    let active: Vec<bool> = model.loads.iter().map(|l| !l.is_switched()).collect();
    let gen_bus: Vec<usize> = units.iter().map(|u| u.bus).collect();
    let y = assemble(&y_base, &op.load_admittances, &load_bus, &active);
    let net = ReducedNetwork::new(&y, &gen_bus)?;
    let system = System {
        units,
        net,
        freeze,
        held,
    };

    let mut dx = vec![0.0; x0.len()];
    let mut alg = vec![Algebraic::default(); system.units.len()];
    system.eval(&x0, &mut dx, &mut alg)?;
    let worst = alg
        .iter()
        .zip(&op.machines)
        .map(|(a, m)| (a.v_t - m.v_t).norm())
        .fold(0.0, f64::max);
    if !(worst < 1e-6) {
        return Err(SimError::OperatingPointMismatch(format!(
            "terminal voltages differ from the load flow by {worst:.3e} p.u."
        )));
    }

    Ok(Prepared {
        model,
        system,
        x0,
        y_base,
        load_y: op.load_admittances.clone(),
        load_bus,
        active,
        gen_bus,
    })
}

/// Largest absolute state derivative at the initial state, after overrides
/// and setpoint computation.
pub fn equilibrium_residual(
    model: &SystemModel,
    op: &OperatingPoint,
    overrides: &ParameterVector,
) -> Result<f64, SimError> {
    let p = prepare(model, op, overrides, false)?;
    let mut dx = vec![0.0; p.x0.len()];
    let mut alg = vec![Algebraic::default(); p.system.units.len()];
    p.system.eval(&p.x0, &mut dx, &mut alg)?;
    Ok(dx.iter().fold(0.0, |a: f64, v| a.max(v.abs())))
}

enum Recorder {
    Machine(usize, Quantity),
    Bus(usize),
}

/// Runs `scenario` from the equilibrium at `op` with `overrides` applied and
/// returns one trace per recorded channel.
pub fn simulate(
    model: &SystemModel,
    op: &OperatingPoint,
    overrides: &ParameterVector,
    scenario: &Scenario,
) -> Result<Vec<Trace>, SimError> {
    scenario.validate(model)?;
    let mut p = prepare(model, op, overrides, scenario.freeze_controllers)?;
    let n_samples = scenario.sample_count();
    let dt = scenario.dt;

    let recorders: Vec<Recorder> = scenario
        .channels
        .iter()
        .map(|c| match &c.element {
            Element::Machine(name) => {
                Recorder::Machine(p.model.machine_index(name).expect("checked"), c.quantity)
            }
            Element::Bus(id) => Recorder::Bus(p.model.bus_index(*id).expect("checked")),
        })
        .collect();
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); recorders.len()];

    let mut events: Vec<(usize, &Action)> = scenario
        .events
        .iter()
        .map(|e| ((e.time / dt).round() as usize, &e.action))
        .collect();
    events.sort_by_key(|e| e.0);
    let mut next_event = 0;

    let n = p.x0.len();
    let m = p.system.units.len();
    let mut x = p.x0.clone();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut alg = vec![Algebraic::default(); m];
    let mut scratch = vec![Algebraic::default(); m];
    let mut terminal = vec![C64::new(0.0, 0.0); m];

    for step in 0..n_samples {
        let t = step as f64 * dt;
        let mut network_changed = false;
        while next_event < events.len() && events[next_event].0 <= step {
            match events[next_event].1 {
                Action::EnergizeLoad { load } | Action::TripLoad { load } => {
                    let li = p
                        .model
                        .loads
                        .iter()
                        .position(|l| &l.name == load)
                        .ok_or_else(|| SimError::UnknownLoad(load.clone()))?;
                    p.active[li] = matches!(events[next_event].1, Action::EnergizeLoad { .. });
                    network_changed = true;
                }
                Action::SetReference {
                    machine,
                    target,
                    value,
                } => {
                    let mi = p.model.machine_index(machine)?;
                    match target {
                        RefTarget::PRef => p.system.units[mi].p_ref = *value,
                        RefTarget::VRef => p.system.units[mi].v_ref = *value,
                    }
                }
            }
            next_event += 1;
        }
        if network_changed {
            let y = assemble(&p.y_base, &p.load_y, &p.load_bus, &p.active);
            p.system.net = ReducedNetwork::new(&y, &p.gen_bus)?;
        }

        let sys = &p.system;
        sys.eval(&x, &mut k1, &mut alg)?;
        for (k, a) in alg.iter().enumerate() {
            terminal[k] = a.v_t;
        }
        for (rec, buf) in recorders.iter().zip(out.iter_mut()) {
            let v = match *rec {
                Recorder::Bus(b) => sys.net.bus_voltage(b, &terminal).norm(),
                Recorder::Machine(k, q) => {
                    let u = &sys.units[k];
                    let a = &alg[k];
                    let omega = x[k * NS + 1];
                    let omega_m = omega * u.omega_m_nom;
                    match q {
                        Quantity::OmegaM => omega_m,
                        Quantity::OmegaE => 0.5 * u.pole_count * omega_m,
                        Quantity::Pe => a.p_e * p.model.base_mva,
                        Quantity::Pm => a.p_m,
                        Quantity::Tm => a.p_m / omega,
                        Quantity::Te => a.t_e / u.ratio,
                        Quantity::VRms => a.v_t.norm(),
                        Quantity::Efd => a.e_fd,
                    }
                }
            };
            if !v.is_finite() {
                return Err(SimError::NumericalInstability { time: t });
            }
            buf.push(v);
        }
        if step + 1 == n_samples {
            break;
        }

        match scenario.integrator {
            Integrator::Rk4 => {
                stage(&x, &k1, 0.5 * dt, &mut tmp, sys);
                sys.eval(&tmp, &mut k2, &mut scratch)?;
                stage(&x, &k2, 0.5 * dt, &mut tmp, sys);
                sys.eval(&tmp, &mut k3, &mut scratch)?;
                stage(&x, &k3, dt, &mut tmp, sys);
                sys.eval(&tmp, &mut k4, &mut scratch)?;
                for i in 0..n {
                    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            Integrator::Heun => {
                stage(&x, &k1, dt, &mut tmp, sys);
                sys.eval(&tmp, &mut k2, &mut scratch)?;
                for i in 0..n {
                    x[i] += 0.5 * dt * (k1[i] + k2[i]);
                }
            }
        }
        sys.clamp(&mut x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NumericalInstability { time: t + dt });
        }
    }

    Ok(scenario
        .channels
        .iter()
        .zip(out)
        .map(|(c, samples)| Trace {
            channel: c.clone(),
            unit: c.unit().to_string(),
            t0: 0.0,
            dt,
            samples,
        })
        .collect())
}

fn stage(x: &[f64], k: &[f64], h: f64, out: &mut [f64], sys: &System) {
    for i in 0..x.len() {
        out[i] = x[i] + h * k[i];
    }
    sys.clamp(out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ieee9_preset, init_load_flow};

    fn sm1(q: Quantity) -> ChannelSpec {
        ChannelSpec::machine("SM1", q)
    }

    #[test]
    fn channel_spec_round_trips_as_string() {
        for s in ["SM1.omega_m", "bus6.v_rms", "SM3.e_fd"] {
            let c: ChannelSpec = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{s}\""));
        }
        assert!("SM1.speed".parse::<ChannelSpec>().is_err());
        assert!("omega_m".parse::<ChannelSpec>().is_err());
    }

    #[test]
    fn bus_channel_only_records_voltage() {
        let m = ieee9_preset();
        let bad = ChannelSpec {
            element: Element::Bus(6),
            quantity: Quantity::Pe,
        };
        assert!(matches!(bad.check(&m), Err(SimError::InvalidChannel(_))));
        assert!(ChannelSpec::bus(6).check(&m).is_ok());
        assert!(ChannelSpec::bus(42).check(&m).is_err());
        assert!(ChannelSpec::machine("SM9", Quantity::Pe).check(&m).is_err());
    }

    #[test]
    fn scenario_validation() {
        let m = ieee9_preset();
        let ok = Scenario::load_energization(&m, vec![sm1(Quantity::OmegaM)]);
        assert!(ok.validate(&m).is_ok());
        assert_eq!(ok.sample_count(), 20001);
        assert!(ok.clone().with_grid(20.0, 0.0).validate(&m).is_err());
        assert!(ok.clone().with_grid(1e-4, 1e-3).validate(&m).is_err());
        let mut late = ok.clone();
        late.events[0].time = 30.0;
        assert!(late.validate(&m).is_err());
        let mut unknown = ok;
        unknown.events[0].action = Action::EnergizeLoad { load: "nope".into() };
        assert!(matches!(unknown.validate(&m), Err(SimError::UnknownLoad(_))));
    }

    #[test]
    fn initial_state_is_an_equilibrium() {
        let m = ieee9_preset();
        let op = init_load_flow(&m).unwrap();
        let r = equilibrium_residual(&m, &op, &ParameterVector::empty()).unwrap();
        assert!(r < 1e-8, "residual {r}");
    }

    #[test]
    fn overrides_keep_equilibrium() {
        let m = ieee9_preset();
        let op = init_load_flow(&m).unwrap();
        let p = ParameterVector::from_model(&m, &["SM1.gov.K_t", "SM1.avr.K", "SM1.X_dp"]).unwrap();
        let p = p.with_values(&[1.3, 25.0, 0.07]).unwrap();
        let r = equilibrium_residual(&m, &op, &p).unwrap();
        assert!(r < 1e-8, "residual {r}");
    }

    #[test]
    fn foreign_operating_point_is_rejected() {
        let m = ieee9_preset();
        let mut op = init_load_flow(&m).unwrap();
        op.machines[1].v_t *= 1.05;
        let err = equilibrium_residual(&m, &op, &ParameterVector::empty()).unwrap_err();
        assert!(matches!(err, SimError::OperatingPointMismatch(_)));
    }

    #[test]
    fn electrical_frequency_and_torque_identities_hold() {
        let m = ieee9_preset();
        let op = init_load_flow(&m).unwrap();
        let sc = Scenario::load_energization(
            &m,
            vec![sm1(Quantity::OmegaM), sm1(Quantity::OmegaE), sm1(Quantity::Pm), sm1(Quantity::Tm)],
        )
        .with_grid(3.0, 5e-3);
        let tr = simulate(&m, &op, &ParameterVector::empty(), &sc).unwrap();
        let n_p = m.machines[0].pole_count as f64;
        let w0 = m.machines[0].omega_m_nominal(m.base_freq);
        for i in 0..tr[0].len() {
            assert_eq!(tr[1].samples[i], 0.5 * n_p * tr[0].samples[i]);
            let omega_pu = tr[0].samples[i] / w0;
            let p = tr[3].samples[i] * omega_pu;
            assert!((p - tr[2].samples[i]).abs() <= 1e-14 * tr[2].samples[i].abs());
        }
    }
}

//! Study-system data model.
//!
//! Network quantities (branch impedances, machine reactances, inertia and
//! damping) are per-unit on the system MVA base. Governor power quantities
//! (gate, `P_ref`, `P_m`) are per-unit on the machine MVA rating, which is the
//! usual convention for turbine-governor data.

mod config;
mod loadflow;
mod preset;
mod setpoints;

pub use loadflow::{
    init_load_flow, init_load_flow_with, network_admittance, LoadFlowError, LoadFlowOptions,
    MachinePoint, OperatingPoint,
};
pub use preset::{ieee9_preset, ieeeg3_reference, sexs_reference, IEEE9_SWITCH_TIME};
pub use setpoints::{compute_setpoints, SetpointError, Setpoints};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown parameter path `{0}`")]
    UnknownParameter(String),
    #[error("unknown machine `{0}`")]
    UnknownMachine(String),
    #[error("failed to parse system config: {0}")]
    Parse(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub name: String,
    /// MVA
    pub base_mva: f64,
    /// Hz
    pub base_freq: f64,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub transformers: Vec<Transformer>,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
    pub machines: Vec<MachineUnit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    #[serde(default)]
    pub name: String,
    pub base_kv: f64,
}

/// Pi-model line, per-unit on the system base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
}

/// Two-winding transformer with an off-nominal tap on the `from` side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub from: u32,
    pub to: u32,
    pub x: f64,
    #[serde(default = "unit_ratio")]
    pub ratio: f64,
}

fn unit_ratio() -> f64 {
    1.0
}

/// Load block, converted to a constant impedance at its load-flow voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub name: String,
    pub bus: u32,
    /// MW
    pub p_nom: f64,
    /// Mvar
    pub q_nom: f64,
    /// A block with an energisation time is off in the initial operating
    /// point and is switched in by the scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energize_time: Option<f64>,
}

impl LoadSpec {
    pub fn is_switched(&self) -> bool {
        self.energize_time.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    /// Scheduled active power, MW. Ignored for the slack machine.
    pub p_mw: f64,
    /// Terminal voltage setpoint, p.u.
    pub v_set: f64,
    #[serde(default)]
    pub slack: bool,
}

/// Two-axis machine constants, per-unit on the system base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineElectrical {
    #[serde(default)]
    pub r_a: f64,
    pub x_d: f64,
    pub x_dp: f64,
    pub x_q: f64,
    pub x_qp: f64,
    pub t_d0p: f64,
    pub t_q0p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineUnit {
    pub name: String,
    pub bus: u32,
    pub rating_mva: f64,
    pub rating_kv: f64,
    pub pole_count: u32,
    pub dispatch: Dispatch,
    pub electrical: MachineElectrical,
    /// Inertia constant, s, on the system base.
    pub h: f64,
    /// Damping, p.u. torque per p.u. speed deviation, on the system base.
    #[serde(default)]
    pub d: f64,
    pub governor: GovernorIeeeg3,
    pub avr: AvrSexs,
}

impl MachineUnit {
    /// Synchronous mechanical speed, rad/s.
    pub fn omega_m_nominal(&self, base_freq: f64) -> f64 {
        2.0 * std::f64::consts::TAU * base_freq / self.pole_count as f64
    }

    /// Rotor moment of inertia in kg·m² equivalent to `h`.
    pub fn inertia_j(&self, base_mva: f64, base_freq: f64) -> f64 {
        let wm = self.omega_m_nominal(base_freq);
        2.0 * self.h * base_mva * 1e6 / (wm * wm)
    }

    /// Machine MVA rating over system MVA base.
    pub fn rating_ratio(&self, base_mva: f64) -> f64 {
        self.rating_mva / base_mva
    }
}

/// IEEEG3 hydro governor and turbine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernorIeeeg3 {
    pub k_g: f64,
    pub t_p: f64,
    /// Permanent droop.
    pub sigma: f64,
    /// Transient droop.
    pub delta: f64,
    pub t_r: f64,
    pub k_t: f64,
    /// Turbine numerator time constant; negative for a non-minimum-phase
    /// water column.
    pub t_n: f64,
    pub t_d: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub gdot_min: f64,
    pub gdot_max: f64,
    /// Power setpoint; computed from the operating point when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_ref: Option<f64>,
}

/// SEXS simplified excitation system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvrSexs {
    pub t_a: f64,
    pub t_b: f64,
    pub k: f64,
    pub t_e: f64,
    pub e_min: f64,
    pub e_max: f64,
    /// Voltage setpoint; computed from the operating point when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_ref: Option<f64>,
}

impl SystemModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Invalid(m));
        if !(self.base_mva > 0.0) {
            return bad(format!("base_mva must be positive, got {}", self.base_mva));
        }
        if !(self.base_freq > 0.0) {
            return bad(format!("base_freq must be positive, got {}", self.base_freq));
        }
        let mut ids = HashSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                return bad(format!("duplicate bus id {}", b.id));
            }
        }
        let known = |id: u32| ids.contains(&id);
        for br in &self.branches {
            if !known(br.from) || !known(br.to) {
                return bad(format!("branch {}-{} references an unknown bus", br.from, br.to));
            }
            if br.from == br.to {
                return bad(format!("branch {}-{} is a self loop", br.from, br.to));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return bad(format!("branch {}-{} has zero impedance", br.from, br.to));
            }
        }
        for t in &self.transformers {
            if !known(t.from) || !known(t.to) {
                return bad(format!("transformer {}-{} references an unknown bus", t.from, t.to));
            }
            if t.x == 0.0 || !(t.ratio > 0.0) {
                return bad(format!("transformer {}-{} needs x != 0 and ratio > 0", t.from, t.to));
            }
        }
        let mut load_names = HashSet::new();
        for l in &self.loads {
            if !known(l.bus) {
                return bad(format!("load {} references unknown bus {}", l.name, l.bus));
            }
            if !load_names.insert(l.name.as_str()) {
                return bad(format!("duplicate load name {}", l.name));
            }
            if l.p_nom < 0.0 {
                return bad(format!("load {} has negative p_nom", l.name));
            }
            if let Some(t) = l.energize_time {
                if !(t >= 0.0) {
                    return bad(format!("load {} has negative energize_time", l.name));
                }
            }
        }
        if self.machines.is_empty() {
            return bad("at least one machine is required".into());
        }
        let mut names = HashSet::new();
        let mut machine_buses = HashSet::new();
        for m in &self.machines {
            if !names.insert(m.name.as_str()) {
                return bad(format!("duplicate machine name {}", m.name));
            }
            if !known(m.bus) {
                return bad(format!("machine {} references unknown bus {}", m.name, m.bus));
            }
            if !machine_buses.insert(m.bus) {
                return bad(format!("more than one machine on bus {}", m.bus));
            }
            m.validate()?;
        }
        if !self.machines.iter().any(|m| m.dispatch.slack) {
            return bad("no machine is designated slack".into());
        }
        if self.machines.iter().filter(|m| m.dispatch.slack).count() > 1 {
            return bad("more than one slack machine".into());
        }
        Ok(())
    }

    pub fn machine_index(&self, name: &str) -> Result<usize, ModelError> {
        self.machines
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| ModelError::UnknownMachine(name.to_string()))
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Reads a scalar addressed as `<machine>.<field>`,
    /// `<machine>.gov.<field>` or `<machine>.avr.<field>`.
    pub fn parameter(&self, path: &str) -> Result<f64, ModelError> {
        let (mi, field) = self.split_path(path)?;
        let m = &self.machines[mi];
        let v = match field {
            Field::Machine(f) => match f {
                "H" => m.h,
                "D" => m.d,
                "R_a" => m.electrical.r_a,
                "X_d" => m.electrical.x_d,
                "X_dp" => m.electrical.x_dp,
                "X_q" => m.electrical.x_q,
                "X_qp" => m.electrical.x_qp,
                "T_d0p" => m.electrical.t_d0p,
                "T_q0p" => m.electrical.t_q0p,
                _ => return Err(ModelError::UnknownParameter(path.into())),
            },
            Field::Governor(f) => {
                let g = &m.governor;
                match f {
                    "K_g" => g.k_g,
                    "T_p" => g.t_p,
                    "sigma" => g.sigma,
                    "delta" => g.delta,
                    "T_r" => g.t_r,
                    "K_t" => g.k_t,
                    "T_n" => g.t_n,
                    "T_d" => g.t_d,
                    "g_min" => g.g_min,
                    "g_max" => g.g_max,
                    "gdot_min" => g.gdot_min,
                    "gdot_max" => g.gdot_max,
                    _ => return Err(ModelError::UnknownParameter(path.into())),
                }
            }
            Field::Avr(f) => {
                let a = &m.avr;
                match f {
                    "T_a" => a.t_a,
                    "T_b" => a.t_b,
                    "K" => a.k,
                    "T_e" => a.t_e,
                    "E_min" => a.e_min,
                    "E_max" => a.e_max,
                    _ => return Err(ModelError::UnknownParameter(path.into())),
                }
            }
        };
        Ok(v)
    }

    pub fn set_parameter(&mut self, path: &str, value: f64) -> Result<(), ModelError> {
        let (mi, field) = self.split_path(path)?;
        let m = &mut self.machines[mi];
        let slot: &mut f64 = match field {
            Field::Machine(f) => match f {
                "H" => &mut m.h,
                "D" => &mut m.d,
                "R_a" => &mut m.electrical.r_a,
                "X_d" => &mut m.electrical.x_d,
                "X_dp" => &mut m.electrical.x_dp,
                "X_q" => &mut m.electrical.x_q,
                "X_qp" => &mut m.electrical.x_qp,
                "T_d0p" => &mut m.electrical.t_d0p,
                "T_q0p" => &mut m.electrical.t_q0p,
                _ => return Err(ModelError::UnknownParameter(path.into())),
            },
            Field::Governor(f) => {
                let g = &mut m.governor;
                match f {
                    "K_g" => &mut g.k_g,
                    "T_p" => &mut g.t_p,
                    "sigma" => &mut g.sigma,
                    "delta" => &mut g.delta,
                    "T_r" => &mut g.t_r,
                    "K_t" => &mut g.k_t,
                    "T_n" => &mut g.t_n,
                    "T_d" => &mut g.t_d,
                    "g_min" => &mut g.g_min,
                    "g_max" => &mut g.g_max,
                    "gdot_min" => &mut g.gdot_min,
                    "gdot_max" => &mut g.gdot_max,
                    _ => return Err(ModelError::UnknownParameter(path.into())),
                }
            }
            Field::Avr(f) => {
                let a = &mut m.avr;
                match f {
                    "T_a" => &mut a.t_a,
                    "T_b" => &mut a.t_b,
                    "K" => &mut a.k,
                    "T_e" => &mut a.t_e,
                    "E_min" => &mut a.e_min,
                    "E_max" => &mut a.e_max,
                    _ => return Err(ModelError::UnknownParameter(path.into())),
                }
            }
        };
        *slot = value;
        Ok(())
    }

    fn split_path<'a>(&self, path: &'a str) -> Result<(usize, Field<'a>), ModelError> {
        let parts: Vec<&str> = path.split('.').collect();
        let unknown = || ModelError::UnknownParameter(path.to_string());
        let (machine, field) = match parts.as_slice() {
            [m, f] => (*m, Field::Machine(f)),
            [m, "gov", f] => (*m, Field::Governor(f)),
            [m, "avr", f] => (*m, Field::Avr(f)),
            _ => return Err(unknown()),
        };
        let mi = self.machine_index(machine).map_err(|_| unknown())?;
        Ok((mi, field))
    }
}

enum Field<'a> {
    Machine(&'a str),
    Governor(&'a str),
    Avr(&'a str),
}

/// Unit string for a parameter path: time constants are seconds, the rest
/// are per-unit or dimensionless.
pub fn parameter_unit(path: &str) -> &'static str {
    let field = path.rsplit('.').next().unwrap_or("");
    if field.starts_with("T_") || field == "H" {
        "s"
    } else {
        "p.u."
    }
}

impl MachineUnit {
    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Invalid(format!("machine {}: {m}", self.name)));
        let e = &self.electrical;
        if !(e.x_dp > 0.0 && e.x_d >= e.x_dp) {
            return bad(format!("need X_d >= X_d' > 0, got {} / {}", e.x_d, e.x_dp));
        }
        if !(e.x_qp > 0.0 && e.x_q >= e.x_qp) {
            return bad(format!("need X_q >= X_q' > 0, got {} / {}", e.x_q, e.x_qp));
        }
        if !(e.t_d0p > 0.0 && e.t_q0p > 0.0) {
            return bad("open-circuit time constants must be positive".into());
        }
        if e.r_a < 0.0 {
            return bad("negative armature resistance".into());
        }
        if !(self.h > 0.0) {
            return bad(format!("H must be positive, got {}", self.h));
        }
        if self.pole_count < 2 || !self.pole_count.is_multiple_of(2) {
            return bad(format!("pole count must be even and >= 2, got {}", self.pole_count));
        }
        if !(self.rating_mva > 0.0) {
            return bad("rating must be positive".into());
        }
        let g = &self.governor;
        if !(g.t_p > 0.0 && g.t_r > 0.0 && g.t_d > 0.0) {
            return bad("governor T_p, T_r, T_d must be positive".into());
        }
        if !(g.sigma > 0.0) {
            return bad(format!("permanent droop must be positive, got {}", g.sigma));
        }
        if !(g.g_min < g.g_max) {
            return bad("governor needs g_min < g_max".into());
        }
        if !(g.gdot_min < 0.0 && 0.0 < g.gdot_max) {
            return bad("governor needs gdot_min < 0 < gdot_max".into());
        }
        let a = &self.avr;
        if !(a.t_b > 0.0 && a.t_e > 0.0) {
            return bad("AVR T_b and T_e must be positive".into());
        }
        if !(a.k > 0.0) {
            return bad(format!("AVR gain must be positive, got {}", a.k));
        }
        if !(a.e_min < a.e_max) {
            return bad("AVR needs E_min < E_max".into());
        }
        if a.t_a < 0.0 {
            return bad("AVR T_a must be non-negative".into());
        }
        Ok(())
    }
}

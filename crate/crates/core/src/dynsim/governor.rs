//! IEEEG3 governor and hydro turbine.
//!
//! ```text
//!  P_ref - Δω - (σ·g + δ·sT_r/(1+sT_r)·g) ──► K_g/(1+sT_p) ──[ġ limits]──► 1/s ──[g limits]──► K_t(1+sT_n)/(1+sT_d) ──► P_m
//! ```
//!
//! Under-frequency (`Δω < 0`) raises the gate. Both the servo lag and the
//! gate integrator are non-windup limited.

use crate::model::GovernorIeeeg3;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GovernorState {
    /// Servo output, i.e. commanded gate velocity, p.u./s.
    pub servo: f64,
    /// Gate position, p.u.
    pub gate: f64,
    /// Low-passed gate position feeding the transient-droop washout.
    pub washout: f64,
    /// Turbine lag state.
    pub turbine: f64,
}

impl GovernorState {
    /// Steady state delivering `p_m` (machine base).
    pub fn equilibrium(params: &GovernorIeeeg3, p_m: f64) -> Self {
        let g = p_m / params.k_t;
        Self {
            servo: 0.0,
            gate: g,
            washout: g,
            turbine: g,
        }
    }

    /// Mechanical power, p.u. on the machine rating.
    pub fn output(&self, params: &GovernorIeeeg3) -> f64 {
        let g = self.gate.clamp(params.g_min, params.g_max);
        params.k_t * (self.turbine + params.t_n / params.t_d * (g - self.turbine))
    }

    pub fn derivatives(&self, params: &GovernorIeeeg3, p_ref: f64, delta_omega: f64) -> Self {
        let p = params;
        let g = self.gate.clamp(p.g_min, p.g_max);
        let feedback = p.sigma * g + p.delta * (g - self.washout);
        let error = p_ref - delta_omega - feedback;

        let mut d_servo = (p.k_g * error - self.servo) / p.t_p;
        if (self.servo >= p.gdot_max && d_servo > 0.0) || (self.servo <= p.gdot_min && d_servo < 0.0) {
            d_servo = 0.0;
        }
        let mut d_gate = self.servo.clamp(p.gdot_min, p.gdot_max);
        if (self.gate >= p.g_max && d_gate > 0.0) || (self.gate <= p.g_min && d_gate < 0.0) {
            d_gate = 0.0;
        }
        Self {
            servo: d_servo,
            gate: d_gate,
            washout: (g - self.washout) / p.t_r,
            turbine: (g - self.turbine) / p.t_d,
        }
    }

    pub fn clamp(&mut self, params: &GovernorIeeeg3) {
        self.servo = self.servo.clamp(params.gdot_min, params.gdot_max);
        self.gate = self.gate.clamp(params.g_min, params.g_max);
    }

    pub(crate) fn to_array(self) -> [f64; 4] {
        [self.servo, self.gate, self.washout, self.turbine]
    }

    pub(crate) fn from_slice(s: &[f64]) -> Self {
        Self {
            servo: s[0],
            gate: s[1],
            washout: s[2],
            turbine: s[3],
        }
    }

    fn axpy(self, h: f64, d: Self) -> Self {
        Self {
            servo: self.servo + h * d.servo,
            gate: self.gate + h * d.gate,
            washout: self.washout + h * d.washout,
            turbine: self.turbine + h * d.turbine,
        }
    }
}

/// Advances the governor by one explicit-trapezoidal (Heun) step with the
/// speed deviation held over the step. Returns the new state and its `P_m`.
pub fn governor_step(
    state: GovernorState,
    delta_omega: f64,
    params: &GovernorIeeeg3,
    p_ref: f64,
    dt: f64,
) -> (GovernorState, f64) {
    let k1 = state.derivatives(params, p_ref, delta_omega);
    let mut pred = state.axpy(dt, k1);
    pred.clamp(params);
    let k2 = pred.derivatives(params, p_ref, delta_omega);
    let mut next = state.axpy(0.5 * dt, k1).axpy(0.5 * dt, k2);
    next.clamp(params);
    (next, next.output(params))
}

//! SEXS exciter: `(V_ref - V_rms) -> (1+sT_a)/(1+sT_b) -> K/(1+sT_e) -> E_fd`,
//! with a non-windup limit on `E_fd`.

use crate::model::AvrSexs;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AvrState {
    pub lead_lag: f64,
    pub e_fd: f64,
}

impl AvrState {
    pub fn equilibrium(params: &AvrSexs, e_fd: f64) -> Self {
        Self {
            lead_lag: e_fd / params.k,
            e_fd,
        }
    }

    pub fn output(&self, params: &AvrSexs) -> f64 {
        self.e_fd.clamp(params.e_min, params.e_max)
    }

    pub fn derivatives(&self, params: &AvrSexs, v_ref: f64, v_rms: f64) -> Self {
        let p = params;
        let error = v_ref - v_rms;
        let u = self.lead_lag + p.t_a / p.t_b * (error - self.lead_lag);
        let mut d_efd = (p.k * u - self.e_fd) / p.t_e;
        if (self.e_fd >= p.e_max && d_efd > 0.0) || (self.e_fd <= p.e_min && d_efd < 0.0) {
            d_efd = 0.0;
        }
        Self {
            lead_lag: (error - self.lead_lag) / p.t_b,
            e_fd: d_efd,
        }
    }

    pub fn clamp(&mut self, params: &AvrSexs) {
        self.e_fd = self.e_fd.clamp(params.e_min, params.e_max);
    }

    fn axpy(self, h: f64, d: Self) -> Self {
        Self {
            lead_lag: self.lead_lag + h * d.lead_lag,
            e_fd: self.e_fd + h * d.e_fd,
        }
    }
}

/// One explicit-trapezoidal step with `v_rms` held. Returns the new state and
/// the limited field voltage.
pub fn avr_step(state: AvrState, v_rms: f64, params: &AvrSexs, v_ref: f64, dt: f64) -> (AvrState, f64) {
    let k1 = state.derivatives(params, v_ref, v_rms);
    let mut pred = state.axpy(dt, k1);
    pred.clamp(params);
    let k2 = pred.derivatives(params, v_ref, v_rms);
    let mut next = state.axpy(0.5 * dt, k1).axpy(0.5 * dt, k2);
    next.clamp(params);
    (next, next.output(params))
}

use super::{AvrSexs, GovernorIeeeg3, MachinePoint};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetpointError {
    #[error("division by zero: {0} is zero")]
    DivisionByZero(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoints {
    pub p_ref: f64,
    pub v_ref: f64,
}

/// Controller references that hold a machine at its operating point:
/// `P_ref = (sigma / K_t) P_mss` and `V_ref = E_fdss / K + |V_t|`.
pub fn compute_setpoints(
    point: &MachinePoint,
    gov: &GovernorIeeeg3,
    avr: &AvrSexs,
) -> Result<Setpoints, SetpointError> {
    if gov.k_t == 0.0 {
        return Err(SetpointError::DivisionByZero("turbine gain K_t"));
    }
    if avr.k == 0.0 {
        return Err(SetpointError::DivisionByZero("exciter gain K"));
    }
    Ok(Setpoints {
        p_ref: gov.sigma / gov.k_t * point.p_mss,
        v_ref: point.e_fdss / avr.k + point.v_t.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset::{ieeeg3_reference, sexs_reference};
    use nalgebra::Complex;

    fn point(p_mss: f64, e_fdss: f64, v: f64) -> MachinePoint {
        MachinePoint {
            v_t: Complex::new(v, 0.0),
            p: 0.0,
            q: 0.0,
            delta: 0.0,
            e_qp: 0.0,
            e_dp: 0.0,
            i_d: 0.0,
            i_q: 0.0,
            p_mss,
            e_fdss,
        }
    }

    #[test]
    fn power_reference_is_droop_over_turbine_gain() {
        let sp = compute_setpoints(&point(0.8, 2.0, 1.0), &ieeeg3_reference(), &sexs_reference())
            .unwrap();
        assert!((sp.p_ref - 0.04 / 1.5 * 0.8).abs() < 1e-15);
        assert!((sp.p_ref - 0.021_333_333_333_333).abs() < 1e-12);
    }

    #[test]
    fn voltage_reference_adds_exciter_offset() {
        let sp = compute_setpoints(&point(0.8, 2.0, 1.0), &ieeeg3_reference(), &sexs_reference())
            .unwrap();
        assert!((sp.v_ref - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gains_are_rejected() {
        let mut gov = ieeeg3_reference();
        gov.k_t = 0.0;
        let err = compute_setpoints(&point(0.8, 2.0, 1.0), &gov, &sexs_reference()).unwrap_err();
        assert_eq!(err, SetpointError::DivisionByZero("turbine gain K_t"));
        let mut avr = sexs_reference();
        avr.k = 0.0;
        assert!(compute_setpoints(&point(0.8, 2.0, 1.0), &ieeeg3_reference(), &avr).is_err());
    }
}

use super::{
    AvrSexs, Branch, Bus, Dispatch, GovernorIeeeg3, LoadSpec, MachineElectrical, MachineUnit,
    SystemModel, Transformer,
};

/// Time at which the preset's 15 MW block at bus 6 is energised, s.
pub const IEEE9_SWITCH_TIME: f64 = 1.0;

/// Governor constants used for every machine of the preset. SM1 carries the
/// identification targets.
pub fn ieeeg3_reference() -> GovernorIeeeg3 {
    GovernorIeeeg3 {
        k_g: 5.0,
        t_p: 0.05,
        sigma: 0.04,
        delta: 0.8,
        t_r: 5.0,
        k_t: 1.5,
        t_n: -1.7067,
        t_d: 2.4,
        g_min: 0.0,
        g_max: 1.0,
        gdot_min: -0.2,
        gdot_max: 0.2,
        p_ref: None,
    }
}

pub fn sexs_reference() -> AvrSexs {
    AvrSexs {
        t_a: 1.0,
        t_b: 12.0,
        k: 20.0,
        t_e: 0.04,
        e_min: 0.0,
        e_max: 5.0,
        v_ref: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn machine(
    name: &str,
    bus: u32,
    rating_mva: f64,
    rating_kv: f64,
    pole_count: u32,
    dispatch: Dispatch,
    electrical: MachineElectrical,
    h: f64,
) -> MachineUnit {
    MachineUnit {
        name: name.into(),
        bus,
        rating_mva,
        rating_kv,
        pole_count,
        dispatch,
        electrical,
        h,
        d: 0.0,
        governor: ieeeg3_reference(),
        avr: sexs_reference(),
    }
}

/// The WSCC/IEEE 9-bus system on a 100 MVA, 60 Hz base with the load at bus
/// 6 split into a 75 MW base block and a switched 15 MW block.
///
/// Network and machine constants are the textbook two-axis data set; every
/// value can be overridden through a system config file.
pub fn ieee9_preset() -> SystemModel {
    let bus = |id: u32, kv: f64| Bus {
        id,
        name: format!("Bus {id}"),
        base_kv: kv,
    };
    let line = |from, to, r, x, b| Branch { from, to, r, x, b };
    let xfmr = |from, to, x| Transformer {
        from,
        to,
        x,
        ratio: 1.0,
    };
    let load = |name: &str, bus, p, q, t: Option<f64>| LoadSpec {
        name: name.into(),
        bus,
        p_nom: p,
        q_nom: q,
        energize_time: t,
    };

    SystemModel {
        name: "ieee9".into(),
        base_mva: 100.0,
        base_freq: 60.0,
        buses: vec![
            bus(1, 16.5),
            bus(2, 18.0),
            bus(3, 13.8),
            bus(4, 230.0),
            bus(5, 230.0),
            bus(6, 230.0),
            bus(7, 230.0),
            bus(8, 230.0),
            bus(9, 230.0),
        ],
        branches: vec![
            line(4, 5, 0.010, 0.085, 0.176),
            line(4, 6, 0.017, 0.092, 0.158),
            line(5, 7, 0.032, 0.161, 0.306),
            line(6, 9, 0.039, 0.170, 0.358),
            line(7, 8, 0.0085, 0.072, 0.149),
            line(8, 9, 0.0119, 0.1008, 0.209),
        ],
        transformers: vec![xfmr(1, 4, 0.0576), xfmr(2, 7, 0.0625), xfmr(3, 9, 0.0586)],
        loads: vec![
            load("L5", 5, 125.0, 50.0, None),
            load("L6", 6, 75.0, 30.0, None),
            load("L6_switched", 6, 15.0, 0.0, Some(IEEE9_SWITCH_TIME)),
            load("L8", 8, 100.0, 35.0, None),
        ],
        machines: vec![
            machine(
                "SM1",
                1,
                247.5,
                16.5,
                12,
                Dispatch {
                    p_mw: 71.6,
                    v_set: 1.04,
                    slack: true,
                },
                MachineElectrical {
                    r_a: 0.0,
                    x_d: 0.146,
                    x_dp: 0.0608,
                    x_q: 0.0969,
                    x_qp: 0.0969,
                    t_d0p: 8.96,
                    t_q0p: 0.31,
                },
                23.64,
            ),
            machine(
                "SM2",
                2,
                192.0,
                18.0,
                2,
                Dispatch {
                    p_mw: 163.0,
                    v_set: 1.025,
                    slack: false,
                },
                MachineElectrical {
                    r_a: 0.0,
                    x_d: 0.8958,
                    x_dp: 0.1198,
                    x_q: 0.8645,
                    x_qp: 0.1969,
                    t_d0p: 6.0,
                    t_q0p: 0.535,
                },
                6.4,
            ),
            machine(
                "SM3",
                3,
                128.0,
                13.8,
                2,
                Dispatch {
                    p_mw: 85.0,
                    v_set: 1.025,
                    slack: false,
                },
                MachineElectrical {
                    r_a: 0.0,
                    x_d: 1.3125,
                    x_dp: 0.1813,
                    x_q: 1.2578,
                    x_qp: 0.25,
                    t_d0p: 5.89,
                    t_q0p: 0.6,
                },
                3.01,
            ),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sm1_governor_droop_matches_reference_set() {
        let m = ieee9_preset();
        assert_eq!(m.parameter("SM1.gov.sigma").unwrap(), 0.04);
        assert_eq!(m.parameter("SM1.avr.K").unwrap(), 20.0);
        assert_eq!(m.parameter("SM1.gov.T_n").unwrap(), -1.7067);
    }

    #[test]
    fn bus6_load_totals_ninety_megawatts() {
        let m = ieee9_preset();
        let total: f64 = m.loads.iter().filter(|l| l.bus == 6).map(|l| l.p_nom).sum();
        assert_eq!(total, 90.0);
        let switched: Vec<_> = m.loads.iter().filter(|l| l.is_switched()).collect();
        assert_eq!(switched.len(), 1);
        assert_eq!(switched[0].p_nom, 15.0);
    }

    #[test]
    fn preset_is_valid() {
        ieee9_preset().validate().unwrap();
    }

    #[test]
    fn sm1_speed_base_is_about_62_83_rad_per_s() {
        let m = ieee9_preset();
        let w = m.machines[0].omega_m_nominal(m.base_freq);
        assert!((w - 62.831_853_071_795_86).abs() < 1e-12);
    }
}

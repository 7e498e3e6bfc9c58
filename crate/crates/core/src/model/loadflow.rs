use super::{MachineUnit, ModelError, SystemModel};
use nalgebra::{Complex, DMatrix, DVector};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

type C64 = Complex<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadFlowError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e} p.u.)")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("power-flow Jacobian is singular (isolated bus or inconsistent data)")]
    Singular,
}

/// Equilibrium of one machine, back-solved from its terminal conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct MachinePoint {
    /// Terminal voltage phasor, p.u.
    pub v_t: C64,
    /// Active and reactive output, p.u. on the system base.
    pub p: f64,
    pub q: f64,
    /// Rotor angle, rad, relative to the network reference.
    pub delta: f64,
    pub e_qp: f64,
    pub e_dp: f64,
    pub i_d: f64,
    pub i_q: f64,
    /// Steady-state mechanical power, p.u. on the machine rating.
    pub p_mss: f64,
    /// Steady-state field voltage, p.u.
    pub e_fdss: f64,
}

impl MachinePoint {
    /// Two-axis equilibrium for a machine delivering `s` (system p.u.) at
    /// terminal voltage `v_t`.
    pub fn solve(unit: &MachineUnit, base_mva: f64, v_t: C64, s: C64) -> Self {
        let e = &unit.electrical;
        let i = (s / v_t).conj();
        let e_q_axis = v_t + C64::new(e.r_a, e.x_q) * i;
        let delta = e_q_axis.arg();
        let rot = C64::from_polar(1.0, FRAC_PI_2 - delta);
        let vdq = v_t * rot;
        let idq = i * rot;
        let (v_d, v_q, i_d, i_q) = (vdq.re, vdq.im, idq.re, idq.im);
        let e_dp = v_d + e.r_a * i_d - e.x_qp * i_q;
        let e_qp = v_q + e.r_a * i_q + e.x_dp * i_d;
        let e_fd = e_qp + (e.x_d - e.x_dp) * i_d;
        let t_e = e_dp * i_d + e_qp * i_q + (e.x_qp - e.x_dp) * i_d * i_q;
        MachinePoint {
            v_t,
            p: s.re,
            q: s.im,
            delta,
            e_qp,
            e_dp,
            i_d,
            i_q,
            p_mss: t_e / unit.rating_ratio(base_mva),
            e_fdss: e_fd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub bus_ids: Vec<u32>,
    pub voltages: Vec<C64>,
    /// Constant-impedance equivalent of every load block (including switched
    /// blocks) at its bus's load-flow voltage, p.u.
    pub load_admittances: Vec<C64>,
    pub machines: Vec<MachinePoint>,
    pub iterations: usize,
    pub mismatch: f64,
}

impl OperatingPoint {
    pub fn voltage_at(&self, bus: u32) -> Option<C64> {
        self.bus_ids
            .iter()
            .position(|&b| b == bus)
            .map(|i| self.voltages[i])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadFlowOptions {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for LoadFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iter: 30,
        }
    }
}

/// Series network admittance matrix (lines, line charging, transformers), no
/// loads and no machines. Rows follow `model.buses` order.
pub fn network_admittance(model: &SystemModel) -> DMatrix<C64> {
    let n = model.buses.len();
    let mut y = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    let idx = |id: u32| model.bus_index(id).expect("validated bus id");
    for br in &model.branches {
        let (f, t) = (idx(br.from), idx(br.to));
        let ys = C64::new(1.0, 0.0) / C64::new(br.r, br.x);
        let ysh = C64::new(0.0, br.b / 2.0);
        y[(f, f)] += ys + ysh;
        y[(t, t)] += ys + ysh;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    for tr in &model.transformers {
        let (f, t) = (idx(tr.from), idx(tr.to));
        let ys = C64::new(1.0, 0.0) / C64::new(0.0, tr.x);
        let a = tr.ratio;
        y[(f, f)] += ys / (a * a);
        y[(t, t)] += ys;
        y[(f, t)] -= ys / a;
        y[(t, f)] -= ys / a;
    }
    y
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Slack,
    Pv,
    Pq,
}

/// AC power flow followed by back-solving every machine's internal state.
///
/// Switched load blocks are excluded from the initial operating point.
pub fn init_load_flow(model: &SystemModel) -> Result<OperatingPoint, LoadFlowError> {
    init_load_flow_with(model, &LoadFlowOptions::default())
}

pub fn init_load_flow_with(
    model: &SystemModel,
    opts: &LoadFlowOptions,
) -> Result<OperatingPoint, LoadFlowError> {
    model.validate()?;
    let n = model.buses.len();
    let base = model.base_mva;
    let y = network_admittance(model);

    let mut kind = vec![Kind::Pq; n];
    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    let mut p_spec = vec![0.0; n];
    let mut q_spec = vec![0.0; n];
    for m in &model.machines {
        let i = model.bus_index(m.bus).expect("validated");
        kind[i] = if m.dispatch.slack { Kind::Slack } else { Kind::Pv };
        vm[i] = m.dispatch.v_set;
        if !m.dispatch.slack {
            p_spec[i] += m.dispatch.p_mw / base;
        }
    }
    for l in model.loads.iter().filter(|l| !l.is_switched()) {
        let i = model.bus_index(l.bus).expect("validated");
        p_spec[i] -= l.p_nom / base;
        q_spec[i] -= l.q_nom / base;
    }

    let pvpq: Vec<usize> = (0..n).filter(|&i| kind[i] != Kind::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| kind[i] == Kind::Pq).collect();
    let dim = pvpq.len() + pq.len();

    let voltages = |vm: &[f64], va: &[f64]| -> DVector<C64> {
        DVector::from_iterator(n, (0..n).map(|i| C64::from_polar(vm[i], va[i])))
    };

    let mut iterations = 0;
    let mut mismatch;
    loop {
        let v = voltages(&vm, &va);
        let ibus = &y * &v;
        let s: Vec<C64> = (0..n).map(|i| v[i] * ibus[i].conj()).collect();
        let mut f = DVector::zeros(dim);
        for (r, &i) in pvpq.iter().enumerate() {
            f[r] = p_spec[i] - s[i].re;
        }
        for (r, &i) in pq.iter().enumerate() {
            f[pvpq.len() + r] = q_spec[i] - s[i].im;
        }
        mismatch = f.amax();
        if mismatch < opts.tolerance {
            break;
        }
        if iterations >= opts.max_iter || !mismatch.is_finite() {
            return Err(LoadFlowError::NonConvergence {
                iterations,
                mismatch,
            });
        }

        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let j = C64::new(0.0, 1.0);
        let mut jac = DMatrix::zeros(dim, dim);
        let ds_dva = |r: usize, c: usize| -> C64 {
            let diag = if r == c { ibus[r] } else { C64::new(0.0, 0.0) };
            j * v[r] * (diag - y[(r, c)] * v[c]).conj()
        };
        let ds_dvm = |r: usize, c: usize| -> C64 {
            let vn = v[c] / vm[c];
            let mut out = v[r] * (y[(r, c)] * vn).conj();
            if r == c {
                out += ibus[r].conj() * vn;
            }
            out
        };
        for (a, &r) in pvpq.iter().enumerate() {
            for (b, &c) in pvpq.iter().enumerate() {
                jac[(a, b)] = ds_dva(r, c).re;
            }
            for (b, &c) in pq.iter().enumerate() {
                jac[(a, pvpq.len() + b)] = ds_dvm(r, c).re;
            }
        }
        for (a, &r) in pq.iter().enumerate() {
            let row = pvpq.len() + a;
            for (b, &c) in pvpq.iter().enumerate() {
                jac[(row, b)] = ds_dva(r, c).im;
            }
            for (b, &c) in pq.iter().enumerate() {
                jac[(row, pvpq.len() + b)] = ds_dvm(r, c).im;
            }
        }
        let dx = jac.lu().solve(&f).ok_or(LoadFlowError::Singular)?;
        if dx.iter().any(|x| !x.is_finite()) {
            return Err(LoadFlowError::Singular);
        }
        for (a, &i) in pvpq.iter().enumerate() {
            va[i] += dx[a];
        }
        for (a, &i) in pq.iter().enumerate() {
            vm[i] += dx[pvpq.len() + a];
        }
        iterations += 1;
    }

    let v = voltages(&vm, &va);
    let ibus = &y * &v;
    let mut load_at_bus = vec![C64::new(0.0, 0.0); n];
    for l in model.loads.iter().filter(|l| !l.is_switched()) {
        let i = model.bus_index(l.bus).expect("validated");
        load_at_bus[i] += C64::new(l.p_nom, l.q_nom) / base;
    }
    let machines = model
        .machines
        .iter()
        .map(|m| {
            let i = model.bus_index(m.bus).expect("validated");
            let s = v[i] * ibus[i].conj() + load_at_bus[i];
            MachinePoint::solve(m, base, v[i], s)
        })
        .collect();
    let load_admittances = model
        .loads
        .iter()
        .map(|l| {
            let i = model.bus_index(l.bus).expect("validated");
            C64::new(l.p_nom, -l.q_nom) / base / (vm[i] * vm[i])
        })
        .collect();

    Ok(OperatingPoint {
        bus_ids: model.buses.iter().map(|b| b.id).collect(),
        voltages: v.iter().copied().collect(),
        load_admittances,
        machines,
        iterations,
        mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ieee9_preset, Bus};

    #[test]
    fn full_ieee9_load_flow_matches_textbook_dispatch() {
        // With all 90 MW at bus 6 energised the slack output is the familiar
        // 71.6 MW / 27 Mvar.
        let mut m = ieee9_preset();
        for l in &mut m.loads {
            l.energize_time = None;
        }
        let op = init_load_flow(&m).unwrap();
        let sm1 = &op.machines[0];
        assert!((sm1.p * 100.0 - 71.64).abs() < 0.05, "P1 = {}", sm1.p * 100.0);
        assert!((sm1.q * 100.0 - 27.05).abs() < 0.1, "Q1 = {}", sm1.q * 100.0);
        assert!((op.machines[1].q * 100.0 - 6.65).abs() < 0.1);
        assert!((op.machines[2].q * 100.0 + 10.86).abs() < 0.1);
    }

    #[test]
    fn generation_balances_load_plus_losses() {
        let m = ieee9_preset();
        let op = init_load_flow(&m).unwrap();
        let y = network_admittance(&m);
        let v = DVector::from_vec(op.voltages.clone());
        let i = &y * &v;
        // Net injection summed over buses equals the series losses.
        let losses: f64 = (0..v.len()).map(|k| (v[k] * i[k].conj()).re).sum();
        let gen: f64 = op.machines.iter().map(|p| p.p).sum();
        let load: f64 = m
            .loads
            .iter()
            .filter(|l| !l.is_switched())
            .map(|l| l.p_nom / 100.0)
            .sum();
        assert!((gen - load - losses).abs() < 1e-10);
        assert!(losses > 0.0);
    }

    #[test]
    fn no_load_single_machine_has_flat_voltage() {
        let mut m = ieee9_preset();
        m.buses.retain(|b| b.id == 1 || b.id == 4);
        m.branches.clear();
        m.loads.clear();
        m.machines.truncate(1);
        m.transformers.retain(|t| t.from == 1);
        let op = init_load_flow(&m).unwrap();
        for v in &op.voltages {
            assert!((v.norm() - 1.04).abs() < 1e-12);
        }
        let sm1 = &op.machines[0];
        assert!(sm1.p_mss.abs() < 1e-12);
        assert!((sm1.e_fdss - 1.04).abs() < 1e-12);
        assert!((sm1.e_qp - 1.04).abs() < 1e-12);
    }

    #[test]
    fn isolated_bus_is_rejected() {
        let mut m = ieee9_preset();
        m.buses.push(Bus {
            id: 10,
            name: "island".into(),
            base_kv: 230.0,
        });
        let err = init_load_flow(&m).unwrap_err();
        assert!(matches!(
            err,
            LoadFlowError::Singular | LoadFlowError::NonConvergence { .. }
        ));
    }

    #[test]
    fn machine_point_reproduces_terminal_power() {
        let m = ieee9_preset();
        let op = init_load_flow(&m).unwrap();
        for (unit, mp) in m.machines.iter().zip(&op.machines) {
            let e = &unit.electrical;
            // Air-gap torque equals terminal power when R_a = 0.
            let t_e = mp.e_dp * mp.i_d + mp.e_qp * mp.i_q + (e.x_qp - e.x_dp) * mp.i_d * mp.i_q;
            assert!((t_e - mp.p).abs() < 1e-12);
            assert!((mp.e_dp - (e.x_q - e.x_qp) * mp.i_q).abs() < 1e-12);
        }
    }
}

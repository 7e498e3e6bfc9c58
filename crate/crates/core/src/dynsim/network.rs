use nalgebra::{Complex, DMatrix, DVector};

use super::SimError;

type C64 = Complex<f64>;

/// Solves `Y v = i` for the bus voltages.
pub fn network_solve(y: &DMatrix<C64>, injections: &DVector<C64>) -> Result<DVector<C64>, SimError> {
    if y.nrows() != y.ncols() || y.nrows() != injections.len() {
        return Err(SimError::SingularNetwork);
    }
    let scale = y.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let singular_row = y.row_iter().any(|r| r.iter().all(|c| c.norm() <= 1e-14 * scale));
    if scale == 0.0 || singular_row {
        return Err(SimError::SingularNetwork);
    }
    let v = y.clone().lu().solve(injections).ok_or(SimError::SingularNetwork)?;
    if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(SimError::SingularNetwork);
    }
    Ok(v)
}

/// Network Kron-reduced onto the machine terminal buses.
#[derive(Debug, Clone)]
pub(crate) struct ReducedNetwork {
    /// Real expansion of the reduced admittance, `2m x 2m`, ordered
    /// `[re_0, im_0, re_1, im_1, ...]`.
    pub y_real: DMatrix<f64>,
    /// Maps terminal voltages to the remaining bus voltages.
    recon: DMatrix<C64>,
    other: Vec<usize>,
    gen: Vec<usize>,
}

impl ReducedNetwork {
    pub fn new(y: &DMatrix<C64>, gen: &[usize]) -> Result<Self, SimError> {
        let n = y.nrows();
        let other: Vec<usize> = (0..n).filter(|i| !gen.contains(i)).collect();
        let m = gen.len();
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |r, c| y[(rows[r], cols[c])])
        };
        let y_gg = pick(gen, gen);
        let (y_red, recon) = if other.is_empty() {
            (y_gg, DMatrix::zeros(0, m))
        } else {
            let y_go = pick(gen, &other);
            let y_og = pick(&other, gen);
            let y_oo = pick(&other, &other);
            let lu = y_oo.lu();
            let x = lu.solve(&y_og).ok_or(SimError::SingularNetwork)?;
            if x.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(SimError::SingularNetwork);
            }
            (y_gg - &y_go * &x, -x)
        };
        let mut y_real = DMatrix::zeros(2 * m, 2 * m);
        for r in 0..m {
            for c in 0..m {
                let g = y_red[(r, c)].re;
                let b = y_red[(r, c)].im;
                y_real[(2 * r, 2 * c)] = g;
                y_real[(2 * r, 2 * c + 1)] = -b;
                y_real[(2 * r + 1, 2 * c)] = b;
                y_real[(2 * r + 1, 2 * c + 1)] = g;
            }
        }
        Ok(Self {
            y_real,
            recon,
            other,
            gen: gen.to_vec(),
        })
    }

    /// Voltage at bus position `bus` given the terminal voltages.
    pub fn bus_voltage(&self, bus: usize, terminal: &[C64]) -> C64 {
        if let Some(k) = self.gen.iter().position(|&g| g == bus) {
            return terminal[k];
        }
        let r = self.other.iter().position(|&o| o == bus).expect("bus in network");
        (0..terminal.len()).map(|k| self.recon[(r, k)] * terminal[k]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn two_bus_voltage_divider() {
        // 1 p.u. source behind z1 = j0.1 feeding bus 1, line z2 = 0.02 + j0.2
        // to bus 2 loaded by z3 = 1.0. Norton source at bus 1.
        let (z1, z2, z3) = (c(0.0, 0.1), c(0.02, 0.2), c(1.0, 0.0));
        let one = c(1.0, 0.0);
        let (y1, y2, y3) = (one / z1, one / z2, one / z3);
        let y = DMatrix::from_row_slice(2, 2, &[y1 + y2, -y2, -y2, y2 + y3]);
        let i = DVector::from_vec(vec![one / z1, c(0.0, 0.0)]);
        let v = network_solve(&y, &i).unwrap();
        let expect_v2 = one * z3 / (z1 + z2 + z3);
        assert!((v[1] - expect_v2).norm() < 1e-14);
        let resid = &y * &v - &i;
        assert!(resid.iter().all(|r| r.norm() < 1e-14));
    }

    #[test]
    fn identity_returns_injections() {
        let y = DMatrix::<C64>::identity(3, 3);
        let i = DVector::from_vec(vec![c(1.0, 2.0), c(-0.5, 0.0), c(0.0, 3.0)]);
        assert_eq!(network_solve(&y, &i).unwrap(), i);
    }

    #[test]
    fn zero_row_is_singular() {
        let mut y = DMatrix::<C64>::identity(3, 3);
        y[(1, 1)] = c(0.0, 0.0);
        let i = DVector::from_element(3, c(1.0, 0.0));
        assert!(matches!(network_solve(&y, &i), Err(SimError::SingularNetwork)));
    }

    #[test]
    fn reduction_reconstructs_internal_buses() {
        let one = c(1.0, 0.0);
        let (ya, yb, yl) = (one / c(0.01, 0.1), one / c(0.02, 0.15), c(0.8, -0.3));
        // Buses 0 and 2 carry machines, bus 1 is internal with a load.
        let y = DMatrix::from_row_slice(
            3,
            3,
            &[ya, -ya, c(0.0, 0.0), -ya, ya + yb + yl, -yb, c(0.0, 0.0), -yb, yb],
        );
        let red = ReducedNetwork::new(&y, &[0, 2]).unwrap();
        let vt = [c(1.02, 0.05), c(0.99, -0.02)];
        let v1 = red.bus_voltage(1, &vt);
        // Internal bus has zero injection.
        let inj = -ya * vt[0] + (ya + yb + yl) * v1 - yb * vt[1];
        assert!(inj.norm() < 1e-12);
    }
}

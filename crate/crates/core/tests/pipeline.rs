use nfim_core::dynsim::{simulate, ChannelSpec, Quantity, Scenario, Trace};
use nfim_core::estimator::{fit, FitOptions};
use nfim_core::fisher::{calibrate_alpha, empirical_nfim};
use nfim_core::measure::{log_likelihood, noise_sigma_from_snr, sse, synthesize, MeasurementSet};
use nfim_core::model::{ieee9_preset, init_load_flow};
use nfim_core::oracle::PlantOracle;
use nfim_core::params::{ParameterEntry, ParameterVector};

fn plant() -> PlantOracle {
    let m = ieee9_preset();
    let op = init_load_flow(&m).unwrap();
    let sc = Scenario::load_energization(&m, vec![ChannelSpec::machine("SM1", Quantity::Pe)]).with_grid(6.0, 5e-3);
    PlantOracle::new(m, op, sc)
}

#[test]
fn trace_file_to_fitted_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let oracle = plant();
    let truth = oracle.evaluate_all(&ParameterVector::empty()).unwrap()[0].clone();

    let csv = dir.path().join("p_e.csv");
    truth.write_csv(std::fs::File::create(&csv).unwrap()).unwrap();
    let back = Trace::read_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(back.channel, truth.channel);
    assert_eq!(back.len(), truth.len());
    for (a, b) in back.samples.iter().zip(&truth.samples) {
        assert_eq!(a, b);
    }

    let sigma = noise_sigma_from_snr(&back, 80.0).unwrap();
    let z = synthesize(&back, sigma, 11).unwrap();
    let meas = dir.path().join("p_e.meas.csv");
    z.save(&meas).unwrap();
    let z = MeasurementSet::load(&meas).unwrap();
    let n = z.len() as f64;
    let r = sse(&z, &truth).unwrap() / n;
    assert!((r / (sigma * sigma) - 1.0).abs() < 0.15, "residual power ratio {}", r / (sigma * sigma));
    assert!(log_likelihood(&z, &truth).unwrap().is_finite());

    let ch = oracle.channel(0);
    let p0 = ParameterVector::new(vec![ParameterEntry::new("SM1.gov.K_t", 1.35).with_bounds(0.75, 2.25)]).unwrap();
    let res = fit(&ch, &z, &p0, &FitOptions::default()).unwrap();
    let k_t = res.p_hat.entries[0].value;
    assert!((k_t - 1.5).abs() / 1.5 < 5e-3, "K_t = {k_t}");
    assert!(res.sse_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn calibrated_nfim_bound_is_below_the_fit_spread() {
    let oracle = plant();
    let ch = oracle.channel(0);
    let truth = oracle.evaluate_all(&ParameterVector::empty()).unwrap()[0].clone();
    let sigma = noise_sigma_from_snr(&truth, 80.0).unwrap();
    let p = ParameterVector::new(vec![ParameterEntry::new("SM1.gov.K_t", 1.5).with_bounds(0.75, 2.25)]).unwrap();
    let (alpha, sigma_d) = calibrate_alpha(&ch, &p, 0, sigma, 1.05).unwrap();
    assert!(sigma_d > 1.05 * sigma);
    let mut p = p;
    p.entries[0].alpha = alpha;
    let seeds: Vec<u64> = (0..50).collect();
    let fim = empirical_nfim(&ch, &p, sigma, &seeds, 0.02).unwrap();
    assert_eq!(fim.rank, 1);

    let estimates: Vec<f64> = (0..12u64)
        .map(|s| {
            let z = synthesize(&truth, sigma, 1000 + s).unwrap();
            fit(&ch, &z, &p, &FitOptions::default()).unwrap().p_hat.entries[0].value
        })
        .collect();
    let m = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let var = estimates.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (estimates.len() - 1) as f64;
    assert!(var >= fim.ncrlb[0], "variance {var:.3e} below bound {:.3e}", fim.ncrlb[0]);
}

#[test]
fn trace_round_trip_preserves_every_recorded_quantity() {
    let m = ieee9_preset();
    let op = init_load_flow(&m).unwrap();
    let channels: Vec<ChannelSpec> = Quantity::ALL.iter().map(|&q| ChannelSpec::machine("SM2", q)).collect();
    let sc = Scenario::load_energization(&m, channels).with_grid(1.5, 1e-2);
    for tr in simulate(&m, &op, &ParameterVector::empty(), &sc).unwrap() {
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = Trace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.unit, tr.unit);
        assert_eq!(back.samples, tr.samples);
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::StudyMode;
use super::study::{StudyArtifacts, StudyReport};
use super::sweep::SweepPoint;
use super::{io_err, HarnessError};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const TABLE3_HEADER: &str = "channel,parameter,true_value,alpha,sigma_d,avg_nfim,avg_ncrlb,avg_v_e,rank_v_e,avg_rel_error_pct,variance_pu,rank_variance";
const TABLE4_HEADER: &str = "channel,parameter,true_value,alpha,sigma_d,avg_nfim,ncrlb_pu,mean_estimate,avg_rel_error_pct,variance_pu,average_v_e,average_variance_pu";

/// Table CSV of a study: `3` for the single-parameter layout, `4` for the
/// multi-parameter layout. Rows appear only for the matching study mode.
pub fn table_csv(report: &StudyReport, table: u8) -> String {
    let mut out = String::new();
    let (header, mode) = if table == 3 {
        (TABLE3_HEADER, StudyMode::Single)
    } else {
        (TABLE4_HEADER, StudyMode::Multi)
    };
    out.push_str(header);
    out.push('\n');
    if report.mode != mode {
        return out;
    }
    for ch in &report.channels {
        for p in &ch.parameters {
            let row = if table == 3 {
                [
                    ch.channel.to_string(),
                    p.path.clone(),
                    p.true_value.to_string(),
                    p.alpha.to_string(),
                    p.sigma_d.to_string(),
                    p.avg_nfim.to_string(),
                    p.ncrlb_pu.to_string(),
                    opt(p.v_e_pu),
                    opt(p.rank_v_e),
                    opt(p.avg_rel_error_pct),
                    opt(p.variance_pu),
                    opt(p.rank_variance),
                ]
            } else {
                [
                    ch.channel.to_string(),
                    p.path.clone(),
                    p.true_value.to_string(),
                    p.alpha.to_string(),
                    p.sigma_d.to_string(),
                    p.avg_nfim.to_string(),
                    p.ncrlb_pu.to_string(),
                    opt(p.mean_estimate),
                    opt(p.avg_rel_error_pct),
                    opt(p.variance_pu),
                    ch.average_v_e.to_string(),
                    opt(ch.average_variance_pu),
                ]
            };
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    out
}

fn convergence_csv(report: &StudyReport) -> String {
    let mut out = String::from("channel,estimator,iter,sse,step_norm,damping\n");
    for ch in &report.channels {
        for log in &ch.convergence {
            for i in 0..log.sse_history.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    ch.channel, log.estimator, i, log.sse_history[i], log.step_norms[i], log.damping[i]
                );
            }
        }
    }
    out
}

fn traces_csv(artifacts: &StudyArtifacts) -> String {
    let mut out = String::from("t");
    for tr in &artifacts.truth {
        let _ = write!(out, ",{} true [{}]", tr.channel, tr.unit);
    }
    for z in &artifacts.first_measurement {
        let _ = write!(out, ",{} measured [{}]", z.channel, z.unit);
    }
    out.push('\n');
    let Some(first) = artifacts.truth.first() else {
        return out;
    };
    for i in 0..first.len() {
        let _ = write!(out, "{}", first.t0 + i as f64 * first.dt);
        for tr in &artifacts.truth {
            let _ = write!(out, ",{}", tr.samples[i]);
        }
        for z in &artifacts.first_measurement {
            let _ = write!(out, ",{}", z.samples[i]);
        }
        out.push('\n');
    }
    out
}

fn write(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `study.json`, `table3.csv`, `table4.csv`, `convergence.csv` and,
/// when artifacts are given, `traces.csv` into `dir`. Returns the paths
/// written. Identical reports produce identical files.
pub fn export_report(
    report: &StudyReport,
    artifacts: Option<&StudyArtifacts>,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    write(dir, "study.json", &json, &mut written)?;
    write(dir, "table3.csv", &table_csv(report, 3), &mut written)?;
    write(dir, "table4.csv", &table_csv(report, 4), &mut written)?;
    write(dir, "convergence.csv", &convergence_csv(report), &mut written)?;
    if let Some(a) = artifacts {
        write(dir, "traces.csv", &traces_csv(a), &mut written)?;
    }
    Ok(written)
}

/// Plot-ready `alpha,nfim,normalized` CSV.
pub fn write_sweep_csv(parameter: &str, points: &[SweepPoint], path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from("parameter,alpha,nfim,normalized\n");
    for p in points {
        let _ = writeln!(out, "{parameter},{},{},{}", p.alpha, p.nfim, p.normalized);
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

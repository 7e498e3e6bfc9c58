use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

use super::ChannelSpec;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace file: {0}")]
    Format(String),
}

/// Uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t0: f64,
    pub dt: f64,
    pub len: usize,
}

impl Grid {
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn matches(&self, other: &Grid) -> bool {
        self.len == other.len
            && (self.t0 - other.t0).abs() <= 1e-9 * self.dt.abs().max(1.0)
            && (self.dt - other.dt).abs() <= 1e-12 * self.dt.abs()
    }
}

/// A uniformly sampled, noiseless simulation output in channel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub channel: ChannelSpec,
    pub unit: String,
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl Trace {
    pub fn grid(&self) -> Grid {
        Grid {
            t0: self.t0,
            dt: self.dt,
            len: self.samples.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Writes `t,<channel> [<unit>]` CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TraceError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", &format!("{} [{}]", self.channel, self.unit)])?;
        for (i, v) in self.samples.iter().enumerate() {
            out.write_record([self.grid().time(i).to_string(), v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, TraceError> {
        let (header, t, v) = read_two_columns(r)?;
        let (name, unit) = split_header(&header)?;
        let channel: ChannelSpec = name
            .parse()
            .map_err(|e: String| TraceError::Format(format!("bad channel in header: {e}")))?;
        let (t0, dt) = uniform_grid(&t)?;
        Ok(Trace {
            channel,
            unit,
            t0,
            dt,
            samples: v,
        })
    }
}

pub(crate) fn split_header(h: &str) -> Result<(String, String), TraceError> {
    let h = h.trim();
    match (h.find('['), h.ends_with(']')) {
        (Some(open), true) => Ok((h[..open].trim().to_string(), h[open + 1..h.len() - 1].to_string())),
        _ => Err(TraceError::Format(format!("expected `<channel> [<unit>]`, got `{h}`"))),
    }
}

pub(crate) fn read_two_columns<R: Read>(r: R) -> Result<(String, Vec<f64>, Vec<f64>), TraceError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 {
        return Err(TraceError::Format(format!("expected 2 columns, got {}", headers.len())));
    }
    let mut t = Vec::new();
    let mut v = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| TraceError::Format(format!("bad number `{s}`: {e}")))
        };
        t.push(parse(&rec[0])?);
        v.push(parse(&rec[1])?);
    }
    Ok((headers[1].to_string(), t, v))
}

pub(crate) fn uniform_grid(t: &[f64]) -> Result<(f64, f64), TraceError> {
    match t.len() {
        0 => Err(TraceError::Format("no samples".into())),
        1 => Ok((t[0], 0.0)),
        n => {
            let dt = (t[n - 1] - t[0]) / (n - 1) as f64;
            let uniform = t
                .iter()
                .enumerate()
                .all(|(i, &ti)| (ti - (t[0] + i as f64 * dt)).abs() <= 1e-6 * dt.abs());
            if !(dt > 0.0) || !uniform {
                return Err(TraceError::Format("time column is not uniformly sampled".into()));
            }
            Ok((t[0], dt))
        }
    }
}

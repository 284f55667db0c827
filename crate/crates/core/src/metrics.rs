//! Per-epoch metrics as CSV.
//!
//! Columns: `epoch,beta,lr,train_elbo,valid_elbo,kl_1..kl_L,param_checksum,wall_time`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::training::MetricsRow;

pub fn header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "beta", "lr", "train_elbo", "valid_elbo"].map(String::from).into();
    h.extend((1..=layers).map(|l| format!("kl_{l}")));
    h.push("param_checksum".into());
    h.push("wall_time".into());
    h
}

/// Streams rows to a CSV sink, writing the header first.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    layers: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W, layers: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(header(layers))?;
        Ok(Self { inner, layers })
    }

    /// Appends to an existing file without a header.
    pub fn append(sink: W, layers: usize) -> Self {
        Self { inner: csv::WriterBuilder::new().has_headers(false).from_writer(sink), layers }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let kls: Vec<f64> = if row.valid_kls.is_empty() { vec![f64::NAN; self.layers] } else { row.valid_kls.clone() };
        if kls.len() != self.layers {
            return Err(Error::invalid("row", format!("expected {} layer KLs, got {}", self.layers, kls.len())));
        }
        let mut rec = vec![row.epoch.to_string(), row.beta.to_string(), row.lr.to_string()];
        rec.push(row.train_elbo.to_string());
        rec.push(row.valid_elbo.to_string());
        rec.extend(kls.iter().map(f64::to_string));
        rec.push(row.param_checksum.to_string());
        rec.push(row.wall_time.to_string());
        self.inner.write_record(rec)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(source: impl Read) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(source);
    let hdr = rdr.headers()?.clone();
    let layers = hdr.len().checked_sub(7).ok_or_else(|| Error::Format("metrics header too short".into()))?;
    if hdr.iter().collect::<Vec<_>>() != header(layers) {
        return Err(Error::Format("unexpected metrics header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        let parse_u = |s: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("bad integer `{s}`")));
        out.push(MetricsRow {
            epoch: parse_u(f[0])? as usize,
            beta: num(f[1])?,
            lr: num(f[2])?,
            train_elbo: num(f[3])?,
            valid_elbo: num(f[4])?,
            valid_kls: f[5..5 + layers].iter().map(|s| num(s)).collect::<Result<_>>()?,
            param_checksum: parse_u(f[5 + layers])?,
            wall_time: num(f[6 + layers])?,
        });
    }
    Ok(out)
}

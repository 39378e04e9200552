//! Bits-per-point comparison of several models over a corpus.
//!
//! Every cloud is encoded, serialized, parsed and decoded with every model;
//! a cloud that does not come back identical aborts the run, so no reported
//! rate is ever unverified.

use std::fmt::Write as _;

use acnp_core::codec::{decode_cloud, encode_cloud_with_stats, gain_percent, CompressedCloud, EncodeStats, EntropyModel};

use crate::dataset::NamedCloud;

pub struct BenchModel {
    pub name: String,
    pub model: Box<dyn EntropyModel>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cloud '{cloud}' did not survive the round trip through model '{model}'")]
    RoundTrip { cloud: String, model: String },
    #[error("cloud '{cloud}', model '{model}': payload of {payload} bits exceeds the table bound {bound:.1} + 32")]
    CoderBound { cloud: String, model: String, payload: u64, bound: f64 },
    #[error("cloud '{cloud}', model '{model}': {source}")]
    Codec { cloud: String, model: String, source: acnp_core::Error },
    #[error("nothing to benchmark")]
    Empty,
}

impl BenchError {
    pub fn is_verification(&self) -> bool {
        matches!(self, Self::RoundTrip { .. } | Self::CoderBound { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub cloud: String,
    pub points: usize,
    /// One entry per model, in model order.
    pub stats: Vec<EncodeStats>,
}

impl BenchRow {
    pub fn bpip(&self, m: usize) -> f64 {
        self.stats[m].bpip()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub models: Vec<String>,
    pub rows: Vec<BenchRow>,
}

pub fn bench(clouds: &[NamedCloud], models: &[BenchModel]) -> Result<BenchReport, BenchError> {
    if clouds.is_empty() || models.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut rows = Vec::with_capacity(clouds.len());
    for c in clouds {
        let mut stats = Vec::with_capacity(models.len());
        for m in models {
            let codec = |source| BenchError::Codec { cloud: c.name.clone(), model: m.name.clone(), source };
            let (cc, s) = encode_cloud_with_stats(&c.cloud, m.model.as_ref()).map_err(codec)?;
            let parsed = CompressedCloud::from_bytes(&cc.to_bytes()).map_err(codec)?;
            let back = decode_cloud(&parsed, m.model.as_ref()).map_err(codec)?;
            if back != c.cloud {
                return Err(BenchError::RoundTrip { cloud: c.name.clone(), model: m.name.clone() });
            }
            if s.payload_bits as f64 > s.table_bits + 32.0 {
                return Err(BenchError::CoderBound {
                    cloud: c.name.clone(),
                    model: m.name.clone(),
                    payload: s.payload_bits,
                    bound: s.table_bits,
                });
            }
            stats.push(s);
        }
        rows.push(BenchRow { cloud: c.name.clone(), points: c.cloud.len(), stats });
    }
    Ok(BenchReport { models: models.iter().map(|m| m.name.clone()).collect(), rows })
}

impl BenchReport {
    /// Unweighted mean over clouds.
    pub fn mean_bpip(&self, m: usize) -> f64 {
        self.rows.iter().map(|r| r.bpip(m)).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean rate of model `m` relative to the first model, in percent.
    pub fn mean_gain(&self, m: usize) -> f64 {
        gain_percent(self.mean_bpip(m), self.mean_bpip(0))
    }

    /// Mean model cross-entropy in bits per node.
    pub fn mean_bits_per_node(&self, m: usize) -> f64 {
        let (bits, nodes) = self.rows.iter().fold((0.0, 0usize), |(b, n), r| (b + r.stats[m].model_bits, n + r.stats[m].nodes));
        bits / nodes as f64
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("cloud,points");
        for m in &self.models {
            let _ = write!(out, ",{m}_bpip,{m}_bpip_with_header,{m}_bits_per_node");
        }
        for m in &self.models[1..] {
            let _ = write!(out, ",{m}_gain_pct");
        }
        out.push('\n');
        let line = |out: &mut String, name: &str, points: String, vals: Vec<(f64, f64, f64)>, gains: Vec<f64>| {
            let _ = write!(out, "{name},{points}");
            for (a, b, c) in vals {
                let _ = write!(out, ",{a:.6},{b:.6},{c:.6}");
            }
            for g in gains {
                let _ = write!(out, ",{g:.4}");
            }
            out.push('\n');
        };
        for r in &self.rows {
            let vals = r.stats.iter().map(|s| (s.bpip(), s.bpip_with_header(), s.model_bits_per_node())).collect();
            let gains = (1..self.models.len()).map(|m| gain_percent(r.bpip(m), r.bpip(0))).collect();
            line(&mut out, &r.cloud, r.points.to_string(), vals, gains);
        }
        let n = self.rows.len() as f64;
        let vals = (0..self.models.len())
            .map(|m| {
                let wh = self.rows.iter().map(|r| r.stats[m].bpip_with_header()).sum::<f64>() / n;
                (self.mean_bpip(m), wh, self.mean_bits_per_node(m))
            })
            .collect();
        let gains = (1..self.models.len()).map(|m| self.mean_gain(m)).collect();
        line(&mut out, "average", String::new(), vals, gains);
        out
    }

    /// Aligned text table: BPIP per model, then gain over the first model.
    pub fn table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.cloud.len()).max().unwrap_or(0).max(7);
        let col_w = self.models.iter().map(|m| m.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$} {:>8}", "cloud", "points");
        for m in &self.models {
            let _ = write!(out, " {m:>col_w$}");
        }
        let first = &self.models[0];
        for m in &self.models[1..] {
            let title = format!("{m} vs {first}");
            let _ = write!(out, " {title:>w$}", w = title.len().max(9));
        }
        out.push('\n');
        let gain_cols = |out: &mut String, gains: Vec<f64>| {
            for (m, g) in self.models[1..].iter().zip(gains) {
                let w = format!("{m} vs {first}").len().max(9);
                let _ = write!(out, " {:>w$}", format!("{g:+.2}%"));
            }
            out.push('\n');
        };
        for r in &self.rows {
            let _ = write!(out, "{:<name_w$} {:>8}", r.cloud, r.points);
            for m in 0..self.models.len() {
                let _ = write!(out, " {:>col_w$.4}", r.bpip(m));
            }
            gain_cols(&mut out, (1..self.models.len()).map(|m| gain_percent(r.bpip(m), r.bpip(0))).collect());
        }
        let _ = write!(out, "{:<name_w$} {:>8}", "average", "");
        for m in 0..self.models.len() {
            let _ = write!(out, " {:>col_w$.4}", self.mean_bpip(m));
        }
        gain_cols(&mut out, (1..self.models.len()).map(|m| self.mean_gain(m)).collect());
        out
    }
}

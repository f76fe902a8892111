//! Trajectory CSV and `key = value` report files.

use std::io::{Read, Write};

use anyhow::{anyhow, bail, Result};

use switched_slq::Trajectory;

/// Node-wise trajectory table with columns `z, t, x1.., u1..`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let xs = traj.x_nodes();
        let us = traj.u_nodes();
        let nx = xs.first().map_or(0, |x| x.len());
        let nu = us.first().map_or(0, |u| u.len());
        let mut header = vec!["z".to_string(), "t".to_string()];
        header.extend((1..=nx).map(|i| format!("x{i}")));
        header.extend((1..=nu).map(|i| format!("u{i}")));
        let rows = traj
            .z_nodes()
            .into_iter()
            .zip(traj.t_nodes())
            .zip(xs.iter().zip(&us))
            .map(|((z, t), (x, u))| {
                let mut row = vec![z, t];
                row.extend(x.iter());
                row.extend(u.iter());
                row
            })
            .collect();
        TrajectoryTable { header, rows }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| anyhow!("bad value `{v}`: {e}")))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != header.len() {
                bail!("row has {} fields, header has {}", row.len(), header.len());
            }
            rows.push(row);
        }
        Ok(TrajectoryTable { header, rows })
    }
}

/// Ordered `key = value` report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFile {
    pub entries: Vec<(String, String)>,
}

impl ReportFile {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(ReportFile { entries })
    }
}

/// Comma-separated shortest round-trip representation.
pub fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

//! `report`: joins bench CSVs into one comparison table.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bench::BenchRow;
use crate::config::Mode;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.to_string()))
    }

    /// Right-aligned columns separated by two spaces.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| self.rows.iter().map(|r| r[c].len()).chain([self.headers[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let mut out = line(&self.headers);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Reads one bench CSV, insisting on the exact bench header.
pub fn read_rows(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(BenchRow::HEADER) {
        return Err(CliError::Format(format!("{} is not a bench report (columns {:?})", path.display(), headers)));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

/// One line per (temperature, budget) with τ and SR-proxy columns per mode.
/// Ratio columns appear when baseline and confu are both present; Δτ
/// columns when all three future-aware variants are.
pub fn build_table(rows: &[BenchRow]) -> Result<Table> {
    let mut cells: BTreeMap<(u64, usize), BTreeMap<Mode, &BenchRow>> = BTreeMap::new();
    for r in rows {
        // Non-negative floats order like their bit patterns.
        let key = (r.temperature.to_bits(), r.nodes);
        if cells.entry(key).or_default().insert(r.mode, r).is_some() {
            return Err(CliError::Format(format!("duplicate row for {} at T={} nodes={}", r.mode, r.temperature, r.nodes)));
        }
    }
    let modes: Vec<Mode> = Mode::ALL.into_iter().filter(|m| rows.iter().any(|r| r.mode == *m)).collect();
    let has = |m: Mode| modes.contains(&m);
    let ratios = has(Mode::Baseline) && has(Mode::Confu);
    let deltas = has(Mode::Confu) && has(Mode::ConfuNoMoe) && has(Mode::ConfuNoMoeNoRepl);
    let mut headers = vec!["temperature".to_string(), "nodes".to_string()];
    for m in &modes {
        headers.push(format!("tau_{m}"));
        headers.push(format!("sr_{m}"));
    }
    if ratios {
        headers.extend(["tau_ratio".to_string(), "sr_ratio".to_string()]);
    }
    if deltas {
        headers.extend(["dtau_moe".to_string(), "dtau_repl".to_string()]);
    }
    let mut table = Table { headers, rows: Vec::new() };
    for ((t, nodes), by_mode) in &cells {
        let mut line = vec![f64::from_bits(*t).to_string(), nodes.to_string()];
        for m in &modes {
            match by_mode.get(m) {
                Some(r) => line.extend([f4(r.tau), f4(r.sr_proxy)]),
                None => line.extend([String::new(), String::new()]),
            }
        }
        let tau = |m: Mode| by_mode.get(&m).map(|r| r.tau);
        let sr = |m: Mode| by_mode.get(&m).map(|r| r.sr_proxy);
        let fmt = |x: Option<f64>| x.map_or_else(String::new, f4);
        if ratios {
            line.push(fmt(tau(Mode::Confu).zip(tau(Mode::Baseline)).map(|(a, b)| a / b)));
            line.push(fmt(sr(Mode::Confu).zip(sr(Mode::Baseline)).map(|(a, b)| a / b)));
        }
        if deltas {
            line.push(fmt(tau(Mode::Confu).zip(tau(Mode::ConfuNoMoe)).map(|(a, b)| a - b)));
            line.push(fmt(tau(Mode::ConfuNoMoe).zip(tau(Mode::ConfuNoMoeNoRepl)).map(|(a, b)| a - b)));
        }
        table.rows.push(line);
    }
    Ok(table)
}

pub fn report(paths: &[impl AsRef<Path>]) -> Result<Table> {
    if paths.is_empty() {
        return Err(CliError::Config("report needs at least one bench CSV".into()));
    }
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_rows(p.as_ref())?);
    }
    build_table(&rows)
}

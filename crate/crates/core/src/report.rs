//! Plot-ready report files.
//!
//! Every result is first flattened into a [`Table`] of typed cells and then
//! written as CSV or JSON. Both forms carry the scenario hash and root seed:
//! CSV files start with `#`-prefixed header lines, JSON files wrap the rows
//! in an object with `scenario_sha256` and `root_seed` fields. Summary
//! objects (dominance ratio, hysteresis gaps, ...) are always JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::scenario::RunResults;
use crate::thermal::TracePoint;

/// One table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(v) => v.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<i32> for Cell {
    fn from(v: i32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Shortest round-trip decimal, switching to exponent form outside
/// `[1e-4, 1e16)`.
fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "{}", self.name);
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "both" => Ok(Format::Both),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$(Cell::from($x)),*] };
}

fn trace_rows(t: &mut Table, power: f64, direction: &str, trace: &[TracePoint]) {
    for p in trace {
        t.push(row![power, direction, p.current, p.transmission]);
    }
}

/// Flattens every available result into tables.
pub fn tables(results: &RunResults) -> Vec<Table> {
    let mut out = Vec::new();

    if let Some(rows) = &results.spectrum {
        let mut t = Table::new(
            "figS1_resonances",
            &["line", "true_center_hz", "f0_hz", "fwhm_hz", "tmin", "q"],
        );
        for r in rows {
            t.push(row![
                r.line,
                r.true_center,
                r.fitted_center,
                r.fwhm,
                r.min_transmission,
                r.q
            ]);
        }
        out.push(t);
    }

    if let Some(runs) = &results.hysteresis {
        let mut t = Table::new(
            "figS3_hysteresis",
            &["power_mw", "direction", "current_ma", "transmission"],
        );
        for run in runs {
            trace_rows(&mut t, run.power, "forward", &run.forward);
            trace_rows(&mut t, run.power, "backward", &run.backward);
            trace_rows(&mut t, run.power, "static", &run.static_trace);
        }
        out.push(t);
    }

    if let Some(lock) = &results.lock {
        for (name, trace) in [
            ("figS4_lock", &lock.closed),
            ("figS4_lock_open", &lock.open),
        ] {
            let mut t = Table::new(name, &["time_s", "transmission", "current_ma", "saturated"]);
            for s in trace.iter() {
                t.push(row![s.time, s.transmission, s.current, s.saturated]);
            }
            out.push(t);
        }
    }

    if let Some(tomo) = &results.tomo {
        let mut t = Table::new(
            "fig2a_visibility",
            &[
                "theta_rad",
                "hwp_angle_rad",
                "dd",
                "da",
                "ad",
                "aa",
                "visibility",
                "sigma",
                "expected",
            ],
        );
        for v in &tomo.visibility {
            let [dd, da, ad, aa] = v.counts;
            t.push(row![
                v.theta,
                v.hwp_angle,
                dd,
                da,
                ad,
                aa,
                v.visibility,
                v.sigma,
                v.theta.cos()
            ]);
        }
        out.push(t);

        let mut t = Table::new("fig2c_density", &["channel", "row", "col", "re", "im"]);
        for (k, [re, im]) in tomo.density.to_pairs().into_iter().enumerate() {
            t.push(row![tomo.density_channel, k / 4, k % 4, re, im]);
        }
        out.push(t);

        let mut t = Table::new(
            "fig2d_fidelities",
            &[
                "channel",
                "signal_hz",
                "idler_hz",
                "raw_fidelity",
                "net_fidelity",
                "model_fidelity",
                "true_rate",
                "accidental_rate",
            ],
        );
        for c in &tomo.channels {
            t.push(row![
                c.m,
                c.signal_frequency,
                c.idler_frequency,
                c.raw,
                c.net,
                c.model,
                c.true_rate,
                c.accidental_rate
            ]);
        }
        out.push(t);

        let mut t = Table::new(
            "fig2e_fidelity_vs_power",
            &[
                "channel",
                "power_mw",
                "raw_fidelity",
                "net_fidelity",
                "model_fidelity",
            ],
        );
        for p in &tomo.vs_power {
            t.push(row![tomo.sweep_channel, p.power, p.raw, p.net, p.model]);
        }
        out.push(t);
    }

    if let Some(pf) = &results.power_fit {
        let mut t = Table::new(
            "fig3_power_terms",
            &[
                "channel",
                "frequency_hz",
                "a",
                "b",
                "c",
                "resonant_flag",
                "sigma_a",
                "sigma_b",
                "sigma_c",
                "on_grid",
            ],
        );
        for l in &pf.lines {
            let f = &l.fit;
            t.push(row![
                l.offset_index,
                l.frequency,
                f.a,
                f.b,
                f.c,
                l.resonant,
                f.sigma_a,
                f.sigma_b,
                f.sigma_c,
                l.on_grid
            ]);
        }
        out.push(t);
    }

    if let Some(j) = &results.jsi {
        let n = j.grid.size();
        let mut cols = vec!["signal_channel".to_string()];
        cols.extend((1..=n).map(|k| format!("idler_{k}")));
        let mut t = Table {
            name: "fig4a_jsi".into(),
            columns: cols,
            rows: Vec::new(),
        };
        for (r, rates) in j.grid.rates.iter().enumerate() {
            let mut row = vec![Cell::from(r + 1)];
            row.extend(rates.iter().map(|v| Cell::from(*v)));
            t.push(row);
        }
        out.push(t);

        let mut t = Table::new(
            "fig4b_car",
            &[
                "channel",
                "power_mw",
                "coincidences",
                "accidentals",
                "car",
                "model_car",
            ],
        );
        for p in &j.car {
            t.push(row![
                j.car_channel,
                p.power,
                p.coincidences,
                p.accidentals,
                p.car,
                p.model
            ]);
        }
        out.push(t);
    }

    if let Some(m) = &results.metrics {
        let mut t = Table::new(
            "fig5_brightness",
            &[
                "channel",
                "bandwidth_mhz",
                "rs",
                "ri",
                "rc",
                "pgr",
                "true_pgr",
                "brightness",
            ],
        );
        for c in &m.channels {
            t.push(row![
                c.m,
                c.bandwidth_mhz,
                c.rs,
                c.ri,
                c.rc,
                c.pgr,
                c.true_pgr,
                c.brightness
            ]);
        }
        out.push(t);

        let mut t = Table::new(
            "fig6_efficiencies",
            &[
                "channel",
                "eta_s",
                "eta_i",
                "extraction_s",
                "extraction_i",
                "consistent",
            ],
        );
        for c in &m.channels {
            let e = &c.efficiencies;
            t.push(row![
                c.m,
                e.eta_s,
                e.eta_i,
                e.extraction_s,
                e.extraction_i,
                e.consistent
            ]);
        }
        out.push(t);
    }
    out
}

/// Named JSON summaries of the available results.
pub fn summaries(results: &RunResults) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    if let Some(runs) = &results.hysteresis {
        let rows: Vec<Value> = runs
            .iter()
            .map(|r| {
                json!({
                    "power_mw": r.power,
                    "max_gap": r.max_gap,
                    "area": r.area,
                    "max_static_deviation": r.max_static_deviation,
                })
            })
            .collect();
        out.push(("figS3_hysteresis_summary".into(), json!({ "powers": rows })));
    }
    if let Some(l) = &results.lock {
        out.push((
            "figS4_lock_summary".into(),
            json!({
                "setpoint": l.setpoint,
                "samples": l.closed.len(),
                "max_closed_deviation": l.max_closed_deviation,
                "max_open_transmission": l.max_open_transmission,
                "saturated_samples": l.closed.iter().filter(|s| s.saturated).count(),
            }),
        ));
    }
    if let Some(t) = &results.tomo {
        let min = |f: fn(&crate::scenario::ChannelFidelity) -> f64| {
            t.channels.iter().map(f).fold(f64::INFINITY, f64::min)
        };
        out.push((
            "fig2d_summary".into(),
            json!({
                "compensator_hwp_angle_rad": t.compensator_angle,
                "min_raw_fidelity": min(|c| c.raw),
                "min_net_fidelity": min(|c| c.net),
                "density_channel": t.density_channel,
                "density_matrix": t.density,
            }),
        ));
        let tables: Vec<Value> = t
            .tables
            .iter()
            .map(|(m, table)| json!({ "channel": m, "table": table }))
            .collect();
        out.push((
            "fig2d_tomography_tables".into(),
            json!({ "channels": tables }),
        ));
    }
    if let Some(pf) = &results.power_fit {
        out.push((
            "fig3_summary".into(),
            json!({
                "reference_b": pf.reference_b,
                "mean_b_on_resonance": pf.mean_b_on,
                "mean_b_off_resonance": pf.mean_b_off,
                "mean_b_off_low_frequency": pf.mean_b_off_low,
                "mean_b_off_high_frequency": pf.mean_b_off_high,
                "misclassified": pf.misclassified,
                "lines": pf.lines.len(),
            }),
        ));
    }
    if let Some(j) = &results.jsi {
        out.push((
            "fig4a_jsi_summary".into(),
            json!({
                "diagonal_rates": j.grid.diagonal(),
                "max_off_diagonal_rate": j.grid.max_off_diagonal(),
                "dominance_ratio": j.dominance,
                "cross_accidental_rate": j.cross_accidental_rate,
                "integration_time_s": j.grid.integration_time,
                "car_peak_power_mw": j.car_peak_power,
            }),
        ));
    }
    if let Some(m) = &results.metrics {
        out.push((
            "fig5_fig6_summary".into(),
            json!({
                "mean_bandwidth_mhz": m.mean_bandwidth_mhz,
                "mean_extraction": m.mean_extraction,
            }),
        ));
    }
    out
}

fn header_lines(results: &RunResults, name: &str) -> String {
    format!(
        "# table: {name}\n# scenario_sha256: {}\n# root_seed: {}\n",
        results.scenario_hash, results.root_seed
    )
}

pub fn table_to_csv(results: &RunResults, table: &Table) -> String {
    let mut s = header_lines(results, &table.name);
    s.push_str(&table.columns.join(","));
    s.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(Cell::csv).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn table_to_json(results: &RunResults, table: &Table) -> String {
    let v = json!({
        "table": table.name,
        "scenario_sha256": results.scenario_hash,
        "root_seed": results.root_seed,
        "columns": table.columns,
        "rows": table.rows,
    });
    serde_json::to_string_pretty(&v).expect("table serializes") + "\n"
}

fn summary_to_json(results: &RunResults, name: &str, body: &Value) -> String {
    let v = json!({
        "summary": name,
        "scenario_sha256": results.scenario_hash,
        "root_seed": results.root_seed,
        "data": body,
    });
    serde_json::to_string_pretty(&v).expect("summary serializes") + "\n"
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes one file per table (and per summary) into `dir`, creating it if
/// needed. Returns the written paths in emission order.
pub fn emit_report(results: &RunResults, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for table in tables(results) {
        if matches!(format, Format::Csv | Format::Both) {
            written.push(write(
                dir.join(format!("{}.csv", table.name)),
                &table_to_csv(results, &table),
            )?);
        }
        if matches!(format, Format::Json | Format::Both) {
            written.push(write(
                dir.join(format!("{}.json", table.name)),
                &table_to_json(results, &table),
            )?);
        }
    }
    for (name, body) in summaries(results) {
        written.push(write(
            dir.join(format!("{name}.json")),
            &summary_to_json(results, &name, &body),
        )?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for v in [
            0.0,
            1.0,
            -2.5,
            193.5e12,
            1e-9,
            5e-8,
            0.123456789,
            1e20,
            -3.3e-5,
        ] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(format_float(5e-8), "5e-8");
        assert_eq!(format_float(0.05), "0.05");
    }
}

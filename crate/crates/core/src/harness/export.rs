use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::dispatch::{write_allocation_csv, write_dispatch_csv};
use crate::error::{Error, Result};
use crate::online::{write_interval_csv, write_timing_csv};
use crate::queues::write_queue_csv;

use super::config::RunConfig;
use super::metrics::{read_metrics_csv, write_metrics_csv, MetricsRow};
use super::run::RunOutput;

/// Files every run bundle holds; `report` requires all of them.
pub const BUNDLE_FILES: [&str; 8] = [
    "config.json",
    "metrics.csv",
    "intervals.csv",
    "dispatch.csv",
    "allocations.csv",
    "queues.csv",
    "emissions.csv",
    "ev_final.csv",
];

pub fn bundle_dir_name(output: &RunOutput) -> String {
    format!("{}-seed{}", output.metrics.method, output.metrics.seed)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes the run's trajectory bundle under `root/<method>-seed<S>/`.
/// Wall-clock solve times go to `timing.csv` only when `with_timing` is set,
/// so the default bundle is byte-identical across repeated runs.
pub fn write_run_bundle(output: &RunOutput, root: &Path, with_timing: bool) -> Result<PathBuf> {
    let dir = root.join(bundle_dir_name(output));
    fs::create_dir_all(&dir)?;
    let traj = &output.trajectories;
    fs::write(dir.join("config.json"), output.config.to_json_pretty()? + "\n")?;
    write_metrics_csv(std::slice::from_ref(&output.metrics), create(&dir, "metrics.csv")?)?;
    write_interval_csv(&traj.intervals, create(&dir, "intervals.csv")?)?;
    write_dispatch_csv(&traj.dispatch, create(&dir, "dispatch.csv")?)?;
    write_allocation_csv(&traj.dispatch, create(&dir, "allocations.csv")?)?;
    write_queue_csv(&traj.queues, create(&dir, "queues.csv")?)?;
    write_emissions_csv(output, create(&dir, "emissions.csv")?)?;
    write_ev_final_csv(output, create(&dir, "ev_final.csv")?)?;
    if traj.delays.is_some() {
        write_delays_csv(output, create(&dir, "delays.csv")?)?;
    }
    if with_timing {
        write_timing_csv(&traj.intervals, create(&dir, "timing.csv")?)?;
    }
    Ok(dir)
}

/// Writes `slot,intensity,emission_power,emission_rate`.
pub fn write_emissions_csv<W: std::io::Write>(output: &RunOutput, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "intensity", "emission_power", "emission_rate"])?;
    for (t, &p) in output.trajectories.emission_power.iter().enumerate() {
        let w_t = output.scenario.carbon.at(t);
        wtr.write_record([t.to_string(), w_t.to_string(), p.to_string(), (w_t * p).to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `id,group,arrival_slot,departure_slot,e_ini,e_req,e_final,shortfall`.
pub fn write_ev_final_csv<W: std::io::Write>(output: &RunOutput, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "id",
        "group",
        "arrival_slot",
        "departure_slot",
        "e_ini",
        "e_req",
        "e_final",
        "shortfall",
    ])?;
    for (init, fin) in output.scenario.sessions.iter().zip(&output.trajectories.final_sessions) {
        wtr.write_record([
            init.id.to_string(),
            init.group_index.to_string(),
            init.arrival_slot.to_string(),
            init.departure_slot.to_string(),
            init.initial_energy_kwh.to_string(),
            init.required_energy_kwh.to_string(),
            fin.current_energy_kwh.to_string(),
            (init.required_energy_kwh - fin.current_energy_kwh).max(0.0).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `group,max_delay_slots,bound_slots,j_max,h_max,completed,dropped_power_kw`.
pub fn write_delays_csv<W: std::io::Write>(output: &RunOutput, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "group",
        "max_delay_slots",
        "bound_slots",
        "j_max",
        "h_max",
        "completed",
        "dropped_power_kw",
    ])?;
    if let Some(d) = &output.trajectories.delays {
        for k in 0..d.max_delay_slots.len() {
            wtr.write_record([
                k.to_string(),
                d.max_delay_slots[k].to_string(),
                d.bound_slots[k].to_string(),
                d.j_max[k].to_string(),
                d.h_max[k].to_string(),
                d.completed[k].to_string(),
                d.dropped_power_kw[k].to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// One run bundle as read back by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub name: String,
    pub metrics: MetricsRow,
    pub slot_duration_h: f64,
    pub rate_cap_kg_per_h: f64,
    /// `(slot, p_lower, p_upper)`
    pub intervals: Vec<(usize, f64, f64)>,
    /// `(slot, emission_rate)`
    pub emission_rate: Vec<(usize, f64)>,
    /// `(slot, ΣJ, ΣH, Qc)`
    pub backlog: Vec<(usize, f64, f64, f64)>,
}

/// Paths written by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub runs: Vec<String>,
}

fn column(headers: &csv::StringRecord, name: &str, file: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", file.display())))
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, file: &Path) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Format(format!("{}: bad value `{raw}`", file.display())))
}

/// Reads selected columns of every row of a CSV file.
fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = names.iter().map(|n| column(&headers, n, path)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(idx.iter().map(|&i| parse(&rec, i, path)).collect::<Result<Vec<f64>>>()?);
    }
    Ok(rows)
}

pub fn read_run_bundle(dir: &Path) -> Result<RunRecord> {
    for f in BUNDLE_FILES {
        if !dir.join(f).is_file() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("incomplete run directory {}: missing {f}", dir.display()),
            )));
        }
    }
    // input CSVs the run read need not exist any more
    let config: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let metrics = read_metrics_csv(File::open(dir.join("metrics.csv"))?)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Format(format!("{}: metrics.csv has no rows", dir.display())))?;
    let intervals = read_columns(&dir.join("intervals.csv"), &["slot", "p_lower", "p_upper"])?
        .into_iter()
        .map(|r| (r[0] as usize, r[1], r[2]))
        .collect();
    let emission_rate = read_columns(&dir.join("emissions.csv"), &["slot", "emission_rate"])?
        .into_iter()
        .map(|r| (r[0] as usize, r[1]))
        .collect();
    let mut backlog: Vec<(usize, f64, f64, f64)> = Vec::new();
    for r in read_columns(&dir.join("queues.csv"), &["slot", "J", "H", "Qc"])? {
        let slot = r[0] as usize;
        match backlog.last_mut() {
            Some(last) if last.0 == slot => {
                last.1 += r[1];
                last.2 += r[2];
            }
            _ => backlog.push((slot, r[1], r[2], r[3])),
        }
    }
    Ok(RunRecord {
        name: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        metrics,
        slot_duration_h: config.scenario.clock()?.slot_duration_h,
        rate_cap_kg_per_h: config.control.rate_cap_kg_per_h,
        intervals,
        emission_rate,
        backlog,
    })
}

/// Run bundles under `dir`: `dir` itself when it is one, else its
/// immediate subdirectories holding a `metrics.csv`, in name order.
pub fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", dir.display()),
        )));
    }
    if dir.join("metrics.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("metrics.csv").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Format(format!("no run bundles under {}", dir.display())));
    }
    Ok(runs)
}

/// Writes plot-ready series and `summary.txt` to `dir/report/`.
pub fn report(dir: &Path) -> Result<ReportFiles> {
    let runs = discover_runs(dir)?
        .iter()
        .map(|p| read_run_bundle(p))
        .collect::<Result<Vec<_>>>()?;
    let out = dir.join("report");
    fs::create_dir_all(&out)?;

    let mut wtr = csv::Writer::from_writer(create(&out, "cumulative_flexibility.csv")?);
    wtr.write_record(["run", "slot", "cumulative_flexibility_kwh"])?;
    for r in &runs {
        let mut acc = 0.0;
        for &(slot, lo, hi) in &r.intervals {
            acc += (hi - lo) * r.slot_duration_h;
            wtr.write_record([r.name.clone(), slot.to_string(), acc.to_string()])?;
        }
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_writer(create(&out, "emission_rate.csv")?);
    wtr.write_record(["run", "slot", "time_avg_emission_rate_kg_per_h", "rate_cap_kg_per_h"])?;
    for r in &runs {
        let mut acc = 0.0;
        for (n, &(slot, rate)) in r.emission_rate.iter().enumerate() {
            acc += rate;
            wtr.write_record([
                r.name.clone(),
                slot.to_string(),
                (acc / (n + 1) as f64).to_string(),
                r.rate_cap_kg_per_h.to_string(),
            ])?;
        }
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_writer(create(&out, "queue_backlog.csv")?);
    wtr.write_record(["run", "slot", "total_J", "total_H", "Qc"])?;
    for r in &runs {
        for &(slot, j, h, qc) in &r.backlog {
            wtr.write_record([r.name.clone(), slot.to_string(), j.to_string(), h.to_string(), qc.to_string()])?;
        }
    }
    wtr.flush()?;

    fs::write(out.join("summary.txt"), summary_table(&runs))?;
    Ok(ReportFiles {
        dir: out,
        runs: runs.into_iter().map(|r| r.name).collect(),
    })
}

/// Metrics side by side, one column per run.
pub fn summary_table(runs: &[RunRecord]) -> String {
    let rows: [(&str, Box<dyn Fn(&MetricsRow) -> String>); 6] = [
        ("method", Box::new(|m| m.method.to_string())),
        ("total flexibility (kWh)", Box::new(|m| format!("{:.1}", m.total_flexibility))),
        ("emission rate (kg/h)", Box::new(|m| format!("{:.2}", m.emission_rate))),
        ("unfulfilled energy (kWh)", Box::new(|m| format!("{:.1}", m.unfulfilled))),
        ("fulfillment ratio", Box::new(|m| format!("{:.4}", m.fulfillment_ratio))),
        (
            "performance ratio",
            Box::new(|m| m.perf_ratio.map_or("-".into(), |v| format!("{v:.4}"))),
        ),
    ];
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let cells: Vec<Vec<String>> = runs
        .iter()
        .map(|r| rows.iter().map(|(_, f)| f(&r.metrics)).collect())
        .collect();
    let widths: Vec<usize> = runs
        .iter()
        .zip(&cells)
        .map(|(r, c)| c.iter().map(String::len).chain([r.name.len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let _ = write!(s, "{:label_w$}", "");
    for (r, w) in runs.iter().zip(&widths) {
        let _ = write!(s, "  {:>w$}", r.name);
    }
    s.push('\n');
    for (i, (label, _)) in rows.iter().enumerate() {
        let _ = write!(s, "{label:label_w$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, "  {:>w$}", c[i]);
        }
        s.push('\n');
    }
    s
}

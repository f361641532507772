use std::io::Write;

use super::{run_experiment, SimConfig, SimError, StatsSummary};

pub const CSV_HEADER: [&str; 16] = [
    "num_nodes",
    "timer_period_s",
    "k",
    "seed",
    "topology",
    "link_delay_s",
    "trials",
    "observer",
    "n",
    "mean_s",
    "median_s",
    "stddev_s",
    "mode_s",
    "p95_s",
    "note",
    "error",
];

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub config: SimConfig,
    pub result: Result<(StatsSummary, Vec<f64>), SimError>,
}

/// Runs each config independently. A failing config yields an error row and
/// the sweep continues.
pub fn sweep(configs: &[SimConfig]) -> Vec<SweepRow> {
    configs.iter().map(|c| SweepRow { config: c.clone(), result: run_experiment(c) }).collect()
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        let c = &row.config;
        let mut record = vec![
            c.num_nodes.to_string(),
            c.timer_period_s.to_string(),
            c.k.to_string(),
            c.seed.to_string(),
            c.topology.to_string(),
            c.link_delay_s.to_string(),
            c.trials.to_string(),
            c.observer.to_string(),
        ];
        match &row.result {
            Ok((s, _)) => {
                record.push(s.n.to_string());
                for v in [s.mean_s, s.median_s, s.stddev_s, s.mode_s, s.p95_s] {
                    record.push(format!("{v:.6}"));
                }
                record.push(s.note().unwrap_or_default().to_owned());
                record.push(String::new());
            }
            Err(e) => {
                record.extend(std::iter::repeat_n(String::new(), 7));
                record.push(e.to_string());
            }
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// One delay per line, in seconds with microsecond resolution.
pub fn format_delays(delays: &[f64]) -> String {
    delays.iter().map(|d| format!("{d:.6}\n")).collect()
}

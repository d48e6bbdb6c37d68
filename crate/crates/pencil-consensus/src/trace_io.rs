//! CSV emission and parse-back for simulation traces.
//!
//! Layout contract:
//! * `states.csv` has one row per sample and agent with the header
//!   `t,agent,x1..xn,xhat1..xhatn,u`; the leader is agent 0 and its input
//!   column is always zero. Runs without observers repeat the physical state
//!   in the `xhat` columns, keeping the header shape mode-independent.
//! * `lyapunov.csv` has one row per sample: `t,V,envelope,margin` with
//!   `margin = envelope - V`. Without a certified envelope both bound
//!   columns hold `inf`, the vacuous bound.
//! * `inputs.csv` has one row per sample: `t,u1..uN` over the followers.
//! * `observer_errors.csv` has one row per sample and agent:
//!   `t,agent,e1..en` with `e = xhat - x`.
//!
//! Values are written through the shortest round-trip decimal formatting, so
//! parsing a file back yields bit-identical doubles; that round trip is part
//! of the public contract and checked by [`csv_round_trips`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::sim::SimTrace;

/// File names emitted by [`emit_trace_csv`], in emission order.
pub const TRACE_FILES: [&str; 4] = [
    "states.csv",
    "lyapunov.csv",
    "inputs.csv",
    "observer_errors.csv",
];

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Writes the four trace files into `dir` (created if needed) and returns
/// their paths. An empty trace produces header-only files.
pub fn emit_trace_csv(trace: &SimTrace<f64>, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let n = trace.n;
    let n_agents = trace.n_followers + 1;

    let states_path = dir.join(TRACE_FILES[0]);
    {
        let mut w = csv::Writer::from_path(&states_path)?;
        let mut header = vec!["t".to_string(), "agent".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("xhat{i}")));
        header.push("u".to_string());
        w.write_record(&header)?;
        for s in 0..trace.len() {
            for k in 0..n_agents {
                let mut row = vec![fmt(trace.times[s]), k.to_string()];
                row.extend(trace.states[s][k].iter().map(|&v| fmt(v)));
                row.extend(trace.observer_states[s][k].iter().map(|&v| fmt(v)));
                row.push(fmt(trace.inputs[s][k]));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
    }

    let lyapunov_path = dir.join(TRACE_FILES[1]);
    {
        let mut w = csv::Writer::from_path(&lyapunov_path)?;
        w.write_record(["t", "V", "envelope", "margin"])?;
        let have_bounds = trace.bounds.len() == trace.len();
        for s in 0..trace.len() {
            let env = if have_bounds {
                trace.bounds[s]
            } else {
                f64::INFINITY
            };
            w.write_record([
                fmt(trace.times[s]),
                fmt(trace.v[s]),
                fmt(env),
                fmt(env - trace.v[s]),
            ])?;
        }
        w.flush()?;
    }

    let inputs_path = dir.join(TRACE_FILES[2]);
    {
        let mut w = csv::Writer::from_path(&inputs_path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=trace.n_followers).map(|k| format!("u{k}")));
        w.write_record(&header)?;
        for s in 0..trace.len() {
            let mut row = vec![fmt(trace.times[s])];
            row.extend(trace.inputs[s].iter().skip(1).map(|&v| fmt(v)));
            w.write_record(&row)?;
        }
        w.flush()?;
    }

    let errors_path = dir.join(TRACE_FILES[3]);
    {
        let mut w = csv::Writer::from_path(&errors_path)?;
        let mut header = vec!["t".to_string(), "agent".to_string()];
        header.extend((1..=n).map(|i| format!("e{i}")));
        w.write_record(&header)?;
        for s in 0..trace.len() {
            for k in 0..n_agents {
                let mut row = vec![fmt(trace.times[s]), k.to_string()];
                row.extend(
                    trace.observer_states[s][k]
                        .iter()
                        .zip(trace.states[s][k].iter())
                        .map(|(&xh, &x)| fmt(xh - x)),
                );
                w.write_record(&row)?;
            }
        }
        w.flush()?;
    }

    Ok(vec![states_path, lyapunov_path, inputs_path, errors_path])
}

/// Everything the emitted files encode, parsed back into memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedTrace {
    pub times: Vec<f64>,
    /// `states[sample][agent]` as plain coordinate rows.
    pub states: Vec<Vec<Vec<f64>>>,
    pub observer_states: Vec<Vec<Vec<f64>>>,
    /// Per-agent inputs from `states.csv`, leader first.
    pub inputs: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub envelope: Vec<f64>,
    pub margin: Vec<f64>,
}

fn parse_field(raw: &str, file: &str) -> Result<f64, CliError> {
    raw.parse::<f64>()
        .map_err(|e| CliError::Usage(format!("{file}: bad number {raw:?} ({e})")))
}

/// Reads `states.csv` and `lyapunov.csv` back from `dir`.
pub fn parse_trace_csv(dir: &Path) -> Result<ParsedTrace, CliError> {
    let states_path = dir.join(TRACE_FILES[0]);
    let mut rdr = csv::Reader::from_path(&states_path)?;
    let header = rdr.headers()?.clone();
    let width = header.len();
    if width < 4 || (width - 3) % 2 != 0 {
        return Err(CliError::Usage(format!(
            "states.csv: header has {width} columns, expected t,agent,x..,xhat..,u"
        )));
    }
    let n = (width - 3) / 2;

    let mut out = ParsedTrace::default();
    for record in rdr.records() {
        let record = record?;
        let t = parse_field(&record[0], "states.csv")?;
        let agent: usize = record[1]
            .parse()
            .map_err(|_| CliError::Usage(format!("states.csv: bad agent id {:?}", &record[1])))?;
        let x: Vec<f64> = (0..n)
            .map(|i| parse_field(&record[2 + i], "states.csv"))
            .collect::<Result<_, _>>()?;
        let xhat: Vec<f64> = (0..n)
            .map(|i| parse_field(&record[2 + n + i], "states.csv"))
            .collect::<Result<_, _>>()?;
        let u = parse_field(&record[2 + 2 * n], "states.csv")?;
        if agent == 0 {
            out.times.push(t);
            out.states.push(Vec::new());
            out.observer_states.push(Vec::new());
            out.inputs.push(Vec::new());
        }
        let sample = out
            .states
            .last_mut()
            .ok_or_else(|| CliError::Usage("states.csv: rows precede agent 0".into()))?;
        if sample.len() != agent {
            return Err(CliError::Usage(format!(
                "states.csv: agent {agent} out of order at t = {t}"
            )));
        }
        sample.push(x);
        out.observer_states.last_mut().unwrap().push(xhat);
        out.inputs.last_mut().unwrap().push(u);
    }

    let lyapunov_path = dir.join(TRACE_FILES[1]);
    let mut rdr = csv::Reader::from_path(&lyapunov_path)?;
    for record in rdr.records() {
        let record = record?;
        out.v.push(parse_field(&record[1], "lyapunov.csv")?);
        out.envelope.push(parse_field(&record[2], "lyapunov.csv")?);
        out.margin.push(parse_field(&record[3], "lyapunov.csv")?);
    }
    if out.v.len() != out.times.len() {
        return Err(CliError::Usage(format!(
            "lyapunov.csv has {} samples, states.csv has {}",
            out.v.len(),
            out.times.len()
        )));
    }
    Ok(out)
}

/// Emits, re-parses and compares against the in-memory trace; `Ok(true)`
/// means every parsed value is bit-identical to its source.
pub fn csv_round_trips(trace: &SimTrace<f64>, dir: &Path) -> Result<bool, CliError> {
    emit_trace_csv(trace, dir)?;
    let parsed = parse_trace_csv(dir)?;
    Ok(parsed_matches(&parsed, trace))
}

/// Exact comparison of a parsed file set with the trace it came from.
pub fn parsed_matches(parsed: &ParsedTrace, trace: &SimTrace<f64>) -> bool {
    let same_f64 = |a: f64, b: f64| a.to_bits() == b.to_bits();
    if parsed.times.len() != trace.len() {
        return false;
    }
    let have_bounds = trace.bounds.len() == trace.len();
    for s in 0..trace.len() {
        if !same_f64(parsed.times[s], trace.times[s]) || !same_f64(parsed.v[s], trace.v[s]) {
            return false;
        }
        let env = if have_bounds {
            trace.bounds[s]
        } else {
            f64::INFINITY
        };
        if !same_f64(parsed.envelope[s], env) {
            return false;
        }
        if parsed.states[s].len() != trace.n_followers + 1 {
            return false;
        }
        for k in 0..=trace.n_followers {
            if !same_f64(parsed.inputs[s][k], trace.inputs[s][k]) {
                return false;
            }
            for i in 0..trace.n {
                if !same_f64(parsed.states[s][k][i], trace.states[s][k][i])
                    || !same_f64(parsed.observer_states[s][k][i], trace.observer_states[s][k][i])
                {
                    return false;
                }
            }
        }
    }
    true
}

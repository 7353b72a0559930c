//! CSV encodings of run logs and transition dumps.
//!
//! Floats are written in their shortest round-trip form so a parse of a
//! written file gives back bit-identical values.

use crate::agent::Transition;
use crate::error::{Error, Result};
use crate::flow::TRANSITION_COLUMNS;
use crate::orchestrator::{RunLog, StepRecord};
use crate::sim::ProcessorState;

pub const RUNLOG_COLUMNS: [&str; 11] = [
    "t", "fps", "freq", "power", "temp", "action", "reward", "epsilon", "max_q", "agent_loss",
    "fm_loss",
];

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn finish(writer: csv::Writer<Vec<u8>>) -> String {
    let bytes = writer.into_inner().expect("in-memory writer flushes");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

fn optional(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn runlog_to_csv(log: &RunLog) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RUNLOG_COLUMNS).expect("in-memory write");
    for r in &log.records {
        w.write_record([
            r.t.to_string(),
            r.state.fps.to_string(),
            r.state.freq.to_string(),
            r.state.power.to_string(),
            r.state.temp.to_string(),
            r.action.to_string(),
            r.reward.to_string(),
            r.epsilon.to_string(),
            r.max_q.to_string(),
            optional(r.agent_loss),
            optional(r.fm_loss),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

struct Fields<'a> {
    record: &'a csv::StringRecord,
    line: usize,
}

impl Fields<'_> {
    fn raw(&self, i: usize, name: &str) -> Result<&str> {
        self.record.get(i).ok_or_else(|| Error::Parse {
            line: self.line,
            message: format!("missing column `{name}`"),
        })
    }

    fn parse<T: std::str::FromStr>(&self, i: usize, name: &str) -> Result<T> {
        let raw = self.raw(i, name)?;
        raw.trim().parse().map_err(|_| Error::Parse {
            line: self.line,
            message: format!("bad value `{raw}` in column `{name}`"),
        })
    }

    fn float(&self, i: usize, name: &str) -> Result<f64> {
        let v: f64 = self.parse(i, name)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Parse {
                line: self.line,
                message: format!("non-finite value in column `{name}`"),
            })
        }
    }

    fn optional(&self, i: usize, name: &str) -> Result<Option<f64>> {
        if self.raw(i, name)?.trim().is_empty() {
            Ok(None)
        } else {
            self.float(i, name).map(Some)
        }
    }
}

fn records(text: &str, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let found = reader.headers().map_err(csv_error)?.clone();
    if found.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        out.push((line, record));
    }
    Ok(out)
}

pub fn parse_runlog_csv(text: &str, method: &str, seed: u64) -> Result<RunLog> {
    let c = &RUNLOG_COLUMNS;
    let records = records(text, c)?
        .iter()
        .map(|(line, record)| {
            let f = Fields { record, line: *line };
            Ok(StepRecord {
                t: f.parse(0, c[0])?,
                state: ProcessorState {
                    fps: f.float(1, c[1])?,
                    freq: f.float(2, c[2])?,
                    power: f.float(3, c[3])?,
                    temp: f.float(4, c[4])?,
                },
                action: f.parse(5, c[5])?,
                reward: f.float(6, c[6])?,
                epsilon: f.float(7, c[7])?,
                max_q: f.float(8, c[8])?,
                agent_loss: f.optional(9, c[9])?,
                fm_loss: f.optional(10, c[10])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunLog {
        method: method.to_string(),
        seed,
        records,
    })
}

/// Transitions as rows of `fps,freq,power,temp,action,next_*,reward,done`,
/// with the action as a level index and done as 0 or 1.
pub fn transitions_to_csv<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRANSITION_COLUMNS).expect("in-memory write");
    for t in transitions {
        let s = t.s.to_array();
        let n = t.s_next.to_array();
        let mut row: Vec<String> = s.iter().map(f64::to_string).collect();
        row.push(t.a.to_string());
        row.extend(n.iter().map(f64::to_string));
        row.push(t.r.to_string());
        row.push(u8::from(t.done).to_string());
        w.write_record(&row).expect("in-memory write");
    }
    finish(w)
}

pub fn parse_transitions_csv(text: &str, num_actions: usize) -> Result<Vec<Transition>> {
    let c = &TRANSITION_COLUMNS;
    records(text, c)?
        .iter()
        .map(|(line, record)| {
            let f = Fields { record, line: *line };
            let state = |o: usize| -> Result<ProcessorState> {
                Ok(ProcessorState {
                    fps: f.float(o, c[o])?,
                    freq: f.float(o + 1, c[o + 1])?,
                    power: f.float(o + 2, c[o + 2])?,
                    temp: f.float(o + 3, c[o + 3])?,
                })
            };
            let a: usize = f.parse(4, c[4])?;
            if a >= num_actions {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("action {a} out of range for {num_actions} actions"),
                });
            }
            let done = match f.raw(10, c[10])?.trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        line: *line,
                        message: format!("done must be 0 or 1, got `{other}`"),
                    })
                }
            };
            Ok(Transition {
                s: state(0)?,
                a,
                r: f.float(9, c[9])?,
                s_next: state(5)?,
                done,
            })
        })
        .collect()
}

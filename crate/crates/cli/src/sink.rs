//! `metrics.jsonl` and `summary.csv` writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use maskrl_core::harness::{EvalResult, Summary};
use maskrl_core::ppo::{EpisodeRecord, RunLog, UpdateRecord};
use serde::{Deserialize, Serialize};

pub const SUMMARY_HEADER: &str = "strategy,map,r_invalid,r_episode,a_null,a_busy,a_owner,t_solve,t_first";

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Episode(EpisodeRecord),
    Update(UpdateRecord),
}

pub struct MetricsSink {
    out: BufWriter<File>,
}

impl MetricsSink {
    /// Truncates any existing file.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &Record) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    /// Episodes that ended during an update come before the update itself.
    pub fn write_update(&mut self, episodes: &[EpisodeRecord], update: &UpdateRecord) -> std::io::Result<()> {
        for e in episodes {
            self.write(&Record::Episode(e.clone()))?;
        }
        self.write(&Record::Update(update.clone()))?;
        self.out.flush()
    }

    /// Rewrites a whole log in streaming order.
    pub fn write_log(&mut self, log: &RunLog) -> std::io::Result<()> {
        let mut episodes = log.episodes.iter().peekable();
        for u in &log.updates {
            let mut batch = Vec::new();
            while let Some(e) = episodes.next_if(|e| e.step <= u.step) {
                batch.push(e.clone());
            }
            self.write_update(&batch, u)?;
        }
        for e in episodes {
            self.write(&Record::Episode(e.clone()))?;
        }
        self.out.flush()
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Header plus one row per summary; masking rows are followed by their
/// masks-removed evaluation when present.
pub fn write_summary_csv(path: &Path, rows: &[(Summary, Option<EvalResult>)]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{SUMMARY_HEADER}")?;
    for (s, removed) in rows {
        writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{},{}",
            s.strategy,
            s.map_size,
            opt(s.r_invalid),
            s.r_episode.mean,
            s.a_null.mean,
            s.a_busy.mean,
            s.a_owner.mean,
            opt(s.t_solve.mean),
            opt(s.t_first.mean),
        )?;
        if let Some(ev) = removed {
            writeln!(
                out,
                "masking_removed,{},,{:.4},{:.4},{:.4},{:.4},,",
                s.map_size, ev.mean_return, ev.a_null, ev.a_busy, ev.a_owner
            )?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(step: u64, ret: f64) -> EpisodeRecord {
        EpisodeRecord {
            step,
            episode_return: ret,
            length: 200,
            a_null: 0,
            a_busy: 0,
            a_owner: 0,
        }
    }

    fn update(step: u64) -> UpdateRecord {
        UpdateRecord {
            step,
            update: step / 512,
            approx_kl: 0.01,
            policy_loss: -0.1,
            value_loss: 0.5,
            entropy: 9.0,
            clip_fraction: 0.1,
            lr: 3e-4,
        }
    }

    #[test]
    fn one_episode_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        sink.write(&Record::Episode(episode(800, 40.0))).unwrap();
        sink.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["type"], "episode");
        assert_eq!(v["return"], 40.0);
        assert_eq!(v["step"], 800);
    }

    #[test]
    fn empty_run_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("metrics.jsonl");
        MetricsSink::create(&m).unwrap().flush().unwrap();
        assert_eq!(std::fs::read_to_string(&m).unwrap(), "");
        let s = dir.path().join("summary.csv");
        write_summary_csv(&s, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&s).unwrap(), format!("{SUMMARY_HEADER}\n"));
    }

    #[test]
    fn rewritten_log_matches_stream() {
        let dir = tempfile::tempdir().unwrap();
        let log = RunLog {
            episodes: vec![episode(400, 1.0), episode(512, 2.0), episode(900, 3.0)],
            updates: vec![update(512), update(1024)],
        };
        let a = dir.path().join("a.jsonl");
        let mut sink = MetricsSink::create(&a).unwrap();
        sink.write_update(&log.episodes[..2], &log.updates[0]).unwrap();
        sink.write_update(&log.episodes[2..], &log.updates[1]).unwrap();
        let b = dir.path().join("b.jsonl");
        MetricsSink::create(&b).unwrap().write_log(&log).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_records(&a).unwrap().len(), 5);
    }
}

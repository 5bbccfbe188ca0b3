//! Durable, crash-consistent persistence for optimization runs.
//!
//! A run is a directory under the store root:
//!
//! ```text
//! <root>/<run_id>/
//!   config.json   run metadata, written once at creation
//!   steps.jsonl   one step entry per line, appended and synced as it happens
//!   pool.json     final prompt pool, written atomically at completion
//!   best.json     final best prompt, written atomically at completion
//!   .lock         exists while a writer holds the run open
//! ```
//!
//! Because every step is flushed and synced before the next begins, a crash
//! at any step boundary leaves a directory that still loads cleanly — it is
//! merely incomplete (no pool/best). `load_run` re-derives the best-so-far
//! trajectory from the recorded candidates and refuses to return a run whose
//! file contents are internally inconsistent.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Role;
use crate::error::{Error, Result};
use crate::metaprompt::PromptRecord;
use crate::metrics::MetricVector;

/// Tolerance when re-deriving best-so-far from recorded composites.
const REPLAY_TOLERANCE: f64 = 1e-12;

/// One evaluated candidate inside a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCandidate {
    pub text: String,
    pub id: String,
    /// Metrics per dataset name.
    pub per_dataset: BTreeMap<String, MetricVector>,
    /// Composite per dataset name.
    pub per_dataset_composite: BTreeMap<String, f64>,
    /// Mean of the per-dataset composites: the candidate's scalar score.
    pub composite: f64,
}

/// Everything recorded about one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step: u64,
    pub candidates: Vec<StepCandidate>,
    pub best_so_far: f64,
    pub wall_time_ms: u64,
    /// Cumulative scorer calls made by the run up to and including this step.
    pub scorer_calls: u64,
}

/// Immutable run metadata, written at creation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub created_at: String,
    pub stage: Role,
    /// The caller's configuration, stored verbatim for reproducibility.
    pub config: serde_json::Value,
}

/// A fully loaded run: metadata, step log, and final artifacts if present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub steps: Vec<StepEntry>,
    pub pool: Option<Vec<PromptRecord>>,
    pub best: Option<PromptRecord>,
}

impl RunRecord {
    /// A run is complete once its final artifacts exist.
    pub fn is_complete(&self) -> bool {
        self.pool.is_some() && self.best.is_some()
    }
}

/// Export format for learning curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveFormat {
    Csv,
    Json,
}

impl std::str::FromStr for CurveFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(CurveFormat::Csv),
            "json" => Ok(CurveFormat::Json),
            other => Err(Error::Config(format!(
                "unknown curve format `{other}` (expected csv or json)"
            ))),
        }
    }
}

/// Root handle over a directory of runs.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

/// Write-to-temp-then-rename so readers never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(run_id: &str, path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Integrity {
        run_id: run_id.to_string(),
        msg: format!("{}: {e}", path.display()),
    })
}

impl RunStore {
    /// Open (creating if needed) a store rooted at `root`.
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    /// Start a new run. `run_id` defaults to a timestamp plus a short random
    /// suffix. Holding the returned handle owns the run's lock file.
    pub fn create_run(
        &self,
        stage: Role,
        config: serde_json::Value,
        run_id: Option<String>,
    ) -> Result<OpenRun> {
        let run_id = run_id.unwrap_or_else(|| {
            format!(
                "{}-{:06x}",
                chrono::Utc::now().format("%Y%m%dT%H%M%S"),
                rand::random::<u32>() & 0xff_ffff
            )
        });
        let dir = self.run_dir(&run_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let lock_path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::RunLocked { run_id: run_id.clone() }
                } else {
                    Error::io(&lock_path, e)
                }
            })?;

        let meta = RunMeta {
            run_id: run_id.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
            stage,
            config,
        };
        let meta_bytes =
            serde_json::to_vec_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        if let Err(e) = write_atomic(&dir.join("config.json"), &meta_bytes) {
            let _ = fs::remove_file(&lock_path);
            return Err(e);
        }

        let steps_path = dir.join("steps.jsonl");
        let steps_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&steps_path)
            .map_err(|e| Error::io(&steps_path, e))?;

        Ok(OpenRun {
            run_id,
            dir,
            steps_file,
            lock_path,
            last: None,
            closed: false,
        })
    }

    /// Load and integrity-check a run.
    pub fn load_run(&self, run_id: &str) -> Result<RunRecord> {
        let dir = self.run_dir(run_id);
        if !dir.is_dir() {
            return Err(Error::RunNotFound(run_id.to_string()));
        }
        let integrity = |msg: String| Error::Integrity {
            run_id: run_id.to_string(),
            msg,
        };

        let config_path = dir.join("config.json");
        if !config_path.is_file() {
            return Err(Error::RunIncomplete {
                run_id: run_id.to_string(),
                file: "config.json".into(),
            });
        }
        let meta: RunMeta = read_json(run_id, &config_path)?;

        let steps_path = dir.join("steps.jsonl");
        let mut steps: Vec<StepEntry> = Vec::new();
        if steps_path.is_file() {
            let raw = fs::read_to_string(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
            // Replay the log: steps strictly increasing, best-so-far equal to
            // the running max over every candidate composite seen so far.
            let mut running: Option<f64> = None;
            for (lineno, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    return Err(integrity(format!("steps.jsonl:{}: blank line", lineno + 1)));
                }
                let entry: StepEntry = serde_json::from_str(line).map_err(|e| {
                    integrity(format!("steps.jsonl:{}: {e}", lineno + 1))
                })?;
                if let Some(prev) = steps.last() {
                    if entry.step <= prev.step {
                        return Err(integrity(format!(
                            "step {} recorded after step {}",
                            entry.step, prev.step
                        )));
                    }
                }
                for c in &entry.candidates {
                    running = Some(match running {
                        Some(r) if r >= c.composite => r,
                        _ => c.composite,
                    });
                }
                match running {
                    Some(r) => {
                        if (entry.best_so_far - r).abs() > REPLAY_TOLERANCE {
                            return Err(integrity(format!(
                                "step {}: best_so_far {} but candidate replay gives {}",
                                entry.step, entry.best_so_far, r
                            )));
                        }
                    }
                    // No candidate seen anywhere yet: the recorded value is
                    // the baseline the rest of the log must build on.
                    None => running = Some(entry.best_so_far),
                }
                steps.push(entry);
            }
        }

        let pool_path = dir.join("pool.json");
        let pool: Option<Vec<PromptRecord>> = if pool_path.is_file() {
            Some(read_json(run_id, &pool_path)?)
        } else {
            None
        };

        let best_path = dir.join("best.json");
        let best: Option<PromptRecord> = if best_path.is_file() {
            Some(read_json(run_id, &best_path)?)
        } else {
            None
        };

        if let Some(b) = &best {
            match steps.last() {
                Some(last) => {
                    if (b.composite - last.best_so_far).abs() > REPLAY_TOLERANCE {
                        return Err(integrity(format!(
                            "best.json composite {} disagrees with final best_so_far {}",
                            b.composite, last.best_so_far
                        )));
                    }
                }
                None => return Err(integrity("best.json present but no steps recorded".into())),
            }
        }

        Ok(RunRecord { meta, steps, pool, best })
    }

    /// Load the final pool of a completed source-stage run, for seeding a
    /// target-stage run.
    pub fn load_source_pool(&self, run_id: &str) -> Result<Vec<PromptRecord>> {
        let run = self.load_run(run_id)?;
        if run.meta.stage != Role::Source {
            return Err(Error::StageMismatch {
                run_id: run_id.to_string(),
                expected: Role::Source.to_string(),
                actual: run.meta.stage.to_string(),
            });
        }
        run.pool.ok_or_else(|| Error::RunIncomplete {
            run_id: run_id.to_string(),
            file: "pool.json".into(),
        })
    }

    /// Write the run's learning curve to `out` (default: a `curve.csv` or
    /// `curve.json` beside the step log). Returns the path written.
    ///
    /// Both formats carry exactly the same fields per step; floating-point
    /// fields are serialized identically so the formats are comparable
    /// byte-for-byte field-wise.
    pub fn export_curve(
        &self,
        run_id: &str,
        format: CurveFormat,
        out: Option<&Path>,
    ) -> Result<PathBuf> {
        let run = self.load_run(run_id)?;
        let default_name = match format {
            CurveFormat::Csv => "curve.csv",
            CurveFormat::Json => "curve.json",
        };
        let path = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.run_dir(run_id).join(default_name));

        let jnum = |v: f64| serde_json::to_string(&v).expect("finite float");
        let mean_candidate = |e: &StepEntry| -> Option<f64> {
            if e.candidates.is_empty() {
                None
            } else {
                Some(e.candidates.iter().map(|c| c.composite).sum::<f64>() / e.candidates.len() as f64)
            }
        };

        let bytes = match format {
            CurveFormat::Csv => {
                let mut out = String::from("step,best_so_far,mean_candidate,scorer_calls\n");
                for e in &run.steps {
                    let mean = mean_candidate(e).map(jnum).unwrap_or_default();
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        e.step,
                        jnum(e.best_so_far),
                        mean,
                        e.scorer_calls
                    ));
                }
                out.into_bytes()
            }
            CurveFormat::Json => {
                let rows: Vec<serde_json::Value> = run
                    .steps
                    .iter()
                    .map(|e| {
                        serde_json::json!({
                            "step": e.step,
                            "best_so_far": e.best_so_far,
                            "mean_candidate": mean_candidate(e),
                            "scorer_calls": e.scorer_calls,
                        })
                    })
                    .collect();
                let mut bytes = serde_json::to_vec_pretty(&rows)
                    .map_err(|e| Error::Config(e.to_string()))?;
                bytes.push(b'\n');
                bytes
            }
        };
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

struct LastStep {
    step: u64,
    best_so_far: f64,
    line: String,
}

/// A run held open for writing. Dropping the handle releases the lock; only
/// `finish` marks the run complete.
pub struct OpenRun {
    run_id: String,
    dir: PathBuf,
    steps_file: File,
    lock_path: PathBuf,
    last: Option<LastStep>,
    closed: bool,
}

impl OpenRun {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Append one step entry, durably: the line is flushed and synced before
    /// this returns, so a crash afterwards cannot lose it.
    ///
    /// Re-recording the last step with identical content is a no-op (safe
    /// retry); same step with different content, an earlier step, or a
    /// best-so-far that moves backwards are refused.
    pub fn record_step(&mut self, entry: &StepEntry) -> Result<()> {
        if self.closed {
            return Err(Error::RunClosed { run_id: self.run_id.clone() });
        }
        let line = serde_json::to_string(entry).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(last) = &self.last {
            if entry.step == last.step {
                if line == last.line {
                    return Ok(());
                }
                return Err(Error::StepConflict {
                    run_id: self.run_id.clone(),
                    step: entry.step,
                });
            }
            if entry.step < last.step {
                return Err(Error::StepRegression {
                    run_id: self.run_id.clone(),
                    last: last.step,
                    got: entry.step,
                });
            }
            if entry.best_so_far < last.best_so_far - REPLAY_TOLERANCE {
                return Err(Error::Integrity {
                    run_id: self.run_id.clone(),
                    msg: format!(
                        "best_so_far fell from {} to {} at step {}",
                        last.best_so_far, entry.best_so_far, entry.step
                    ),
                });
            }
        }
        // The recorded best must dominate every candidate in the entry.
        if let Some(c) = entry
            .candidates
            .iter()
            .find(|c| c.composite > entry.best_so_far + REPLAY_TOLERANCE)
        {
            return Err(Error::Integrity {
                run_id: self.run_id.clone(),
                msg: format!(
                    "step {}: candidate {} outscores best_so_far {}",
                    entry.step, c.composite, entry.best_so_far
                ),
            });
        }

        let steps_path = self.dir.join("steps.jsonl");
        self.steps_file
            .write_all(format!("{line}\n").as_bytes())
            .map_err(|e| Error::io(&steps_path, e))?;
        self.steps_file.flush().map_err(|e| Error::io(&steps_path, e))?;
        self.steps_file
            .sync_data()
            .map_err(|e| Error::io(&steps_path, e))?;
        self.last = Some(LastStep {
            step: entry.step,
            best_so_far: entry.best_so_far,
            line,
        });
        Ok(())
    }

    /// Atomically write the final artifacts and release the lock.
    pub fn finish(&mut self, pool: &[PromptRecord], best: &PromptRecord) -> Result<()> {
        if self.closed {
            return Err(Error::RunClosed { run_id: self.run_id.clone() });
        }
        let pool_bytes =
            serde_json::to_vec_pretty(&pool).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&self.dir.join("pool.json"), &pool_bytes)?;
        let best_bytes =
            serde_json::to_vec_pretty(best).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&self.dir.join("best.json"), &best_bytes)?;
        fs::remove_file(&self.lock_path).map_err(|e| Error::io(&self.lock_path, e))?;
        self.closed = true;
        Ok(())
    }
}

impl Drop for OpenRun {
    fn drop(&mut self) {
        if !self.closed {
            // Release the lock so the (incomplete) run stays inspectable.
            let _ = fs::remove_file(&self.lock_path);
        }
    }
}

//! Per-episode export of a run's step log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::record::StepLog;
use crate::run::STEPS_FILE;

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";

/// Writes one line per logged episode to `out` (default `<run>/trajectories.jsonl`)
/// and returns the number of lines.
///
/// The destination is rewritten from the step log each time, so repeated
/// exports of a growing run only ever add lines at the end.
pub fn export_trajectories(run: &Path, out: Option<&Path>) -> Result<(PathBuf, usize)> {
    if !run.is_dir() {
        bail!("run directory {} does not exist", run.display());
    }
    let steps = run.join(STEPS_FILE);
    let reader =
        BufReader::new(File::open(&steps).with_context(|| format!("opening {}", steps.display()))?);
    let dest = out.map_or_else(|| run.join(TRAJECTORIES_FILE), Path::to_path_buf);
    let mut w = BufWriter::new(File::create(&dest)?);
    let mut count = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let log: StepLog = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", steps.display(), i + 1))?;
        for t in log.trajectories() {
            serde_json::to_writer(&mut w, &t)?;
            w.write_all(b"\n")?;
            count += 1;
        }
    }
    w.flush()?;
    Ok((dest, count))
}

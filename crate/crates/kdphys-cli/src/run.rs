//! Per-run plumbing: output-directory resolution, cleanup of partial
//! outputs on failure, and the run record pinning inputs and configuration.

use kdphys::dataio::{file_digest, read_ppg, read_tensor};
use kdphys::models::Sample;
use kdphys::signal::HrSeries;
use kdphys::{Error, FormatError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment override for where relative output paths land. Inputs and
/// absolute paths are never rewritten.
pub const OUT_DIR_ENV: &str = "KDPHYS_OUT_DIR";

fn resolve_out(path: &Path) -> Result<PathBuf> {
    if path.is_absolute() {
        return Ok(path.to_path_buf());
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(path)),
        None => Ok(path.to_path_buf()),
    }
}

/// What a run consumed and produced, written as JSON beside the primary
/// output. Re-running the recorded command with the same inputs reproduces
/// the outputs bitwise.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputStamp>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub wall_clock_seconds: f64,
    pub package_version: String,
    pub format_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InputStamp {
    pub path: String,
    pub digest: String,
}

/// Tracks a subcommand's files while it works. Declared outputs are removed
/// again if the run is dropped without [`Run::finish`], so failures leave no
/// partial artifacts behind.
pub struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<InputStamp>,
    outputs: Vec<PathBuf>,
    started: Instant,
    committed: bool,
}

impl Run {
    pub fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(config)
            .map_err(|e| Error::Parameter(format!("cannot record configuration: {e}")))?;
        Ok(Run {
            command,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            committed: false,
        })
    }

    /// Registers an input file and returns its path unchanged.
    pub fn input<'p>(&mut self, path: &'p Path) -> Result<&'p Path> {
        let digest = file_digest(path)
            .map_err(|e| Error::Parameter(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(InputStamp {
            path: path.display().to_string(),
            digest: format!("{digest:016x}"),
        });
        Ok(path)
    }

    /// Resolves an output path (creating parent directories) and arms the
    /// failure cleanup for it.
    pub fn output(&mut self, path: &Path) -> Result<PathBuf> {
        let full = resolve_out(path)?;
        if let Some(parent) = full.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        self.outputs.push(full.clone());
        Ok(full)
    }

    /// Writes `<primary output>.manifest.json` (or `<command>.manifest.json`
    /// for runs without file outputs) and keeps everything produced so far.
    pub fn finish(mut self) -> Result<()> {
        let manifest_path = match self.outputs.first() {
            Some(first) => {
                let mut name = first.file_name().unwrap_or_default().to_os_string();
                name.push(".manifest.json");
                first.with_file_name(name)
            }
            None => resolve_out(Path::new(&format!("{}.manifest.json", self.command)))?,
        };
        if let Some(parent) = manifest_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config.clone(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            seed: self.seed,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: 1,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Parameter(format!("cannot encode run record: {e}")))?;
        self.outputs.push(manifest_path.clone());
        std::fs::write(&manifest_path, text + "\n")?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in &self.outputs {
            let _ = std::fs::remove_file(path);
        }
    }
}

/// Heart-rate series file: plain JSON so external plotting tools can read it.
#[derive(Debug, Serialize, Deserialize)]
struct HrFile {
    window_seconds: f64,
    fs_source: f64,
    bin_bpm: f64,
    values: Vec<f64>,
}

pub fn write_hr(path: &Path, series: &HrSeries) -> Result<()> {
    let file = HrFile {
        window_seconds: series.window_seconds,
        fs_source: series.fs_source,
        bin_bpm: series.bin_bpm,
        values: series.values.clone(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| FormatError::Malformed(format!("heart-rate series: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_hr(path: &Path) -> Result<HrSeries> {
    let text = std::fs::read_to_string(path)?;
    let file: HrFile = serde_json::from_str(&text)
        .map_err(|e| FormatError::Malformed(format!("heart-rate series: {e}")))?;
    HrSeries::new(file.values, file.window_seconds, file.fs_source, file.bin_bpm)
}

/// A dataset directory holds `<stem>.clip.kdt` / `<stem>.label.csv` pairs;
/// stems load in sorted order so runs are reproducible.
pub fn load_dataset(run: &mut Run, dir: &Path) -> Result<Vec<Sample>> {
    const CLIP_SUFFIX: &str = ".clip.kdt";
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::Parameter(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            Some(name.strip_suffix(CLIP_SUFFIX)?.to_string())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Parameter(format!(
            "no <stem>{CLIP_SUFFIX} files in {}",
            dir.display()
        )));
    }
    stems
        .iter()
        .map(|stem| {
            let clip_path = dir.join(format!("{stem}{CLIP_SUFFIX}"));
            let label_path = dir.join(format!("{stem}.label.csv"));
            run.input(&clip_path)?;
            run.input(&label_path)?;
            let clip = read_tensor(&clip_path)?;
            let label = read_ppg(&label_path)?;
            Sample::new(clip, label.samples().to_vec(), label.fs())
        })
        .collect()
}

//! Run manifests and run directories.
//!
//! A run lives in `runs/<hash>/` where the hash is taken over the canonical
//! manifest text. The directory holds that text as `config` plus
//! `checkpoints/`, `traces/` and `reports/`. Wall-clock times go to a separate
//! `timestamps` file so that everything else is a pure function of the
//! manifest and its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::metrics::{EvaluationReport, ModelScores};

/// Hex digits of the manifest hash used in directory names.
const HASH_CHARS: usize = 16;

pub const CONFIG_FILE: &str = "config";
pub const TIMESTAMPS_FILE: &str = "timestamps";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub preset: Option<String>,
    pub seed: u64,
    /// Everything else the run depends on: settings, and digests of input
    /// files and directories.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            preset: None,
            seed,
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_preset(mut self, preset: &str) -> Self {
        self.preset = Some(preset.to_string());
        self
    }

    pub fn with_input(mut self, key: &str, value: impl ToString) -> Self {
        self.inputs
            .insert(key.to_string(), value.to_string().replace('\n', " "));
        self
    }

    /// Digest of a file, or of a directory tree (names and contents, sorted).
    pub fn with_path_digest(self, key: &str, path: &Path) -> Result<Self> {
        let digest = path_digest(path)?;
        Ok(self.with_input(key, digest))
    }

    /// Fixed key order: command, preset, seed, then inputs sorted by key.
    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("command", &self.command);
        if let Some(preset) = &self.preset {
            doc.set("preset", preset);
        }
        doc.set("seed", self.seed);
        for (k, v) in &self.inputs {
            doc.set(&format!("input.{k}"), v);
        }
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let mut inputs = BTreeMap::new();
        for (k, v) in doc.entries() {
            if let Some(name) = k.strip_prefix("input.") {
                inputs.insert(name.to_string(), v.to_string());
            } else if !["command", "preset", "seed"].contains(&k) {
                return Err(Error::Config(format!("unknown manifest key {k:?}")));
            }
        }
        Ok(Self {
            command: doc.require("command")?,
            preset: doc.get("preset").map(str::to_string),
            seed: doc.require("seed")?,
            inputs,
        })
    }

    pub fn canonical_text(&self) -> String {
        self.to_kv().render()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())[..HASH_CHARS].to_string()
    }
}

/// sha256 of a file, or for a directory of every `relative path, digest`
/// line in sorted order.
pub fn path_digest(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(sha256_hex(&bytes));
    }
    let mut lines = Vec::new();
    collect_digests(path, path, &mut lines)?;
    lines.sort();
    Ok(sha256_hex(lines.join("\n").as_bytes()))
}

fn collect_digests(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_digests(root, &path, out)?;
        } else {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let rel = path
                .strip_prefix(root)
                .expect("inside root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(format!("{rel}\t{}", sha256_hex(&bytes)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
    hash: String,
}

impl RunDir {
    /// Creates or reopens `<out>/runs/<hash>`. Reopening checks that the
    /// stored config is the same manifest.
    pub fn create(out: &Path, manifest: &RunManifest) -> Result<Self> {
        let hash = manifest.hash();
        let root = out.join("runs").join(&hash);
        for sub in ["checkpoints", "traces", "reports"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let config = root.join(CONFIG_FILE);
        let text = manifest.canonical_text();
        match fs::read_to_string(&config) {
            Ok(existing) if existing == text => {}
            Ok(_) => {
                return Err(Error::Corrupt {
                    path: config,
                    message: "stored config does not match the manifest hash".into(),
                })
            }
            Err(_) => fs::write(&config, &text).map_err(|e| Error::io(&config, e))?,
        }
        Ok(Self { root, hash })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        RunManifest::from_kv(&KvDocument::load(&self.root.join(CONFIG_FILE))?)
    }

    /// Appends `event<TAB>unix-seconds` to the timestamps file.
    pub fn record_time(&self, event: &str) -> Result<()> {
        use std::io::Write as _;
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = self.root.join(TIMESTAMPS_FILE);
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{event}\t{secs}").map_err(|e| Error::io(&path, e))
    }

    pub fn write_report(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.reports().join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// The `step-N` checkpoint with the highest step, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step-"))
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}

/// Reads score files and aggregates them against `reference`. Files naming
/// the same model are merged, so per-task evaluation outputs can be combined;
/// models keep the order of their first file.
pub fn build_report(score_files: &[PathBuf], reference: &str) -> Result<EvaluationReport> {
    if score_files.is_empty() {
        return Err(Error::InvalidArgument("no score files".into()));
    }
    let mut models: Vec<ModelScores> = Vec::new();
    for path in score_files {
        let scores = ModelScores::from_kv(&KvDocument::load(path)?)?;
        match models.iter_mut().find(|m| m.model == scores.model) {
            None => models.push(scores),
            Some(existing) => merge_scores(existing, scores, path)?,
        }
    }
    EvaluationReport::build(&models, reference)
}

fn merge_scores(into: &mut ModelScores, from: ModelScores, path: &Path) -> Result<()> {
    if into.parameters != from.parameters {
        return Err(Error::Validation(format!(
            "{}: {} has {} parameters here and {} elsewhere",
            path.display(),
            from.model,
            from.parameters,
            into.parameters
        )));
    }
    for (task, metrics) in from.tasks {
        let slot = into.tasks.entry(task.clone()).or_default();
        for (metric, value) in metrics {
            if slot.insert(metric.clone(), value).is_some() {
                return Err(Error::Validation(format!(
                    "{}: {task}.{metric} for {} given twice",
                    path.display(),
                    from.model
                )));
            }
        }
    }
    Ok(())
}

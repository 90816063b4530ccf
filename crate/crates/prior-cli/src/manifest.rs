//! Run manifests: every subcommand records its resolved configuration and
//! the content hashes of the files it read and wrote, next to its primary
//! output as `<output>.manifest.json`. Downstream subcommands verify their
//! inputs against these hashes before doing any work.

use anyhow::{anyhow, Context, Result};
use prior_core::synth::CorpusSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Resolved option values, post config-file merging.
    pub config: BTreeMap<String, String>,
    /// Corpus geometry carried downstream so later stages can rebuild the
    /// vocabulary without re-supplying generator flags.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_spec: Option<CorpusSpec>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub duration_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}

/// Load the manifest that produced `artifact`. Errors if absent: pipeline
/// inputs must be traceable.
pub fn load_for(artifact: &Path) -> Result<RunManifest> {
    let path = manifest_path(artifact);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        anyhow!(
            "stale artifact: no manifest at {} (regenerate {})",
            path.display(),
            artifact.display()
        )
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Verify `artifact` against the hash its manifest recorded.
pub fn verify_input(artifact: &Path) -> Result<RunManifest> {
    let manifest = load_for(artifact)?;
    let name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let entry = manifest
        .outputs
        .iter()
        .find(|e| {
            Path::new(&e.path)
                .file_name()
                .map(|n| n.to_string_lossy() == name)
                .unwrap_or(false)
        })
        .ok_or_else(|| {
            anyhow!(
                "stale artifact: manifest for {} does not list it as an output",
                artifact.display()
            )
        })?;
    let actual = sha256_file(artifact)?;
    if actual != entry.sha256 {
        return Err(prior_core::Error::StaleArtifact(format!(
            "{} does not match its manifest hash (expected {}, found {actual})",
            artifact.display(),
            entry.sha256
        ))
        .into());
    }
    Ok(manifest)
}

/// Accumulates one subcommand's manifest while it runs.
pub struct ManifestBuilder {
    command: String,
    config: BTreeMap<String, String>,
    corpus_spec: Option<CorpusSpec>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: BTreeMap::new(),
            corpus_spec: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn corpus_spec(&mut self, spec: &CorpusSpec) -> &mut Self {
        self.corpus_spec = Some(spec.clone());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.outputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    /// Write the manifest next to the primary (first-listed) output.
    pub fn write(self) -> Result<()> {
        let primary = self
            .outputs
            .first()
            .ok_or_else(|| anyhow!("manifest has no outputs"))?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            config: self.config,
            corpus_spec: self.corpus_spec,
            inputs: self.inputs,
            outputs: self.outputs.clone(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(Path::new(&primary.path));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

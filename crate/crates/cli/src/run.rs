//! Output directory handling and provenance for a single command run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::Device;
use metgan_core::data::{load_dataset, make_phantom_corpus, LoadOptions, Sample};
use metgan_core::nn::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fail::config_error;
use crate::manifest::LoadedManifest;

pub const MANIFEST_COPY: &str = "manifest.toml";
pub const RUN_RECORD: &str = "run.json";
pub const DEVICE_VAR: &str = "METGAN_DEVICE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub role: String,
    /// Path as written in the manifest.
    pub path: String,
    pub id: String,
}

/// Names the manifest and checkpoints behind an output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub manifest: String,
    pub manifest_sha256: String,
    pub deterministic: bool,
    pub checkpoints: Vec<CheckpointRef>,
}

impl Stamp {
    pub fn one_line(&self) -> String {
        let cks: Vec<String> = self.checkpoints.iter().map(|c| format!("{}={}", c.role, c.id)).collect();
        format!(
            "metgan {} from {} (sha256 {}){}",
            self.command,
            self.manifest,
            &self.manifest_sha256[..16],
            if cks.is_empty() {
                String::new()
            } else {
                format!(", checkpoints {}", cks.join(" "))
            }
        )
    }
}

#[derive(Debug, Serialize)]
struct Document<'a, T: Serialize> {
    provenance: &'a Stamp,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub outputs: Vec<String>,
}

pub struct RunContext {
    pub manifest: LoadedManifest,
    pub out: PathBuf,
    pub device: Device,
    stamp: Stamp,
    outputs: BTreeSet<String>,
}

/// Default device from the environment; only the CPU backend is built in.
pub fn device_from_env() -> anyhow::Result<Device> {
    match std::env::var(DEVICE_VAR).ok().as_deref() {
        None | Some("") | Some("cpu") => Ok(Device::Cpu),
        Some(other) => Err(config_error(format!(
            "{DEVICE_VAR}={other}: only `cpu` is available in this build"
        ))),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunContext {
    /// Prepares the output directory and persists the manifest verbatim.
    pub fn start(
        command: &str,
        manifest: LoadedManifest,
        out_override: Option<&Path>,
        deterministic: bool,
    ) -> anyhow::Result<Self> {
        let device = device_from_env()?;
        let out = match (out_override, &manifest.manifest.output_dir) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => manifest.resolve(o),
            (None, None) => return Err(config_error("no output directory: pass --out or set output_dir")),
        };
        if out.join(MANIFEST_COPY).exists() {
            return Err(config_error(format!("{} already holds a run", out.display())));
        }
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join(MANIFEST_COPY), &manifest.text)?;
        let stamp = Stamp {
            command: command.to_string(),
            manifest: MANIFEST_COPY.to_string(),
            manifest_sha256: sha256_hex(manifest.text.as_bytes()),
            deterministic,
            checkpoints: Vec::new(),
        };
        Ok(Self {
            manifest,
            out,
            device,
            stamp,
            outputs: BTreeSet::from([MANIFEST_COPY.to_string()]),
        })
    }

    pub fn stamp(&self) -> &Stamp {
        &self.stamp
    }

    /// Loads a checkpoint named in the manifest and records its id.
    pub fn load_checkpoint(&mut self, role: &str, path: &Path) -> anyhow::Result<Checkpoint> {
        let full = self.manifest.resolve(path);
        if !full.is_file() {
            return Err(config_error(format!("{role} checkpoint {} does not exist", full.display())));
        }
        let ck = Checkpoint::load(&full, &self.device)?;
        self.stamp.checkpoints.push(CheckpointRef {
            role: role.to_string(),
            path: path.display().to_string(),
            id: ck.id()?,
        });
        Ok(ck)
    }

    /// Records a checkpoint this run produced.
    pub fn produced_checkpoint(&mut self, role: &str, rel: &str, ck: &Checkpoint) -> anyhow::Result<()> {
        ck.save(&self.out.join(rel))?;
        self.outputs.insert(rel.to_string());
        self.stamp.checkpoints.push(CheckpointRef {
            role: role.to_string(),
            path: rel.to_string(),
            id: ck.id()?,
        });
        Ok(())
    }

    /// Names a checkpoint known only by id, such as the generator behind a
    /// synthetic corpus.
    pub fn cite_checkpoint(&mut self, role: &str, path: &Path, id: &str) {
        self.stamp.checkpoints.push(CheckpointRef {
            role: role.to_string(),
            path: path.display().to_string(),
            id: id.to_string(),
        });
    }

    pub fn record(&mut self, rel: impl Into<String>) {
        self.outputs.insert(rel.into());
    }

    /// Writes `body` as pretty JSON with a leading provenance field.
    pub fn write_json<T: Serialize>(&mut self, rel: &str, body: &T) -> anyhow::Result<()> {
        let doc = Document {
            provenance: &self.stamp,
            body,
        };
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        self.write_text(rel, &text)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> anyhow::Result<()> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(rel.to_string());
        Ok(())
    }

    /// Loads the manifest's `[data]` source.
    pub fn load_samples(&self) -> anyhow::Result<Vec<Sample>> {
        let data = self.manifest.require(&self.manifest.manifest.data, "data")?;
        match (&data.root, &data.phantom) {
            (Some(root), None) => {
                let root = self.manifest.resolve(root);
                if !root.is_dir() {
                    return Err(config_error(format!("dataset path {} does not exist", root.display())));
                }
                let side = data.side.unwrap_or(LoadOptions::default().side);
                Ok(load_dataset(&root, &LoadOptions { side })?)
            }
            (None, Some(cfg)) => Ok(make_phantom_corpus(cfg)?),
            _ => Err(config_error("[data] needs exactly one of `root` and `phantom`")),
        }
    }

    /// Writes `run.json` listing every output of the run.
    pub fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.outputs.insert(RUN_RECORD.to_string());
        let record = RunRecord {
            stamp: self.stamp.clone(),
            outputs: self.outputs.iter().cloned().collect(),
        };
        std::fs::write(self.out.join(RUN_RECORD), serde_json::to_string_pretty(&record)? + "\n")?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loaded(text: &str, dir: &Path) -> LoadedManifest {
        LoadedManifest {
            manifest: LoadedManifest::parse(text).unwrap(),
            text: text.to_string(),
            base_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn manifest_is_persisted_verbatim_and_reuse_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let text = "schema_version = 1 # kept as written\n";
        let out = dir.path().join("run");
        let mut ctx = RunContext::start("phantom", loaded(text, dir.path()), Some(&out), true).unwrap();
        ctx.write_json("x.json", &serde_json::json!({"a": 1})).unwrap();
        ctx.finish().unwrap();
        assert_eq!(std::fs::read_to_string(out.join(MANIFEST_COPY)).unwrap(), text);
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("x.json")).unwrap()).unwrap();
        assert_eq!(doc["provenance"]["manifest_sha256"], sha256_hex(text.as_bytes()));
        assert_eq!(doc["a"], 1);
        let rec: RunRecord = serde_json::from_str(&std::fs::read_to_string(out.join(RUN_RECORD)).unwrap()).unwrap();
        assert_eq!(rec.outputs, vec![MANIFEST_COPY, RUN_RECORD, "x.json"]);
        assert!(RunContext::start("phantom", loaded(text, dir.path()), Some(&out), true).is_err());
    }

    #[test]
    fn output_dir_is_required() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunContext::start("phantom", loaded("schema_version = 1\n", dir.path()), None, false).is_err());
    }
}

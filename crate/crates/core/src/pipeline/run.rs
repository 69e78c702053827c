//! Run directories with a content-hash manifest, and the on-disk cache of
//! inversion results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::TranslationConfig;
use super::image::Image;
use super::store::{load_concept, load_per_step, save_concept, save_per_step, EmbeddingHeader};
use super::translate::Translator;
use crate::backbone::ConceptEmbedding;
use crate::error::{Error, Result};
use crate::inversion::PerStepEmbeddings;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Relative path → sha256 of the file contents.
    pub files: BTreeMap<String, String>,
}

/// A directory that collects every artifact of one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of `rel`, creating its parent directories.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        fs::write(&p, bytes)?;
        Ok(p)
    }

    pub fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write(rel, &serde_json::to_vec_pretty(value)?)
    }

    /// Hashes every file under the root (except the manifest itself) and
    /// writes `manifest.json`.
    pub fn write_manifest(&self) -> Result<Manifest> {
        let mut files = BTreeMap::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let rel = p
                    .strip_prefix(&self.root)
                    .expect("entries lie under the root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel != MANIFEST {
                    files.insert(rel, sha256_hex(&fs::read(&p)?));
                }
            }
        }
        let m = Manifest { files };
        self.write_json(MANIFEST, &m)?;
        Ok(m)
    }

    /// Re-hashes the listed files; returns the ones whose contents changed
    /// or that are missing.
    pub fn verify_manifest(&self) -> Result<Vec<String>> {
        let m: Manifest = serde_json::from_slice(&fs::read(self.root.join(MANIFEST))?)?;
        let mut bad = Vec::new();
        for (rel, hash) in &m.files {
            match fs::read(self.root.join(rel)) {
                Ok(bytes) if sha256_hex(&bytes) == *hash => {}
                _ => bad.push(rel.clone()),
            }
        }
        Ok(bad)
    }
}

/// Cache of concept and content inversions keyed by image hash, backbone
/// fingerprint and the settings each stage depends on.
#[derive(Debug, Clone)]
pub struct StageCache {
    dir: PathBuf,
}

fn stage_key(stage: &str, image: &Image, fingerprint: &str, settings: Value) -> String {
    let key = serde_json::json!({
        "stage": stage,
        "image": image.hash(),
        "backbone": fingerprint,
        "settings": settings,
    });
    sha256_hex(&serde_json::to_vec(&key).expect("key serializes"))
}

impl StageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(StageCache { dir })
    }

    fn concept_key(&self, x: &Image, fp: &str, cfg: &TranslationConfig) -> String {
        let hp = &cfg.hp;
        let settings = serde_json::json!({
            "seed": cfg.seed,
            "codec": cfg.codec,
            "codec_scale": cfg.codec_scale,
            "steps": hp.mci_steps,
            "lr": hp.mci_lr,
            "batch": hp.mci_batch,
            "tokens": hp.concept_tokens,
            "lambda_rec": hp.lambda_rec,
            "init_std": hp.mci_init_std,
        });
        stage_key("concept", x, fp, settings)
    }

    fn content_key(&self, x: &Image, fp: &str, cfg: &TranslationConfig) -> String {
        let hp = &cfg.hp;
        let settings = serde_json::json!({
            "w": cfg.w,
            "steps": cfg.steps,
            "codec": cfg.codec,
            "codec_scale": cfg.codec_scale,
            "total": hp.pti_total_steps,
            "inner": hp.pti_inner_steps,
            "lr": hp.pti_lr,
        });
        stage_key("content", x, fp, settings)
    }

    /// Returns the cached reference embedding or computes and stores it.
    /// The flag reports a cache hit.
    pub fn concept(
        &self,
        tr: &Translator<'_>,
        x_ref: &Image,
        cfg: &TranslationConfig,
    ) -> Result<(ConceptEmbedding, bool)> {
        let fp = tr.backbone.fingerprint();
        let sh = tr.backbone.schedule().hash();
        let path = self.dir.join(format!("concept-{}.cs", self.concept_key(x_ref, &fp, cfg)));
        if path.exists() {
            let (v, h) = load_concept(&path, &sh)?;
            if h.backbone != fp {
                return Err(Error::ArtifactMismatch("cached concept belongs to another backbone".into()));
            }
            return Ok((v, true));
        }
        let v = tr.invert_concept(x_ref, cfg)?;
        let header = EmbeddingHeader {
            kind: "concept".into(),
            schedule_hash: sh,
            backbone: fp,
            seed: Some(cfg.seed),
            w: None,
            label: v.label.clone(),
            loss_tail: Vec::new(),
            extra: Value::Null,
        };
        save_concept(&path, &v, &header)?;
        Ok((v, false))
    }

    /// Returns cached per-step embeddings or computes and stores them.
    pub fn content(
        &self,
        tr: &Translator<'_>,
        x_src: &Image,
        cfg: &TranslationConfig,
    ) -> Result<(PerStepEmbeddings, bool)> {
        let fp = tr.backbone.fingerprint();
        let sh = tr.backbone.schedule().hash();
        let path = self.dir.join(format!("content-{}.cs", self.content_key(x_src, &fp, cfg)));
        if path.exists() {
            let (p, h) = load_per_step(&path, &sh)?;
            if h.backbone != fp {
                return Err(Error::ArtifactMismatch("cached embeddings belong to another backbone".into()));
            }
            return Ok((p, true));
        }
        let p = tr.invert_content(x_src, cfg)?;
        let header = EmbeddingHeader {
            kind: "per_step".into(),
            schedule_hash: sh,
            backbone: fp,
            seed: Some(cfg.seed),
            w: Some(cfg.w),
            label: "source".into(),
            loss_tail: p.losses.iter().rev().take(5).map(|l| l.kept).collect(),
            extra: Value::Null,
        };
        save_per_step(&path, &p, &header)?;
        Ok((p, false))
    }
}

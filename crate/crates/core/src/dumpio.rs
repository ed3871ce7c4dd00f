// SPDX-License-Identifier: MIT OR Apache-2.0

//! TensorDump: a JSON manifest plus raw little-endian blobs.
//!
//! ```text
//! dir/manifest.json
//! dir/blobs/<file>.bin
//! ```
//!
//! Blobs are row-major `f32` or `f64`. Every manifest entry's byte length
//! must equal `product(shape) × sizeof(dtype)`. Writes go to a sibling
//! temporary directory that is renamed over the destination.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Arm, ModelSource};
use crate::jacobian::JacobianAnalysis;
use crate::steering::SteeringVector;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";
/// Optional marker file shipped alongside a dump.
pub const PROBE_FILE: &str = "probe.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Hidden,
    Logits,
    SteeringVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub role: Role,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Path relative to the dump directory.
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
    #[serde(default, rename = "trait", skip_serializing_if = "Option::is_none")]
    pub trait_label: Option<String>,
    /// Perturbation seed index for seeded arms (`v_prime`, `v_perp`, `random`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<usize>,
    /// Free-form metadata, e.g. vector provenance.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl ManifestEntry {
    pub fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_name: String,
    #[serde(rename = "layer")]
    pub layer: usize,
    pub d: usize,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Entry waiting to be written: metadata plus values (always held as f64).
#[derive(Debug, Clone, PartialEq)]
pub struct PendingEntry {
    pub meta: ManifestEntry,
    pub data: Vec<f64>,
}

impl PendingEntry {
    /// A one-dimensional f64 entry; `file` is derived from `name`.
    pub fn vector(name: impl Into<String>, role: Role, data: Vec<f64>) -> Self {
        let name = name.into();
        let meta = ManifestEntry {
            file: format!("{BLOB_DIR}/{}.bin", sanitize(&name)),
            name,
            role,
            dtype: DType::F64,
            shape: vec![data.len()],
            prompt_id: None,
            arm: None,
            env: None,
            trait_label: None,
            seed: None,
            meta: BTreeMap::new(),
        };
        Self { meta, data }
    }

    pub fn matrix(name: impl Into<String>, role: Role, m: &DMatrix<f64>) -> Self {
        // nalgebra is column-major; blobs are row-major
        let data: Vec<f64> = m.transpose().iter().copied().collect();
        let mut e = Self::vector(name, role, data);
        e.meta.shape = vec![m.nrows(), m.ncols()];
        e
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.meta.dtype = dtype;
        self
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn encode(data: &[f64], dtype: DType) -> Vec<u8> {
    match dtype {
        DType::F64 => data.iter().flat_map(|x| x.to_le_bytes()).collect(),
        DType::F32 => data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
    }
}

/// Write a dump atomically; returns the manifest path.
pub fn write_dump(
    dir: &Path,
    model_name: &str,
    layer: usize,
    d: usize,
    vocab: usize,
    entries: &[PendingEntry],
) -> Result<PathBuf> {
    write_dump_with_files(dir, model_name, layer, d, vocab, entries, &BTreeMap::new())
}

/// [`write_dump`] plus extra top-level files (e.g. [`PROBE_FILE`]).
pub fn write_dump_with_files(
    dir: &Path,
    model_name: &str,
    layer: usize,
    d: usize,
    vocab: usize,
    entries: &[PendingEntry],
    extra_files: &BTreeMap<String, Vec<u8>>,
) -> Result<PathBuf> {
    for name in extra_files.keys() {
        if name == MANIFEST || name == BLOB_DIR || name.contains(['/', '\\']) {
            return Err(Error::InvalidDump(format!("reserved or nested extra file name `{name}`")));
        }
    }
    let mut seen_files = BTreeSet::new();
    let mut seen_prompts = BTreeSet::new();
    for e in entries {
        let expected: usize = e.meta.shape.iter().product();
        if expected != e.data.len() {
            return Err(Error::ShapeBytes {
                name: e.meta.name.clone(),
                detail: format!("shape {:?} holds {expected} values, got {}", e.meta.shape, e.data.len()),
            });
        }
        if !seen_files.insert(e.meta.file.clone()) {
            return Err(Error::InvalidDump(format!("duplicate payload file {}", e.meta.file)));
        }
        check_prompt_unique(&mut seen_prompts, &e.meta)?;
    }

    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".tensordump-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    let root = staging.path();
    let blob_dir = root.join(BLOB_DIR);
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;

    for e in entries {
        let path = root.join(&e.meta.file);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|err| Error::io(p, err))?;
        }
        let mut f = fs::File::create(&path).map_err(|err| Error::io(&path, err))?;
        f.write_all(&encode(&e.data, e.meta.dtype)).map_err(|err| Error::io(&path, err))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_name: model_name.to_string(),
        layer,
        d,
        vocab,
        entries: entries.iter().map(|e| e.meta.clone()).collect(),
    };
    for (name, bytes) in extra_files {
        let path = root.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let mpath = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(MANIFEST))
}

fn check_prompt_unique(seen: &mut BTreeSet<(String, String, String, Option<usize>, usize)>, e: &ManifestEntry) -> Result<()> {
    if let Some(p) = e.prompt_id {
        let key = (
            format!("{:?}", e.role),
            e.arm.clone().unwrap_or_default(),
            e.env.clone().unwrap_or_default(),
            e.seed,
            p,
        );
        if !seen.insert(key) {
            return Err(Error::InvalidDump(format!(
                "prompt_id {p} repeated for arm {:?} env {:?}",
                e.arm, e.env
            )));
        }
    }
    Ok(())
}

/// A validated dump. Payloads are read on demand.
#[derive(Debug, Clone)]
pub struct TensorDump {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

pub fn read_dump(dir: &Path) -> Result<TensorDump> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::InvalidDump("manifest lacks format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersion {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        let path = dir.join(&e.file);
        let found = fs::metadata(&path).map_err(|err| Error::io(&path, err))?.len();
        let expected = e.byte_len();
        if found < expected {
            return Err(Error::Truncated {
                file: path,
                expected,
                found,
            });
        }
        if found > expected {
            return Err(Error::ShapeBytes {
                name: e.name.clone(),
                detail: format!("shape {:?} needs {expected} bytes, file has {found}", e.shape),
            });
        }
        check_prompt_unique(&mut seen, e)?;
    }
    Ok(TensorDump {
        dir: dir.to_path_buf(),
        manifest,
    })
}

impl TensorDump {
    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.manifest.entries.iter().find(|e| e.name == name)
    }

    /// Load an entry's values, upcasting f32 payloads to f64.
    pub fn load(&self, entry: &ManifestEntry) -> Result<Vec<f64>> {
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != entry.byte_len() {
            return Err(Error::Truncated {
                file: path,
                expected: entry.byte_len(),
                found: bytes.len() as u64,
            });
        }
        Ok(match entry.dtype {
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
        })
    }

    pub fn load_matrix(&self, entry: &ManifestEntry) -> Result<DMatrix<f64>> {
        let data = self.load(entry)?;
        match entry.shape[..] {
            [rows, cols] => Ok(DMatrix::from_row_slice(rows, cols, &data)),
            [n] => Ok(DMatrix::from_column_slice(n, 1, &data)),
            _ => Err(Error::ShapeBytes {
                name: entry.name.clone(),
                detail: format!("expected rank-1 or rank-2 shape, got {:?}", entry.shape),
            }),
        }
    }
}

/// Manifest entries for a steering vector, provenance recorded in `meta`.
pub fn steering_vector_entry(name: &str, v: &SteeringVector<f64>, arm: &str) -> PendingEntry {
    let mut e = PendingEntry::vector(name, Role::SteeringVector, v.v.iter().copied().collect());
    e.meta.arm = Some(arm.to_string());
    e.meta.trait_label = Some(v.trait_label.clone());
    e.meta.meta.insert("provenance".into(), provenance_label(v));
    e.meta.meta.insert("layer".into(), v.layer.to_string());
    e
}

/// `lineage>...>provenance`, e.g. `extracted>orthogonal-perturbed`.
pub fn provenance_label(v: &SteeringVector<f64>) -> String {
    let mut parts: Vec<String> = v
        .lineage
        .iter()
        .chain(std::iter::once(&v.provenance))
        .map(|p| serde_json::to_value(p).ok().and_then(|s| s.as_str().map(str::to_string)).unwrap_or_default())
        .collect();
    parts.dedup();
    parts.join(">")
}

/// Jacobian, bases and spectrum of an analysis as dump entries.
pub fn analysis_entries(prefix: &str, a: &JacobianAnalysis<f64>) -> Vec<PendingEntry> {
    let mut out = vec![
        PendingEntry::matrix(format!("{prefix}.jacobian"), Role::Logits, &a.jacobian),
        PendingEntry::vector(format!("{prefix}.singular_values"), Role::Hidden, a.singular_values.clone()),
        PendingEntry::matrix(format!("{prefix}.null_basis"), Role::Hidden, &a.null_basis),
        PendingEntry::matrix(format!("{prefix}.row_basis"), Role::Hidden, &a.row_basis),
    ];
    for e in &mut out {
        e.meta.meta.insert("rank".into(), a.rank.to_string());
        e.meta.meta.insert("eps".into(), a.eps.to_string());
        e.meta
            .meta
            .insert("regime".into(), format!("{:?}", a.regime).to_lowercase());
    }
    out
}

/// Per-prompt logits from a dump, presented as a [`ModelSource`].
///
/// Logit entries are matched by `(arm, seed, prompt_id)`; a request for an
/// arm the dump does not contain fails with [`Error::MissingArm`].
#[derive(Debug, Clone)]
pub struct DumpSource {
    dump: TensorDump,
    trait_label: String,
    env_label: String,
    n_prompts: usize,
    n_seeds: usize,
    logits: BTreeMap<(Arm, usize), Vec<f64>>,
    provenance: BTreeMap<String, String>,
}

fn single_label<'a>(labels: impl Iterator<Item = Option<&'a String>>, what: &str) -> Result<String> {
    let set: BTreeSet<&String> = labels.flatten().collect();
    match set.len() {
        1 => Ok(set.into_iter().next().expect("one label").clone()),
        0 => Err(Error::InvalidDump(format!("logit entries carry no {what} label"))),
        _ => Err(Error::InvalidDump(format!("logit entries mix {what} labels {set:?}"))),
    }
}

impl DumpSource {
    pub fn open(dir: &Path) -> Result<Self> {
        Self::from_dump(read_dump(dir)?)
    }

    pub fn from_dump(dump: TensorDump) -> Result<Self> {
        let vocab = dump.manifest.vocab;
        let entries: Vec<&ManifestEntry> = dump.manifest.entries.iter().filter(|e| e.role == Role::Logits && e.prompt_id.is_some()).collect();
        if entries.is_empty() {
            return Err(Error::InvalidDump("dump holds no per-prompt logits".into()));
        }
        let trait_label = single_label(entries.iter().map(|e| e.trait_label.as_ref()), "trait")?;
        let env_label = single_label(entries.iter().map(|e| e.env.as_ref()), "env")?;
        let mut logits = BTreeMap::new();
        let (mut n_prompts, mut n_seeds) = (0, 0);
        for e in entries {
            let name = e.arm.as_deref().ok_or_else(|| Error::InvalidDump(format!("logit entry `{}` has no arm", e.name)))?;
            let arm = Arm::parse(name, e.seed)?;
            let prompt = e.prompt_id.expect("filtered on prompt_id");
            if e.shape != [vocab] {
                return Err(Error::ShapeBytes {
                    name: e.name.clone(),
                    detail: format!("logits shape {:?}, expected [{vocab}]", e.shape),
                });
            }
            n_prompts = n_prompts.max(prompt + 1);
            if let Some(s) = arm.seed() {
                n_seeds = n_seeds.max(s + 1);
            }
            logits.insert((arm, prompt), dump.load(e)?);
        }
        let mut provenance = BTreeMap::new();
        for e in dump.manifest.entries.iter().filter(|e| e.role == Role::SteeringVector) {
            if let (Some(arm), Some(p)) = (&e.arm, e.meta.get("provenance")) {
                if e.seed.unwrap_or(0) == 0 {
                    provenance.insert(arm.clone(), p.clone());
                }
            }
        }
        Ok(Self {
            dump,
            trait_label,
            env_label,
            n_prompts,
            n_seeds,
            logits,
            provenance,
        })
    }

    pub fn dump(&self) -> &TensorDump {
        &self.dump
    }
}

/// Expose a dump through the protocol evaluation interface.
pub fn as_model_source(dump: TensorDump) -> Result<DumpSource> {
    DumpSource::from_dump(dump)
}

impl ModelSource for DumpSource {
    fn trait_label(&self) -> &str {
        &self.trait_label
    }

    fn env_label(&self) -> &str {
        &self.env_label
    }

    fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    fn n_seeds(&self) -> usize {
        self.n_seeds
    }

    fn vocab(&self) -> usize {
        self.dump.manifest.vocab
    }

    fn logits(&self, arm: Arm, prompt: usize) -> Result<Vec<f64>> {
        self.logits.get(&(arm, prompt)).cloned().ok_or_else(|| Error::MissingArm {
            arm: arm.to_string(),
            prompt,
        })
    }

    fn provenance(&self) -> BTreeMap<String, String> {
        self.provenance.clone()
    }
}

//! Dataset directory layout:
//!
//! ```text
//! manifest.json   format version, seed, generator config, counts, CRC32 per file
//! vocab.json      token → id
//! codes.bin       shape/color feature codes (tensor container)
//! train.jsonl     one record per sample
//! val.jsonl
//! features.bin    f64 LE grids, train then val, in record order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureCodes, GenConfig, Sample, SceneSpec, Vocabulary};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::FeatureGrid;
use crate::numcore::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const VOCAB: &str = "vocab.json";
const CODES: &str = "codes.bin";
const TRAIN: &str = "train.jsonl";
const VAL: &str = "val.jsonl";
const FEATURES: &str = "features.bin";
const FILES: [&str; 5] = [VOCAB, CODES, TRAIN, VAL, FEATURES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: GenConfig,
    pub counts: SplitCounts,
    /// CRC32 of every other file in the directory.
    pub checksums: BTreeMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    scene: SceneSpec,
    question_ids: Vec<u32>,
    candidate_ids: Vec<Vec<u32>>,
    correct_index: usize,
    rationale_ids: Option<Vec<u32>>,
    target_cells: Vec<[usize; 2]>,
}

impl Record {
    fn of(s: &Sample) -> Self {
        Self {
            id: s.id,
            scene: s.scene.clone(),
            question_ids: s.question.clone(),
            candidate_ids: s.candidates.clone(),
            correct_index: s.correct_index,
            rationale_ids: s.rationale.clone(),
            target_cells: s.target_cells.iter().map(|&(r, c)| [r, c]).collect(),
        }
    }

    fn into_sample(self, grid: FeatureGrid, noise_sigma: f64) -> Sample {
        let mut scene = self.scene;
        scene.noise_sigma = noise_sigma;
        Sample {
            id: self.id,
            scene,
            grid,
            question: self.question_ids,
            candidates: self.candidate_ids,
            correct_index: self.correct_index,
            rationale: self.rationale_ids,
            target_cells: self.target_cells.into_iter().map(|[r, c]| (r, c)).collect(),
        }
    }
}

pub fn file_crc(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn jsonl(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, &Record::of(s)).expect("records serialize");
        out.push(b'\n');
    }
    out
}

fn codes_container(codes: &FeatureCodes) -> Container {
    let mut c = Container::new(serde_json::json!({"kind": "feature_codes"}));
    c.push("codes.shape", codes.shape.clone());
    c.push("codes.color", codes.color.clone());
    c
}

pub(super) fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut features = Vec::new();
    for s in ds.train.iter().chain(&ds.val) {
        for &x in s.grid.features().data() {
            features.extend_from_slice(&x.to_le_bytes());
        }
    }
    let payloads: [(&str, Vec<u8>); 5] = [
        (VOCAB, serde_json::to_vec_pretty(&ds.vocab).expect("vocab serializes")),
        (CODES, codes_container(&ds.codes).encode()),
        (TRAIN, jsonl(&ds.train)),
        (VAL, jsonl(&ds.val)),
        (FEATURES, features),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &payloads {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        checksums.insert(name.to_string(), file_crc(bytes));
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        seed: ds.seed,
        config: ds.config.clone(),
        counts: SplitCounts {
            train: ds.train.len(),
            val: ds.val.len(),
        },
        checksums,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_component(dir: &Path, name: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(name);
    match fs::read(&path) {
        Ok(bytes) => Ok((path, bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingComponent {
            dir: dir.into(),
            component: name.into(),
        }),
        Err(e) => Err(Error::io(&path, e)),
    }
}

fn verify(path: &Path, bytes: &[u8], manifest: &DatasetManifest, name: &str) -> Result<()> {
    let expected = *manifest
        .checksums
        .get(name)
        .ok_or_else(|| Error::format(path, format!("manifest has no checksum for {name}")))?;
    let found = file_crc(bytes);
    if found != expected {
        return Err(Error::Checksum {
            path: path.into(),
            expected,
            found,
        });
    }
    Ok(())
}

fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<Record>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Loads a dataset written by [`Dataset::write`].
///
/// Errors are distinct per failure: a missing file, a manifest or container
/// version mismatch, a short feature payload, a checksum mismatch, or a
/// malformed record.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (mpath, mbytes) = read_component(dir, MANIFEST)?;
    let raw: serde_json::Value =
        serde_json::from_slice(&mbytes).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == DATASET_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                path: mpath,
                found: v as u32,
                expected: DATASET_FORMAT_VERSION,
            })
        }
        None => return Err(Error::format(&mpath, "manifest lacks format_version")),
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| Error::format(&mpath, e.to_string()))?;
    manifest.config.validate()?;

    let mut files = BTreeMap::new();
    for name in FILES {
        files.insert(name, read_component(dir, name)?);
    }

    // Structural checks come before checksums so a short or foreign file
    // reports what is wrong with it rather than just "checksum".
    let cfg = &manifest.config;
    let grid_len = cfg.grid_h * cfg.grid_w * cfg.d_visual;
    let n = manifest.counts.train + manifest.counts.val;
    let (fpath, fbytes) = &files[FEATURES];
    if fbytes.len() != n * grid_len * 8 {
        return Err(Error::Truncated {
            path: fpath.clone(),
            reason: format!("expected {} bytes, found {}", n * grid_len * 8, fbytes.len()),
        });
    }
    let (cpath, cbytes) = &files[CODES];
    let codes_c = Container::decode(cbytes, cpath)?;

    for (name, (path, bytes)) in &files {
        verify(path, bytes, &manifest, name)?;
    }

    let (vpath, vbytes) = &files[VOCAB];
    let vocab: Vocabulary =
        serde_json::from_slice(vbytes).map_err(|e| Error::format(vpath, e.to_string()))?;
    let code = |name: &str| -> Result<Tensor> {
        let t = codes_c
            .get(name)
            .cloned()
            .ok_or_else(|| Error::format(cpath, format!("missing tensor {name}")))?;
        if t.shape() != [4, cfg.d_visual] {
            return Err(Error::format(cpath, format!("{name} has shape {:?}", t.shape())));
        }
        Ok(t)
    };
    let codes = FeatureCodes {
        shape: code("codes.shape")?,
        color: code("codes.color")?,
    };

    let mut grids = fbytes.chunks_exact(grid_len * 8).map(|chunk| {
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(vec![cfg.grid_h, cfg.grid_w, cfg.d_visual], data)
            .and_then(FeatureGrid::new)
            .map_err(|e| Error::format(fpath, e.to_string()))
    });
    let mut split = |name: &str, expected: usize| -> Result<Vec<Sample>> {
        let (path, bytes) = &files[name];
        let records = parse_records(path, bytes)?;
        if records.len() != expected {
            return Err(Error::format(
                path,
                format!("manifest lists {expected} records, file has {}", records.len()),
            ));
        }
        records
            .into_iter()
            .map(|r| {
                let grid = grids.next().expect("length checked")?;
                let s = r.into_sample(grid, cfg.noise_sigma);
                validate_sample(&s, &vocab).map_err(|e| Error::format(path, e.to_string()))?;
                Ok(s)
            })
            .collect()
    };
    let train = split(TRAIN, manifest.counts.train)?;
    let val = split(VAL, manifest.counts.val)?;
    Ok(Dataset {
        seed: manifest.seed,
        config: manifest.config,
        vocab,
        codes,
        train,
        val,
    })
}

fn validate_sample(s: &Sample, vocab: &Vocabulary) -> Result<()> {
    s.scene.validate()?;
    if s.candidates.len() != crate::model::N_CANDIDATES || s.correct_index >= s.candidates.len() {
        return Err(Error::Input(format!("sample {} has malformed candidates", s.id)));
    }
    if let Some(t) = s.token_ids().find(|&t| t as usize >= vocab.len()) {
        return Err(Error::Input(format!("sample {} uses token id {t} outside vocabulary", s.id)));
    }
    if s.target_cells.iter().any(|&(r, c)| r >= s.scene.h || c >= s.scene.w) {
        return Err(Error::Input(format!("sample {} has a target cell outside the grid", s.id)));
    }
    Ok(())
}

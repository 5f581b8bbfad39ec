//! On-disk dataset layout:
//!
//! ```text
//! manifest.json              schema version, seeds, emulator params, per-sample records
//! frames/sample_NNNNNN.f32   unpadded T × V frames, little-endian f32, row-major
//! stimuli/sample_NNNNNN.txt  optional headline set
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmulatorParams, Simulation};
use crate::error::{Error, Result};
use crate::nn::{decode_le, encode_le};
use crate::params::{ScoreVector, Topic};
use crate::stimulus::{Source, StimulusSet};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub topic: Topic,
    pub theta: ScoreVector,
    /// Frame count before padding or truncation.
    pub length: usize,
    pub frames_file: String,
    pub frames_sha256: String,
    pub stimulus_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub emulator: EmulatorParams,
    /// Generator id of the text stage, if one ran.
    pub generator: Option<String>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub simulations: Vec<Simulation>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    pub fn new(simulations: Vec<Simulation>, seed: u64, emulator: EmulatorParams) -> Self {
        let generator = simulations
            .iter()
            .find_map(|s| s.stimuli.as_ref().map(|st| st.generator_id.clone()));
        let samples = simulations
            .iter()
            .enumerate()
            .map(|(i, s)| SampleRecord {
                index: i,
                topic: s.topic,
                theta: s.theta,
                length: s.frames.nrows(),
                frames_file: format!("frames/sample_{i:06}.f32"),
                frames_sha256: sha256_hex(&frame_bytes(&s.frames)),
                stimulus_file: s.stimuli.as_ref().map(|_| format!("stimuli/sample_{i:06}.txt")),
            })
            .collect();
        Dataset {
            manifest: DatasetManifest {
                schema_version: DATASET_SCHEMA_VERSION,
                seed,
                emulator,
                generator,
                samples,
            },
            simulations,
        }
    }

    pub fn len(&self) -> usize {
        self.simulations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.simulations.is_empty()
    }

    pub fn vertices(&self) -> usize {
        self.manifest.emulator.vertices
    }

    /// Writes the dataset and returns its hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir.join("frames"))?;
        if self.manifest.samples.iter().any(|s| s.stimulus_file.is_some()) {
            fs::create_dir_all(dir.join("stimuli"))?;
        }
        for (rec, sim) in self.manifest.samples.iter().zip(&self.simulations) {
            fs::write(dir.join(&rec.frames_file), frame_bytes(&sim.frames))?;
            if let (Some(file), Some(st)) = (&rec.stimulus_file, &sim.stimuli) {
                st.save(&dir.join(file))?;
            }
        }
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(dir.join("manifest.json"), &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a dataset, verifying every frame file against its recorded hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::artifact(&manifest_path, "unsupported dataset schema version"));
        }
        let v = manifest.emulator.vertices;
        let mut simulations = Vec::with_capacity(manifest.samples.len());
        for rec in &manifest.samples {
            let path = dir.join(&rec.frames_file);
            let bytes = fs::read(&path)?;
            if sha256_hex(&bytes) != rec.frames_sha256 {
                return Err(Error::artifact(&path, "frame file hash does not match the manifest"));
            }
            let data = decode_le::<f32>(&bytes)
                .filter(|d| d.len() == rec.length * v)
                .ok_or_else(|| Error::artifact(&path, format!("expected {} x {v} f32 values", rec.length)))?;
            let frames = Array2::from_shape_vec((rec.length, v), data).expect("size checked");
            let stimuli = match &rec.stimulus_file {
                None => None,
                Some(f) => {
                    let generator = manifest.generator.as_deref().unwrap_or("unknown");
                    let source = if generator.starts_with("mock") { Source::Mock } else { Source::External };
                    Some(StimulusSet::load(&dir.join(f), source, generator)?)
                }
            };
            simulations.push(Simulation {
                topic: rec.topic,
                theta: rec.theta,
                frames,
                stimuli,
            });
        }
        Ok(Dataset {
            manifest,
            simulations,
        })
    }

    /// Hash of a saved dataset: SHA-256 of its manifest, which itself
    /// records the hash of every frame file.
    pub fn hash(dir: &Path) -> Result<String> {
        Ok(sha256_hex(&fs::read(dir.join("manifest.json"))?))
    }
}

fn frame_bytes(frames: &Array2<f32>) -> Vec<u8> {
    encode_le(frames.iter().copied())
}

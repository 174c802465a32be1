//! On-disk corpus layout:
//!
//! ```text
//! corpus/
//!   manifest.json              {profile, seed, count, width, height, ...}
//!   seq_000000/
//!     frame_00000.ppm ...      binary P6 frames
//!     labels.jsonl             {"frame":0,"delta_l":2,"delta_r":3,"lane_count":4}
//!   seq_000001/ ...
//! ```
//!
//! Generation is a pure function of `(profile, count, seed)`, so two
//! invocations with the same arguments produce byte-identical corpora.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use laneid_core::brightness::Image;
use laneid_core::conventions::LaneLabel;
use laneid_core::synth::{generate_sequence, scene_spec_for, Profile};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::ppm;

pub const GENERATOR_VERSION: u32 = 1;

/// Corpus-level metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub profile: String,
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub frames_per_sequence: usize,
    pub generator_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    frame: usize,
    delta_l: u8,
    delta_r: u8,
    lane_count: u8,
}

/// One loaded sequence.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    /// Directory-derived sequence ID.
    pub id: u64,
    pub frames: Vec<Image>,
    pub labels: Vec<LaneLabel>,
}

/// A fully loaded corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub sequences: Vec<LoadedSequence>,
}

impl Corpus {
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    /// Horizontally mirrored copy: every frame flipped, every label mirrored.
    pub fn mirrored(&self) -> Corpus {
        Corpus {
            manifest: self.manifest.clone(),
            sequences: self
                .sequences
                .iter()
                .map(|s| LoadedSequence {
                    id: s.id,
                    frames: s.frames.iter().map(|f| f.flipped()).collect(),
                    labels: s.labels.iter().map(|&l| laneid_core::conventions::mirror(l)).collect(),
                })
                .collect(),
        }
    }
}

/// Generates `count` sequences of the profile and writes the corpus.
pub fn make_corpus(
    profile: Profile,
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
    frames: usize,
    out: &Path,
) -> Result<Manifest> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = Manifest {
        profile: profile.name().to_string(),
        seed,
        count,
        width,
        height,
        frames_per_sequence: frames,
        generator_version: GENERATOR_VERSION,
    };
    let manifest_path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|source| Error::Json { path: manifest_path.clone(), source })?;
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;

    for index in 0..count {
        let spec = scene_spec_for(profile, seed, index as u64, width, height, frames);
        let record = generate_sequence(&spec)?;
        let id = profile.id_base() + index as u64;
        let dir = out.join(format!("seq_{id:06}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (t, frame) in record.frames.iter().enumerate() {
            ppm::write_ppm(frame, &dir.join(format!("frame_{t:05}.ppm")))?;
        }
        let labels_path = dir.join("labels.jsonl");
        let mut file = fs::File::create(&labels_path).map_err(io_err(&labels_path))?;
        for (t, label) in record.labels.iter().enumerate() {
            let line = LabelLine {
                frame: t,
                delta_l: label.delta_l,
                delta_r: label.delta_r,
                lane_count: label.lane_count,
            };
            let json = serde_json::to_string(&line)
                .map_err(|source| Error::Json { path: labels_path.clone(), source })?;
            writeln!(file, "{json}").map_err(io_err(&labels_path))?;
        }
    }
    Ok(manifest)
}

/// Loads a corpus, validating every label triple.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|source| Error::Json { path: manifest_path.clone(), source })?;

    let mut seq_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seq_"))
        })
        .collect();
    seq_dirs.sort();

    if seq_dirs.len() != manifest.count {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            detail: format!("manifest promises {} sequences, found {}", manifest.count, seq_dirs.len()),
        });
    }

    let mut sequences = Vec::with_capacity(seq_dirs.len());
    for seq_dir in seq_dirs {
        let name = seq_dir.file_name().unwrap().to_string_lossy().into_owned();
        let id: u64 = name
            .trim_start_matches("seq_")
            .parse()
            .map_err(|_| Error::Format { path: seq_dir.clone(), detail: "bad sequence directory name".into() })?;

        let labels_path = seq_dir.join("labels.jsonl");
        let file = fs::File::open(&labels_path).map_err(io_err(&labels_path))?;
        let mut labels = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&labels_path))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LabelLine = serde_json::from_str(&line)
                .map_err(|source| Error::Json { path: labels_path.clone(), source })?;
            if parsed.frame != labels.len() {
                return Err(Error::Format {
                    path: labels_path.clone(),
                    detail: format!("expected frame {} next, got {}", labels.len(), parsed.frame),
                });
            }
            labels.push(LaneLabel::new(parsed.delta_l, parsed.delta_r, parsed.lane_count)?);
        }

        let mut frames = Vec::with_capacity(labels.len());
        for t in 0..labels.len() {
            let frame_path = seq_dir.join(format!("frame_{t:05}.ppm"));
            let img = ppm::read_ppm(&frame_path)?;
            if img.width() != manifest.width || img.height() != manifest.height {
                return Err(Error::Format {
                    path: frame_path,
                    detail: format!(
                        "frame is {}x{}, manifest says {}x{}",
                        img.width(),
                        img.height(),
                        manifest.width,
                        manifest.height
                    ),
                });
            }
            frames.push(img);
        }
        sequences.push(LoadedSequence { id, frames, labels });
    }
    Ok(Corpus { manifest, sequences })
}

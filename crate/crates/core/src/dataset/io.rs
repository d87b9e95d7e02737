//! On-disk format.
//!
//! Frames: JSON Lines, one `{"t": <int>, "joints": [[x, y, z], ...]}` per
//! line, in order of `t`. Annotations: a single JSON document
//! `{"num_classes": M, "fps": <number>, "actions": [{"class": k, "start": s, "end": e}]}`.
//! Floats are written with shortest round-trip formatting.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ActionAnnotation, SkeletonFrame, SkeletonSequence};
use crate::error::{Error, Result};

pub const FRAMES_SUFFIX: &str = ".frames.jsonl";
pub const ANNOTATIONS_SUFFIX: &str = ".annotations.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct FrameRecord {
    pub t: usize,
    pub joints: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionRecord {
    class: usize,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationsFile {
    num_classes: usize,
    fps: f64,
    actions: Vec<ActionRecord>,
}

/// Reads a frames file on its own (used by streaming, which has no labels).
pub fn load_frames(path: &Path) -> Result<Vec<SkeletonFrame>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    let mut joints = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, line_no, e))?;
        if rec.t != frames.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("frame t={} out of order, expected t={}", rec.t, frames.len()),
            ));
        }
        let j = *joints.get_or_insert(rec.joints.len());
        if rec.joints.len() != j || j == 0 {
            return Err(Error::parse(
                path,
                line_no,
                format!("frame has {} joints, expected {}", rec.joints.len(), j),
            ));
        }
        if rec.joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, line_no, "non-finite coordinate"));
        }
        frames.push(SkeletonFrame {
            t: rec.t,
            joints: rec.joints,
        });
    }
    Ok(frames)
}

pub fn load_sequence(frames_path: &Path, annotations_path: &Path) -> Result<SkeletonSequence> {
    let frames = load_frames(frames_path)?;
    let text = fs::read_to_string(annotations_path).map_err(|e| Error::io(annotations_path, e))?;
    let ann: AnnotationsFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(annotations_path, e.line(), e))?;
    let annotations = ann
        .actions
        .into_iter()
        .map(|a| ActionAnnotation {
            class_id: a.class,
            start: a.start,
            end: a.end,
        })
        .collect();
    let name = sequence_name(frames_path);
    SkeletonSequence::new(name, frames, annotations, ann.num_classes, ann.fps)
}

pub fn save_sequence(seq: &SkeletonSequence, frames_path: &Path, annotations_path: &Path) -> Result<()> {
    let file = fs::File::create(frames_path).map_err(|e| Error::io(frames_path, e))?;
    let mut w = BufWriter::new(file);
    for frame in &seq.frames {
        let rec = FrameRecord {
            t: frame.t,
            joints: frame.joints.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::io(frames_path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(frames_path, e))?;
    }
    w.flush().map_err(|e| Error::io(frames_path, e))?;

    let ann = AnnotationsFile {
        num_classes: seq.num_classes,
        fps: seq.fps,
        actions: seq
            .annotations
            .iter()
            .map(|a| ActionRecord {
                class: a.class_id,
                start: a.start,
                end: a.end,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&ann).expect("annotations serialize");
    fs::write(annotations_path, text + "\n").map_err(|e| Error::io(annotations_path, e))
}

fn sequence_name(frames_path: &Path) -> String {
    let file = frames_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    file.strip_suffix(FRAMES_SUFFIX)
        .map(str::to_owned)
        .unwrap_or(file)
}

pub fn paths_for(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}{FRAMES_SUFFIX}")),
        dir.join(format!("{name}{ANNOTATIONS_SUFFIX}")),
    )
}

/// Writes `<name>.frames.jsonl` / `<name>.annotations.json` pairs into `dir`.
pub fn save_dir(dir: &Path, seqs: &[SkeletonSequence]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for seq in seqs {
        let (f, a) = paths_for(dir, &seq.name);
        save_sequence(seq, &f, &a)?;
    }
    Ok(())
}

/// Loads every sequence in `dir`, sorted by name. An empty directory is an error.
pub fn load_dir(dir: &Path) -> Result<Vec<SkeletonSequence>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(name) = file.strip_suffix(FRAMES_SUFFIX) {
            names.push(name.to_owned());
        }
    }
    if names.is_empty() {
        return Err(Error::Data(format!("no sequences found in {}", dir.display())));
    }
    names.sort();
    names
        .iter()
        .map(|name| {
            let (f, a) = paths_for(dir, name);
            load_sequence(&f, &a)
        })
        .collect()
}

//! Corpus records, JSONL corpus files and the rejection log.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numerics::container::{read_matrix, Bundle, MAGIC, VERSION_BUNDLE};
use crate::numerics::Matrix;

/// One video-text pair as it moves through curation. Keys this type does
/// not know are carried through untouched in `extra`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTextRecord {
    pub video_id: String,
    pub raw_text: String,
    /// Path of the frame-embedding file, relative to the corpus file.
    pub frame_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyframe_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewritten_long: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewritten_short: Option<String>,
    /// Final training text chosen by the mixing stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_text: Option<String>,
    /// `long` or `short`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_variant: Option<String>,
    /// Names of the stages already applied, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<String>,
    /// Non-fatal events, e.g. one rewrite variant rejected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl VideoTextRecord {
    pub fn new(video_id: impl Into<String>, raw_text: impl Into<String>, frame_ref: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            raw_text: raw_text.into(),
            frame_ref: frame_ref.into(),
            alignment_score: None,
            keyframe_indices: None,
            captions: None,
            rewritten_long: None,
            rewritten_short: None,
            training_text: None,
            text_variant: None,
            stages: Vec::new(),
            notes: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }

    pub fn stamp(&mut self, stage: &str) {
        if !self.has_stage(stage) {
            self.stages.push(stage.to_string());
        }
    }

    /// Text used for training: the mixed rewrite when present.
    pub fn text_for_training(&self) -> &str {
        self.training_text.as_deref().unwrap_or(&self.raw_text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    /// Removed by design (below the kept fraction, failed post-processing).
    Dropped,
    /// Set aside after a failure; kept whole so it can be re-run.
    Flagged,
}

/// A record removed from a stage's output, with why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: String,
    pub stage: String,
    pub disposition: Disposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(flatten)]
    pub record: VideoTextRecord,
}

impl Rejection {
    pub fn dropped(stage: &str, reason: &str, record: VideoTextRecord) -> Self {
        Self {
            reason: reason.into(),
            stage: stage.into(),
            disposition: Disposition::Dropped,
            detail: None,
            record,
        }
    }

    pub fn flagged(stage: &str, reason: &str, detail: impl Into<String>, record: VideoTextRecord) -> Self {
        Self {
            reason: reason.into(),
            stage: stage.into(),
            disposition: Disposition::Flagged,
            detail: Some(detail.into()),
            record,
        }
    }
}

/// Key of the provenance line heading every JSONL artifact.
pub const META_KEY: &str = "_meta";

/// A parsed JSONL file: the optional provenance line plus the records.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: Option<Value>,
    pub records: Vec<VideoTextRecord>,
    /// Directory that relative `frame_ref`s resolve against.
    pub base_dir: PathBuf,
}

impl Corpus {
    pub fn resolve(&self, frame_ref: &str) -> PathBuf {
        let p = Path::new(frame_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn is_meta(v: &Value) -> bool {
    v.as_object().is_some_and(|o| o.contains_key(META_KEY))
}

/// Parses JSONL text. Malformed lines abort with their 1-based number;
/// duplicate ids are rejected.
pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<(Option<Value>, Vec<T>)> {
    let mut meta = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("malformed {what} at line {}: {e}", i + 1)))?;
        if is_meta(&value) {
            meta = value.get(META_KEY).cloned();
            continue;
        }
        out.push(
            serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("malformed {what} at line {}: {e}", i + 1)))?,
        );
    }
    Ok((meta, out))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::Pipeline(format!("cannot read corpus {}: {e}", path.display())))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    let (meta, records): (_, Vec<VideoTextRecord>) = parse_jsonl(&text, "record")?;
    let mut ids: Vec<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Pipeline(format!("duplicate video_id {}", w[0])));
    }
    Ok(Corpus {
        meta,
        records,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// JSONL bytes: the provenance line (when given) then one object per item.
pub fn to_jsonl<T: Serialize>(meta: Option<&Value>, items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(m) = meta {
        let mut head = Map::new();
        head.insert(META_KEY.into(), m.clone());
        serde_json::to_writer(&mut out, &head).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, meta: Option<&Value>, items: &[T]) -> Result<()> {
    let bytes = to_jsonl(meta, items)?;
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Frame embeddings of one video: `frames` is `T × d` (one row per frame);
/// `patches`, when present, is `T·N_p × d` in frame-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStore {
    pub frames: Matrix,
    pub patches: Option<Matrix>,
}

pub const FRAMES_ENTRY: &str = "frames";
pub const PATCHES_ENTRY: &str = "patches";

impl FrameStore {
    pub fn n_patches(&self) -> usize {
        match &self.patches {
            Some(p) if self.frames.rows() > 0 => p.rows() / self.frames.rows(),
            _ => 0,
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        b.set_meta("kind", "frames");
        b.push(FRAMES_ENTRY, self.frames.clone());
        if let Some(p) = &self.patches {
            b.push(PATCHES_ENTRY, p.clone());
        }
        b
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().write(path)
    }

    /// Reads either a bare matrix file (frames only) or a bundle with
    /// `frames` and optional `patches` entries.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let head = {
            let bytes = fs::read(path)?;
            bytes.get(..8).map(<[u8]>::to_vec).unwrap_or_default()
        };
        if head.len() == 8 && &head[..4] == MAGIC && u32::from_le_bytes([head[4], head[5], head[6], head[7]]) == VERSION_BUNDLE {
            let b = Bundle::read(path)?;
            let frames = b.require(FRAMES_ENTRY)?.clone();
            let patches = b.get(PATCHES_ENTRY).cloned();
            if let Some(p) = &patches {
                if frames.rows() == 0 || p.rows() % frames.rows() != 0 || p.cols() != frames.cols() {
                    return Err(Error::Format(format!(
                        "{}: {} patch rows do not divide into {} frames",
                        path.display(),
                        p.rows(),
                        frames.rows()
                    )));
                }
            }
            Ok(Self { frames, patches })
        } else {
            Ok(Self {
                frames: read_matrix(path)?,
                patches: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_survive_a_round_trip() {
        let line = r#"{"video_id":"a","raw_text":"t","frame_ref":"f.m2rp","lang":"en","n":3}"#;
        let (_, recs): (_, Vec<VideoTextRecord>) = parse_jsonl(line, "record").unwrap();
        assert_eq!(recs[0].extra["lang"], "en");
        let out = String::from_utf8(to_jsonl(None, &recs).unwrap()).unwrap();
        assert_eq!(out.trim(), line);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "{\"video_id\":\"a\",\"raw_text\":\"t\",\"frame_ref\":\"f\"}\n{oops\n";
        let err = parse_jsonl::<VideoTextRecord>(text, "record").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn meta_line_is_split_off() {
        let meta = serde_json::json!({"seed": 3});
        let rec = VideoTextRecord::new("a", "t", "f");
        let bytes = to_jsonl(Some(&meta), std::slice::from_ref(&rec)).unwrap();
        let (m, recs): (_, Vec<VideoTextRecord>) = parse_jsonl(std::str::from_utf8(&bytes).unwrap(), "record").unwrap();
        assert_eq!(m, Some(meta));
        assert_eq!(recs, vec![rec]);
    }

    #[test]
    fn rejection_flattens_the_record() {
        let r = Rejection::dropped("filter", "below_top_fraction", VideoTextRecord::new("a", "t", "f"));
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["video_id"], "a");
        assert_eq!(v["reason"], "below_top_fraction");
        assert_eq!(v["stage"], "filter");
    }
}

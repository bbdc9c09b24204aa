//! Bridges between corpus files and model inputs, plus writers for the
//! synthetic corpora used by demos and tests.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::RawSample;
use crate::numerics::{Matrix, SeededRng};
use crate::pipeline::record::{write_jsonl, Corpus, FrameStore, VideoTextRecord};
use crate::stan::PatchGrid;
use crate::synth::{SynthPair, BACKGROUND, OBJECTS, SCENES};
use crate::text::TextEncoder;

/// A loaded training or test item.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub raw: RawSample,
    /// Frames in the clip before selection.
    pub source_frames: usize,
}

pub fn frame_store_from_grid(grid: &PatchGrid) -> FrameStore {
    FrameStore {
        frames: grid.cls_tokens(),
        patches: (grid.n_patches() > 0).then(|| grid.patch_tokens()),
    }
}

/// Input grid over the frames at `indices`.
pub fn grid_from_store(store: &FrameStore, indices: &[usize]) -> Result<PatchGrid> {
    let n_p = store.n_patches();
    let d = store.frames.cols();
    let total = store.frames.rows();
    let mut tokens = Matrix::zeros(indices.len() * (n_p + 1), d);
    for (k, &f) in indices.iter().enumerate() {
        if f >= total {
            return Err(Error::domain(format!("frame {f} beyond {total} frames")));
        }
        let base = k * (n_p + 1);
        tokens.row_mut(base).copy_from_slice(store.frames.row(f));
        if let Some(p) = &store.patches {
            for j in 0..n_p {
                tokens.row_mut(base + 1 + j).copy_from_slice(p.row(f * n_p + j));
            }
        }
    }
    PatchGrid::new(indices.len(), n_p, 0, tokens)
}

/// Frames the model sees from a clip of `total`: all of them when the count
/// matches, the key-frames when they number exactly `n`, else `n` evenly
/// spaced picks (segment midpoints).
pub fn select_frames(total: usize, n: usize, keyframes: Option<&[usize]>) -> Vec<usize> {
    if total == n {
        return (0..n).collect();
    }
    if let Some(k) = keyframes {
        if k.len() == n && k.iter().all(|&i| i < total) {
            return k.to_vec();
        }
    }
    (0..n).map(|j| (((2 * j + 1) * total) / (2 * n)).min(total.saturating_sub(1))).collect()
}

/// Reads every record's frames and pairs them with its training text.
/// Captions are used when they line up with the selected frames.
pub fn load_examples(corpus: &Corpus, n_frames: usize, n_patches: usize) -> Result<Vec<Example>> {
    corpus
        .records
        .iter()
        .map(|r| {
            let store = FrameStore::read(corpus.resolve(&r.frame_ref))
                .map_err(|e| Error::Pipeline(format!("{}: {e}", r.video_id)))?;
            if store.n_patches() != n_patches {
                return Err(Error::Config(format!(
                    "{}: frame file has {} patches per frame, model expects {n_patches}",
                    r.video_id,
                    store.n_patches()
                )));
            }
            let total = store.frames.rows();
            if total == 0 {
                return Err(Error::Pipeline(format!("{}: no frames", r.video_id)));
            }
            let picks = select_frames(total, n_frames, r.keyframe_indices.as_deref());
            let captions = match (&r.captions, &r.keyframe_indices) {
                (Some(c), Some(k)) if *k == picks && c.len() == picks.len() => c.clone(),
                (Some(c), None) if c.len() == total => picks.iter().map(|&i| c[i].clone()).collect(),
                _ => Vec::new(),
            };
            Ok(Example {
                id: r.video_id.clone(),
                raw: RawSample {
                    grid: grid_from_store(&store, &picks)?,
                    text: r.text_for_training().to_string(),
                    captions,
                },
                source_frames: total,
            })
        })
        .collect()
}

/// Writes `items` as `dir/name.jsonl` with frame files under
/// `dir/name_frames/`. Items without frames get a reference to a file that
/// is never written, standing in for a broken download.
pub fn write_corpus(dir: &Path, name: &str, meta: &Value, items: &[(VideoTextRecord, Option<FrameStore>)]) -> Result<PathBuf> {
    let frames_dir = format!("{name}_frames");
    fs::create_dir_all(dir.join(&frames_dir))?;
    let mut records = Vec::with_capacity(items.len());
    for (rec, store) in items {
        let mut rec = rec.clone();
        rec.frame_ref = format!("{frames_dir}/{}.m2rp", rec.video_id);
        if let Some(s) = store {
            s.write(dir.join(&rec.frame_ref))?;
        }
        records.push(rec);
    }
    let path = dir.join(format!("{name}.jsonl"));
    write_jsonl(&path, Some(meta), &records)?;
    Ok(path)
}

/// Records for synthetic pairs: raw text, one caption per frame and every
/// frame marked as a key-frame.
pub fn pair_items(pairs: &[SynthPair]) -> Vec<(VideoTextRecord, Option<FrameStore>)> {
    pairs
        .iter()
        .map(|p| {
            let n = p.sample.grid.n_frames();
            let mut r = VideoTextRecord::new(p.id.clone(), p.sample.text.clone(), "");
            r.keyframe_indices = Some((0..n).collect());
            r.captions = Some(p.sample.captions.clone());
            (r, Some(frame_store_from_grid(&p.sample.grid)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationSpec {
    pub records: usize,
    pub dim: usize,
    pub text_seed: u64,
    pub seed: u64,
    /// Share of records whose text describes a different video.
    pub mismatched: f64,
    /// Share of records whose frame file is missing.
    pub missing_frames: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise: f64,
}

impl Default for CurationSpec {
    fn default() -> Self {
        Self {
            records: 1000,
            dim: 16,
            text_seed: 2,
            seed: 0,
            mismatched: 0.3,
            missing_frames: 0.0,
            min_frames: 6,
            max_frames: 16,
            noise: 0.1,
        }
    }
}

/// Web-style raw corpus for the curation stages: frames live directly in the
/// text-embedding space, so the mock scorer separates matched from
/// mismatched texts. Each clip holds one event on a contiguous run of
/// frames with background before and after.
pub fn curation_items(spec: &CurationSpec) -> Vec<(VideoTextRecord, Option<FrameStore>)> {
    let enc = TextEncoder::new(spec.dim, 1, spec.text_seed);
    let root = SeededRng::new(spec.seed).split_named("curation-corpus");
    (0..spec.records)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let event = |rng: &mut SeededRng| {
                let a = rng.below(OBJECTS.len());
                let b = (a + 1 + rng.below(OBJECTS.len() - 1)) % OBJECTS.len();
                format!("{} {}", OBJECTS[a], OBJECTS[b])
            };
            let shown = event(&mut rng);
            let scene = SCENES[rng.below(SCENES.len())];
            let total = spec.min_frames + rng.below(spec.max_frames - spec.min_frames + 1);
            let run = (total / 2).max(1);
            let start = rng.below(total - run + 1);
            let back = BACKGROUND[rng.below(BACKGROUND.len())];
            let frames = Matrix::from_rows(
                &(0..total)
                    .map(|f| {
                        let what = if (start..start + run).contains(&f) {
                            format!("{shown} {scene}")
                        } else {
                            format!("{back} {scene}")
                        };
                        enc.cls(&what).iter().map(|x| x + spec.noise * rng.normal()).collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>(),
            )
            .expect("equal widths");
            let text = if rng.uniform() < spec.mismatched {
                format!("{} {}", event(&mut rng), SCENES[rng.below(SCENES.len())])
            } else {
                format!("{shown} {scene}")
            };
            let missing = rng.uniform() < spec.missing_frames;
            let rec = VideoTextRecord::new(format!("m{i:05}"), text, "");
            (rec, (!missing).then_some(FrameStore { frames, patches: None }))
        })
        .collect()
}

pub fn write_curation_corpus(dir: &Path, name: &str, spec: &CurationSpec) -> Result<PathBuf> {
    let meta = json!({
        "kind": "curation",
        "records": spec.records,
        "dim": spec.dim,
        "text_seed": spec.text_seed,
        "seed": spec.seed,
        "mismatched": spec.mismatched,
        "missing_frames": spec.missing_frames,
    });
    write_corpus(dir, name, &meta, &curation_items(spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_picks_are_segment_midpoints() {
        assert_eq!(select_frames(12, 8, None), vec![0, 2, 3, 5, 6, 8, 9, 11]);
        assert_eq!(select_frames(8, 8, Some(&[1, 2])), (0..8).collect::<Vec<_>>());
        assert_eq!(select_frames(10, 2, Some(&[3, 7])), vec![3, 7]);
        assert_eq!(select_frames(3, 6, None), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn grid_round_trips_through_a_frame_store() {
        let tokens = SeededRng::new(1).normal_matrix(3 * 3, 4, 1.0);
        let grid = PatchGrid::new(3, 2, 0, tokens).unwrap();
        let store = frame_store_from_grid(&grid);
        assert_eq!(grid_from_store(&store, &[0, 1, 2]).unwrap(), grid);
        assert_eq!(grid_from_store(&store, &[2]).unwrap().frame(0), grid.frame(2));
    }

    #[test]
    fn curation_corpus_is_deterministic() {
        let spec = CurationSpec {
            records: 20,
            ..CurationSpec::default()
        };
        assert_eq!(curation_items(&spec), curation_items(&spec));
    }
}

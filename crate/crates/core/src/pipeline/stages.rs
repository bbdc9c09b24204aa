//! The seven curation stages. Each maps a record list to kept records plus
//! logged rejections, so `|in| = |out| + |rejected|` holds per stage.
//! Records carry stage stamps, which makes re-running a stage a no-op.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clients::{ClientSuite, RewriteRequest, Variant};
use super::record::{Disposition, FrameStore, Rejection, VideoTextRecord};
use crate::error::{Error, Result};
use crate::keyframes::{tsdpc_extract_with, DEFAULT_CUTOFF_PERCENTILE, DEFAULT_N_KEY};
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Score,
    Filter,
    Keyframes,
    Caption,
    Rewrite,
    Postprocess,
    Mix,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Score,
        Stage::Filter,
        Stage::Keyframes,
        Stage::Caption,
        Stage::Rewrite,
        Stage::Postprocess,
        Stage::Mix,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Score => "score",
            Stage::Filter => "filter",
            Stage::Keyframes => "keyframes",
            Stage::Caption => "caption",
            Stage::Rewrite => "rewrite",
            Stage::Postprocess => "postprocess",
            Stage::Mix => "mix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Machine-readable rejection reasons.
pub mod reasons {
    pub const UNREADABLE_FRAMES: &str = "unreadable_frames";
    pub const NO_FRAMES: &str = "no_frames";
    pub const CLIENT_FAILURE: &str = "client_failure";
    pub const SCORE_NOT_FINITE: &str = "score_not_finite";
    pub const BELOW_TOP_FRACTION: &str = "below_top_fraction";
    pub const KEYFRAME_FAILURE: &str = "keyframe_failure";
    pub const MISSING_KEYFRAMES: &str = "missing_keyframes";
    pub const NO_KEYFRAMES: &str = "no_keyframes";
    pub const KEYFRAME_OUT_OF_RANGE: &str = "keyframe_out_of_range";
    pub const MISSING_CAPTIONS: &str = "missing_captions";
    pub const MISSING_REWRITES: &str = "missing_rewrites";
    pub const NO_VALID_REWRITE: &str = "no_valid_rewrite";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Fraction of scored records the filter keeps, in (0, 1].
    pub top_fraction: f64,
    /// Accepted word counts of a long rewrite, inclusive.
    pub long_word_band: [usize; 2],
    pub short_word_max: usize,
    /// Long-to-short ratio of the mixed training texts.
    pub mix_ratio: [usize; 2],
    /// Largest share of one token before a text counts as degenerate.
    pub degenerate_threshold: f64,
    pub n_key: usize,
    pub cutoff_percentile: f64,
    /// Flagged share of a stage's input above which the run reports a
    /// data-quality breach.
    pub max_flagged_fraction: f64,
    /// Cap on concurrent client calls.
    pub max_in_flight: usize,
    /// Declared corpus language; recorded for provenance only.
    pub language: String,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.1,
            long_word_band: [40, 160],
            short_word_max: 15,
            mix_ratio: [1, 1],
            degenerate_threshold: 0.5,
            n_key: DEFAULT_N_KEY,
            cutoff_percentile: DEFAULT_CUTOFF_PERCENTILE,
            max_flagged_fraction: 0.05,
            max_in_flight: 8,
            language: "en".into(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return bad(format!("top_fraction {} outside (0, 1]", self.top_fraction));
        }
        let [lo, hi] = self.long_word_band;
        if lo == 0 || lo >= hi {
            return bad(format!("long_word_band [{lo}, {hi}] needs 0 < min < max"));
        }
        if self.short_word_max == 0 {
            return bad("short_word_max must be positive".into());
        }
        if self.mix_ratio[0] + self.mix_ratio[1] == 0 {
            return bad("mix_ratio cannot be 0:0".into());
        }
        if !(self.degenerate_threshold > 0.0 && self.degenerate_threshold <= 1.0) {
            return bad(format!("degenerate_threshold {} outside (0, 1]", self.degenerate_threshold));
        }
        if !(0.0..=1.0).contains(&self.max_flagged_fraction) {
            return bad(format!("max_flagged_fraction {} outside [0, 1]", self.max_flagged_fraction));
        }
        if self.n_key == 0 || self.max_in_flight == 0 {
            return bad("n_key and max_in_flight must be positive".into());
        }
        if !(0.0..=100.0).contains(&self.cutoff_percentile) {
            return bad(format!("cutoff_percentile {} outside [0, 100]", self.cutoff_percentile));
        }
        Ok(())
    }
}

/// Shared inputs of every stage.
pub struct StageContext<'a> {
    pub config: &'a PipelineConfig,
    pub clients: &'a ClientSuite,
    /// Directory that relative frame references resolve against.
    pub base_dir: &'a Path,
}

impl StageContext<'_> {
    fn frames(&self, r: &VideoTextRecord) -> Result<FrameStore> {
        let p = Path::new(&r.frame_ref);
        if p.is_absolute() {
            FrameStore::read(p)
        } else {
            FrameStore::read(self.base_dir.join(p))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub stage: Stage,
    pub records: Vec<VideoTextRecord>,
    pub rejections: Vec<Rejection>,
    pub input: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub input: usize,
    pub output: usize,
    pub dropped: usize,
    pub flagged: usize,
    /// Count per rejection reason, sorted by reason.
    pub reasons: Vec<(String, usize)>,
}

impl StageOutput {
    pub fn report(&self) -> StageReport {
        let flagged = self
            .rejections
            .iter()
            .filter(|r| r.disposition == Disposition::Flagged)
            .count();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &self.rejections {
            *counts.entry(r.reason.as_str()).or_default() += 1;
        }
        let mut reasons: Vec<(String, usize)> = counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        reasons.sort();
        StageReport {
            stage: self.stage,
            input: self.input,
            output: self.records.len(),
            dropped: self.rejections.len() - flagged,
            flagged,
            reasons,
        }
    }

    pub fn conserves(&self) -> bool {
        self.input == self.records.len() + self.rejections.len()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.input == 0 {
            0.0
        } else {
            self.report().flagged as f64 / self.input as f64
        }
    }
}

enum Outcome {
    Keep(VideoTextRecord),
    Reject(Rejection),
}

/// Applies `f` to every record concurrently, at most `cap` at a time, keeping
/// input order.
fn map_records<F>(stage: Stage, records: Vec<VideoTextRecord>, cap: usize, f: F) -> StageOutput
where
    F: Fn(VideoTextRecord) -> Outcome + Sync,
{
    let input = records.len();
    let mut kept = Vec::with_capacity(input);
    let mut rejections = Vec::new();
    let mut iter = records.into_iter().peekable();
    while iter.peek().is_some() {
        let chunk: Vec<VideoTextRecord> = iter.by_ref().take(cap).collect();
        let outcomes: Vec<Outcome> = chunk.into_par_iter().map(&f).collect();
        for o in outcomes {
            match o {
                Outcome::Keep(r) => kept.push(r),
                Outcome::Reject(r) => rejections.push(r),
            }
        }
    }
    StageOutput {
        stage,
        records: kept,
        rejections,
        input,
    }
}

fn flag(stage: Stage, reason: &str, detail: impl Into<String>, r: VideoTextRecord) -> Outcome {
    let detail = detail.into();
    log::warn!("{}: flagged {} ({reason}: {detail})", stage.name(), r.video_id);
    Outcome::Reject(Rejection::flagged(stage.name(), reason, detail, r))
}

pub fn run_stage(stage: Stage, records: Vec<VideoTextRecord>, ctx: &StageContext) -> Result<StageOutput> {
    ctx.config.validate()?;
    let out = match stage {
        Stage::Score => score_stage(records, ctx),
        Stage::Filter => filter_stage(records, ctx.config.top_fraction)?,
        Stage::Keyframes => keyframes_stage(records, ctx),
        Stage::Caption => caption_stage(records, ctx),
        Stage::Rewrite => rewrite_stage(records, ctx),
        Stage::Postprocess => postprocess_stage(records, ctx.config),
        Stage::Mix => mix_stage(records, ctx.config),
    };
    debug_assert!(out.conserves());
    Ok(out)
}

/// Runs `stages` in order, feeding each one's kept records to the next.
pub fn run_stages(stages: &[Stage], records: Vec<VideoTextRecord>, ctx: &StageContext) -> Result<Vec<StageOutput>> {
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(stages.len());
    let mut current = records;
    for &stage in stages {
        let out = run_stage(stage, current, ctx)?;
        current = out.records.clone();
        outputs.push(out);
    }
    Ok(outputs)
}

/// Mean of the per-frame scores of `frames` against `text`.
pub fn score_alignment(frames: &FrameStore, text: &str, clients: &ClientSuite) -> Result<f64> {
    let m = &frames.frames;
    if m.rows() == 0 {
        return Err(Error::domain("no frames to score"));
    }
    let mut sum = 0.0;
    for i in 0..m.rows() {
        sum += clients.scorer.score(m.row(i), text)?;
    }
    Ok(sum / m.rows() as f64)
}

fn score_stage(records: Vec<VideoTextRecord>, ctx: &StageContext) -> StageOutput {
    let st = Stage::Score;
    map_records(st, records, ctx.config.max_in_flight, |mut r| {
        if r.has_stage(st.name()) {
            return Outcome::Keep(r);
        }
        let frames = match ctx.frames(&r) {
            Ok(f) => f,
            Err(e) => return flag(st, reasons::UNREADABLE_FRAMES, e.to_string(), r),
        };
        if frames.frames.rows() == 0 {
            return flag(st, reasons::NO_FRAMES, "frame file holds zero frames", r);
        }
        match score_alignment(&frames, &r.raw_text, ctx.clients) {
            Ok(s) if s.is_finite() => {
                r.alignment_score = Some(s);
                r.stamp(st.name());
                Outcome::Keep(r)
            }
            Ok(s) => flag(st, reasons::SCORE_NOT_FINITE, format!("score {s}"), r),
            Err(e) => flag(st, reasons::CLIENT_FAILURE, e.to_string(), r),
        }
    })
}

/// `⌈fraction·n⌉`, treating products within rounding noise of an integer as
/// that integer.
pub fn keep_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

/// Keeps the `⌈fraction·N⌉` best-scored records, ordered by descending
/// score then ascending id.
pub fn filter_top_fraction(records: Vec<VideoTextRecord>, fraction: f64) -> Result<(Vec<VideoTextRecord>, Vec<VideoTextRecord>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!("top fraction {fraction} outside (0, 1]")));
    }
    if let Some(r) = records.iter().find(|r| r.alignment_score.is_none()) {
        return Err(Error::Pipeline(format!("record {} has no alignment score", r.video_id)));
    }
    let k = keep_count(fraction, records.len());
    let mut sorted = records;
    sorted.sort_by(|a, b| {
        let (sa, sb) = (a.alignment_score.unwrap(), b.alignment_score.unwrap());
        sb.total_cmp(&sa).then_with(|| a.video_id.cmp(&b.video_id))
    });
    let rest = sorted.split_off(k);
    Ok((sorted, rest))
}

fn filter_stage(records: Vec<VideoTextRecord>, fraction: f64) -> Result<StageOutput> {
    let st = Stage::Filter;
    let input = records.len();
    if records.iter().all(|r| r.has_stage(st.name())) {
        return Ok(StageOutput {
            stage: st,
            records,
            rejections: Vec::new(),
            input,
        });
    }
    let (mut kept, rest) = filter_top_fraction(records, fraction)?;
    for r in &mut kept {
        r.stamp(st.name());
    }
    let rejections = rest
        .into_iter()
        .map(|r| Rejection::dropped(st.name(), reasons::BELOW_TOP_FRACTION, r))
        .collect();
    Ok(StageOutput {
        stage: st,
        records: kept,
        rejections,
        input,
    })
}

fn keyframes_stage(records: Vec<VideoTextRecord>, ctx: &StageContext) -> StageOutput {
    let st = Stage::Keyframes;
    let (n_key, pct) = (ctx.config.n_key, ctx.config.cutoff_percentile);
    map_records(st, records, usize::MAX, |mut r| {
        if r.has_stage(st.name()) {
            return Outcome::Keep(r);
        }
        let frames = match ctx.frames(&r) {
            Ok(f) => f,
            Err(e) => return flag(st, reasons::UNREADABLE_FRAMES, e.to_string(), r),
        };
        match tsdpc_extract_with(&frames.frames, n_key, pct) {
            Ok(sel) => {
                r.keyframe_indices = Some(sel.indices);
                r.stamp(st.name());
                Outcome::Keep(r)
            }
            Err(e) => flag(st, reasons::KEYFRAME_FAILURE, e.to_string(), r),
        }
    })
}

/// Captions for each key-frame, in key-frame order.
pub fn caption_keyframes(frames: &FrameStore, indices: &[usize], clients: &ClientSuite) -> Result<Vec<String>> {
    indices
        .iter()
        .map(|&i| {
            if i >= frames.frames.rows() {
                return Err(Error::domain(format!(
                    "key-frame {i} beyond {} frames",
                    frames.frames.rows()
                )));
            }
            clients.captioner.caption(frames.frames.row(i))
        })
        .collect()
}

fn caption_stage(records: Vec<VideoTextRecord>, ctx: &StageContext) -> StageOutput {
    let st = Stage::Caption;
    map_records(st, records, ctx.config.max_in_flight, |mut r| {
        if r.has_stage(st.name()) {
            return Outcome::Keep(r);
        }
        let Some(indices) = r.keyframe_indices.clone() else {
            return flag(st, reasons::MISSING_KEYFRAMES, "keyframes stage has not run", r);
        };
        if indices.is_empty() {
            r.captions = Some(Vec::new());
            return flag(st, reasons::NO_KEYFRAMES, "empty key-frame list", r);
        }
        let frames = match ctx.frames(&r) {
            Ok(f) => f,
            Err(e) => return flag(st, reasons::UNREADABLE_FRAMES, e.to_string(), r),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= frames.frames.rows()) {
            let detail = format!("index {bad} with {} frames", frames.frames.rows());
            return flag(st, reasons::KEYFRAME_OUT_OF_RANGE, detail, r);
        }
        match caption_keyframes(&frames, &indices, ctx.clients) {
            Ok(c) => {
                r.captions = Some(c);
                r.stamp(st.name());
                Outcome::Keep(r)
            }
            Err(e) => flag(st, reasons::CLIENT_FAILURE, e.to_string(), r),
        }
    })
}

pub const LONG_TEMPLATE: &str = include_str!("../../assets/templates/long_v1.txt");
pub const SHORT_TEMPLATE: &str = include_str!("../../assets/templates/short_v1.txt");

pub fn template(variant: Variant) -> &'static str {
    match variant {
        Variant::Long => LONG_TEMPLATE,
        Variant::Short => SHORT_TEMPLATE,
    }
}

/// Fills `{raw_text}`, `{n_captions}` and `{captions}` in one left-to-right
/// pass, so slot-like text inside the values is never expanded. Lines
/// starting with `#` are template comments and are dropped.
pub fn render_prompt(template: &str, raw_text: &str, captions: &[String]) -> Result<String> {
    let body: String = template
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let listed: Vec<String> = captions.iter().enumerate().map(|(i, c)| format!("{}. {c}", i + 1)).collect();
    let mut out = String::with_capacity(body.len() + raw_text.len() + 64 * captions.len());
    let mut rest = body.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config("unterminated template slot".into()))?;
        match &rest[open + 1..open + close] {
            "raw_text" => out.push_str(raw_text),
            "n_captions" => out.push_str(&captions.len().to_string()),
            "captions" => out.push_str(&listed.join("\n")),
            other => return Err(Error::Config(format!("unknown template slot {{{other}}}"))),
        }
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn rewrite(raw_text: &str, captions: &[String], variant: Variant, clients: &ClientSuite) -> Result<String> {
    let req = RewriteRequest {
        variant,
        prompt: render_prompt(template(variant), raw_text, captions)?,
        raw_text: raw_text.to_string(),
        captions: captions.to_vec(),
    };
    clients.rewriter.rewrite(&req)
}

fn rewrite_stage(records: Vec<VideoTextRecord>, ctx: &StageContext) -> StageOutput {
    let st = Stage::Rewrite;
    map_records(st, records, ctx.config.max_in_flight, |mut r| {
        if r.has_stage(st.name()) {
            return Outcome::Keep(r);
        }
        let captions = match &r.captions {
            Some(c) if !c.is_empty() => c.clone(),
            _ => return flag(st, reasons::MISSING_CAPTIONS, "no captions to rewrite from", r),
        };
        let both = rewrite(&r.raw_text, &captions, Variant::Long, ctx.clients)
            .and_then(|l| rewrite(&r.raw_text, &captions, Variant::Short, ctx.clients).map(|s| (l, s)));
        match both {
            Ok((long, short)) => {
                r.rewritten_long = Some(long);
                r.rewritten_short = Some(short);
                r.stamp(st.name());
                Outcome::Keep(r)
            }
            Err(e) => flag(st, reasons::CLIENT_FAILURE, e.to_string(), r),
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextReject {
    Empty,
    TooShort { words: usize },
    TooLong { words: usize },
    Degenerate { ratio: f64 },
}

impl TextReject {
    pub fn reason(&self) -> &'static str {
        match self {
            TextReject::Empty => "empty",
            TextReject::TooShort { .. } => "too_short",
            TextReject::TooLong { .. } => "too_long",
            TextReject::Degenerate { .. } => "degenerate",
        }
    }
}

/// Largest share of a single token among the words of `text`; 0 for texts
/// with fewer than two words, where nothing can repeat.
pub fn repetition_ratio(text: &str) -> f64 {
    let words = tokenize(text);
    if words.len() < 2 {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &words {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    *counts.values().max().unwrap() as f64 / words.len() as f64
}

/// Accepts `text` when it has words, its word count sits in the variant's
/// band and no single token dominates it.
pub fn post_process(text: &str, variant: Variant, config: &PipelineConfig) -> std::result::Result<(), TextReject> {
    let n = text.split_whitespace().count();
    if n == 0 || tokenize(text).is_empty() {
        return Err(TextReject::Empty);
    }
    let (lo, hi) = match variant {
        Variant::Long => (config.long_word_band[0], config.long_word_band[1]),
        Variant::Short => (1, config.short_word_max),
    };
    if n < lo {
        return Err(TextReject::TooShort { words: n });
    }
    if n > hi {
        return Err(TextReject::TooLong { words: n });
    }
    let ratio = repetition_ratio(text);
    if ratio > config.degenerate_threshold {
        return Err(TextReject::Degenerate { ratio });
    }
    Ok(())
}

fn postprocess_stage(records: Vec<VideoTextRecord>, config: &PipelineConfig) -> StageOutput {
    let st = Stage::Postprocess;
    map_records(st, records, usize::MAX, |mut r| {
        if r.has_stage(st.name()) {
            return Outcome::Keep(r);
        }
        if r.rewritten_long.is_none() && r.rewritten_short.is_none() {
            return flag(st, reasons::MISSING_REWRITES, "rewrite stage has not run", r);
        }
        let mut verdicts = Vec::new();
        for (variant, slot) in [(Variant::Long, &mut r.rewritten_long), (Variant::Short, &mut r.rewritten_short)] {
            let verdict = match slot.as_deref() {
                None => Some("missing".to_string()),
                Some(t) => post_process(t, variant, config).err().map(|e| e.reason().to_string()),
            };
            if let Some(why) = &verdict {
                if slot.take().is_some() {
                    r.notes.push(format!("{}: {} rewrite rejected ({why})", st.name(), variant.as_str()));
                }
            }
            verdicts.push((variant, verdict));
        }
        if verdicts.iter().all(|(_, v)| v.is_some()) {
            let detail = verdicts
                .iter()
                .map(|(v, why)| format!("{}: {}", v.as_str(), why.as_deref().unwrap_or("ok")))
                .collect::<Vec<_>>()
                .join("; ");
            let mut rej = Rejection::dropped(st.name(), reasons::NO_VALID_REWRITE, r);
            rej.detail = Some(detail);
            return Outcome::Reject(rej);
        }
        r.stamp(st.name());
        Outcome::Keep(r)
    })
}

/// The variant slot `index` (in sorted-id order) asks for under `ratio`.
pub fn mix_slot(index: usize, ratio: [usize; 2]) -> Variant {
    if index % (ratio[0] + ratio[1]) < ratio[0] {
        Variant::Long
    } else {
        Variant::Short
    }
}

fn mix_stage(records: Vec<VideoTextRecord>, config: &PipelineConfig) -> StageOutput {
    let st = Stage::Mix;
    let input = records.len();
    let mut records = records;
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if records.iter().all(|r| r.has_stage(st.name())) {
        return StageOutput {
            stage: st,
            records,
            rejections: Vec::new(),
            input,
        };
    }
    let mut kept = Vec::with_capacity(input);
    let mut rejections = Vec::new();
    for (i, mut r) in records.into_iter().enumerate() {
        let want = mix_slot(i, config.mix_ratio);
        let pick = |v: Variant, r: &VideoTextRecord| match v {
            Variant::Long => r.rewritten_long.clone(),
            Variant::Short => r.rewritten_short.clone(),
        };
        let other = match want {
            Variant::Long => Variant::Short,
            Variant::Short => Variant::Long,
        };
        let chosen = match pick(want, &r) {
            Some(t) => Some((want, t)),
            None => pick(other, &r).map(|t| {
                log::info!("mix: {} has no {} rewrite, using {}", r.video_id, want.as_str(), other.as_str());
                r.notes.push(format!("mix: {} unavailable, used {}", want.as_str(), other.as_str()));
                (other, t)
            }),
        };
        match chosen {
            Some((v, t)) => {
                r.training_text = Some(t);
                r.text_variant = Some(v.as_str().to_string());
                r.stamp(st.name());
                kept.push(r);
            }
            None => {
                log::warn!("mix: flagged {} (no accepted rewrite)", r.video_id);
                rejections.push(Rejection::flagged(st.name(), reasons::MISSING_REWRITES, "no accepted rewrite", r));
            }
        }
    }
    StageOutput {
        stage: st,
        records: kept,
        rejections,
        input,
    }
}

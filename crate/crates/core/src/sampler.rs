//! Autoregressive decoding: greedy-EOS/top-k sampling under guidance,
//! segment infilling, score-based candidate selection and story mode.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::lm::ops::log_softmax;
use crate::lm::{lyric_tokens, Conditioning, DecoderState, Model, Real, SourceCondition};
use crate::lyricproc::{encode_lyrics, Section, StructureTag};
use crate::par::{map_indexed, Exec};
use crate::seqcodec::{context_layout, delay_invert, extract_context, rearrange_for_edit, EditSpec, Vocab};
use crate::synthcorpus::derive_seed;
use crate::tokenizer::SemanticTokens;
use crate::trainer::teacher_inputs;

const TOKENS_MAGIC: &[u8; 8] = b"EDLMTOKS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub top_k: usize,
    pub cfg_gamma: f64,
    pub temperature: f64,
    pub max_new_frames: usize,
    /// EOS is not accepted before this many frames.
    pub min_new_frames: usize,
    pub candidate_count: usize,
    pub rescore_lambda: usize,
    pub resynthesis_seconds: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            top_k: 32,
            cfg_gamma: 1.5,
            temperature: 1.0,
            max_new_frames: 500,
            min_new_frames: 1,
            candidate_count: 5,
            rescore_lambda: 25,
            resynthesis_seconds: 3.0,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| {
            Err(Error::Config {
                field: format!("sample.{field}"),
                detail: detail.into(),
            })
        };
        if self.top_k == 0 {
            return bad("top_k", "must be at least 1");
        }
        if self.candidate_count == 0 {
            return bad("candidate_count", "must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        if !self.cfg_gamma.is_finite() {
            return bad("cfg_gamma", "must be finite");
        }
        if self.max_new_frames == 0 {
            return bad("max_new_frames", "must be positive");
        }
        if !(self.resynthesis_seconds >= 0.0) {
            return bad("resynthesis_seconds", "must be non-negative");
        }
        Ok(())
    }
}

/// One stream's draw. EOS wins outright when it holds the strict maximum;
/// otherwise EOS is removed and one of the `top_k` highest code ids is
/// sampled. SEP and PAD are never produced.
pub fn sample_stream<R: Rng>(
    logits: ArrayView1<f64>,
    vocab: &Vocab,
    top_k: usize,
    temperature: f64,
    allow_eos: bool,
    rng: &mut R,
) -> u32 {
    let eos = vocab.eos() as usize;
    if allow_eos {
        let e = logits[eos];
        if logits.iter().enumerate().all(|(i, &v)| i == eos || v < e) {
            return eos as u32;
        }
    }
    let c = vocab.codebook_size;
    let mut ids: Vec<usize> = (0..c).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    ids.truncate(top_k.clamp(1, c));
    let top = logits[ids[0]];
    let weights: Vec<f64> = ids.iter().map(|&i| ((logits[i] - top) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&id, &w) in ids.iter().zip(&weights) {
        if u < w {
            return id as u32;
        }
        u -= w;
    }
    *ids.last().unwrap() as u32
}

/// Samples every stream of a K×V logit row independently.
pub fn sample_step<R: Rng>(logits: &Array2<f64>, vocab: &Vocab, cfg: &SampleConfig, rng: &mut R) -> Vec<u32> {
    logits
        .rows()
        .into_iter()
        .map(|row| sample_stream(row, vocab, cfg.top_k, cfg.temperature, true, rng))
        .collect()
}

/// Conditional and (optionally) unconditional decoder states advanced in
/// lockstep.
#[derive(Debug, Clone)]
pub struct Decoder<'m, T: Real> {
    model: &'m Model<T>,
    cond: DecoderState<T>,
    uncond: Option<DecoderState<T>>,
    gamma: T,
}

impl<'m, T: Real> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>, cond: &Conditioning, gamma: f64) -> Result<Self> {
        let uncond = if gamma == 1.0 {
            None
        } else {
            Some(model.start(&cond.unconditional())?)
        };
        Ok(Decoder {
            model,
            cond: model.start(cond)?,
            uncond,
            gamma: T::from_f64(gamma).unwrap(),
        })
    }

    /// Decoder positioned after `delayed(pre) SEP delayed(post) SEP`.
    pub fn with_context(
        model: &'m Model<T>,
        cond: &Conditioning,
        gamma: f64,
        pre: &SemanticTokens,
        post: &SemanticTokens,
        spec: &EditSpec,
        total_frames: usize,
    ) -> Result<Self> {
        let mut dec = Decoder::new(model, cond, gamma)?;
        let ctx = context_layout(pre, post, spec, total_frames, &model.config.vocab())?;
        for r in 0..ctx.context_rows() {
            dec.feed(ctx.row(r), ctx.frame_index[r])?;
        }
        Ok(dec)
    }

    pub fn feed(&mut self, row: &[u32], frame: usize) -> Result<()> {
        self.model.feed(&mut self.cond, row, frame)?;
        if let Some(u) = self.uncond.as_mut() {
            self.model.feed(u, row, frame)?;
        }
        Ok(())
    }

    /// Guided prediction for the next row.
    pub fn logits(&self) -> Array2<f64> {
        let mut out = self.cond.logits.clone();
        if let Some(u) = &self.uncond {
            let g = self.gamma;
            let rest = T::one() - g;
            Zip::from(&mut out).and(&u.logits).for_each(|c, &u| *c = rest * u + g * *c);
        }
        out.mapv(|v| v.to_f64().unwrap())
    }

    pub fn rows_consumed(&self) -> usize {
        self.cond.pos
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditResult {
    pub tokens: SemanticTokens,
    /// Hit `max_new_frames` without an EOS.
    pub truncated: bool,
}

/// Fills the edit block from a decoder positioned after the context. The
/// first `forced.len()` frames are copied instead of sampled.
///
/// Termination: EOS is only accepted on stream 0. Once it appears at row n
/// (so the block holds n frames), the remaining delayed cells of frames
/// below n are still sampled, cells beyond the block are PAD, and decoding
/// stops after row n + K − 2.
pub fn decode_edit<T: Real>(
    mut dec: Decoder<'_, T>,
    first_frame: usize,
    forced: &SemanticTokens,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EditResult> {
    let vocab = dec.model.config.vocab();
    let k = dec.model.config.streams;
    let pad = vocab.pad();
    let limit = cfg.max_new_frames.max(forced.len());
    let min_frames = cfg.min_new_frames.max(1).max(forced.len());
    let mut grid = SemanticTokens::new(k, forced.frame_rate);
    let mut end: Option<usize> = None;
    let mut truncated = false;
    let mut r = 0usize;
    loop {
        let logits = dec.logits();
        let mut row = vec![pad; k];
        if end.is_none() {
            if r < forced.len() {
                row[0] = forced.get(r, 0);
            } else if r >= limit {
                end = Some(r);
                truncated = true;
            } else {
                let id = sample_stream(logits.row(0), &vocab, cfg.top_k, cfg.temperature, r >= min_frames, rng);
                if id == vocab.eos() {
                    end = Some(r);
                } else {
                    row[0] = id;
                }
            }
        }
        if let Some(n) = end {
            if r + 1 >= n + k {
                break;
            }
        }
        for (s, cell) in row.iter_mut().enumerate().skip(1) {
            if r < s {
                continue;
            }
            let f = r - s;
            if end.is_some_and(|n| f >= n) {
                continue;
            }
            *cell = if f < forced.len() {
                forced.get(f, s)
            } else {
                sample_stream(logits.row(s), &vocab, cfg.top_k, cfg.temperature, false, rng)
            };
        }
        dec.feed(&row, first_frame + r)?;
        grid.push_row(&row);
        r += 1;
    }
    Ok(EditResult {
        tokens: delay_invert(&grid, pad)?,
        truncated,
    })
}

/// Generates the edit segment between `pre` and `post`. With both contexts
/// empty this is generation from scratch; with `post` empty, continuation.
#[allow(clippy::too_many_arguments)]
pub fn generate_edit<T: Real>(
    model: &Model<T>,
    cond: &Conditioning,
    pre: &SemanticTokens,
    post: &SemanticTokens,
    spec: &EditSpec,
    total_frames: usize,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EditResult> {
    cfg.validate()?;
    let dec = Decoder::with_context(model, cond, cfg.cfg_gamma, pre, post, spec, total_frames)?;
    let empty = SemanticTokens::new(pre.streams, pre.frame_rate);
    decode_edit(dec, spec.pre_len(), &empty, cfg, rng)
}

/// Log-likelihood of the first `lambda` frames of `post` given
/// `pre ⧺ edit`, teacher-forced through the conditional branch only.
/// `None` when there is no following context.
pub fn continuation_score<T: Real>(
    model: &Model<T>,
    cond: &Conditioning,
    pre: &SemanticTokens,
    edit: &SemanticTokens,
    post: &SemanticTokens,
    lambda: usize,
) -> Result<Option<f64>> {
    let lam = lambda.min(post.len());
    if lam == 0 {
        return Ok(None);
    }
    let n = edit.len();
    let full = SemanticTokens::concat(&[pre, edit, post]);
    let spec = EditSpec::frames(pre.len() + 1, pre.len() + n);
    let seq = rearrange_for_edit(&full, &spec, lam, &model.config.vocab())?;
    let (rows, frames) = teacher_inputs(&seq);
    let logits = model.forward(cond, rows, frames)?;
    let k = seq.streams;
    let mut total = 0.0;
    for rel in 0..n + lam + k - 1 {
        let r = seq.edit.start + rel;
        for s in 0..k.min(rel + 1) {
            let f = rel - s;
            if f < n || f >= n + lam {
                continue;
            }
            let row: Vec<f64> = logits
                .slice(ndarray::s![r, s, ..])
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect();
            total += log_softmax(&row)[seq.target(r, s) as usize];
        }
    }
    Ok(Some(total))
}

/// Index of the largest score; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<SemanticTokens>,
    /// Continuation log-likelihoods; empty when selection was skipped.
    pub scores: Vec<f64>,
    pub chosen: usize,
    /// Set when there was no following context to score against.
    pub skipped: bool,
}

impl CandidateSet {
    pub fn best(&self) -> &SemanticTokens {
        &self.candidates[self.chosen]
    }
}

pub fn score_candidates<T: Real>(
    model: &Model<T>,
    cond: &Conditioning,
    pre: &SemanticTokens,
    post: &SemanticTokens,
    candidates: &[SemanticTokens],
    lambda: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    map_indexed(candidates.len(), exec, |c| {
        continuation_score(model, cond, pre, &candidates[c], post, lambda)?
            .ok_or_else(|| Error::InvalidArgument("no following context to score".into()))
    })
    .into_iter()
    .collect()
}

/// Builds N candidates (the first pass plus N − 1 that resample its final
/// `resynthesis_seconds`) and keeps the one under which the true following
/// context is most likely.
#[allow(clippy::too_many_arguments)]
pub fn candidate_select<T: Real>(
    model: &Model<T>,
    cond: &Conditioning,
    pre: &SemanticTokens,
    post: &SemanticTokens,
    spec: &EditSpec,
    total_frames: usize,
    first_pass: &SemanticTokens,
    cfg: &SampleConfig,
) -> Result<CandidateSet> {
    cfg.validate()?;
    if first_pass.is_empty() {
        return Err(Error::InvalidArgument("empty first-pass edit".into()));
    }
    if post.is_empty() {
        return Ok(CandidateSet {
            candidates: vec![first_pass.clone()],
            scores: Vec::new(),
            chosen: 0,
            skipped: true,
        });
    }
    let mut candidates = vec![first_pass.clone()];
    if cfg.candidate_count > 1 {
        let tail = (cfg.resynthesis_seconds * first_pass.frame_rate as f64).round() as usize;
        let keep = first_pass.len().saturating_sub(tail);
        let forced = first_pass.slice(0, keep);
        let base = Decoder::with_context(model, cond, cfg.cfg_gamma, pre, post, spec, total_frames)?;
        let extra: Vec<Result<EditResult>> = map_indexed(cfg.candidate_count - 1, cfg.exec, |c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + c as u64));
            decode_edit(base.clone(), spec.pre_len(), &forced, cfg, &mut rng)
        });
        for e in extra {
            candidates.push(e?.tokens);
        }
    }
    let scores = score_candidates(model, cond, pre, post, &candidates, cfg.rescore_lambda, cfg.exec)?;
    Ok(CandidateSet {
        chosen: select_best(&scores),
        candidates,
        scores,
        skipped: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub first_pass: EditResult,
    pub selection: CandidateSet,
    /// `pre ⧺ chosen ⧺ post`.
    pub song: SemanticTokens,
}

/// Segment-wise edit of a full token grid: contexts are cut around `spec`,
/// the span is regenerated and the best candidate spliced back in.
pub fn edit_tokens<T: Real>(
    model: &Model<T>,
    cond: &Conditioning,
    tokens: &SemanticTokens,
    spec: &EditSpec,
    cfg: &SampleConfig,
) -> Result<EditOutcome> {
    let ctx = extract_context(tokens, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first_pass = generate_edit(model, cond, &ctx.pre, &ctx.post, spec, tokens.len(), cfg, &mut rng)?;
    let selection = candidate_select(model, cond, &ctx.pre, &ctx.post, spec, tokens.len(), &first_pass.tokens, cfg)?;
    let song = SemanticTokens::concat(&[&ctx.pre, selection.best(), &ctx.post]);
    Ok(EditOutcome {
        first_pass,
        selection,
        song,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoryMode {
    /// One prompt throughout, long stride.
    Single,
    /// Prompts alternate over verse/chorus rounds; each round ends with a
    /// short instrumental section and the stride is short.
    MultiSinger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoryConfig {
    pub mode: StoryMode,
    /// Defaults to 60 s (single) or 5 s (multi-singer) when unset.
    pub stride_seconds: Option<f64>,
    pub inst_seconds: f64,
    pub frames_per_duration_token: usize,
}

impl Default for StoryConfig {
    fn default() -> Self {
        StoryConfig {
            mode: StoryMode::Single,
            stride_seconds: None,
            inst_seconds: 1.0,
            frames_per_duration_token: crate::lyricproc::DEFAULT_FRAMES_PER_DURATION_TOKEN,
        }
    }
}

impl StoryConfig {
    pub fn stride_frames(&self, frame_rate: usize) -> usize {
        let secs = self.stride_seconds.unwrap_or(match self.mode {
            StoryMode::Single => 60.0,
            StoryMode::MultiSinger => 5.0,
        });
        (secs * frame_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryRound {
    pub section: usize,
    /// Index into the prompt list.
    pub prompt: usize,
    pub prefix_frames: usize,
    pub new_frames: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoryOutput {
    pub tokens: SemanticTokens,
    pub rounds: Vec<StoryRound>,
}

/// Prompt index for each round. Single mode keeps prompt 0. Multi-singer
/// mode advances to the next prompt on every verse or chorus round; other
/// rounds reuse the prompt of the latest verse/chorus round.
pub fn story_prompt_schedule(sections: &[Section], prompts: usize, mode: StoryMode) -> Vec<usize> {
    let mut sung = 0usize;
    let mut current = 0usize;
    sections
        .iter()
        .map(|s| {
            if mode == StoryMode::MultiSinger && matches!(s.tag, StructureTag::Verse | StructureTag::Chorus) {
                current = sung % prompts.max(1);
                sung += 1;
            }
            current
        })
        .collect()
}

/// Round-by-round generation of a long song. Round r sees only section r's
/// lyrics and, as preceding context, the last stride of everything
/// generated so far. The result is the concatenation of each round's new
/// frames.
pub fn story_mode<T: Real>(
    model: &Model<T>,
    sections: &[Section],
    prompts: &[SemanticTokens],
    story: &StoryConfig,
    cfg: &SampleConfig,
    frame_rate: usize,
) -> Result<StoryOutput> {
    if sections.is_empty() {
        return Err(Error::InvalidArgument("story mode needs at least one section".into()));
    }
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("story mode needs at least one style prompt".into()));
    }
    let k = model.config.streams;
    let stride = story.stride_frames(frame_rate);
    let inst = Section {
        tag: StructureTag::Inst,
        duration_frames: ((story.inst_seconds * frame_rate as f64).round() as usize).max(1),
        sentences: Vec::new(),
    };
    let schedule = story_prompt_schedule(sections, prompts.len(), story.mode);
    let mut out = SemanticTokens::new(k, frame_rate);
    let mut rounds = Vec::with_capacity(sections.len());
    for (r, section) in sections.iter().enumerate() {
        let mut round_sections = vec![section.clone()];
        if story.mode == StoryMode::MultiSinger {
            round_sections.push(inst.clone());
        }
        let text = encode_lyrics(&round_sections, story.frames_per_duration_token)?;
        let cond = Conditioning::new(Some(prompts[schedule[r]].clone()), lyric_tokens(&text), SourceCondition::none());
        let prefix_len = stride.min(out.len());
        let pre = out.slice(out.len() - prefix_len, out.len());
        let post = SemanticTokens::new(k, frame_rate);
        let expected: usize = round_sections.iter().map(|s| s.duration_frames).sum();
        let spec = EditSpec::frames(prefix_len + 1, prefix_len + expected.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, r as u64));
        let res = generate_edit(model, &cond, &pre, &post, &spec, spec.frame_end, cfg, &mut rng)?;
        rounds.push(StoryRound {
            section: r,
            prompt: schedule[r],
            prefix_frames: prefix_len,
            new_frames: res.tokens.len(),
            truncated: res.truncated,
        });
        out = SemanticTokens::concat(&[&out, &res.tokens]);
    }
    Ok(StoryOutput { tokens: out, rounds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFileHeader {
    pub streams: usize,
    pub frames: usize,
    pub frame_rate: usize,
    pub codebook_size: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_tokens(tokens: &SemanticTokens, codebook_size: usize, meta: serde_json::Value) -> Result<Vec<u8>> {
    let vocab = Vocab::new(codebook_size);
    if let Some(&bad) = tokens.data.iter().find(|&&id| !vocab.is_code(id)) {
        return Err(Error::IdOutOfRange { id: bad, vocab: codebook_size });
    }
    let mut w = Writer::new(TOKENS_MAGIC);
    w.json(&TokenFileHeader {
        streams: tokens.streams,
        frames: tokens.len(),
        frame_rate: tokens.frame_rate,
        codebook_size,
        meta,
    })?;
    w.u32_blob(&[tokens.len(), tokens.streams], &tokens.data);
    Ok(w.buf)
}

pub fn decode_tokens(bytes: &[u8]) -> Result<(TokenFileHeader, SemanticTokens)> {
    let mut r = Reader::new(bytes, TOKENS_MAGIC)?;
    let header: TokenFileHeader = r.json()?;
    let (shape, data) = r.u32_blob()?;
    if shape != [header.frames, header.streams] {
        return Err(r.err(&format!("grid shape {shape:?} disagrees with manifest")));
    }
    if !r.at_end() {
        return Err(r.err("trailing bytes after grid"));
    }
    let vocab = Vocab::new(header.codebook_size);
    if let Some(&bad) = data.iter().find(|&&id| !vocab.is_code(id)) {
        return Err(Error::IdOutOfRange { id: bad, vocab: header.codebook_size });
    }
    let tokens = SemanticTokens {
        streams: header.streams,
        data,
        frame_rate: header.frame_rate,
    };
    Ok((header, tokens))
}

pub fn write_tokens(path: &Path, tokens: &SemanticTokens, codebook_size: usize, meta: serde_json::Value) -> Result<()> {
    crate::io::atomic_write(path, &encode_tokens(tokens, codebook_size, meta)?)
}

pub fn read_tokens(path: &Path) -> Result<(TokenFileHeader, SemanticTokens)> {
    decode_tokens(&crate::io::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model_tests::{rand_grid, toy_cond, toy_config};
    use crate::lm::SourceKind;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(8)
    }

    #[test]
    fn strict_eos_maximum_is_greedy() {
        let v = vocab();
        let mut l = Array1::<f64>::zeros(v.size());
        l[v.eos() as usize] = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_stream(l.view(), &v, 3, 1.0, true, &mut rng), v.eos());
        }
        // A tie is not a strict maximum.
        l[2] = 10.0;
        for _ in 0..100 {
            assert_ne!(sample_stream(l.view(), &v, 3, 1.0, true, &mut rng), v.eos());
        }
    }

    #[test]
    fn top_one_is_argmax_over_codes() {
        let v = vocab();
        let mut l = Array1::from_vec(vec![0.1, 0.5, 2.0, -1.0, 0.3, 1.9, 0.0, 0.0, 9.0, 9.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert_eq!(sample_stream(l.view(), &v, 1, 1.0, true, &mut rng), 2);
        }
        l[v.eos() as usize] = 1.95;
        assert_eq!(sample_stream(l.view(), &v, 1, 1.0, true, &mut rng), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn samples_lie_in_top_k(logits in prop::collection::vec(-5.0f64..5.0, 11), k in 1usize..8, seed in any::<u64>()) {
            let v = vocab();
            let l = Array1::from_vec(logits.clone());
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
            let support = &order[..k];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let id = sample_stream(l.view(), &v, k, 1.0, false, &mut rng) as usize;
                prop_assert!(support.contains(&id));
            }
        }
    }

    fn toy_model() -> Model<f64> {
        Model::<f64>::new(toy_config(true)).unwrap()
    }

    fn cfg(seed: u64) -> SampleConfig {
        SampleConfig {
            top_k: 4,
            max_new_frames: 12,
            candidate_count: 3,
            rescore_lambda: 3,
            resynthesis_seconds: 0.16,
            seed,
            exec: Exec::Sequential,
            ..Default::default()
        }
    }

    #[test]
    fn edit_output_is_clean_and_deterministic() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cond = toy_cond(&mut rng, SourceKind::Vocal);
        let song = rand_grid(&mut rng, 20, 8);
        let spec = EditSpec::frames(6, 12);
        let a = edit_tokens(&m, &cond, &song, &spec, &cfg(7)).unwrap();
        let b = edit_tokens(&m, &cond, &song, &spec, &cfg(7)).unwrap();
        assert_eq!(a, b);
        let v = m.config.vocab();
        for c in &a.selection.candidates {
            assert!(!c.is_empty() && c.len() <= 12);
            assert!(c.data.iter().all(|&id| v.is_code(id)));
        }
        assert_eq!(a.selection.candidates.len(), 3);
        assert_eq!(a.song.slice(0, 5), song.slice(0, 5));
        assert_eq!(a.song.slice(a.song.len() - 8, a.song.len()), song.slice(12, 20));
    }

    #[test]
    fn single_candidate_still_scored_and_empty_post_skips() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cond = toy_cond(&mut rng, SourceKind::None);
        let song = rand_grid(&mut rng, 14, 8);
        let c = SampleConfig { candidate_count: 1, ..cfg(1) };
        let out = edit_tokens(&m, &cond, &song, &EditSpec::frames(4, 9), &c).unwrap();
        assert_eq!(out.selection.scores.len(), 1);
        assert!(out.selection.scores[0].is_finite() && out.selection.scores[0] < 0.0);
        assert_eq!(out.selection.best(), &out.first_pass.tokens);
        let tail = edit_tokens(&m, &cond, &song, &EditSpec::frames(4, 14), &cfg(1)).unwrap();
        assert!(tail.selection.skipped);
        assert_eq!(tail.selection.candidates.len(), 1);
    }

    #[test]
    fn duplicate_candidates_tie_to_lowest_index() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cond = toy_cond(&mut rng, SourceKind::None);
        let pre = rand_grid(&mut rng, 3, 8);
        let post = rand_grid(&mut rng, 5, 8);
        let x = rand_grid(&mut rng, 4, 8);
        let y = rand_grid(&mut rng, 4, 8);
        let cands = vec![x.clone(), y.clone(), y.clone(), x];
        let s = score_candidates(&m, &cond, &pre, &post, &cands, 3, Exec::Sequential).unwrap();
        assert_eq!(s[0], s[3]);
        assert_eq!(s[1], s[2]);
        let best = select_best(&s);
        assert!(best == 0 || best == 1);
        assert_eq!(select_best(&[1.0, 2.0, 2.0, 0.5]), 1);
    }

    #[test]
    fn score_matches_incremental_oracle() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cond = toy_cond(&mut rng, SourceKind::Vocal);
        let pre = rand_grid(&mut rng, 3, 8);
        let edit = rand_grid(&mut rng, 4, 8);
        let post = rand_grid(&mut rng, 6, 8);
        let lam = 4;
        let got = continuation_score(&m, &cond, &pre, &edit, &post, lam).unwrap().unwrap();
        // Step the cache through the context and edit rows, reading off
        // the post cells as they become predictable.
        let v = m.config.vocab();
        let k = 4;
        let spec = EditSpec::frames(4, 7);
        let mut dec = Decoder::with_context(&m, &cond, 1.0, &pre, &post, &spec, 13).unwrap();
        let ext = SemanticTokens::concat(&[&edit, &post.slice(0, lam)]);
        let n = ext.len();
        let mut want = 0.0;
        for r in 0..n + k - 1 {
            let l = dec.logits();
            let mut row = vec![v.pad(); k];
            for s in 0..k {
                if r >= s && r - s < n {
                    row[s] = ext.get(r - s, s);
                    if r - s >= 4 {
                        let lr: Vec<f64> = l.row(s).to_vec();
                        want += log_softmax(&lr)[row[s] as usize];
                    }
                }
            }
            dec.feed(&row, 3 + r).unwrap();
        }
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn truncation_is_flagged() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cond = toy_cond(&mut rng, SourceKind::None);
        let e = SemanticTokens::new(4, 25);
        let c = SampleConfig { max_new_frames: 3, min_new_frames: 3, ..cfg(2) };
        let res = generate_edit(&m, &cond, &e, &e, &EditSpec::frames(1, 3), 3, &c, &mut rng).unwrap();
        assert_eq!(res.tokens.len(), 3);
        assert!(res.truncated);
    }

    fn sections() -> Vec<Section> {
        vec![
            Section { tag: StructureTag::Verse, duration_frames: 10, sentences: vec![vec![1, 2]] },
            Section { tag: StructureTag::Chorus, duration_frames: 10, sentences: vec![vec![3]] },
            Section { tag: StructureTag::Verse, duration_frames: 10, sentences: vec![vec![4, 5]] },
        ]
    }

    #[test]
    fn alternating_prompts_over_verse_chorus_verse() {
        let s = sections();
        assert_eq!(story_prompt_schedule(&s, 2, StoryMode::MultiSinger), vec![0, 1, 0]);
        assert_eq!(story_prompt_schedule(&s, 2, StoryMode::Single), vec![0, 0, 0]);
    }

    #[test]
    fn story_rounds_and_length_identity() {
        let m = Model::<f64>::new(toy_config(false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prompts = vec![rand_grid(&mut rng, 2, 8), rand_grid(&mut rng, 2, 8)];
        let story = StoryConfig { mode: StoryMode::MultiSinger, stride_seconds: Some(0.4), ..Default::default() };
        let c = SampleConfig { min_new_frames: 12, max_new_frames: 14, ..cfg(3) };
        let out = story_mode(&m, &sections(), &prompts, &story, &c, 25).unwrap();
        let prefixes: Vec<usize> = out.rounds.iter().map(|r| r.prefix_frames).collect();
        assert_eq!(prefixes, vec![0, 10, 10]);
        assert_eq!(out.rounds.iter().map(|r| r.prompt).collect::<Vec<_>>(), vec![0, 1, 0]);
        let round_lengths: usize = out.rounds.iter().map(|r| r.prefix_frames + r.new_frames).sum();
        assert_eq!(out.tokens.len(), round_lengths - prefixes.iter().sum::<usize>());
    }

    #[test]
    fn single_section_story_is_from_scratch_generation() {
        let m = Model::<f64>::new(toy_config(false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prompt = rand_grid(&mut rng, 2, 8);
        let sec = sections()[..1].to_vec();
        let c = cfg(5);
        let out = story_mode(&m, &sec, std::slice::from_ref(&prompt), &StoryConfig::default(), &c, 25).unwrap();
        let text = encode_lyrics(&sec, 25).unwrap();
        let cond = Conditioning::new(Some(prompt), lyric_tokens(&text), SourceCondition::none());
        let e = SemanticTokens::new(4, 25);
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(5, 0));
        let direct = generate_edit(&m, &cond, &e, &e, &EditSpec::frames(1, 10), 10, &c, &mut r).unwrap();
        assert_eq!(out.tokens, direct.tokens);
        assert!(story_mode(&m, &[], &[e], &StoryConfig::default(), &c, 25).is_err());
    }

    #[test]
    fn token_file_roundtrip_and_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = rand_grid(&mut rng, 9, 8);
        let bytes = encode_tokens(&g, 8, serde_json::json!({"kind": "edit"})).unwrap();
        let (h, back) = decode_tokens(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(h.meta["kind"], "edit");
        assert!(decode_tokens(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = g.clone();
        bad.data[0] = 8;
        assert!(matches!(encode_tokens(&bad, 8, serde_json::Value::Null), Err(Error::IdOutOfRange { .. })));
    }
}

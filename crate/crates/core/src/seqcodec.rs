//! Token sequence shaping: delayed interleaving, edit rearrangement with
//! separator rows, loss masks, and context extraction with overlap.
//!
//! A rearranged sequence is laid out as
//! `delayed(pre) SEP delayed(post) SEP delayed(edit) SEP`. Each non-empty
//! block of n frames occupies n + K − 1 rows (stream k shifted down by k);
//! an empty block contributes only its SEP row. With all three blocks
//! non-empty the sequence has exactly T + 3K rows.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthcorpus::SynthSong;
use crate::tokenizer::{SemanticTokens, Tokenizer};

/// Per-stream vocabulary: codebook ids `0..C`, then SEP, PAD and EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub codebook_size: usize,
}

impl Vocab {
    pub fn new(codebook_size: usize) -> Self {
        Vocab { codebook_size }
    }

    pub fn sep(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn pad(&self) -> u32 {
        self.codebook_size as u32 + 1
    }

    pub fn eos(&self) -> u32 {
        self.codebook_size as u32 + 2
    }

    pub fn size(&self) -> usize {
        self.codebook_size + 3
    }

    pub fn is_code(&self, id: u32) -> bool {
        (id as usize) < self.codebook_size
    }
}

/// Shifts stream k down by k rows; T frames become T + K − 1 rows with PAD
/// in the two triangular corners. An empty grid stays empty.
pub fn delay_apply(grid: &SemanticTokens, pad: u32) -> SemanticTokens {
    let k = grid.streams;
    let t = grid.len();
    let mut out = SemanticTokens::new(k, grid.frame_rate);
    if t == 0 {
        return out;
    }
    let rows = t + k - 1;
    out.data = vec![pad; rows * k];
    for row in 0..rows {
        for s in 0..k {
            if row >= s && row - s < t {
                out.data[row * k + s] = grid.get(row - s, s);
            }
        }
    }
    out
}

pub fn delay_invert(grid: &SemanticTokens, pad: u32) -> Result<SemanticTokens> {
    let k = grid.streams;
    let rows = grid.len();
    let mut out = SemanticTokens::new(k, grid.frame_rate);
    if rows == 0 {
        return Ok(out);
    }
    if rows < k {
        return Err(Error::CorruptSequence(format!(
            "{rows} delayed rows cannot hold {k} streams"
        )));
    }
    let t = rows + 1 - k;
    for row in 0..rows {
        for s in 0..k {
            let corner = row < s || row - s >= t;
            let id = grid.get(row, s);
            if corner != (id == pad) {
                return Err(Error::CorruptSequence(format!(
                    "unexpected {} at row {row}, stream {s}",
                    if corner { "code in PAD corner" } else { "PAD" }
                )));
            }
        }
    }
    out.data = vec![0; t * k];
    for f in 0..t {
        for s in 0..k {
            out.data[f * k + s] = grid.get(f + s, s);
        }
    }
    Ok(out)
}

/// Edit span. Frames are 1-based and inclusive: `[frame_start, frame_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    /// Sentence span (L_A, L_B), 1-based, when the span is sentence aligned.
    pub sentences: Option<(usize, usize)>,
    pub frame_start: usize,
    pub frame_end: usize,
}

impl EditSpec {
    pub fn frames(frame_start: usize, frame_end: usize) -> Self {
        EditSpec {
            sentences: None,
            frame_start,
            frame_end,
        }
    }

    /// Span covering sentences `first..=last`. An edit starting at the first
    /// sentence also covers everything before it, and one ending at the last
    /// sentence everything after it.
    pub fn from_sentences(song: &SynthSong, first: usize, last: usize) -> Result<Self> {
        let l = song.sentence_count();
        if first < 1 || first > last || last > l {
            return Err(Error::InvalidArgument(format!(
                "sentence span ({first}, {last}) outside 1..={l}"
            )));
        }
        let start = if first == 1 { 0 } else { song.sentence_spans[first - 1].0 };
        let end = if last == l { song.len() } else { song.sentence_spans[last - 1].1 };
        Ok(EditSpec {
            sentences: Some((first, last)),
            frame_start: start + 1,
            frame_end: end,
        })
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        if self.frame_start > self.frame_end {
            return Err(Error::InvalidArgument(format!(
                "edit start {} after end {}",
                self.frame_start, self.frame_end
            )));
        }
        if self.frame_start < 1 || self.frame_end > t {
            return Err(Error::InvalidArgument(format!(
                "edit span [{}, {}] outside 1..={t}",
                self.frame_start, self.frame_end
            )));
        }
        Ok(())
    }

    pub fn edit_len(&self) -> usize {
        self.frame_end + 1 - self.frame_start
    }

    /// Number of frames before the edit (A − 1).
    pub fn pre_len(&self) -> usize {
        self.frame_start - 1
    }

    pub fn post_len(&self, t: usize) -> usize {
        t - self.frame_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Pre,
    Post,
    Edit,
    Sep,
    Pad,
}

/// Row range of one block (delayed rows plus its SEP row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub frames: usize,
    /// Row index of the terminating SEP.
    pub sep: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RearrangedSequence {
    pub streams: usize,
    /// Input ids, row-major.
    pub grid: Vec<u32>,
    /// Prediction targets, equal to `grid` except for the EOS cell that
    /// terminates the edit block.
    pub targets: Vec<u32>,
    /// Per-row label; the K − 1 appended rows of each block are `Pad`.
    pub segment_map: Vec<Segment>,
    /// Per-cell loss mask over target positions.
    pub loss_mask: Vec<bool>,
    pub delay_applied: bool,
    pub pre: Block,
    pub post: Block,
    pub edit: Block,
    /// Frames appended to the edit block from the following context.
    pub extension: usize,
    /// 0-based song frame index of stream 0 at each row.
    pub frame_index: Vec<usize>,
    pub spec: EditSpec,
    pub total_frames: usize,
}

impl RearrangedSequence {
    pub fn len(&self) -> usize {
        self.segment_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_map.is_empty()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.grid[r * self.streams..(r + 1) * self.streams]
    }

    pub fn target(&self, r: usize, k: usize) -> u32 {
        self.targets[r * self.streams + k]
    }

    pub fn mask(&self, r: usize, k: usize) -> bool {
        self.loss_mask[r * self.streams + k]
    }

    /// Block a row belongs to; SEP rows belong to the block they close.
    pub fn block_of_row(&self, r: usize) -> Segment {
        if r <= self.pre.sep {
            Segment::Pre
        } else if r <= self.post.sep {
            Segment::Post
        } else {
            Segment::Edit
        }
    }

    /// Rows up to and including the second SEP: the context part fed
    /// before generation starts.
    pub fn context_rows(&self) -> usize {
        self.post.sep + 1
    }

    pub fn masked_cells(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Aligned text columns for inspection.
    pub fn dump(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        let name = |id: u32| -> String {
            if id == vocab.sep() {
                "SEP".into()
            } else if id == vocab.pad() {
                "PAD".into()
            } else if id == vocab.eos() {
                "EOS".into()
            } else {
                id.to_string()
            }
        };
        for r in 0..self.len() {
            let _ = write!(out, "{r:>5} {:>5?} f{:<5}", self.segment_map[r], self.frame_index[r]);
            for k in 0..self.streams {
                let m = if self.mask(r, k) { '*' } else { ' ' };
                let _ = write!(out, " {:>4}{m}", name(self.target(r, k)));
            }
            out.push('\n');
        }
        out
    }
}

struct Builder {
    k: usize,
    grid: Vec<u32>,
    segment_map: Vec<Segment>,
    frame_index: Vec<usize>,
}

impl Builder {
    fn block(&mut self, frames: &SemanticTokens, label: Segment, first_frame: usize, vocab: &Vocab) -> Block {
        let start = self.segment_map.len();
        let delayed = delay_apply(frames, vocab.pad());
        for r in 0..delayed.len() {
            self.grid.extend_from_slice(delayed.row(r));
            self.segment_map.push(if r < frames.len() { label } else { Segment::Pad });
            self.frame_index.push(first_frame + r);
        }
        let sep = self.segment_map.len();
        self.grid.extend(std::iter::repeat_n(vocab.sep(), self.k));
        self.segment_map.push(Segment::Sep);
        self.frame_index.push(first_frame + frames.len());
        Block {
            start,
            frames: frames.len(),
            sep,
        }
    }
}

/// Rearranges `tokens` for editing `spec`, extending the edit block by
/// `extension` frames copied from the start of the following context.
pub fn rearrange_for_edit(
    tokens: &SemanticTokens,
    spec: &EditSpec,
    extension: usize,
    vocab: &Vocab,
) -> Result<RearrangedSequence> {
    let t = tokens.len();
    spec.validate(t)?;
    let a0 = spec.pre_len();
    let b = spec.frame_end;
    if extension > t - b {
        return Err(Error::InvalidArgument(format!(
            "extension {extension} exceeds following context of {} frames",
            t - b
        )));
    }
    let pre = tokens.slice(0, a0);
    let post = tokens.slice(b, t);
    let edit = tokens.slice(a0, b + extension);
    layout_blocks(&pre, &post, Some(&edit), spec, extension, t, vocab)
}

/// Context-only layout `delayed(pre) SEP delayed(post) SEP`, the starting
/// point of edit inference.
pub fn context_layout(
    pre: &SemanticTokens,
    post: &SemanticTokens,
    spec: &EditSpec,
    total_frames: usize,
    vocab: &Vocab,
) -> Result<RearrangedSequence> {
    layout_blocks(pre, post, None, spec, 0, total_frames, vocab)
}

fn layout_blocks(
    pre: &SemanticTokens,
    post: &SemanticTokens,
    edit: Option<&SemanticTokens>,
    spec: &EditSpec,
    extension: usize,
    total_frames: usize,
    vocab: &Vocab,
) -> Result<RearrangedSequence> {
    let k = pre.streams;
    if post.streams != k || edit.is_some_and(|e| e.streams != k) {
        return Err(Error::Shape("segments disagree on stream count".into()));
    }
    if let Some(e) = edit {
        if e.is_empty() {
            return Err(Error::InvalidArgument("empty edit segment".into()));
        }
        if let Some(bad) = e.data.iter().find(|&&id| !vocab.is_code(id)) {
            return Err(Error::IdOutOfRange { id: *bad, vocab: vocab.codebook_size });
        }
    }
    let mut b = Builder {
        k,
        grid: Vec::new(),
        segment_map: Vec::new(),
        frame_index: Vec::new(),
    };
    let pre_block = b.block(pre, Segment::Pre, 0, vocab);
    let post_block = b.block(post, Segment::Post, spec.frame_end, vocab);
    let empty = SemanticTokens::new(k, pre.frame_rate);
    let edit_block = b.block(edit.unwrap_or(&empty), Segment::Edit, spec.pre_len(), vocab);
    let mut targets = b.grid.clone();
    let mut loss_mask = vec![false; targets.len()];
    if let Some(e) = edit {
        let n = e.len();
        for r in 0..n + k - 1 {
            for s in 0..k {
                if r >= s && r - s < n {
                    loss_mask[(edit_block.start + r) * k + s] = true;
                }
            }
        }
        let eos_cell = (edit_block.start + n) * k;
        targets[eos_cell] = vocab.eos();
        loss_mask[eos_cell] = true;
    }
    Ok(RearrangedSequence {
        streams: k,
        grid: b.grid,
        targets,
        segment_map: b.segment_map,
        loss_mask,
        delay_applied: true,
        pre: pre_block,
        post: post_block,
        edit: edit_block,
        extension,
        frame_index: b.frame_index,
        spec: *spec,
        total_frames,
    })
}

fn block_tokens(seq: &RearrangedSequence, block: &Block, vocab: &Vocab) -> Result<SemanticTokens> {
    let mut g = SemanticTokens::new(seq.streams, 25);
    for r in block.start..block.sep {
        g.push_row(seq.row(r));
    }
    delay_invert(&g, vocab.pad())
}

/// Recovers the original T×K grid.
pub fn inverse_rearrange(seq: &RearrangedSequence, vocab: &Vocab) -> Result<SemanticTokens> {
    for block in [&seq.pre, &seq.post, &seq.edit] {
        if seq.row(block.sep).iter().any(|&id| id != vocab.sep()) {
            return Err(Error::CorruptSequence(format!("missing SEP at row {}", block.sep)));
        }
    }
    let pre = block_tokens(seq, &seq.pre, vocab)?;
    let post = block_tokens(seq, &seq.post, vocab)?;
    let edit = block_tokens(seq, &seq.edit, vocab)?;
    if edit.len() < seq.extension {
        return Err(Error::CorruptSequence("edit block shorter than its extension".into()));
    }
    let edit = edit.slice(0, edit.len() - seq.extension);
    Ok(SemanticTokens::concat(&[&pre, &edit, &post]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPair {
    pub pre: SemanticTokens,
    pub post: SemanticTokens,
    /// Overlap frames actually used on the (pre, post) side.
    pub overlap_used: (usize, usize),
    /// Set when material for the requested overlap was missing and the
    /// extraction fell back to zero overlap.
    pub degraded: bool,
}

/// Contexts cut directly from a full token grid.
pub fn extract_context(tokens: &SemanticTokens, spec: &EditSpec) -> Result<ContextPair> {
    spec.validate(tokens.len())?;
    Ok(ContextPair {
        pre: tokens.slice(0, spec.pre_len()),
        post: tokens.slice(spec.frame_end, tokens.len()),
        overlap_used: (0, 0),
        degraded: false,
    })
}

/// Contexts tokenized from frames: each side is tokenized with
/// `overlap_frames` extra frames reaching into the edit region, and the
/// corresponding token frames are dropped afterwards.
pub fn extract_context_from_frames(
    tokenizer: &Tokenizer,
    vocal: ArrayView2<f32>,
    accomp: ArrayView2<f32>,
    spec: &EditSpec,
    overlap_frames: usize,
) -> Result<ContextPair> {
    let t = vocal.nrows();
    spec.validate(t)?;
    let a0 = spec.pre_len();
    let b = spec.frame_end;
    let mut degraded = false;
    let pre = if a0 == 0 {
        SemanticTokens::new(tokenizer_streams(), 25)
    } else {
        let ov = if a0 + overlap_frames <= t {
            overlap_frames
        } else {
            degraded = true;
            0
        };
        let g = tokenizer.tokenize(
            vocal.slice(ndarray::s![0..a0 + ov, ..]),
            accomp.slice(ndarray::s![0..a0 + ov, ..]),
        )?;
        g.slice(0, a0)
    };
    let pre_ov = if a0 == 0 || degraded { 0 } else { overlap_frames };
    let mut post_degraded = false;
    let post = if b == t {
        SemanticTokens::new(tokenizer_streams(), 25)
    } else {
        let ov = if b >= overlap_frames {
            overlap_frames
        } else {
            post_degraded = true;
            0
        };
        let g = tokenizer.tokenize(vocal.slice(ndarray::s![b - ov..t, ..]), accomp.slice(ndarray::s![b - ov..t, ..]))?;
        g.slice(ov, g.len())
    };
    let post_ov = if b == t || post_degraded { 0 } else { overlap_frames };
    if degraded || post_degraded {
        log::warn!("context overlap degraded to zero for span {spec:?}");
    }
    Ok(ContextPair {
        pre,
        post,
        overlap_used: (pre_ov, post_ov),
        degraded: degraded || post_degraded,
    })
}

fn tokenizer_streams() -> usize {
    crate::tokenizer::STREAMS
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PAD: u32 = 99;

    fn grid(rows: &[&[u32]]) -> SemanticTokens {
        SemanticTokens::from_rows(rows[0].len(), &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn delay_single_stream_is_identity() {
        let g = grid(&[&[1], &[2], &[3]]);
        assert_eq!(delay_apply(&g, PAD), g);
        assert_eq!(delay_invert(&g, PAD).unwrap(), g);
    }

    #[test]
    fn delay_two_stream_hand_trace() {
        // (a1,a2),(b1,b2),(c1,c2) with a=1x, b=2x, c=3x
        let g = grid(&[&[11, 12], &[21, 22], &[31, 32]]);
        let d = delay_apply(&g, PAD);
        assert_eq!(d, grid(&[&[11, PAD], &[21, 12], &[31, 22], &[PAD, 32]]));
        assert_eq!(delay_invert(&d, PAD).unwrap(), g);
    }

    #[test]
    fn delay_invert_rejects_misplaced_pad() {
        let bad = grid(&[&[11, PAD], &[PAD, 12], &[31, 22], &[PAD, 32]]);
        assert!(matches!(delay_invert(&bad, PAD), Err(Error::CorruptSequence(_))));
        let bad = grid(&[&[11, 5], &[21, 12], &[31, 22], &[PAD, 32]]);
        assert!(delay_invert(&bad, PAD).is_err());
    }

    fn random_grid(rng: &mut ChaCha8Rng, t: usize, k: usize, c: u32) -> SemanticTokens {
        let mut g = SemanticTokens::new(k, 25);
        g.data = (0..t * k).map(|_| rng.random_range(0..c)).collect();
        g
    }

    /// Independent assembler: lays out each block by explicit index
    /// arithmetic and counts labels.
    fn brute_counts(t: usize, k: usize, a: usize, b: usize) -> [usize; 5] {
        let pre = a - 1;
        let edit = b - a + 1;
        let post = t - b;
        let mut c = [0usize; 5];
        for (n, slot) in [(pre, 0), (post, 1), (edit, 2)] {
            if n > 0 {
                c[slot] += n;
                c[4] += k - 1;
            }
            c[3] += 1;
        }
        c
    }

    fn counts(seq: &RearrangedSequence) -> [usize; 5] {
        let mut c = [0usize; 5];
        for s in &seq.segment_map {
            c[match s {
                Segment::Pre => 0,
                Segment::Post => 1,
                Segment::Edit => 2,
                Segment::Sep => 3,
                Segment::Pad => 4,
            }] += 1;
        }
        c
    }

    #[test]
    fn rearrange_t10_k4() {
        let vocab = Vocab::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 10, 4, 64);
        let seq = rearrange_for_edit(&g, &EditSpec::frames(4, 6), 0, &vocab).unwrap();
        assert_eq!(seq.len(), 22);
        assert_eq!(seq.len(), 10 + 3 * 4);
        assert_eq!(counts(&seq), brute_counts(10, 4, 4, 6));
        assert_eq!(counts(&seq), [3, 4, 3, 3, 9]);
        assert_eq!(inverse_rearrange(&seq, &vocab).unwrap(), g);
    }

    #[test]
    fn whole_song_edit_layout() {
        let vocab = Vocab::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(&mut rng, 7, 4, 64);
        let seq = rearrange_for_edit(&g, &EditSpec::frames(1, 7), 0, &vocab).unwrap();
        // two bare SEPs, then 7 + 3 delayed rows and the final SEP
        assert_eq!(seq.len(), 7 + 4 + 2);
        assert_eq!(seq.segment_map[0], Segment::Sep);
        assert_eq!(seq.segment_map[1], Segment::Sep);
        assert_eq!(inverse_rearrange(&seq, &vocab).unwrap(), g);
    }

    #[test]
    fn rearrange_errors() {
        let vocab = Vocab::new(64);
        let g = SemanticTokens::from_rows(4, &vec![vec![0; 4]; 5]);
        assert!(rearrange_for_edit(&g, &EditSpec::frames(4, 3), 0, &vocab).is_err());
        assert!(rearrange_for_edit(&g, &EditSpec::frames(0, 3), 0, &vocab).is_err());
        assert!(rearrange_for_edit(&g, &EditSpec::frames(2, 6), 0, &vocab).is_err());
        assert!(rearrange_for_edit(&g, &EditSpec::frames(2, 3), 3, &vocab).is_err());
    }

    #[test]
    fn mask_covers_edit_codes_and_eos_only() {
        let vocab = Vocab::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(&mut rng, 12, 4, 64);
        let seq = rearrange_for_edit(&g, &EditSpec::frames(5, 8), 2, &vocab).unwrap();
        let n = 4 + 2;
        assert_eq!(seq.masked_cells(), n * 4 + 1);
        for r in 0..seq.len() {
            for k in 0..4 {
                if seq.mask(r, k) {
                    assert_eq!(seq.block_of_row(r), Segment::Edit);
                    assert_ne!(seq.target(r, k), vocab.sep());
                    assert_ne!(seq.target(r, k), vocab.pad());
                }
            }
        }
        let eos_row = seq.edit.start + n;
        assert_eq!(seq.target(eos_row, 0), vocab.eos());
        assert_eq!(seq.row(eos_row)[0], vocab.pad());
        // extension frames equal the start of the following context
        let inv = delay_invert(
            &SemanticTokens::from_rows(4, &(seq.edit.start..seq.edit.sep).map(|r| seq.row(r).to_vec()).collect::<Vec<_>>()),
            vocab.pad(),
        )
        .unwrap();
        assert_eq!(inv.slice(4, 6), g.slice(8, 10));
        assert_eq!(inverse_rearrange(&seq, &vocab).unwrap(), g);
    }

    #[test]
    fn context_extraction_trims_overlap() {
        use crate::par::Exec;
        use crate::synthcorpus::{generate_corpus, Grammar, GrammarConfig};
        let g = Grammar::new(GrammarConfig {
            min_seconds: 6.0,
            max_seconds: 8.0,
            ..Default::default()
        })
        .unwrap();
        let song = generate_corpus(&g, 1, 5, Exec::Sequential).unwrap().songs.remove(0);
        let tok = Tokenizer::new(Default::default()).unwrap();
        let full = tok.tokenize(song.vocal_frames.view(), song.accomp_frames.view()).unwrap();
        let t = song.len();
        let spec = EditSpec::frames(30, t - 40);
        let direct = extract_context(&full, &spec).unwrap();
        let framed =
            extract_context_from_frames(&tok, song.vocal_frames.view(), song.accomp_frames.view(), &spec, 25).unwrap();
        assert_eq!(framed.overlap_used, (25, 25));
        assert!(!framed.degraded);
        assert_eq!(framed.pre, direct.pre);
        assert_eq!(framed.post, direct.post);
        assert_eq!(framed.pre.len(), 29);
        assert_eq!(framed.post.len(), 40);

        let head = extract_context(&full, &EditSpec::frames(1, 10)).unwrap();
        assert!(head.pre.is_empty());

        // edit region too close to the end for a full pre-side overlap
        let tight = EditSpec::frames(t - 5, t - 2);
        let r = extract_context_from_frames(&tok, song.vocal_frames.view(), song.accomp_frames.view(), &tight, 25)
            .unwrap();
        assert!(r.degraded);
        assert_eq!(r.pre, full.slice(0, t - 6));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn delay_roundtrip(t in 0usize..64, k in 1usize..6, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = random_grid(&mut rng, t, k, 50);
                prop_assert_eq!(delay_invert(&delay_apply(&g, PAD), PAD).unwrap(), g);
            }

            #[test]
            fn rearrange_roundtrip(t in 1usize..64, a in 0usize..64, b in 0usize..64, seed in any::<u64>()) {
                let vocab = Vocab::new(64);
                let a = a % t + 1;
                let b = a + b % (t - a + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = random_grid(&mut rng, t, 4, 64);
                let seq = rearrange_for_edit(&g, &EditSpec::frames(a, b), 0, &vocab).unwrap();
                prop_assert_eq!(inverse_rearrange(&seq, &vocab).unwrap(), g);
                prop_assert_eq!(counts(&seq), brute_counts(t, 4, a, b));
                if a > 1 && b < t {
                    prop_assert_eq!(seq.len(), t + 12);
                }
                let last_ctx = seq.context_rows();
                for r in 0..seq.len() {
                    if seq.segment_map[r] == Segment::Edit {
                        prop_assert!(r >= last_ctx);
                    }
                    for k in 0..4 {
                        if seq.mask(r, k) {
                            prop_assert_eq!(seq.block_of_row(r), Segment::Edit);
                        }
                    }
                }
            }
        }
    }
}

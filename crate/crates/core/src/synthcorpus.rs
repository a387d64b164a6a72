//! Synthetic two-track song corpus.
//!
//! A deterministic grammar stands in for real songs: vocal frames are a
//! syllable embedding plus a per-style offset, accompaniment frames are a
//! section embedding plus a cycling chord embedding plus a second per-style
//! offset. The mixture is always `vocal + accomp`; "separation" returns the
//! two tracks directly, with white noise added to the vocal.

use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::lyricproc::{LyricsRecord, Section, StructureTag};
use crate::par::{self, Exec};
use crate::tokenizer::{SemanticTokens, Tokenizer};

const CORPUS_MAGIC: &[u8; 8] = b"EDLMCORP";

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(0x5EED)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub feature_dim: usize,
    pub syllable_vocab: usize,
    pub chord_period: usize,
    pub n_chords: usize,
    pub frame_rate: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub syllable_frames_min: usize,
    pub syllable_frames_spread: usize,
    pub syllables_per_sentence: (usize, usize),
    pub sentences_per_section: (usize, usize),
    pub gap_frames: (usize, usize),
    pub n_styles: usize,
    pub table_seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            feature_dim: 16,
            syllable_vocab: 32,
            chord_period: 8,
            n_chords: 4,
            frame_rate: 25,
            min_seconds: 30.0,
            max_seconds: 60.0,
            syllable_frames_min: 4,
            syllable_frames_spread: 2,
            syllables_per_sentence: (3, 6),
            sentences_per_section: (1, 2),
            gap_frames: (25, 50),
            n_styles: 8,
            table_seed: 0x5EED_7AB1E,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, d: &str| {
            Err(Error::Config {
                field: format!("grammar.{f}"),
                detail: d.into(),
            })
        };
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be positive");
        }
        if self.syllable_vocab == 0 {
            return bad("syllable_vocab", "must be positive");
        }
        if self.chord_period == 0 || self.n_chords == 0 {
            return bad("chord_period", "chord period and count must be positive");
        }
        if self.frame_rate == 0 {
            return bad("frame_rate", "must be positive");
        }
        if !(self.min_seconds > 0.0 && self.min_seconds <= self.max_seconds) {
            return bad("min_seconds", "need 0 < min_seconds <= max_seconds");
        }
        if self.syllable_frames_min == 0 {
            return bad("syllable_frames_min", "must be positive");
        }
        if self.syllables_per_sentence.0 == 0
            || self.syllables_per_sentence.0 > self.syllables_per_sentence.1
        {
            return bad("syllables_per_sentence", "need 1 <= min <= max");
        }
        if self.sentences_per_section.0 == 0
            || self.sentences_per_section.0 > self.sentences_per_section.1
        {
            return bad("sentences_per_section", "need 1 <= min <= max");
        }
        if self.gap_frames.0 == 0 || self.gap_frames.0 > self.gap_frames.1 {
            return bad("gap_frames", "need 1 <= min <= max");
        }
        if self.n_styles == 0 {
            return bad("n_styles", "must be positive");
        }
        Ok(())
    }
}

/// Fixed embedding tables of the grammar, drawn once from `table_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub syllable: Vec<Vec<f32>>,
    pub section: Vec<Vec<f32>>,
    pub chord: Vec<Vec<f32>>,
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, std: f64) -> Vec<Vec<f32>> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..rows)
        .map(|_| (0..dim).map(|_| normal.sample(rng) as f32).collect())
        .collect()
}

impl EmbeddingTables {
    pub fn from_config(cfg: &GrammarConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.table_seed);
        EmbeddingTables {
            syllable: gaussian_rows(&mut rng, cfg.syllable_vocab, cfg.feature_dim, 0.8),
            section: gaussian_rows(&mut rng, StructureTag::ALL.len(), cfg.feature_dim, 0.7),
            chord: gaussian_rows(&mut rng, cfg.n_chords, cfg.feature_dim, 0.5),
        }
    }
}

/// Grammar configuration together with its embedding tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub config: GrammarConfig,
    pub tables: EmbeddingTables,
}

impl Grammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        config.validate()?;
        let tables = EmbeddingTables::from_config(&config);
        Ok(Grammar { config, tables })
    }

    /// Style seed of pool entry `index`; shared by every corpus built from
    /// the same grammar.
    pub fn style_seed(&self, index: usize) -> u64 {
        derive_seed(self.config.table_seed, 0x57_1E00 + index as u64)
    }

    pub fn style_pool(&self) -> Vec<u64> {
        (0..self.config.n_styles).map(|i| self.style_seed(i)).collect()
    }

    fn style_vector(&self, style_seed: u64, track: u64, std: f64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.table_seed ^ style_seed,
            track,
        ));
        gaussian_rows(&mut rng, 1, self.config.feature_dim, std).remove(0)
    }

    pub fn vocal_style(&self, style_seed: u64) -> Vec<f32> {
        self.style_vector(style_seed, 1, 0.6)
    }

    pub fn accomp_style(&self, style_seed: u64) -> Vec<f32> {
        self.style_vector(style_seed, 2, 0.5)
    }

    /// Frames a syllable lasts when sung in a given style.
    pub fn syllable_frames(&self, syllable: u32, style_seed: u64) -> usize {
        let spread = self.config.syllable_frames_spread as u64 + 1;
        self.config.syllable_frames_min
            + (mix64(style_seed ^ (syllable as u64).wrapping_mul(0x100_0193)) % spread) as usize
    }

    pub fn vocal_feature(&self, syllable: u32, style_seed: u64) -> Vec<f32> {
        let style = self.vocal_style(style_seed);
        self.tables.syllable[syllable as usize]
            .iter()
            .zip(&style)
            .map(|(a, b)| a + b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSyllable {
    pub id: u32,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSection {
    pub tag: StructureTag,
    /// Duration of accompaniment-only sections; ignored for lyric sections,
    /// whose duration is the sum of their syllable frames.
    pub frames: usize,
    pub sentences: Vec<Vec<PlannedSyllable>>,
}

impl PlannedSection {
    pub fn duration(&self) -> usize {
        if self.tag.is_lyric_related() {
            self.sentences.iter().flatten().map(|s| s.frames).sum()
        } else {
            self.frames
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSong {
    pub song_id: u64,
    pub style_seed: u64,
    pub sections: Vec<Section>,
    pub frame_rate: usize,
    pub syllable_alignment: Vec<Option<u32>>,
    /// Frame range `[start, end)` of each lyric sentence, in order.
    pub sentence_spans: Vec<(usize, usize)>,
    #[serde(skip)]
    pub vocal_frames: Array2<f32>,
    #[serde(skip)]
    pub accomp_frames: Array2<f32>,
}

impl SynthSong {
    pub fn len(&self) -> usize {
        self.syllable_alignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.syllable_alignment.is_empty()
    }

    pub fn mixture(&self) -> Array2<f32> {
        &self.vocal_frames + &self.accomp_frames
    }

    pub fn lyrics(&self) -> LyricsRecord {
        LyricsRecord {
            sections: self.sections.clone(),
        }
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_spans.len()
    }

    /// Section index of every frame.
    pub fn section_of_frame(&self) -> Vec<usize> {
        self.sections
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.duration_frames))
            .collect()
    }
}

pub fn generate_song(
    song_id: u64,
    style_seed: u64,
    plan: &[PlannedSection],
    grammar: &Grammar,
) -> Result<SynthSong> {
    if plan.is_empty() {
        return Err(Error::InvalidArgument("empty section plan".into()));
    }
    let cfg = &grammar.config;
    let mut sections = Vec::with_capacity(plan.len());
    let mut alignment = Vec::new();
    let mut tags = Vec::new();
    let mut sentence_spans = Vec::new();
    for (i, p) in plan.iter().enumerate() {
        if p.tag.is_lyric_related() {
            if p.sentences.is_empty() || p.sentences.iter().any(|s| s.is_empty()) {
                return Err(Error::Structure(format!(
                    "lyric section {i} needs non-empty sentences"
                )));
            }
            for sentence in &p.sentences {
                let start = alignment.len();
                for syl in sentence {
                    if syl.frames == 0 {
                        return Err(Error::Structure(format!("zero-length syllable in section {i}")));
                    }
                    if syl.id as usize >= cfg.syllable_vocab {
                        return Err(Error::Structure(format!("syllable {} out of vocabulary", syl.id)));
                    }
                    alignment.extend(std::iter::repeat_n(Some(syl.id), syl.frames));
                }
                sentence_spans.push((start, alignment.len()));
            }
        } else {
            if !p.sentences.is_empty() {
                return Err(Error::Structure(format!(
                    "accompaniment-only section {i} carries sentences"
                )));
            }
            if p.frames == 0 {
                return Err(Error::Structure(format!("section {i} has zero duration")));
            }
            alignment.extend(std::iter::repeat_n(None, p.frames));
        }
        tags.extend(std::iter::repeat_n(p.tag, p.duration()));
        sections.push(Section {
            tag: p.tag,
            duration_frames: p.duration(),
            sentences: p
                .sentences
                .iter()
                .map(|s| s.iter().map(|x| x.id).collect())
                .collect(),
        });
    }

    let t_len = alignment.len();
    let d = cfg.feature_dim;
    let v_style = grammar.vocal_style(style_seed);
    let a_style = grammar.accomp_style(style_seed);
    let mut vocal = Array2::<f32>::zeros((t_len, d));
    let mut accomp = Array2::<f32>::zeros((t_len, d));
    for t in 0..t_len {
        if let Some(syl) = alignment[t] {
            let e = &grammar.tables.syllable[syl as usize];
            for j in 0..d {
                vocal[[t, j]] = e[j] + v_style[j];
            }
        }
        let sec = &grammar.tables.section[tags[t].index()];
        let chord = &grammar.tables.chord[(t / cfg.chord_period) % cfg.n_chords];
        for j in 0..d {
            accomp[[t, j]] = sec[j] + chord[j] + a_style[j];
        }
    }
    Ok(SynthSong {
        song_id,
        style_seed,
        sections,
        frame_rate: cfg.frame_rate,
        syllable_alignment: alignment,
        sentence_spans,
        vocal_frames: vocal,
        accomp_frames: accomp,
    })
}

/// Draws a random section plan: optional intro, alternating verse/chorus
/// (chorus lyrics repeat within a song), occasional inst breaks and bridge,
/// optional outro, until the target length is reached.
pub fn random_plan(rng: &mut ChaCha8Rng, grammar: &Grammar, style_seed: u64) -> Vec<PlannedSection> {
    let cfg = &grammar.config;
    let target = (rng.random_range(cfg.min_seconds..=cfg.max_seconds) * cfg.frame_rate as f64) as usize;
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<PlannedSyllable> {
        let n = rng.random_range(cfg.syllables_per_sentence.0..=cfg.syllables_per_sentence.1);
        (0..n)
            .map(|_| {
                let id = rng.random_range(0..cfg.syllable_vocab as u32);
                PlannedSyllable {
                    id,
                    frames: grammar.syllable_frames(id, style_seed),
                }
            })
            .collect()
    };
    let lyric = |rng: &mut ChaCha8Rng, tag| {
        let n = rng.random_range(cfg.sentences_per_section.0..=cfg.sentences_per_section.1);
        PlannedSection {
            tag,
            frames: 0,
            sentences: (0..n).map(|_| sentence(rng)).collect(),
        }
    };
    let gap = |rng: &mut ChaCha8Rng, tag| PlannedSection {
        tag,
        frames: rng.random_range(cfg.gap_frames.0..=cfg.gap_frames.1),
        sentences: vec![],
    };

    let mut plan = Vec::new();
    if rng.random_bool(0.7) {
        plan.push(gap(rng, StructureTag::Intro));
    }
    let chorus = lyric(rng, StructureTag::Chorus);
    let total = |p: &[PlannedSection]| p.iter().map(|s| s.duration()).sum::<usize>();
    let mut bridged = false;
    loop {
        plan.push(lyric(rng, StructureTag::Verse));
        if total(&plan) >= target {
            break;
        }
        if rng.random_bool(0.3) {
            plan.push(gap(rng, StructureTag::Inst));
        }
        plan.push(chorus.clone());
        if total(&plan) >= target {
            break;
        }
        if !bridged && rng.random_bool(0.25) {
            bridged = true;
            plan.push(lyric(rng, StructureTag::Bridge));
        }
    }
    if rng.random_bool(0.7) {
        plan.push(gap(rng, StructureTag::Outro));
    }
    plan
}

/// Corpus header: grammar (with tables) and the song count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: u32,
    pub grammar: Grammar,
    pub seed: u64,
    pub song_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub grammar: Grammar,
    pub seed: u64,
    pub songs: Vec<SynthSong>,
}

pub fn generate_corpus(grammar: &Grammar, n_songs: usize, seed: u64, exec: Exec) -> Result<Corpus> {
    let songs = par::map_indexed(n_songs, exec, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let style = grammar.style_seed(rng.random_range(0..grammar.config.n_styles));
        let plan = random_plan(&mut rng, grammar, style);
        generate_song(i as u64, style, &plan, grammar)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        grammar: grammar.clone(),
        seed,
        songs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationNoise {
    pub sigma: f32,
}

impl Default for SeparationNoise {
    fn default() -> Self {
        SeparationNoise { sigma: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedTracks {
    pub vocal: Array2<f32>,
    pub accomp: Array2<f32>,
}

/// Oracle separation: accompaniment exact, vocal plus i.i.d. N(0, sigma²).
pub fn separate(song: &SynthSong, noise: SeparationNoise, rng_seed: u64) -> Result<SeparatedTracks> {
    if !(noise.sigma >= 0.0) {
        return Err(Error::InvalidArgument("sigma must be >= 0".into()));
    }
    let mut vocal = song.vocal_frames.clone();
    if noise.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0f32, noise.sigma).unwrap();
        vocal.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    Ok(SeparatedTracks {
        vocal,
        accomp: song.accomp_frames.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptRegion {
    /// Excerpt starting at frame 0.
    Head,
    /// Excerpt ending at the last frame; the target range is everything
    /// before it.
    Tail,
    /// Excerpt starting at the given frame.
    At(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylePrompt {
    pub tokens: SemanticTokens,
    /// Excerpt range `[start, end)` in the source song.
    pub frame_range: (usize, usize),
    pub source_song: u64,
}

impl StylePrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn make_style_prompt(
    song: &SynthSong,
    tokenizer: &Tokenizer,
    prompt_seconds: usize,
    region: PromptRegion,
) -> Result<StylePrompt> {
    let p = prompt_seconds * song.frame_rate;
    if p == 0 {
        return Err(Error::InvalidArgument("prompt length must be positive".into()));
    }
    if song.len() < p + song.frame_rate {
        return Err(Error::InvalidArgument(format!(
            "song of {} frames too short for a {prompt_seconds}s prompt",
            song.len()
        )));
    }
    let start = match region {
        PromptRegion::Head => 0,
        PromptRegion::Tail => song.len() - p,
        PromptRegion::At(s) => s,
    };
    if start + p > song.len() {
        return Err(Error::InvalidArgument(format!(
            "prompt excerpt [{start}, {}) exceeds song length {}",
            start + p,
            song.len()
        )));
    }
    let tokens = tokenizer.tokenize(
        song.vocal_frames.slice(s![start..start + p, ..]),
        song.accomp_frames.slice(s![start..start + p, ..]),
    )?;
    Ok(StylePrompt {
        tokens,
        frame_range: (start, start + p),
        source_song: song.song_id,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = Writer::new(CORPUS_MAGIC);
    w.json(&CorpusHeader {
        version: crate::io::FORMAT_VERSION,
        grammar: corpus.grammar.clone(),
        seed: corpus.seed,
        song_count: corpus.songs.len(),
    })?;
    for song in &corpus.songs {
        w.json(song)?;
        let (t, d) = song.vocal_frames.dim();
        w.f32_blob(&[t, d], song.vocal_frames.as_standard_layout().as_slice().unwrap());
        let (t, d) = song.accomp_frames.dim();
        w.f32_blob(&[t, d], song.accomp_frames.as_standard_layout().as_slice().unwrap());
    }
    crate::io::atomic_write(path, &w.buf)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader::new(bytes, CORPUS_MAGIC)?;
    let header: CorpusHeader = r.json()?;
    let mut songs = Vec::with_capacity(header.song_count.min(1 << 20));
    for i in 0..header.song_count {
        r.record = i;
        let mut song: SynthSong = r.json()?;
        let frames = |r: &mut Reader| -> Result<Array2<f32>> {
            let (shape, data) = r.f32_blob()?;
            if shape.len() != 2 || shape[0] != song.syllable_alignment.len() {
                return Err(r.err(&format!("frame blob shape {shape:?} inconsistent with metadata")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| r.err(&e.to_string()))
        };
        song.vocal_frames = frames(&mut r)?;
        song.accomp_frames = frames(&mut r)?;
        songs.push(song);
    }
    if !r.at_end() {
        return Err(r.err("trailing bytes after last record"));
    }
    Ok(Corpus {
        grammar: header.grammar,
        seed: header.seed,
        songs,
    })
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    decode_corpus(&crate::io::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grammar() -> Grammar {
        Grammar::new(GrammarConfig {
            min_seconds: 4.0,
            max_seconds: 6.0,
            ..Default::default()
        })
        .unwrap()
    }

    fn verse(ids: &[u32], frames: usize) -> PlannedSection {
        PlannedSection {
            tag: StructureTag::Verse,
            frames: 0,
            sentences: vec![ids.iter().map(|&id| PlannedSyllable { id, frames }).collect()],
        }
    }

    fn inst(frames: usize) -> PlannedSection {
        PlannedSection {
            tag: StructureTag::Inst,
            frames,
            sentences: vec![],
        }
    }

    #[test]
    fn deterministic() {
        let g = grammar();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let p1 = random_plan(&mut r1, &g, 11);
        let p2 = random_plan(&mut r2, &g, 11);
        let a = generate_song(0, 11, &p1, &g).unwrap();
        let b = generate_song(0, 11, &p2, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vocal_frames, b.vocal_frames);
    }

    #[test]
    fn all_inst_has_silent_vocal() {
        let g = grammar();
        let song = generate_song(0, 5, &[inst(40), inst(10)], &g).unwrap();
        assert!(song.syllable_alignment.iter().all(|a| a.is_none()));
        assert!(song.vocal_frames.iter().all(|&v| v == 0.0));
        assert_eq!(song.len(), 50);
    }

    #[test]
    fn syllable_frames_follow_closed_form() {
        let g = grammar();
        let style = 77;
        let song = generate_song(0, style, &[verse(&[3, 3, 9], 2)], &g).unwrap();
        // closed-form feature map evaluated directly
        let direct = |syl: u32| -> Vec<f32> {
            let e = &g.tables.syllable[syl as usize];
            let st = g.vocal_style(style);
            e.iter().zip(&st).map(|(a, b)| a + b).collect()
        };
        for t in 0..4 {
            assert_eq!(song.vocal_frames.row(t).to_vec(), direct(3));
        }
        for t in 4..6 {
            assert_eq!(song.vocal_frames.row(t).to_vec(), direct(9));
            assert_ne!(song.vocal_frames.row(t), song.vocal_frames.row(0));
        }
        assert_eq!(song.sentence_spans, vec![(0, 6)]);
    }

    #[test]
    fn accompaniment_closed_form() {
        let g = grammar();
        let song = generate_song(0, 9, &[inst(20)], &g).unwrap();
        let a = g.accomp_style(9);
        for t in [0usize, 7, 8, 19] {
            let sec = &g.tables.section[StructureTag::Inst.index()];
            let ch = &g.tables.chord[(t / 8) % 4];
            let want: Vec<f32> = (0..16).map(|j| sec[j] + ch[j] + a[j]).collect();
            assert_eq!(song.accomp_frames.row(t).to_vec(), want);
        }
    }

    #[test]
    fn empty_plan_rejected() {
        assert!(generate_song(0, 1, &[], &grammar()).is_err());
    }

    #[test]
    fn alignment_totality() {
        let g = grammar();
        let corpus = generate_corpus(&g, 12, 4, Exec::Parallel).unwrap();
        for song in &corpus.songs {
            let sec = song.section_of_frame();
            assert_eq!(sec.len(), song.len());
            assert_eq!(song.len(), song.sections.iter().map(|s| s.duration_frames).sum::<usize>());
            for t in 0..song.len() {
                let lyric = song.sections[sec[t]].tag.is_lyric_related();
                assert_eq!(lyric, song.syllable_alignment[t].is_some());
                if !lyric {
                    assert!(song.vocal_frames.row(t).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn parallel_and_sequential_corpora_match() {
        let g = grammar();
        let a = generate_corpus(&g, 6, 9, Exec::Parallel).unwrap();
        let b = generate_corpus(&g, 6, 9, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_separation_is_exact_and_linear() {
        let g = grammar();
        let song = generate_corpus(&g, 1, 2, Exec::Sequential).unwrap().songs.remove(0);
        let sep = separate(&song, SeparationNoise { sigma: 0.0 }, 1).unwrap();
        assert_eq!(sep.vocal, song.vocal_frames);
        assert_eq!(&sep.vocal + &sep.accomp, song.mixture());
        let n1 = separate(&song, SeparationNoise::default(), 5).unwrap();
        let n2 = separate(&song, SeparationNoise::default(), 5).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(n1.accomp, song.accomp_frames);
        assert_ne!(n1.vocal, song.vocal_frames);
    }

    #[test]
    fn separation_snr_is_forty_db() {
        let g = grammar();
        let mut plan = vec![];
        while plan.iter().map(PlannedSection::duration).sum::<usize>() < 12_000 {
            plan.push(verse(&[1, 5, 9, 13, 17, 21, 25, 29], 6));
        }
        let mut song = generate_song(0, 3, &plan, &g).unwrap();
        let rms = (song.vocal_frames.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
            / song.vocal_frames.len() as f64)
            .sqrt();
        song.vocal_frames.mapv_inplace(|v| (v as f64 / rms) as f32);
        let sep = separate(&song, SeparationNoise { sigma: 0.01 }, 17).unwrap();
        let signal: f64 = song.vocal_frames.iter().map(|v| (*v as f64).powi(2)).sum();
        let noise: f64 = (&sep.vocal - &song.vocal_frames)
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum();
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 40.0).abs() < 0.5, "snr {snr}");
    }

    #[test]
    fn corpus_roundtrip_and_errors() {
        let g = grammar();
        let dir = tempfile::tempdir().unwrap();
        let empty = Corpus {
            grammar: g.clone(),
            seed: 0,
            songs: vec![],
        };
        let p = dir.path().join("empty.corpus");
        write_corpus(&p, &empty).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), empty);

        let corpus = generate_corpus(&g, 100, 1, Exec::Parallel).unwrap();
        let p = dir.path().join("c.corpus");
        write_corpus(&p, &corpus).unwrap();
        let back = read_corpus(&p).unwrap();
        assert_eq!(back, corpus);
        for (a, b) in back.songs.iter().zip(&corpus.songs) {
            assert_eq!(a.vocal_frames, b.vocal_frames);
            assert_eq!(a.accomp_frames, b.accomp_frames);
        }

        let bytes = std::fs::read(&p).unwrap();
        let cut = &bytes[..bytes.len() * 2 / 3];
        match decode_corpus(cut) {
            Err(Error::Parse { record, .. }) => assert!(record > 0 && record < 100),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

//! Structure-guided lyric encoding.
//!
//! Lyric-related sections (verse, chorus, bridge) contribute one entry per
//! syllable, each flagged with its section tag; the tag is realized
//! downstream as an additive type embedding. Accompaniment-only sections
//! (intro, outro, inst) contribute a run of duration tokens, one per
//! `frames_per_duration_token` frames (rounded up), inserted at their
//! position in the song so that the text sequence stays roughly aligned
//! with the audio timeline.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One second at 25 frames per second.
pub const DEFAULT_FRAMES_PER_DURATION_TOKEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureTag {
    Verse,
    Chorus,
    Bridge,
    Intro,
    Outro,
    Inst,
}

impl StructureTag {
    pub const ALL: [StructureTag; 6] = [
        StructureTag::Verse,
        StructureTag::Chorus,
        StructureTag::Bridge,
        StructureTag::Intro,
        StructureTag::Outro,
        StructureTag::Inst,
    ];

    pub fn is_lyric_related(self) -> bool {
        matches!(
            self,
            StructureTag::Verse | StructureTag::Chorus | StructureTag::Bridge
        )
    }

    pub fn is_accompaniment_only(self) -> bool {
        !self.is_lyric_related()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LyricSentence {
    pub text: Vec<u32>,
    pub tag: StructureTag,
    /// 1-based position in the song.
    pub sentence_index: usize,
}

/// A section of the lyrics file. Accompaniment-only sections carry no
/// sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub tag: StructureTag,
    pub duration_frames: usize,
    #[serde(default)]
    pub sentences: Vec<Vec<u32>>,
}

/// One song's lyrics, as stored in a lyrics file line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LyricsRecord {
    pub sections: Vec<Section>,
}

impl LyricsRecord {
    pub fn sentences(&self) -> Vec<LyricSentence> {
        let mut out = Vec::new();
        for section in &self.sections {
            for text in &section.sentences {
                out.push(LyricSentence {
                    text: text.clone(),
                    tag: section.tag,
                    sentence_index: out.len() + 1,
                });
            }
        }
        out
    }

    pub fn sentence_count(&self) -> usize {
        self.sections.iter().map(|s| s.sentences.len()).sum()
    }

    pub fn total_frames(&self) -> usize {
        self.sections.iter().map(|s| s.duration_frames).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextToken {
    /// Syllable id; `None` for duration tokens.
    pub symbol_id: Option<u32>,
    /// Section tag. For lyric entries this is the type embedding tag; for
    /// duration tokens it names the accompaniment-only section kind.
    pub tag: StructureTag,
    pub is_duration_token: bool,
    /// 1-based sentence index for lyric entries.
    pub sentence: Option<usize>,
    /// Index of the originating section.
    pub section: usize,
}

impl TextToken {
    pub fn type_embedding_tag(&self) -> Option<StructureTag> {
        (!self.is_duration_token).then_some(self.tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TextTokenSeq {
    pub entries: Vec<TextToken>,
    /// Number of lyric sentences L in the song the sequence was built from.
    pub sentence_count: usize,
}

impl TextTokenSeq {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lyric_symbols(&self) -> Vec<u32> {
        self.entries.iter().filter_map(|e| e.symbol_id).collect()
    }
}

pub fn encode_lyrics(sections: &[Section], frames_per_duration_token: usize) -> Result<TextTokenSeq> {
    if frames_per_duration_token == 0 {
        return Err(Error::InvalidArgument(
            "frames_per_duration_token must be positive".into(),
        ));
    }
    let mut entries = Vec::new();
    let mut sentence = 0usize;
    for (si, section) in sections.iter().enumerate() {
        if section.tag.is_lyric_related() {
            if section.sentences.is_empty() {
                return Err(Error::Structure(format!(
                    "lyric-related section {si} ({:?}) has no sentences",
                    section.tag
                )));
            }
            for text in &section.sentences {
                if text.is_empty() {
                    return Err(Error::Structure(format!(
                        "empty sentence in section {si}"
                    )));
                }
                sentence += 1;
                entries.extend(text.iter().map(|&id| TextToken {
                    symbol_id: Some(id),
                    tag: section.tag,
                    is_duration_token: false,
                    sentence: Some(sentence),
                    section: si,
                }));
            }
        } else {
            if !section.sentences.is_empty() {
                return Err(Error::Structure(format!(
                    "lyric sentence under accompaniment-only tag {:?} in section {si}",
                    section.tag
                )));
            }
            if section.duration_frames == 0 {
                return Err(Error::Structure(format!(
                    "non-vocal section {si} has zero duration"
                )));
            }
            let n = section.duration_frames.div_ceil(frames_per_duration_token);
            entries.extend((0..n).map(|_| TextToken {
                symbol_id: None,
                tag: section.tag,
                is_duration_token: true,
                sentence: None,
                section: si,
            }));
        }
    }
    if entries.is_empty() {
        return Err(Error::Structure("lyrics encode to an empty sequence".into()));
    }
    Ok(TextTokenSeq {
        entries,
        sentence_count: sentence,
    })
}

/// Lyric-context-free view for editing sentences `first..=last` (1-based).
///
/// Duration tokens are kept when their section lies between the edited
/// sentences in song order; leading (trailing) non-vocal sections belong to
/// the edit when it starts at the first (ends at the last) sentence.
pub fn edit_view(full: &TextTokenSeq, first: usize, last: usize) -> Result<TextTokenSeq> {
    let total = full.sentence_count;
    if first < 1 || first > last || last > total {
        return Err(Error::InvalidArgument(format!(
            "sentence span ({first}, {last}) outside 1..={total}"
        )));
    }
    // Sentence indices immediately before and after each entry.
    let n = full.entries.len();
    let mut prev = vec![0usize; n];
    let mut next = vec![total + 1; n];
    let mut seen = 0;
    for (i, e) in full.entries.iter().enumerate() {
        if let Some(s) = e.sentence {
            seen = s;
        }
        prev[i] = seen;
    }
    let mut upcoming = total + 1;
    for (i, e) in full.entries.iter().enumerate().rev() {
        if let Some(s) = e.sentence {
            upcoming = s;
        }
        next[i] = upcoming;
    }
    let entries = full
        .entries
        .iter()
        .enumerate()
        .filter(|(i, e)| match e.sentence {
            Some(s) => (first..=last).contains(&s),
            None => {
                let after_start = prev[*i] >= first || (first == 1 && prev[*i] == 0);
                let before_end = next[*i] <= last || (last == total && next[*i] == total + 1);
                after_start && before_end
            }
        })
        .map(|(_, e)| *e)
        .collect();
    Ok(TextTokenSeq {
        entries,
        sentence_count: total,
    })
}

pub fn write_lyrics_file(path: &Path, records: &[LyricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::io::atomic_write(path, &buf)
}

pub fn read_lyrics_file(path: &Path) -> Result<Vec<LyricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LyricsRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            record: i,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

//! Command-line surface: JSON run configs with dotted `--set` overrides,
//! one artifact plus a run manifest per command.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::eval::{
    boundary_smoothness, edit_region_accuracy, reference_syllables, syllable_error_rate, token_dist_distance,
    tokenizer_floor, EvalReport,
};
use crate::io::{atomic_write, sha256_hex};
use crate::lm::{lyric_tokens, Conditioning, Model, ModelConfig, SourceKind};
use crate::lyricproc::{encode_lyrics, read_lyrics_file, write_lyrics_file, Section};
use crate::sampler::{edit_tokens, generate_edit, read_tokens, story_mode, write_tokens, SampleConfig, StoryConfig};
use crate::seqcodec::EditSpec;
use crate::synthcorpus::{derive_seed, generate_corpus, read_corpus, write_corpus, Corpus, Grammar, GrammarConfig};
use crate::tokenizer::{SemanticTokens, Tokenizer, TokenizerConfig, TokenizerTrainConfig};
use crate::trainer::{
    materialize, prompt_frames, style_prompt_tokens, Checkpoint, SampleDraw, TrainConfig, TrainData, TrainSample,
    Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "editlm", version, about = "Song editing language model over a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenCorpus,
    /// Train the RVQ tokenizer on a corpus.
    TrainTokenizer,
    /// Train the language model.
    TrainLm,
    /// Generate a song from scratch for a song's lyrics.
    Generate,
    /// Regenerate a sentence span of a song.
    Edit,
    /// Generate a song conditioned on one separated track.
    TrackComplete,
    /// Round-by-round long-form generation.
    Story,
    /// Score a token file against its reference song.
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainTokenizer => "train-tokenizer",
            Command::TrainLm => "train-lm",
            Command::Generate => "generate",
            Command::Edit => "edit",
            Command::TrackComplete => "track-complete",
            Command::Story => "story",
            Command::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub tokenizer: PathBuf,
    pub model: PathBuf,
    pub output: PathBuf,
    pub report: PathBuf,
    /// Token file to edit or evaluate instead of the corpus song.
    pub input: Option<PathBuf>,
    /// Lyrics file overriding the corpus song's lyrics.
    pub lyrics: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "work/corpus.bin".into(),
            tokenizer: "work/tokenizer.bin".into(),
            model: "work/model.ckpt".into(),
            output: "work/output.tokens".into(),
            report: "work/report.json".into(),
            input: None,
            lyrics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSettings {
    pub songs: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings { songs: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSettings {
    /// Corpus index of the song a command works on.
    pub song: usize,
    pub first_sentence: Option<usize>,
    pub last_sentence: Option<usize>,
    /// Track given to `track-complete`.
    pub source: SourceKind,
    /// Corpus songs supplying story-mode style prompts.
    pub prompt_songs: Vec<usize>,
    pub story: StoryConfig,
    /// Continue from an existing checkpoint at `paths.model`.
    pub resume: bool,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings {
            song: 0,
            first_sentence: None,
            last_sentence: None,
            source: SourceKind::Vocal,
            prompt_songs: Vec::new(),
            story: StoryConfig::default(),
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Drives every seeded module; required.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub grammar: GrammarConfig,
    pub corpus: CorpusSettings,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub task: TaskSettings,
}

fn config_err(field: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        detail: detail.into(),
    }
}

fn check_keys(given: &Value, known: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                None => return Err(config_err(path, "unknown field")),
                Some(kv) => check_keys(v, kv, &path)?,
            }
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(parts[..i].join("."), "not an object"))?;
        if !obj.contains_key(*part) {
            return Err(config_err(path, "unknown field"));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).unwrap();
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` overrides, then
    /// `--seed`. Module seeds are all set from the run seed.
    pub fn load(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        let known = tree.clone();
        if let Some(p) = config {
            let text = std::fs::read_to_string(p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingArtifact(p.to_path_buf())
                } else {
                    Error::io(p, e)
                }
            })?;
            let file: Value = serde_json::from_str(&text).map_err(|e| config_err("<config file>", e.to_string()))?;
            check_keys(&file, &known, "")?;
            merge(&mut tree, file);
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| config_err(s.clone(), "override must look like key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key.trim(), value)?;
        }
        if let Some(s) = seed {
            tree["seed"] = json!(s);
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(tree)
            .map_err(|e| config_err(e.path().to_string(), e.inner().to_string()))?;
        let seed = cfg.seed.ok_or_else(|| config_err("seed", "a run seed is required (--seed or config)"))?;
        cfg.train.seed = seed;
        cfg.sample.seed = seed;
        cfg.model.init_seed = seed;
        cfg.tokenizer_train.seed = seed;
        cfg.grammar.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.sample.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    fn span(&self) -> Result<Option<(usize, usize)>> {
        match (self.task.first_sentence, self.task.last_sentence) {
            (None, None) => Ok(None),
            (Some(a), None) => Ok(Some((a, a))),
            (Some(a), Some(b)) => Ok(Some((a, b))),
            (None, Some(_)) => Err(config_err("task.first_sentence", "required when last_sentence is set")),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactRecord>,
    pub details: Value,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_manifest(cmd: Command, cfg: &RunConfig, artifacts: &[&Path], details: Value) -> Result<()> {
    let records = artifacts
        .iter()
        .map(|p| {
            let bytes = crate::io::read_file(p)?;
            Ok(ArtifactRecord {
                path: p.to_path_buf(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = RunManifest {
        command: cmd.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        artifacts: records,
        details,
    };
    let text = serde_json::to_string_pretty(&m)? + "\n";
    atomic_write(&manifest_path(artifacts[0]), text.as_bytes())
}

struct Inference {
    corpus: Corpus,
    tokenizer: Tokenizer,
    model: Model<f32>,
    train: TrainConfig,
}

impl Inference {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let corpus = read_corpus(&cfg.paths.corpus)?;
        let tokenizer = Tokenizer::load(&cfg.paths.tokenizer)?;
        let ckpt = Checkpoint::load(&cfg.paths.model)?;
        if ckpt.tokenizer_fingerprint != tokenizer.fingerprint() {
            return Err(config_err("paths.tokenizer", "model was trained with a different tokenizer"));
        }
        Ok(Inference {
            corpus,
            tokenizer,
            model: ckpt.model,
            train: ckpt.config,
        })
    }

    fn data(&self, cfg: &RunConfig) -> Result<TrainData> {
        TrainData::new(
            self.corpus.clone(),
            &self.tokenizer,
            self.train.frames_per_duration_token,
            cfg.train.exec,
        )
    }

    fn sample(&self, cfg: &RunConfig, data: &TrainData, span: Option<(usize, usize)>, source: SourceKind) -> Result<TrainSample> {
        let song = cfg.task.song;
        if song >= data.len() {
            return Err(config_err("task.song", format!("corpus has {} songs", data.len())));
        }
        let mut train = self.train.clone();
        train.exec = cfg.train.exec;
        materialize(data, &self.tokenizer, &train, &SampleDraw::plain(song, span, source, cfg.seed()))
    }

    fn codebook(&self) -> usize {
        self.tokenizer.codebook_size()
    }
}

fn song_sections(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Section>> {
    let song = cfg.task.song;
    if let Some(p) = &cfg.paths.lyrics {
        let records = read_lyrics_file(p)?;
        return records
            .get(song)
            .map(|r| r.sections.clone())
            .ok_or_else(|| config_err("task.song", format!("lyrics file has {} records", records.len())));
    }
    corpus
        .songs
        .get(song)
        .map(|s| s.sections.clone())
        .ok_or_else(|| config_err("task.song", format!("corpus has {} songs", corpus.songs.len())))
}

fn input_tokens(cfg: &RunConfig, data: &TrainData) -> Result<SemanticTokens> {
    match &cfg.paths.input {
        Some(p) => Ok(read_tokens(p)?.1),
        None => Ok(data.songs[cfg.task.song].tokens.clone()),
    }
}

/// Runs one command; returns the primary artifact path.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<PathBuf> {
    let seed = cfg.seed();
    match cmd {
        Command::GenCorpus => {
            let grammar = Grammar::new(cfg.grammar.clone())?;
            let corpus = generate_corpus(&grammar, cfg.corpus.songs, seed, cfg.train.exec)?;
            write_corpus(&cfg.paths.corpus, &corpus)?;
            let mut artifacts = vec![cfg.paths.corpus.as_path()];
            if let Some(p) = &cfg.paths.lyrics {
                let records: Vec<_> = corpus.songs.iter().map(|s| s.lyrics()).collect();
                write_lyrics_file(p, &records)?;
                artifacts.push(p);
            }
            let frames: usize = corpus.songs.iter().map(|s| s.len()).sum();
            write_manifest(cmd, cfg, &artifacts, json!({"songs": corpus.songs.len(), "frames": frames}))?;
            Ok(cfg.paths.corpus.clone())
        }
        Command::TrainTokenizer => {
            let corpus = read_corpus(&cfg.paths.corpus)?;
            let mut tok = Tokenizer::new(cfg.tokenizer.clone())?;
            tok.init_from_corpus(&corpus, seed)?;
            let report = tok.train(&corpus, &cfg.tokenizer_train)?;
            tok.save(&cfg.paths.tokenizer)?;
            let details = json!({
                "final_loss": report.losses.last(),
                "corpus_loss": tok.corpus_loss(&corpus),
                "reseeded": report.reseeded,
                "fingerprint": tok.fingerprint(),
            });
            write_manifest(cmd, cfg, &[&cfg.paths.tokenizer], details)?;
            Ok(cfg.paths.tokenizer.clone())
        }
        Command::TrainLm => {
            let corpus = read_corpus(&cfg.paths.corpus)?;
            let tok = Tokenizer::load(&cfg.paths.tokenizer)?;
            if cfg.model.codebook_size != tok.codebook_size() {
                return Err(config_err("model.codebook_size", format!("tokenizer uses {}", tok.codebook_size())));
            }
            if cfg.model.syllable_vocab < corpus.grammar.config.syllable_vocab {
                return Err(config_err(
                    "model.syllable_vocab",
                    format!("corpus uses {} syllables", corpus.grammar.config.syllable_vocab),
                ));
            }
            let data = TrainData::new(corpus, &tok, cfg.train.frames_per_duration_token, cfg.train.exec)?;
            let mut trainer = if cfg.task.resume && cfg.paths.model.exists() {
                let mut t = Trainer::resume(Checkpoint::load(&cfg.paths.model)?, &data, &tok)?;
                t.config.steps = cfg.train.steps;
                t
            } else {
                Trainer::new(Model::new(cfg.model.clone())?, cfg.train.clone(), &data, &tok)?
            };
            let mut log = Vec::new();
            let result = trainer.run(Some(&mut log), Some(&cfg.paths.model));
            let mut log_path = cfg.paths.model.as_os_str().to_owned();
            log_path.push(".log.jsonl");
            let log_path = PathBuf::from(log_path);
            atomic_write(&log_path, &log)?;
            let logs = result?;
            let details = json!({
                "steps": trainer.step,
                "final_loss": logs.last().map(|l| l.loss),
                "final_masked_acc": logs.last().map(|l| l.masked_acc),
            });
            write_manifest(cmd, cfg, &[&cfg.paths.model, &log_path], details)?;
            Ok(cfg.paths.model.clone())
        }
        Command::Generate => {
            let inf = Inference::load(cfg)?;
            let data = inf.data(cfg)?;
            let sample = inf.sample(cfg, &data, None, SourceKind::None)?;
            let mut cond = sample.cond.clone();
            let sections = song_sections(cfg, &inf.corpus)?;
            if cfg.paths.lyrics.is_some() {
                cond.lyrics = lyric_tokens(&encode_lyrics(&sections, inf.train.frames_per_duration_token)?);
            }
            let t: usize = sections.iter().map(|s| s.duration_frames).sum::<usize>().max(1);
            let empty = SemanticTokens::new(inf.model.config.streams, inf.corpus.grammar.config.frame_rate);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let res = generate_edit(&inf.model, &cond, &empty, &empty, &EditSpec::frames(1, t), t, &cfg.sample, &mut rng)?;
            let meta = json!({"command": cmd.name(), "song": cfg.task.song, "truncated": res.truncated});
            write_tokens(&cfg.paths.output, &res.tokens, inf.codebook(), meta.clone())?;
            write_manifest(cmd, cfg, &[&cfg.paths.output], meta)?;
            Ok(cfg.paths.output.clone())
        }
        Command::Edit | Command::TrackComplete => {
            let inf = Inference::load(cfg)?;
            let data = inf.data(cfg)?;
            let span = cfg.span()?;
            let source = if cmd == Command::Edit {
                if span.is_none() {
                    return Err(config_err("task.first_sentence", "edit needs a sentence span"));
                }
                SourceKind::None
            } else {
                if cfg.task.source == SourceKind::None {
                    return Err(config_err("task.source", "track completion needs a vocal or accompaniment track"));
                }
                cfg.task.source
            };
            let sample = inf.sample(cfg, &data, span, source)?;
            let tokens = input_tokens(cfg, &data)?;
            let out = edit_tokens(&inf.model, &sample.cond, &tokens, &sample.spec, &cfg.sample)?;
            let meta = json!({
                "command": cmd.name(),
                "song": cfg.task.song,
                "spec": sample.spec,
                "source": source,
                "scores": out.selection.scores,
                "chosen": out.selection.chosen,
                "selection_skipped": out.selection.skipped,
                "edit_frames": out.selection.best().len(),
                "truncated": out.first_pass.truncated,
            });
            write_tokens(&cfg.paths.output, &out.song, inf.codebook(), meta.clone())?;
            write_manifest(cmd, cfg, &[&cfg.paths.output], meta)?;
            Ok(cfg.paths.output.clone())
        }
        Command::Story => {
            let inf = Inference::load(cfg)?;
            let data = inf.data(cfg)?;
            let sections = song_sections(cfg, &inf.corpus)?;
            let prompt_songs = if cfg.task.prompt_songs.is_empty() {
                vec![cfg.task.song]
            } else {
                cfg.task.prompt_songs.clone()
            };
            let fr = inf.corpus.grammar.config.frame_rate;
            let prompts = prompt_songs
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    if s >= data.len() {
                        return Err(config_err("task.prompt_songs", format!("song {s} not in corpus")));
                    }
                    style_prompt_tokens(&data, s, prompt_frames(&inf.train, fr), derive_seed(seed, i as u64))
                        .ok_or_else(|| config_err("train.prompt_seconds", "style prompt is empty"))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut story = cfg.task.story.clone();
            story.frames_per_duration_token = inf.train.frames_per_duration_token;
            let out = story_mode(&inf.model, &sections, &prompts, &story, &cfg.sample, fr)?;
            let meta = json!({"command": cmd.name(), "rounds": out.rounds});
            write_tokens(&cfg.paths.output, &out.tokens, inf.codebook(), meta.clone())?;
            write_manifest(cmd, cfg, &[&cfg.paths.output], meta)?;
            Ok(cfg.paths.output.clone())
        }
        Command::Eval => {
            let input = cfg
                .paths
                .input
                .as_ref()
                .ok_or_else(|| config_err("paths.input", "eval needs a token file"))?;
            let (_, generated) = read_tokens(input)?;
            let corpus = read_corpus(&cfg.paths.corpus)?;
            let tok = Tokenizer::load(&cfg.paths.tokenizer)?;
            let grammar = Grammar::new(corpus.grammar.config.clone())?;
            let song = corpus
                .songs
                .get(cfg.task.song)
                .ok_or_else(|| config_err("task.song", format!("corpus has {} songs", corpus.songs.len())))?;
            let truth = tok.tokenize(song.vocal_frames.view(), song.accomp_frames.view())?;
            let spec = match cfg.span()? {
                Some((a, b)) => EditSpec::from_sentences(song, a, b)?,
                None => EditSpec::frames(1, song.len()),
            };
            let t = song.len();
            let a0 = spec.pre_len();
            let post = spec.post_len(t);
            if generated.len() < a0 + post + 1 {
                return Err(Error::InvalidArgument(format!(
                    "token file of {} frames cannot hold the edited span",
                    generated.len()
                )));
            }
            let segment = generated.slice(a0, generated.len() - post);
            let truth_seg = truth.slice(a0, spec.frame_end);
            let reference = reference_syllables(song, a0, spec.frame_end);
            let mut report = EvalReport {
                syllable_error_rate: Some(syllable_error_rate(&segment, &reference, &tok, &grammar, song.style_seed)),
                tokenizer_floor: Some(tokenizer_floor(&[song], &tok, &grammar, cfg.train.exec)?),
                edit_region_accuracy: Some(edit_region_accuracy(&segment, &truth_seg)),
                ..Default::default()
            };
            if segment.len() >= 2 && truth_seg.len() >= 2 {
                let d = token_dist_distance(std::slice::from_ref(&segment), &[truth_seg], &tok)?;
                report.token_dist_distance = Some(d.distance);
                report.distance_regularized = d.regularized;
            }
            if cfg.paths.model.exists() && post > 0 {
                let inf = Inference::load(cfg)?;
                let data = inf.data(cfg)?;
                let cond: Conditioning = inf.sample(cfg, &data, cfg.span()?, SourceKind::None)?.cond;
                let edited = EditSpec::frames(a0 + 1, a0 + segment.len());
                report.boundary_smoothness =
                    boundary_smoothness(&inf.model, &cond, &generated, &edited, cfg.sample.rescore_lambda)?;
            }
            report.metadata = json!({"input": input, "song": cfg.task.song, "spec": spec});
            println!("{}", report.table());
            let text = serde_json::to_string_pretty(&report)? + "\n";
            atomic_write(&cfg.paths.report, text.as_bytes())?;
            write_manifest(cmd, cfg, &[&cfg.paths.report], json!({}))?;
            Ok(cfg.paths.report.clone())
        }
    }
}

/// Machine-readable failure record printed on stderr.
pub fn error_record(e: &Error) -> Value {
    let mut rec = json!({"kind": e.kind(), "message": e.to_string()});
    match e {
        Error::MissingArtifact(p) => rec["path"] = json!(p),
        Error::Io { path, .. } | Error::Format { path, .. } => rec["path"] = json!(path),
        Error::Config { field, .. } => rec["field"] = json!(field),
        _ => {}
    }
    json!({ "error": rec })
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDITLM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = RunConfig::load(cli.config.as_deref(), &cli.set, cli.seed).and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(path) => {
            log::info!("{} wrote {}", cli.command.name(), path.display());
            0
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            exit_code(&e)
        }
    }
}

//! Edit-masked training: sample construction, masked cross-entropy, AdamW,
//! checkpoints and the training loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_file, Reader, Writer};
use crate::lm::{lyric_tokens, Conditioning, Model, ModelConfig, Params, Real, SourceCondition, SourceKind};
use crate::lyricproc::{edit_view, encode_lyrics, TextTokenSeq, DEFAULT_FRAMES_PER_DURATION_TOKEN};
use crate::par::{map_indexed, map_slice, Exec};
use crate::seqcodec::{rearrange_for_edit, EditSpec, RearrangedSequence, Vocab};
use crate::synthcorpus::{derive_seed, separate, Corpus, SeparationNoise};
use crate::tokenizer::{SemanticTokens, Tokenizer};

const CHECKPOINT_MAGIC: &[u8; 8] = b"EDLMCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_frames: usize,
    pub smoothing_prob: f64,
    pub cond_dropout: f64,
    pub prompt_seconds: f64,
    pub separation_sigma: f32,
    pub frames_per_duration_token: usize,
    /// Restricts source kinds to none; required without cross-attention.
    pub sources: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 0,
            batch_size: 8,
            steps: 1000,
            lambda_frames: 25,
            smoothing_prob: 0.1,
            cond_dropout: 0.2,
            prompt_seconds: 2.0,
            separation_sigma: SeparationNoise::default().sigma,
            frames_per_duration_token: DEFAULT_FRAMES_PER_DURATION_TOKEN,
            sources: true,
            checkpoint_every: 0,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| {
            Err(Error::Config {
                field: format!("train.{field}"),
                detail: detail.into(),
            })
        };
        for (name, p) in [("smoothing_prob", self.smoothing_prob), ("cond_dropout", self.cond_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(name, "probability outside [0, 1]");
            }
        }
        if !(self.lr >= 0.0) {
            return bad("lr", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if self.frames_per_duration_token == 0 {
            return bad("frames_per_duration_token", "must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Per-song material reused across samples.
#[derive(Debug, Clone)]
pub struct SongData {
    pub tokens: SemanticTokens,
    pub text: TextTokenSeq,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub corpus: Corpus,
    pub songs: Vec<SongData>,
    style_groups: HashMap<u64, Vec<usize>>,
}

impl TrainData {
    pub fn new(corpus: Corpus, tokenizer: &Tokenizer, frames_per_duration_token: usize, exec: Exec) -> Result<Self> {
        let songs: Vec<Result<SongData>> = map_slice(&corpus.songs, exec, |song| {
            Ok(SongData {
                tokens: tokenizer.tokenize(song.vocal_frames.view(), song.accomp_frames.view())?,
                text: encode_lyrics(&song.sections, frames_per_duration_token)?,
            })
        });
        let songs = songs.into_iter().collect::<Result<Vec<_>>>()?;
        let mut style_groups: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, s) in corpus.songs.iter().enumerate() {
            style_groups.entry(s.style_seed).or_default().push(i);
        }
        Ok(TrainData {
            corpus,
            songs,
            style_groups,
        })
    }

    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    /// Another song sharing the style of `song`, or `song` itself when it
    /// is alone in its group.
    pub fn style_partner(&self, song: usize, pick: u64) -> usize {
        let group = &self.style_groups[&self.corpus.songs[song].style_seed];
        let others: Vec<usize> = group.iter().copied().filter(|&j| j != song).collect();
        if others.is_empty() {
            song
        } else {
            others[(pick % others.len() as u64) as usize]
        }
    }
}

/// Random choices behind one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub song: usize,
    /// Sentence span; `None` for songs without lyric sentences (whole song).
    pub sentences: Option<(usize, usize)>,
    pub source: SourceKind,
    pub smoothing: bool,
    pub drop_style: bool,
    pub drop_lyrics: bool,
    pub prompt_pick: u64,
    pub prompt_offset: u64,
    pub noise_seed: u64,
}

impl SampleDraw {
    /// Draw for evaluation: no dropout, no smoothing.
    pub fn plain(song: usize, sentences: Option<(usize, usize)>, source: SourceKind, seed: u64) -> Self {
        SampleDraw {
            song,
            sentences,
            source,
            smoothing: false,
            drop_style: false,
            drop_lyrics: false,
            prompt_pick: mix(seed, 1),
            prompt_offset: mix(seed, 2),
            noise_seed: mix(seed, 3),
        }
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream)
}

pub fn draw_sample(rng: &mut ChaCha8Rng, data: &TrainData, cfg: &TrainConfig) -> SampleDraw {
    let song = rng.random_range(0..data.len());
    let l = data.corpus.songs[song].sentence_count();
    let sentences = (l > 0).then(|| {
        let a = rng.random_range(1..=l);
        let b = rng.random_range(a..=l);
        (a, b)
    });
    let source = if cfg.sources {
        SourceKind::ALL[rng.random_range(0..3)]
    } else {
        SourceKind::None
    };
    SampleDraw {
        song,
        sentences,
        source,
        smoothing: rng.random_bool(cfg.smoothing_prob),
        drop_style: rng.random_bool(cfg.cond_dropout),
        drop_lyrics: rng.random_bool(cfg.cond_dropout),
        prompt_pick: rng.next_u64(),
        prompt_offset: rng.next_u64(),
        noise_seed: rng.next_u64(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub draw: SampleDraw,
    pub spec: EditSpec,
    pub seq: RearrangedSequence,
    pub cond: Conditioning,
}

pub fn prompt_frames(cfg: &TrainConfig, frame_rate: usize) -> usize {
    (cfg.prompt_seconds * frame_rate as f64).round() as usize
}

/// Style prompt cut from the cached tokens of `song`.
pub fn style_prompt_tokens(data: &TrainData, song: usize, frames: usize, offset: u64) -> Option<SemanticTokens> {
    if frames == 0 {
        return None;
    }
    let t = &data.songs[song].tokens;
    let len = frames.min(t.len());
    let start = (offset % (t.len() - len + 1) as u64) as usize;
    Some(t.slice(start, start + len))
}

pub fn source_condition(
    data: &TrainData,
    tokenizer: &Tokenizer,
    song: usize,
    kind: SourceKind,
    sigma: f32,
    noise_seed: u64,
) -> Result<SourceCondition> {
    if kind == SourceKind::None {
        return Ok(SourceCondition::none());
    }
    let s = &data.corpus.songs[song];
    let tracks = separate(s, SeparationNoise { sigma }, noise_seed)?;
    let zeros = Array2::<f32>::zeros(tracks.vocal.raw_dim());
    let tokens = match kind {
        SourceKind::Vocal => tokenizer.tokenize(tracks.vocal.view(), zeros.view())?,
        _ => tokenizer.tokenize(zeros.view(), tracks.accomp.view())?,
    };
    SourceCondition::new(kind, Some(tokens))
}

pub fn materialize(
    data: &TrainData,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    draw: &SampleDraw,
) -> Result<TrainSample> {
    let song = &data.corpus.songs[draw.song];
    let sd = &data.songs[draw.song];
    let t = sd.tokens.len();
    let (spec, view) = match draw.sentences {
        Some((a, b)) => (EditSpec::from_sentences(song, a, b)?, edit_view(&sd.text, a, b)?),
        None => (EditSpec::frames(1, t), sd.text.clone()),
    };
    let post = spec.post_len(t);
    let extension = if draw.smoothing && post > 0 { cfg.lambda_frames.min(post) } else { 0 };
    let vocab = Vocab::new(tokenizer.codebook_size());
    let seq = rearrange_for_edit(&sd.tokens, &spec, extension, &vocab)?;
    let partner = data.style_partner(draw.song, draw.prompt_pick);
    let style = style_prompt_tokens(data, partner, prompt_frames(cfg, song.frame_rate), draw.prompt_offset);
    let source = source_condition(data, tokenizer, draw.song, draw.source, cfg.separation_sigma, draw.noise_seed)?;
    let mut cond = Conditioning::new(style, lyric_tokens(&view), source);
    cond.drop_style = draw.drop_style;
    cond.drop_lyrics = draw.drop_lyrics;
    Ok(TrainSample { draw: *draw, spec, seq, cond })
}

pub fn build_batch(
    data: &TrainData,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    let draws: Vec<SampleDraw> = (0..cfg.batch_size).map(|_| draw_sample(rng, data, cfg)).collect();
    map_slice(&draws, cfg.exec, |d| materialize(data, tokenizer, cfg, d))
        .into_iter()
        .collect()
}

/// Input rows and frame indices for teacher forcing: every row but the last.
pub fn teacher_inputs(seq: &RearrangedSequence) -> (&[u32], &[usize]) {
    let r = seq.len();
    (&seq.grid[..(r - 1) * seq.streams], &seq.frame_index[..r - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLoss<T> {
    /// Sum of cross-entropy over masked cells (nats).
    pub loss_sum: f64,
    pub cells: usize,
    pub correct: usize,
    /// Gradient of `loss_sum * scale` w.r.t. the logits.
    pub dlogits: Array3<T>,
}

impl<T> MaskedLoss<T> {
    pub fn mean(&self) -> f64 {
        self.loss_sum / self.cells as f64
    }
}

/// Next-token cross-entropy over the cells selected by `mask`. Logits have
/// shape rows×K×V and row r predicts `targets[r]`; the gradient is scaled
/// by `scale` and is exactly zero outside the mask.
pub fn masked_cross_entropy<T: Real>(
    logits: &Array3<T>,
    targets: &[u32],
    mask: &[bool],
    scale: f64,
) -> Result<MaskedLoss<T>> {
    let (rows, k, v) = logits.dim();
    if targets.len() != rows * k || mask.len() != rows * k {
        return Err(Error::Shape(format!(
            "logits {rows}×{k} rows vs {} targets and {} mask cells",
            targets.len(),
            mask.len()
        )));
    }
    let cells = mask.iter().filter(|&&m| m).count();
    if cells == 0 {
        return Err(Error::InvalidArgument("empty loss mask".into()));
    }
    let mut dlogits = Array3::zeros((rows, k, v));
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for r in 0..rows {
        for s in 0..k {
            if !mask[r * k + s] {
                continue;
            }
            let tgt = targets[r * k + s] as usize;
            if tgt >= v {
                return Err(Error::IdOutOfRange {
                    id: tgt as u32,
                    vocab: v,
                });
            }
            let row: Vec<f64> = (0..v).map(|i| logits[[r, s, i]].to_f64().unwrap()).collect();
            let lp = crate::lm::ops::log_softmax(&row);
            loss_sum -= lp[tgt];
            let arg = argmax(&row);
            if arg == tgt {
                correct += 1;
            }
            for i in 0..v {
                let p = lp[i].exp() - if i == tgt { 1.0 } else { 0.0 };
                dlogits[[r, s, i]] = T::from_f64(p * scale).unwrap();
            }
        }
    }
    Ok(MaskedLoss {
        loss_sum,
        cells,
        correct,
        dlogits,
    })
}

/// Lowest index among maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Params<f32>,
    pub v: Params<f32>,
    pub t: u64,
}

impl AdamW {
    pub fn new(model: &Model<f32>) -> Self {
        AdamW {
            m: Params::zeros(&model.layout),
            v: Params::zeros(&model.layout),
            t: 0,
        }
    }

    /// Decoupled weight decay skips normalization gains.
    pub fn step(&mut self, model: &mut Model<f32>, grads: &Params<f32>, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = cfg.adam_eps as f32;
        let lr = lr as f32;
        for i in 0..model.layout.len() {
            let wd = if model.layout.is_norm(i) { 0.0 } else { cfg.weight_decay as f32 };
            let p = model.params[i].as_slice_mut().unwrap();
            let g = grads[i].as_slice().unwrap();
            let m = self.m[i].as_slice_mut().unwrap();
            let v = self.v[i].as_slice_mut().unwrap();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = step * m[j] / (v[j].sqrt() / c2s + eps) + lr * wd * p[j];
                p[j] -= update;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    adam_t: u64,
    tokenizer_fingerprint: String,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub step: usize,
    pub config: TrainConfig,
    pub tokenizer_fingerprint: String,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.json(&CheckpointManifest {
            model: self.model.config.clone(),
            train: self.config.clone(),
            step: self.step,
            adam_t: self.optimizer.t,
            tokenizer_fingerprint: self.tokenizer_fingerprint.clone(),
            rng: self.rng.clone(),
        })?;
        let layout = &self.model.layout;
        self.model.params.write(&mut w, layout)?;
        self.optimizer.m.write(&mut w, layout)?;
        self.optimizer.v.write(&mut w, layout)?;
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, CHECKPOINT_MAGIC)?;
        let m: CheckpointManifest = r.json()?;
        m.model.validate()?;
        let layout = crate::lm::Layout::new(&m.model);
        let params = Params::read(&mut r, &layout)?;
        let am = Params::read(&mut r, &layout)?;
        let av = Params::read(&mut r, &layout)?;
        if !r.at_end() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint {
            model: Model::from_params(m.model, params)?,
            optimizer: AdamW { m: am, v: av, t: m.adam_t },
            step: m.step,
            config: m.train,
            tokenizer_fingerprint: m.tokenizer_fingerprint,
            rng: m.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub data: &'a TrainData,
    pub tokenizer: &'a Tokenizer,
}

/// Gradient and statistics for one sample; the gradient is scaled by
/// `scale`.
pub fn sample_gradient(model: &Model<f32>, sample: &TrainSample, scale: f64) -> Result<(Params<f32>, MaskedLoss<f32>)> {
    let (rows, frames) = teacher_inputs(&sample.seq);
    let (logits, tape) = model.forward_tape(&sample.cond, rows, frames, None)?;
    let ml = masked_cross_entropy(&logits, &sample.seq.targets, &sample.seq.loss_mask, scale)?;
    let g = model.backward(&tape, &ml.dlogits);
    Ok((g, ml))
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model<f32>, config: TrainConfig, data: &'a TrainData, tokenizer: &'a Tokenizer) -> Result<Self> {
        config.validate()?;
        if !model.config.cross_attention && config.sources {
            return Err(Error::Config {
                field: "train.sources".into(),
                detail: "source conditioning needs cross_attention".into(),
            });
        }
        if model.config.codebook_size != tokenizer.codebook_size() {
            return Err(Error::Config {
                field: "model.codebook_size".into(),
                detail: "does not match the tokenizer".into(),
            });
        }
        Ok(Trainer {
            optimizer: AdamW::new(&model),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
            data,
            tokenizer,
        })
    }

    pub fn resume(ckpt: Checkpoint, data: &'a TrainData, tokenizer: &'a Tokenizer) -> Result<Self> {
        if ckpt.tokenizer_fingerprint != tokenizer.fingerprint() {
            return Err(Error::Config {
                field: "tokenizer".into(),
                detail: "checkpoint was trained with a different tokenizer".into(),
            });
        }
        Ok(Trainer {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config: ckpt.config,
            step: ckpt.step,
            rng: ckpt.rng,
            data,
            tokenizer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            config: self.config.clone(),
            tokenizer_fingerprint: self.tokenizer.fingerprint(),
            rng: self.rng.clone(),
        }
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left untouched and `Diverged` is returned.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let batch = build_batch(self.data, self.tokenizer, &self.config, &mut self.rng)?;
        let cells: usize = batch.iter().map(|s| s.seq.masked_cells()).sum();
        let scale = 1.0 / cells as f64;
        let model = &self.model;
        let results = map_slice(&batch, self.config.exec, |s| sample_gradient(model, s, scale));
        let mut grads = Params::zeros(&self.model.layout);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for r in results {
            let (g, ml) = r?;
            grads.add_assign(&g);
            loss_sum += ml.loss_sum;
            correct += ml.correct;
        }
        let loss = loss_sum / cells as f64;
        let norm = grads.sq_norm().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step as u64,
                detail: format!("loss {loss}, gradient norm {norm}"),
            });
        }
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            grads.scale((self.config.grad_clip / norm) as f32);
        }
        let lr = self.config.lr_at(self.step);
        self.optimizer.step(&mut self.model, &grads, &self.config, lr);
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss,
            lr,
            masked_acc: correct as f64 / cells as f64,
        })
    }

    /// Runs until `config.steps`, appending one JSON line per step to `log`
    /// and writing checkpoints to `ckpt_path`. On divergence the last good
    /// state is saved before the error is returned.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>, ckpt_path: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut out = Vec::new();
        while self.step < self.config.steps {
            let entry = match self.train_step() {
                Ok(e) => e,
                Err(e) => {
                    if let Some(p) = ckpt_path {
                        self.checkpoint().save(p)?;
                    }
                    return Err(e);
                }
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&entry)?;
                writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<train log>"), e))?;
            }
            if entry.step % 50 == 0 {
                log::info!("step {} loss {:.4} acc {:.3}", entry.step, entry.loss, entry.masked_acc);
            }
            out.push(entry);
            if let Some(p) = ckpt_path {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.steps {
                    self.checkpoint().save(p)?;
                }
            }
        }
        if let Some(p) = ckpt_path {
            self.checkpoint().save(p)?;
        }
        Ok(out)
    }
}

/// Teacher-forced masked next-token accuracy over `samples`.
pub fn masked_accuracy(model: &Model<f32>, samples: &[TrainSample], exec: Exec) -> Result<f64> {
    let results = map_slice(samples, exec, |s| {
        let (rows, frames) = teacher_inputs(&s.seq);
        let logits = model.forward(&s.cond, rows, frames)?;
        let ml = masked_cross_entropy(&logits, &s.seq.targets, &s.seq.loss_mask, 0.0)?;
        Ok::<_, Error>((ml.correct, ml.cells))
    });
    let mut c = 0;
    let mut n = 0;
    for r in results {
        let (a, b): (usize, usize) = r?;
        c += a;
        n += b;
    }
    Ok(c as f64 / n.max(1) as f64)
}

/// Evaluation samples: one per song index in `songs`, single random
/// sentence (or whole song), fixed seeds, no dropout or smoothing.
pub fn eval_samples(
    data: &TrainData,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    songs: &[usize],
    source: SourceKind,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let draws: Vec<SampleDraw> = map_indexed(songs.len(), Exec::Sequential, |i| {
        let song = songs[i];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, song as u64));
        let l = data.corpus.songs[song].sentence_count();
        let sentences = (l > 0).then(|| {
            let a = rng.random_range(1..=l);
            (a, a)
        });
        SampleDraw::plain(song, sentences, source, rng.next_u64())
    });
    map_slice(&draws, cfg.exec, |d| materialize(data, tokenizer, cfg, d))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{generate_corpus, Grammar, GrammarConfig};
    use approx::assert_abs_diff_eq;

    pub(crate) fn small_setup(n: usize) -> (TrainData, Tokenizer) {
        let g = Grammar::new(GrammarConfig {
            min_seconds: 4.0,
            max_seconds: 6.0,
            n_styles: 3,
            ..Default::default()
        })
        .unwrap();
        let corpus = generate_corpus(&g, n, 11, Exec::Sequential).unwrap();
        let mut tok = Tokenizer::new(Default::default()).unwrap();
        tok.init_from_corpus(&corpus, 1).unwrap();
        let data = TrainData::new(corpus, &tok, 25, Exec::Sequential).unwrap();
        (data, tok)
    }

    fn tiny_model(cross: bool) -> Model<f32> {
        Model::new(ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ff_dim: 32,
            encoder_layers: 1,
            cross_attention: cross,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = 67;
        let logits = Array3::<f64>::zeros((3, 4, v));
        let targets: Vec<u32> = (0..12).map(|i| i % 60).collect();
        let mut mask = vec![false; 12];
        mask[5] = true;
        mask[9] = true;
        let ml = masked_cross_entropy(&logits, &targets, &mask, 1.0).unwrap();
        assert_abs_diff_eq!(ml.mean(), (v as f64).ln(), epsilon = 1e-12);
        assert!(masked_cross_entropy(&logits, &targets, &[false; 12], 1.0).is_err());
    }

    #[test]
    fn hand_computed_two_frame_loss() {
        // 2 rows × 1 stream × 3 classes
        let logits = Array3::from_shape_vec((2, 1, 3), vec![1.0f64, 2.0, 0.5, 0.0, -1.0, 3.0]).unwrap();
        let ml = masked_cross_entropy(&logits, &[1, 0], &[true, true], 1.0).unwrap();
        let lse0 = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        let lse1 = (1.0 + (-1f64).exp() + 3f64.exp()).ln();
        let expected = ((lse0 - 2.0) + (lse1 - 0.0)) / 2.0;
        assert_abs_diff_eq!(ml.mean(), expected, epsilon = 1e-6);
        assert_eq!(ml.correct, 1);
    }

    #[test]
    fn unmasked_logit_gradients_are_zero() {
        let (data, tok) = small_setup(6);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = tiny_model(true);
        for s in build_batch(&data, &tok, &cfg, &mut rng).unwrap() {
            let (rows, frames) = teacher_inputs(&s.seq);
            let logits = model.forward(&s.cond, rows, frames).unwrap();
            let ml = masked_cross_entropy(&logits, &s.seq.targets, &s.seq.loss_mask, 1.0).unwrap();
            let k = s.seq.streams;
            for r in 0..s.seq.len() {
                for st in 0..k {
                    if !s.seq.mask(r, st) {
                        assert!(ml.dlogits.slice(ndarray::s![r, st, ..]).iter().all(|&g| g == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn source_kinds_uniform() {
        let (data, _) = small_setup(4);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[draw_sample(&mut rng, &data, &cfg).source.index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn smoothing_extension_copies_following_context() {
        let (data, tok) = small_setup(6);
        let cfg = TrainConfig {
            smoothing_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vocab = Vocab::new(64);
        let mut extended = 0;
        for _ in 0..5 {
            for s in build_batch(&data, &tok, &cfg, &mut rng).unwrap() {
                let t = data.songs[s.draw.song].tokens.len();
                let post = s.spec.post_len(t);
                assert_eq!(s.seq.extension, cfg.lambda_frames.min(post));
                let e = &s.seq.edit;
                let block = SemanticTokens::from_rows(4, &(e.start..e.sep).map(|r| s.seq.row(r).to_vec()).collect::<Vec<_>>());
                let frames = crate::seqcodec::delay_invert(&block, vocab.pad()).unwrap();
                let b = s.spec.frame_end;
                let tokens = &data.songs[s.draw.song].tokens;
                assert_eq!(frames.slice(frames.len() - s.seq.extension, frames.len()), tokens.slice(b, b + s.seq.extension));
                extended += (s.seq.extension > 0) as usize;
            }
        }
        assert!(extended > 0);
    }

    #[test]
    fn full_song_span_has_empty_contexts() {
        let (data, tok) = small_setup(3);
        let cfg = TrainConfig::default();
        let l = data.corpus.songs[0].sentence_count();
        let d = SampleDraw::plain(0, Some((1, l)), SourceKind::None, 1);
        let s = materialize(&data, &tok, &cfg, &d).unwrap();
        assert_eq!(s.seq.pre.frames, 0);
        assert_eq!(s.seq.post.frames, 0);
        assert_eq!(s.seq.edit.frames, data.songs[0].tokens.len());
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let (data, tok) = small_setup(4);
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 2,
            steps: 3,
            ..Default::default()
        };
        let model = tiny_model(true);
        let before = model.params.clone();
        let mut tr = Trainer::new(model, cfg, &data, &tok).unwrap();
        let logs = tr.run(None, None).unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(tr.model.params, before);
    }

    #[test]
    fn resume_reproduces_losses() {
        let (data, tok) = small_setup(4);
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 2,
            steps: 14,
            ..Default::default()
        };
        let mut a = Trainer::new(tiny_model(true), cfg.clone(), &data, &tok).unwrap();
        for _ in 0..4 {
            a.train_step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        a.checkpoint().save(&path).unwrap();
        let first: Vec<f64> = (0..10).map(|_| a.train_step().unwrap().loss).collect();
        let mut b = Trainer::resume(Checkpoint::load(&path).unwrap(), &data, &tok).unwrap();
        let second: Vec<f64> = (0..10).map(|_| b.train_step().unwrap().loss).collect();
        assert_eq!(first, second);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn parallel_and_sequential_steps_agree() {
        let (data, tok) = small_setup(4);
        let mk = |exec| TrainConfig {
            lr: 1e-3,
            batch_size: 3,
            exec,
            ..Default::default()
        };
        let mut a = Trainer::new(tiny_model(true), mk(Exec::Sequential), &data, &tok).unwrap();
        let mut b = Trainer::new(tiny_model(true), mk(Exec::Parallel), &data, &tok).unwrap();
        for _ in 0..2 {
            assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
        }
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let (data, tok) = small_setup(3);
        let cfg = TrainConfig {
            batch_size: 1,
            steps: 5,
            ..Default::default()
        };
        let mut model = tiny_model(true);
        let head = model.layout.heads[0];
        model.params[head][[0, 0]] = f32::NAN;
        let poisoned = model.params.clone();
        let mut tr = Trainer::new(model, cfg, &data, &tok).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let err = tr.run(None, Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.step, 0);
        assert_eq!(format!("{:?}", ck.model.params), format!("{poisoned:?}"));
    }
}

//! Two-branch residual vector quantizer producing the K=4 semantic token
//! grid.
//!
//! Each branch is a frozen affine encoder (standing in for a pretrained
//! feature extractor) followed by a two-layer residual quantizer. The
//! accompaniment branch fills streams 0-1 and the vocal branch streams 2-3.
//! Only the codebooks are trained, by gradient descent on the codebook side
//! of the commitment loss.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::synthcorpus::{derive_seed, Corpus};

const TOKENIZER_MAGIC: &[u8; 8] = b"EDLMTOKZ";

/// Quantizer layers per branch.
pub const LAYERS_PER_BRANCH: usize = 2;
/// Token streams per frame: 2 branches × 2 layers.
pub const STREAMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Accompaniment = 0,
    Vocal = 1,
}

pub const BRANCH_ORDER: [Branch; 2] = [Branch::Accompaniment, Branch::Vocal];

/// T×K grid of discrete codes, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticTokens {
    pub streams: usize,
    pub data: Vec<u32>,
    pub frame_rate: usize,
}

impl SemanticTokens {
    pub fn new(streams: usize, frame_rate: usize) -> Self {
        SemanticTokens {
            streams,
            data: Vec::new(),
            frame_rate,
        }
    }

    pub fn from_rows(streams: usize, rows: &[Vec<u32>]) -> Self {
        let mut t = SemanticTokens::new(streams, 25);
        for r in rows {
            t.push_row(r);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.streams).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.data[t * self.streams..(t + 1) * self.streams]
    }

    pub fn get(&self, t: usize, k: usize) -> u32 {
        self.data[t * self.streams + k]
    }

    pub fn push_row(&mut self, row: &[u32]) {
        assert_eq!(row.len(), self.streams);
        self.data.extend_from_slice(row);
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SemanticTokens {
        SemanticTokens {
            streams: self.streams,
            data: self.data[start * self.streams..end * self.streams].to_vec(),
            frame_rate: self.frame_rate,
        }
    }

    pub fn concat(parts: &[&SemanticTokens]) -> SemanticTokens {
        let streams = parts.first().map_or(STREAMS, |p| p.streams);
        let frame_rate = parts.first().map_or(25, |p| p.frame_rate);
        SemanticTokens {
            streams,
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
            frame_rate,
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks_exact(self.streams.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Array2<f32>,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    /// Euclidean nearest entry; ties go to the lowest index.
    pub fn nearest(&self, z: ArrayView1<f32>) -> (usize, f32) {
        let mut best = (0usize, f32::INFINITY);
        for (i, e) in self.entries.outer_iter().enumerate() {
            let d: f32 = e.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqResult {
    pub codes: Vec<usize>,
    pub recon: Array1<f32>,
    /// `residuals[k]` is the input to layer k; the last element is the
    /// residual left after the final layer.
    pub residuals: Vec<Array1<f32>>,
}

/// Residual quantization of `z` through `quantizers` in order.
pub fn rvq_quantize(z: ArrayView1<f32>, quantizers: &[Codebook]) -> RvqResult {
    let mut residual = z.to_owned();
    let mut recon = Array1::<f32>::zeros(z.len());
    let mut codes = Vec::with_capacity(quantizers.len());
    let mut residuals = vec![residual.clone()];
    for cb in quantizers {
        let (code, _) = cb.nearest(residual.view());
        let e = cb.entries.row(code);
        recon += &e;
        residual -= &e;
        codes.push(code);
        residuals.push(residual.clone());
    }
    RvqResult {
        codes,
        recon,
        residuals,
    }
}

/// Σ_k ‖sg(e_k) − z_k‖² + ‖e_k − sg(z_k)‖² with its two stop-gradient
/// paths: `grad_z` flows through the first term only, `grad_e` through the
/// second only.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitmentLoss {
    pub loss: f64,
    pub grad_z: Vec<Array1<f64>>,
    pub grad_e: Vec<Array1<f64>>,
}

pub fn commitment_loss(z_per_layer: &[Array1<f64>], e_per_layer: &[Array1<f64>]) -> Result<CommitmentLoss> {
    if z_per_layer.len() != e_per_layer.len() {
        return Err(Error::Shape(format!(
            "{} latents vs {} codebook entries",
            z_per_layer.len(),
            e_per_layer.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad_z = Vec::new();
    let mut grad_e = Vec::new();
    for (z, e) in z_per_layer.iter().zip(e_per_layer) {
        if z.len() != e.len() {
            return Err(Error::Shape("latent/entry dimension mismatch".into()));
        }
        let diff = z - e;
        let sq = diff.dot(&diff);
        loss += sq + sq;
        grad_z.push(&diff * 2.0);
        grad_e.push(&diff * -2.0);
    }
    Ok(CommitmentLoss { loss, grad_z, grad_e })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqBranch {
    pub branch: Branch,
    /// Frozen encoder `z = W x + b`, W is D_q×D_f.
    pub encoder_w: Array2<f32>,
    pub encoder_b: Array1<f32>,
    pub quantizers: Vec<Codebook>,
}

impl RvqBranch {
    pub fn encode(&self, x: ArrayView1<f32>) -> Array1<f32> {
        self.encoder_w.dot(&x) + &self.encoder_b
    }

    pub fn encode_frames(&self, frames: ArrayView2<f32>) -> Array2<f32> {
        frames.dot(&self.encoder_w.t()) + &self.encoder_b
    }

    pub fn quantize(&self, z: ArrayView1<f32>) -> RvqResult {
        rvq_quantize(z, &self.quantizers)
    }

    pub fn reconstruct(&self, codes: &[u32]) -> Array1<f32> {
        let mut out = Array1::zeros(self.encoder_b.len());
        for (cb, &c) in self.quantizers.iter().zip(codes) {
            out += &cb.entries.row(c as usize);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub encoder_seed: u64,
    pub init_seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codebook_size: 64,
            latent_dim: 16,
            feature_dim: 16,
            encoder_seed: 0xE7C0_DE,
            init_seed: 0x1717,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    /// Accompaniment branch first, then vocal.
    pub branches: [RvqBranch; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub dead_after: u64,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            steps: 1000,
            batch_size: 128,
            lr: 0.4,
            dead_after: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenizerTrainReport {
    pub losses: Vec<f64>,
    pub reseeded: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenizerManifest {
    config: TokenizerConfig,
    streams: usize,
    layers_per_branch: usize,
    branch_order: Vec<Branch>,
    usage_counts: Vec<Vec<u64>>,
}

impl Tokenizer {
    /// Seeded encoders and Gaussian codebooks.
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        if config.codebook_size < 2 {
            return Err(Error::Config {
                field: "tokenizer.codebook_size".into(),
                detail: "must be at least 2".into(),
            });
        }
        if config.latent_dim == 0 || config.feature_dim == 0 {
            return Err(Error::Config {
                field: "tokenizer.latent_dim".into(),
                detail: "dimensions must be positive".into(),
            });
        }
        let make = |branch: Branch| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.encoder_seed, branch as u64));
            let w_std = (1.0 / config.feature_dim as f64).sqrt();
            let wn = Normal::new(0.0, w_std).unwrap();
            let bn = Normal::new(0.0, 0.1).unwrap();
            let encoder_w = Array2::from_shape_fn((config.latent_dim, config.feature_dim), |_| {
                wn.sample(&mut rng) as f32
            });
            let encoder_b = Array1::from_shape_fn(config.latent_dim, |_| bn.sample(&mut rng) as f32);
            let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(config.init_seed, 10 + branch as u64));
            let quantizers = (0..LAYERS_PER_BRANCH)
                .map(|layer| {
                    let std = if layer == 0 { 1.0 } else { 0.1 };
                    let n = Normal::new(0.0, std).unwrap();
                    Codebook {
                        entries: Array2::from_shape_fn((config.codebook_size, config.latent_dim), |_| {
                            n.sample(&mut crng) as f32
                        }),
                        usage_counts: vec![0; config.codebook_size],
                    }
                })
                .collect();
            RvqBranch {
                branch,
                encoder_w,
                encoder_b,
                quantizers,
            }
        };
        Ok(Tokenizer {
            branches: [make(Branch::Accompaniment), make(Branch::Vocal)],
            config,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn branch(&self, b: Branch) -> &RvqBranch {
        &self.branches[b as usize]
    }

    /// Re-initializes codebooks from encoded corpus frames: layer 0 from
    /// random latents, layer 1 from the residuals they leave.
    pub fn init_from_corpus(&mut self, corpus: &Corpus, seed: u64) -> Result<()> {
        let frames = sample_frames(corpus, self.config.codebook_size * 4, seed)?;
        for (bi, branch) in self.branches.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + bi as u64));
            let latents: Vec<Array1<f32>> = frames
                .iter()
                .map(|&(s, t)| {
                    let song = &corpus.songs[s];
                    let x = if bi == 0 {
                        song.accomp_frames.row(t)
                    } else {
                        song.vocal_frames.row(t)
                    };
                    branch.encode(x)
                })
                .collect();
            let mut residuals = latents;
            for layer in 0..LAYERS_PER_BRANCH {
                let c = branch.quantizers[layer].size();
                for i in 0..c {
                    let pick = rng.random_range(0..residuals.len());
                    branch.quantizers[layer].entries.row_mut(i).assign(&residuals[pick]);
                }
                branch.quantizers[layer].usage_counts.fill(0);
                let cb = branch.quantizers[layer].clone();
                for r in residuals.iter_mut() {
                    let (code, _) = cb.nearest(r.view());
                    *r -= &cb.entries.row(code);
                }
            }
        }
        Ok(())
    }

    pub fn tokenize(&self, vocal: ArrayView2<f32>, accomp: ArrayView2<f32>) -> Result<SemanticTokens> {
        if vocal.nrows() != accomp.nrows() {
            return Err(Error::Shape(format!(
                "vocal has {} frames, accompaniment {}",
                vocal.nrows(),
                accomp.nrows()
            )));
        }
        if vocal.ncols() != self.config.feature_dim || accomp.ncols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "expected feature dim {}",
                self.config.feature_dim
            )));
        }
        let t_len = vocal.nrows();
        let mut out = SemanticTokens::new(STREAMS, 25);
        out.data.reserve(t_len * STREAMS);
        let za = self.branches[0].encode_frames(accomp);
        let zv = self.branches[1].encode_frames(vocal);
        for t in 0..t_len {
            for (branch, z) in self.branches.iter().zip([&za, &zv]) {
                let q = branch.quantize(z.row(t));
                out.data.extend(q.codes.iter().map(|&c| c as u32));
            }
        }
        Ok(out)
    }

    /// Per-frame latent reconstruction of both branches, concatenated
    /// (accompaniment then vocal).
    pub fn reconstruct_frame(&self, row: &[u32]) -> Array1<f32> {
        let a = self.branches[0].reconstruct(&row[0..LAYERS_PER_BRANCH]);
        let v = self.branches[1].reconstruct(&row[LAYERS_PER_BRANCH..STREAMS]);
        ndarray::concatenate(ndarray::Axis(0), &[a.view(), v.view()]).unwrap()
    }

    pub fn train(&mut self, corpus: &Corpus, cfg: &TokenizerTrainConfig) -> Result<TokenizerTrainReport> {
        let mut report = TokenizerTrainReport::default();
        if cfg.steps == 0 {
            return Ok(report);
        }
        if corpus.songs.is_empty() || corpus.songs.iter().all(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("tokenizer training needs a non-empty corpus".into()));
        }
        let c = self.config.codebook_size;
        let dq = self.config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut last_used = vec![vec![vec![0u64; c]; LAYERS_PER_BRANCH]; 2];
        for step in 1..=cfg.steps as u64 {
            let batch = sample_frames_rng(corpus, cfg.batch_size, &mut rng);
            let mut step_loss = 0.0f64;
            for bi in 0..2 {
                let branch = &self.branches[bi];
                let mut grads = vec![Array2::<f32>::zeros((c, dq)); LAYERS_PER_BRANCH];
                let mut used = vec![vec![false; c]; LAYERS_PER_BRANCH];
                let mut layer_inputs: Vec<Vec<Array1<f32>>> = vec![Vec::new(); LAYERS_PER_BRANCH];
                for &(s, t) in &batch {
                    let song = &corpus.songs[s];
                    let x = if bi == 0 {
                        song.accomp_frames.row(t)
                    } else {
                        song.vocal_frames.row(t)
                    };
                    let q = branch.quantize(branch.encode(x).view());
                    for layer in 0..LAYERS_PER_BRANCH {
                        let z = &q.residuals[layer];
                        let code = q.codes[layer];
                        let e = branch.quantizers[layer].entries.row(code);
                        let diff = &e - z;
                        step_loss += 2.0 * diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>();
                        // d/de ‖e − sg(z)‖², averaged over the batch
                        let mut g = grads[layer].row_mut(code);
                        g.scaled_add(2.0 / batch.len() as f32, &diff);
                        used[layer][code] = true;
                        layer_inputs[layer].push(z.clone());
                    }
                }
                let branch = &mut self.branches[bi];
                for layer in 0..LAYERS_PER_BRANCH {
                    let cb = &mut branch.quantizers[layer];
                    cb.entries.scaled_add(-cfg.lr, &grads[layer]);
                    for i in 0..c {
                        if used[layer][i] {
                            cb.usage_counts[i] += 1;
                            last_used[bi][layer][i] = step;
                        } else if step - last_used[bi][layer][i] >= cfg.dead_after {
                            let pick = rng.random_range(0..layer_inputs[layer].len());
                            cb.entries.row_mut(i).assign(&layer_inputs[layer][pick]);
                            last_used[bi][layer][i] = step;
                            report.reseeded += 1;
                        }
                    }
                }
            }
            let loss = step_loss / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("tokenizer commitment loss {loss}"),
                });
            }
            log::debug!("tokenizer step {step} loss {loss:.6}");
            report.losses.push(loss);
        }
        Ok(report)
    }

    /// Mean commitment loss over every frame of the corpus.
    pub fn corpus_loss(&self, corpus: &Corpus) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for song in &corpus.songs {
            for (bi, branch) in self.branches.iter().enumerate() {
                let frames = if bi == 0 { &song.accomp_frames } else { &song.vocal_frames };
                let z = branch.encode_frames(frames.view());
                for row in z.outer_iter() {
                    let q = branch.quantize(row);
                    for layer in 0..LAYERS_PER_BRANCH {
                        let r = &q.residuals[layer + 1];
                        total += 2.0 * r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
                    }
                }
            }
            n += song.len();
        }
        total / n.max(1) as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(TOKENIZER_MAGIC);
        w.json(&TokenizerManifest {
            config: self.config.clone(),
            streams: STREAMS,
            layers_per_branch: LAYERS_PER_BRANCH,
            branch_order: BRANCH_ORDER.to_vec(),
            usage_counts: self
                .branches
                .iter()
                .flat_map(|b| b.quantizers.iter().map(|q| q.usage_counts.clone()))
                .collect(),
        })?;
        for b in &self.branches {
            let w_std = b.encoder_w.as_standard_layout();
            w.f32_blob(&[b.encoder_w.nrows(), b.encoder_w.ncols()], w_std.as_slice().unwrap());
            w.f32_blob(&[b.encoder_b.len()], b.encoder_b.as_slice().unwrap());
            for q in &b.quantizers {
                let e = q.entries.as_standard_layout();
                w.f32_blob(&[q.entries.nrows(), q.entries.ncols()], e.as_slice().unwrap());
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, TOKENIZER_MAGIC)?;
        let m: TokenizerManifest = r.json()?;
        if m.streams != STREAMS || m.layers_per_branch != LAYERS_PER_BRANCH || m.branch_order != BRANCH_ORDER {
            return Err(r.err("unsupported tokenizer layout"));
        }
        let mut usage = m.usage_counts.into_iter();
        let read2 = |r: &mut Reader| -> Result<Array2<f32>> {
            let (shape, data) = r.f32_blob()?;
            if shape.len() != 2 {
                return Err(r.err("expected matrix"));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| r.err(&e.to_string()))
        };
        let mut branches = Vec::new();
        for &branch in &BRANCH_ORDER {
            let encoder_w = read2(&mut r)?;
            let (_, b) = r.f32_blob()?;
            let mut quantizers = Vec::new();
            for _ in 0..LAYERS_PER_BRANCH {
                let entries = read2(&mut r)?;
                let usage_counts = usage.next().unwrap_or_else(|| vec![0; entries.nrows()]);
                quantizers.push(Codebook { entries, usage_counts });
            }
            branches.push(RvqBranch {
                branch,
                encoder_w,
                encoder_b: Array1::from(b),
                quantizers,
            });
        }
        let vocal = branches.pop().unwrap();
        let accomp = branches.pop().unwrap();
        Ok(Tokenizer {
            config: m.config,
            branches: [accomp, vocal],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Tokenizer::from_bytes(&crate::io::read_file(path)?)
    }

    /// Content hash recorded by LM checkpoints.
    pub fn fingerprint(&self) -> String {
        crate::io::sha256_hex(&self.to_bytes().unwrap_or_default())
    }
}

fn sample_frames_rng(corpus: &Corpus, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let nonempty: Vec<usize> = (0..corpus.songs.len()).filter(|&i| !corpus.songs[i].is_empty()).collect();
    (0..n)
        .map(|_| {
            let s = nonempty[rng.random_range(0..nonempty.len())];
            (s, rng.random_range(0..corpus.songs[s].len()))
        })
        .collect()
}

fn sample_frames(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if corpus.songs.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("corpus has no frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_frames_rng(corpus, n, &mut rng))
}

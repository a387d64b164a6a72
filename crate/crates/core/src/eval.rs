//! Desk-scale quality metrics: syllable error rate, a Fréchet distance over
//! decoded frame features, boundary smoothness and edit-region accuracy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Conditioning, Model, Real};
use crate::par::{map_indexed, Exec};
use crate::sampler::continuation_score;
use crate::seqcodec::EditSpec;
use crate::synthcorpus::{Grammar, SynthSong};
use crate::tokenizer::{SemanticTokens, Tokenizer, LAYERS_PER_BRANCH, STREAMS};

pub const COVARIANCE_EPS: f64 = 1e-6;

/// Nearest-template syllable decoder over the vocal branch's latent space.
/// Templates are the encoded clean vocal feature of every syllable in one
/// style, plus the encoded silent frame.
#[derive(Debug, Clone)]
pub struct SyllableDecoder {
    templates: Vec<Array1<f32>>,
    silence: Array1<f32>,
}

impl SyllableDecoder {
    pub fn new(tokenizer: &Tokenizer, grammar: &Grammar, style_seed: u64) -> Self {
        let branch = &tokenizer.branches[1];
        let templates = (0..grammar.config.syllable_vocab as u32)
            .map(|s| branch.encode(Array1::from_vec(grammar.vocal_feature(s, style_seed)).view()))
            .collect();
        let silence = branch.encode(Array1::zeros(grammar.config.feature_dim).view());
        SyllableDecoder { templates, silence }
    }

    /// Syllable (or `None` for silence) closest to a vocal latent.
    pub fn classify(&self, z: &Array1<f32>) -> Option<u32> {
        let dist = |t: &Array1<f32>| (t - z).mapv(|v| v * v).sum();
        let mut best = (dist(&self.silence), None);
        for (i, t) in self.templates.iter().enumerate() {
            let d = dist(t);
            if d < best.0 {
                best = (d, Some(i as u32));
            }
        }
        best.1
    }

    pub fn decode_latents(&self, latents: &[Array1<f32>]) -> Vec<u32> {
        collapse(&latents.iter().map(|z| self.classify(z)).collect::<Vec<_>>())
    }

    pub fn decode_tokens(&self, tokenizer: &Tokenizer, tokens: &SemanticTokens) -> Vec<u32> {
        let latents: Vec<Array1<f32>> = tokens
            .rows()
            .map(|row| tokenizer.branches[1].reconstruct(&row[LAYERS_PER_BRANCH..STREAMS]))
            .collect();
        self.decode_latents(&latents)
    }
}

/// Run-length collapse of a frame-level syllable track; silence separates
/// runs and is dropped.
pub fn collapse(frames: &[Option<u32>]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &f in frames {
        if let Some(s) = f {
            if prev != Some(s) {
                out.push(s);
            }
        }
        prev = f;
    }
    out
}

/// Reference syllable string of frames `[start, end)` of a song, collapsed
/// the same way decoded output is.
pub fn reference_syllables(song: &SynthSong, start: usize, end: usize) -> Vec<u32> {
    collapse(&song.syllable_alignment[start..end])
}

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between decoded and reference syllables over the
/// reference length, capped at 1.
pub fn syllable_error_rate(
    generated: &SemanticTokens,
    reference: &[u32],
    tokenizer: &Tokenizer,
    grammar: &Grammar,
    style_seed: u64,
) -> f64 {
    let hyp = SyllableDecoder::new(tokenizer, grammar, style_seed).decode_tokens(tokenizer, generated);
    error_rate(&hyp, reference)
}

pub fn error_rate(hyp: &[u32], reference: &[u32]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    (edit_distance(hyp, reference) as f64 / reference.len() as f64).min(1.0)
}

/// Mean syllable error rate of re-tokenized ground truth: the best any
/// model output can score through this tokenizer.
pub fn tokenizer_floor(songs: &[&SynthSong], tokenizer: &Tokenizer, grammar: &Grammar, exec: Exec) -> Result<f64> {
    if songs.is_empty() {
        return Err(Error::InvalidArgument("no songs for the tokenizer floor".into()));
    }
    let rates: Vec<Result<f64>> = map_indexed(songs.len(), exec, |i| {
        let s = songs[i];
        let tokens = tokenizer.tokenize(s.vocal_frames.view(), s.accomp_frames.view())?;
        let reference = reference_syllables(s, 0, s.len());
        Ok(syllable_error_rate(&tokens, &reference, tokenizer, grammar, s.style_seed))
    });
    let mut total = 0.0;
    for r in rates {
        total += r?;
    }
    Ok(total / songs.len() as f64)
}

/// Decoded per-frame latents (both branches) of a token grid, one row per
/// frame.
pub fn frame_features(tokenizer: &Tokenizer, tokens: &SemanticTokens) -> Array2<f64> {
    let d = 2 * tokenizer.config.latent_dim;
    let mut out = Array2::zeros((tokens.len(), d));
    for (t, row) in tokens.rows().enumerate() {
        out.row_mut(t).assign(&tokenizer.reconstruct_frame(row).mapv(f64::from));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    pub distance: f64,
    /// A covariance was singular and εI was added to both.
    pub regularized: bool,
}

fn gaussian_fit(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let mut cov = DMatrix::zeros(d, d);
    for r in x.rows() {
        let c = DVector::from_iterator(d, r.iter().zip(&mean).map(|(a, m)| a - m));
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (DVector::from_iterator(d, mean.iter().copied()), cov)
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let scale = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    eig.iter().any(|&v| v <= 1e-12 * scale)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2}) between Gaussian fits of two
/// feature sets (rows are samples). The trace of the square root is taken
/// as tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}), which shares its spectrum.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<FrechetResult> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidArgument("Fréchet distance needs at least 2 frames per set".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature dims {} and {}", a.ncols(), b.ncols())));
    }
    let (m1, mut s1) = gaussian_fit(a);
    let (m2, mut s2) = gaussian_fit(b);
    let regularized = is_singular(&s1) || is_singular(&s2);
    if regularized {
        let eps = DMatrix::identity(s1.nrows(), s1.nrows()) * COVARIANCE_EPS;
        s1 += &eps;
        s2 += &eps;
    }
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let distance = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(FrechetResult {
        distance: distance.max(0.0),
        regularized,
    })
}

/// Fréchet distance between the decoded features of two sets of grids.
pub fn token_dist_distance(
    generated: &[SemanticTokens],
    reference: &[SemanticTokens],
    tokenizer: &Tokenizer,
) -> Result<FrechetResult> {
    let stack = |set: &[SemanticTokens]| -> Result<Array2<f64>> {
        let parts: Vec<Array2<f64>> = set.iter().map(|t| frame_features(tokenizer, t)).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Err(Error::InvalidArgument("empty token set".into()));
        }
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    };
    frechet_distance(&stack(generated)?, &stack(reference)?)
}

/// Mean per-frame log-likelihood of the λ frames after the edit, given the
/// edited song. `None` when nothing follows the edit.
pub fn boundary_smoothness<T: Real>(
    model: &Model<T>,
    cond: &Conditioning,
    full_tokens: &SemanticTokens,
    spec: &EditSpec,
    lambda: usize,
) -> Result<Option<f64>> {
    spec.validate(full_tokens.len())?;
    let pre = full_tokens.slice(0, spec.pre_len());
    let edit = full_tokens.slice(spec.pre_len(), spec.frame_end);
    let post = full_tokens.slice(spec.frame_end, full_tokens.len());
    let lam = lambda.min(post.len());
    Ok(continuation_score(model, cond, &pre, &edit, &post, lam)?.map(|s| s / lam as f64))
}

/// Cell-level agreement between a generated and a true edit segment.
/// Frames present in only one of them count as errors.
pub fn edit_region_accuracy(generated: &SemanticTokens, truth: &SemanticTokens) -> f64 {
    let k = truth.streams;
    let n = generated.len().max(truth.len());
    if n == 0 {
        return 1.0;
    }
    let common = generated.len().min(truth.len());
    let correct = generated.data[..common * k]
        .iter()
        .zip(&truth.data[..common * k])
        .filter(|(a, b)| a == b)
        .count();
    correct as f64 / (n * k) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub syllable_error_rate: Option<f64>,
    pub tokenizer_floor: Option<f64>,
    pub token_dist_distance: Option<f64>,
    pub distance_regularized: bool,
    pub boundary_smoothness: Option<f64>,
    pub edit_region_accuracy: Option<f64>,
    pub metadata: serde_json::Value,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        let rows = [
            ("syllable_error_rate", fmt(self.syllable_error_rate)),
            ("tokenizer_floor", fmt(self.tokenizer_floor)),
            ("token_dist_distance", fmt(self.token_dist_distance)),
            ("distance_regularized", self.distance_regularized.to_string()),
            ("boundary_smoothness", fmt(self.boundary_smoothness)),
            ("edit_region_accuracy", fmt(self.edit_region_accuracy)),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v:>14}\n")).collect()
    }
}

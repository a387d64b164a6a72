use std::ops::{Index, IndexMut};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Real};
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::lyricproc::StructureTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIdx {
    pub norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIdx {
    pub attn: AttnIdx,
    pub cross: Option<AttnIdx>,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderIdx {
    pub source_type: usize,
    pub layers: Vec<LayerIdx>,
    pub norm: usize,
}

/// Names, shapes and indices of every parameter tensor, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    pub stream_emb: Vec<usize>,
    pub lyric_emb: usize,
    pub tag_emb: usize,
    pub bos: usize,
    pub null_style: usize,
    pub null_lyric: usize,
    pub layers: Vec<LayerIdx>,
    pub final_norm: usize,
    pub heads: Vec<usize>,
    pub encoder: Option<EncoderIdx>,
}

struct Alloc {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Alloc {
    fn add(&mut self, name: String, shape: (usize, usize)) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            norm: self.add(format!("{prefix}.norm"), (1, d)),
            wq: self.add(format!("{prefix}.wq"), (d, d)),
            wk: self.add(format!("{prefix}.wk"), (d, d)),
            wv: self.add(format!("{prefix}.wv"), (d, d)),
            wo: self.add(format!("{prefix}.wo"), (d, d)),
        }
    }

    fn layer(&mut self, prefix: &str, d: usize, ff: usize, cross: bool) -> LayerIdx {
        let attn = self.attn(&format!("{prefix}.self"), d);
        let cross = cross.then(|| self.attn(&format!("{prefix}.cross"), d));
        LayerIdx {
            attn,
            cross,
            ffn_norm: self.add(format!("{prefix}.ffn.norm"), (1, d)),
            w_gate: self.add(format!("{prefix}.ffn.w_gate"), (d, ff)),
            w_up: self.add(format!("{prefix}.ffn.w_up"), (d, ff)),
            w_down: self.add(format!("{prefix}.ffn.w_down"), (ff, d)),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let v = cfg.vocab().size();
        let mut a = Alloc {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let stream_emb = (0..cfg.streams).map(|k| a.add(format!("emb.stream{k}"), (v, d))).collect();
        let lyric_emb = a.add("emb.lyric".into(), (cfg.syllable_vocab, d));
        let tag_emb = a.add("emb.tag".into(), (StructureTag::ALL.len(), d));
        let bos = a.add("emb.bos".into(), (1, d));
        let null_style = a.add("emb.null_style".into(), (1, d));
        let null_lyric = a.add("emb.null_lyric".into(), (1, d));
        let layers = (0..cfg.layers)
            .map(|l| a.layer(&format!("dec{l}"), d, cfg.ff_dim, cfg.cross_attention))
            .collect();
        let final_norm = a.add("dec.final_norm".into(), (1, d));
        let heads = (0..cfg.streams).map(|k| a.add(format!("head{k}"), (d, v))).collect();
        let encoder = cfg.cross_attention.then(|| EncoderIdx {
            source_type: a.add("enc.source_type".into(), (3, d)),
            layers: (0..cfg.encoder_layers)
                .map(|l| a.layer(&format!("enc{l}"), d, cfg.ff_dim, false))
                .collect(),
            norm: a.add("enc.final_norm".into(), (1, d)),
        });
        Layout {
            names: a.names,
            shapes: a.shapes,
            stream_emb,
            lyric_emb,
            tag_emb,
            bos,
            null_style,
            null_lyric,
            layers,
            final_norm,
            heads,
            encoder,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn is_norm(&self, i: usize) -> bool {
        self.names[i].ends_with("norm")
    }

    /// Group label used to sample parameters across tensor kinds.
    pub fn group(&self, i: usize) -> &str {
        let n = &self.names[i];
        n.rsplit('.').next().unwrap_or(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Array2<T>>,
}

impl<T> Index<usize> for Params<T> {
    type Output = Array2<T>;
    fn index(&self, i: usize) -> &Array2<T> {
        &self.tensors[i]
    }
}

impl<T> IndexMut<usize> for Params<T> {
    fn index_mut(&mut self, i: usize) -> &mut Array2<T> {
        &mut self.tensors[i]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamManifest {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Params<T> {
    pub fn zeros(layout: &Layout) -> Self {
        Params {
            tensors: layout.shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// Gains start at one; matrices draw from N(0, 0.02²), with output
    /// projections scaled down by sqrt(2·layers).
    pub fn init(layout: &Layout, cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let base = Normal::new(0.0f64, 0.02).unwrap();
        let out_scale = 1.0 / ((2 * cfg.layers.max(1)) as f64).sqrt();
        let tensors = layout
            .shapes
            .iter()
            .enumerate()
            .map(|(i, &shape)| {
                if layout.is_norm(i) {
                    Array2::ones(shape)
                } else {
                    let n = &layout.names[i];
                    let scale = if n.ends_with(".wo") || n.ends_with(".w_down") { out_scale } else { 1.0 };
                    Array2::from_shape_simple_fn(shape, || T::from_f64(base.sample(&mut rng) * scale).unwrap())
                }
            })
            .collect();
        Params { tensors }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn write(&self, w: &mut Writer, layout: &Layout) -> Result<()> {
        w.json(&ParamManifest {
            names: layout.names.clone(),
            shapes: layout.shapes.clone(),
        })?;
        for t in &self.tensors {
            let data: Vec<f32> = t.iter().map(|v| v.to_f32().unwrap()).collect();
            w.f32_blob(&[t.nrows(), t.ncols()], &data);
        }
        Ok(())
    }

    pub fn read(r: &mut Reader, layout: &Layout) -> Result<Self> {
        let m: ParamManifest = r.json()?;
        if m.names != layout.names || m.shapes != layout.shapes {
            return Err(r.err("parameter manifest does not match model config"));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for (i, &(rows, cols)) in layout.shapes.iter().enumerate() {
            r.record = i;
            let (shape, data) = r.f32_blob()?;
            if shape != [rows, cols] {
                return Err(r.err(&format!("tensor {} has shape {shape:?}", layout.names[i])));
            }
            let data = data.into_iter().map(|v| T::from_f32(v).unwrap()).collect();
            tensors.push(Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))?);
        }
        Ok(Params { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_and_optional_encoder() {
        let cfg = ModelConfig::default();
        let l = Layout::new(&cfg);
        let p = Params::<f32>::init(&l, &cfg);
        let (d, f, v) = (128, 512, 67);
        let per_attn = d + 4 * d * d;
        let per_layer = |cross: bool| per_attn * if cross { 2 } else { 1 } + d + 3 * d * f;
        let expected = 4 * v * d + 32 * d + 6 * d + 3 * d
            + 4 * per_layer(true)
            + d
            + 4 * d * v
            + 3 * d
            + 2 * per_layer(false)
            + d;
        assert_eq!(p.count(), expected);
        let no_cross = ModelConfig {
            cross_attention: false,
            ..cfg
        };
        let l2 = Layout::new(&no_cross);
        assert!(l2.encoder.is_none());
        assert!(l2.layers.iter().all(|x| x.cross.is_none()));
        assert!(p.all_finite());
    }

    #[test]
    fn params_roundtrip() {
        let cfg = ModelConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            ..Default::default()
        };
        let l = Layout::new(&cfg);
        let p = Params::<f32>::init(&l, &cfg);
        let mut w = Writer::new(b"TESTPARM");
        p.write(&mut w, &l).unwrap();
        let mut r = Reader::new(&w.buf, b"TESTPARM").unwrap();
        assert_eq!(Params::<f32>::read(&mut r, &l).unwrap(), p);
        let other = Layout::new(&ModelConfig { ff_dim: 48, ..cfg });
        let mut r = Reader::new(&w.buf, b"TESTPARM").unwrap();
        assert!(Params::<f32>::read(&mut r, &other).is_err());
    }
}

use ndarray::{s, Array1, Array2, Array3, Zip};

use super::ops::{attention, attention_backward, rmsnorm, rmsnorm_backward, silu, silu_grad, Rope};
use super::params::{LayerIdx, Layout, Params};
use super::{Conditioning, ModelConfig, Real, SourceCondition, SourceKind};
use crate::error::{Error, Result};

/// Embedding recipe for one sequence row: the sum of the listed
/// `(tensor, row)` entries.
pub(crate) type RowSpec = Vec<(usize, usize)>;

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Params<T>,
    pub(crate) rope: Rope,
}

pub(crate) struct CrossIn<'a, T> {
    pub memory: &'a Array2<T>,
    pub qpos: &'a [usize],
    pub mpos: &'a [usize],
}

#[derive(Debug, Clone)]
struct CrossTape<T> {
    inv: Array1<T>,
    h: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    att: Array2<T>,
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    x: Array2<T>,
    inv1: Array1<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    att: Array2<T>,
    x2: Array2<T>,
    cross: Option<CrossTape<T>>,
    x3: Array2<T>,
    inv3: Array1<T>,
    h3: Array2<T>,
    ag: Array2<T>,
    bu: Array2<T>,
    m: Array2<T>,
}

#[derive(Debug, Clone)]
struct EncTape<T> {
    spec: Vec<RowSpec>,
    pos: Vec<usize>,
    layers: Vec<LayerTape<T>>,
    pre_norm: Array2<T>,
    inv: Array1<T>,
    out: Array2<T>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    spec: Vec<RowSpec>,
    pub prefix_len: usize,
    self_pos: Vec<usize>,
    cross_pos: Vec<usize>,
    layers: Vec<LayerTape<T>>,
    pre_final: Array2<T>,
    final_inv: Array1<T>,
    hsel: Array2<T>,
    memory: Option<EncTape<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = Params::init(&layout, &config);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.tensors.len() != layout.len()
            || params.tensors.iter().zip(&layout.shapes).any(|(t, &s)| t.dim() != s)
        {
            return Err(Error::Shape("parameters do not match model config".into()));
        }
        let rope = Rope::new(config.head_dim(), config.rope_theta, config.max_sequence.max(4096));
        Ok(Model {
            config,
            layout,
            params,
            rope,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            rope: self.rope.clone(),
        }
    }

    fn check_id(&self, id: u32) -> Result<()> {
        let v = self.config.vocab().size();
        if (id as usize) < v {
            Ok(())
        } else {
            Err(Error::IdOutOfRange { id, vocab: v })
        }
    }

    pub(crate) fn token_row_spec(&self, row: &[u32]) -> Result<RowSpec> {
        if row.len() != self.config.streams {
            return Err(Error::Shape(format!(
                "token row has {} streams, model expects {}",
                row.len(),
                self.config.streams
            )));
        }
        row.iter()
            .enumerate()
            .map(|(k, &id)| {
                self.check_id(id)?;
                Ok((self.layout.stream_emb[k], id as usize))
            })
            .collect()
    }

    pub(crate) fn prefix_specs(&self, cond: &Conditioning) -> Result<Vec<RowSpec>> {
        let l = &self.layout;
        let mut spec = vec![vec![(l.bos, 0)]];
        if let Some(style) = &cond.style {
            for r in 0..style.len() {
                if cond.drop_style {
                    spec.push(vec![(l.null_style, 0)]);
                } else {
                    spec.push(self.token_row_spec(style.row(r))?);
                }
            }
        }
        for tok in &cond.lyrics {
            if cond.drop_lyrics {
                spec.push(vec![(l.null_lyric, 0)]);
                continue;
            }
            let mut row = vec![(l.tag_emb, tok.tag.index())];
            if let Some(sym) = tok.symbol {
                if sym as usize >= self.config.syllable_vocab {
                    return Err(Error::IdOutOfRange {
                        id: sym,
                        vocab: self.config.syllable_vocab,
                    });
                }
                row.push((l.lyric_emb, sym as usize));
            }
            spec.push(row);
        }
        Ok(spec)
    }

    fn source_specs(&self, src: &SourceCondition) -> Result<Vec<RowSpec>> {
        src.validate()?;
        let enc = self
            .layout
            .encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no source encoder".into()))?;
        match &src.tokens {
            None => Ok(vec![vec![(enc.source_type, SourceKind::None.index())]]),
            Some(t) => (0..t.len())
                .map(|i| {
                    let mut spec = self.token_row_spec(t.row(i))?;
                    spec.push((enc.source_type, src.kind.index()));
                    Ok(spec)
                })
                .collect(),
        }
    }

    pub(crate) fn gather(&self, spec: &[RowSpec]) -> Array2<T> {
        let mut x = Array2::zeros((spec.len(), self.config.model_dim));
        for (i, parts) in spec.iter().enumerate() {
            let mut row = x.row_mut(i);
            for &(t, r) in parts {
                row += &self.params[t].row(r);
            }
        }
        x
    }

    fn scatter(grads: &mut Params<T>, spec: &[RowSpec], dx: &Array2<T>) {
        for (i, parts) in spec.iter().enumerate() {
            for &(t, r) in parts {
                let mut row = grads[t].row_mut(r);
                row += &dx.row(i);
            }
        }
    }

    /// Embedding of one frame of K ids: the sum of the per-stream
    /// embeddings. Positions enter only through the rotary phases.
    pub fn embed_step(&self, row: &[u32]) -> Result<Array1<T>> {
        let spec = self.token_row_spec(row)?;
        Ok(self.gather(&[spec]).row(0).to_owned())
    }

    fn layer_forward(
        &self,
        li: &LayerIdx,
        x: Array2<T>,
        pos: &[usize],
        causal: bool,
        cross: Option<&CrossIn<'_, T>>,
    ) -> (Array2<T>, LayerTape<T>) {
        let p = &self.params;
        let heads = self.config.heads;
        let a = &li.attn;
        let (h1, inv1) = rmsnorm(x.view(), &p[a.norm]);
        let mut q = h1.dot(&p[a.wq]);
        let mut k = h1.dot(&p[a.wk]);
        let v = h1.dot(&p[a.wv]);
        self.rope.apply(&mut q, pos, false);
        self.rope.apply(&mut k, pos, false);
        let (att, probs) = attention(&q, &k, &v, heads, causal);
        let x2 = &x + &att.dot(&p[a.wo]);
        let (x3, cross_tape) = match (&li.cross, cross) {
            (Some(c), Some(ci)) => {
                let (h, inv) = rmsnorm(x2.view(), &p[c.norm]);
                let mut cq = h.dot(&p[c.wq]);
                let mut ck = ci.memory.dot(&p[c.wk]);
                let cv = ci.memory.dot(&p[c.wv]);
                self.rope.apply(&mut cq, ci.qpos, false);
                self.rope.apply(&mut ck, ci.mpos, false);
                let (catt, cprobs) = attention(&cq, &ck, &cv, heads, false);
                let x3 = &x2 + &catt.dot(&p[c.wo]);
                (
                    x3,
                    Some(CrossTape {
                        inv,
                        h,
                        q: cq,
                        k: ck,
                        v: cv,
                        probs: cprobs,
                        att: catt,
                    }),
                )
            }
            _ => (x2.clone(), None),
        };
        let (h3, inv3) = rmsnorm(x3.view(), &p[li.ffn_norm]);
        let ag = h3.dot(&p[li.w_gate]);
        let bu = h3.dot(&p[li.w_up]);
        let mut m = ag.mapv(silu);
        m *= &bu;
        let out = &x3 + &m.dot(&p[li.w_down]);
        (
            out,
            LayerTape {
                x,
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                att,
                x2,
                cross: cross_tape,
                x3,
                inv3,
                h3,
                ag,
                bu,
                m,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        li: &LayerIdx,
        t: &LayerTape<T>,
        dout: Array2<T>,
        g: &mut Params<T>,
        pos: &[usize],
        cross: Option<(&CrossIn<'_, T>, &mut Array2<T>)>,
    ) -> Array2<T> {
        let p = &self.params;
        g[li.w_down] += &t.m.t().dot(&dout);
        let dm = dout.dot(&p[li.w_down].t());
        let mut dag = t.ag.mapv(silu_grad);
        Zip::from(&mut dag).and(&dm).and(&t.bu).for_each(|a, &d, &b| *a = *a * d * b);
        let mut dbu = t.ag.mapv(silu);
        dbu *= &dm;
        g[li.w_gate] += &t.h3.t().dot(&dag);
        g[li.w_up] += &t.h3.t().dot(&dbu);
        let dh3 = dag.dot(&p[li.w_gate].t()) + dbu.dot(&p[li.w_up].t());
        let (dxn, dgn) = rmsnorm_backward(t.x3.view(), &p[li.ffn_norm], &t.inv3, &dh3);
        g[li.ffn_norm] += &dgn;
        let dx3 = dout + dxn;

        let dx2 = match (&li.cross, &t.cross, cross) {
            (Some(c), Some(ct), Some((ci, dmem))) => {
                g[c.wo] += &ct.att.t().dot(&dx3);
                let datt = dx3.dot(&p[c.wo].t());
                let (mut dq, mut dk, dv) = attention_backward(&ct.q, &ct.k, &ct.v, &ct.probs, &datt);
                self.rope.apply(&mut dq, ci.qpos, true);
                self.rope.apply(&mut dk, ci.mpos, true);
                g[c.wq] += &ct.h.t().dot(&dq);
                g[c.wk] += &ci.memory.t().dot(&dk);
                g[c.wv] += &ci.memory.t().dot(&dv);
                *dmem += &dk.dot(&p[c.wk].t());
                *dmem += &dv.dot(&p[c.wv].t());
                let dh = dq.dot(&p[c.wq].t());
                let (dxc, dgc) = rmsnorm_backward(t.x2.view(), &p[c.norm], &ct.inv, &dh);
                g[c.norm] += &dgc;
                dx3 + dxc
            }
            _ => dx3,
        };

        let a = &li.attn;
        g[a.wo] += &t.att.t().dot(&dx2);
        let datt = dx2.dot(&p[a.wo].t());
        let (mut dq, mut dk, dv) = attention_backward(&t.q, &t.k, &t.v, &t.probs, &datt);
        self.rope.apply(&mut dq, pos, true);
        self.rope.apply(&mut dk, pos, true);
        g[a.wq] += &t.h1.t().dot(&dq);
        g[a.wk] += &t.h1.t().dot(&dk);
        g[a.wv] += &t.h1.t().dot(&dv);
        let dh1 = dq.dot(&p[a.wq].t()) + dk.dot(&p[a.wk].t()) + dv.dot(&p[a.wv].t());
        let (dxa, dga) = rmsnorm_backward(t.x.view(), &p[a.norm], &t.inv1, &dh1);
        g[a.norm] += &dga;
        dx2 + dxa
    }

    fn encode_tape(&self, src: &SourceCondition) -> Result<EncTape<T>> {
        let spec = self.source_specs(src)?;
        let enc = self.layout.encoder.as_ref().expect("checked in source_specs");
        let pos: Vec<usize> = (0..spec.len()).collect();
        let mut x = self.gather(&spec);
        let mut layers = Vec::with_capacity(enc.layers.len());
        for li in &enc.layers {
            let (y, t) = self.layer_forward(li, x, &pos, false, None);
            layers.push(t);
            x = y;
        }
        let (out, inv) = rmsnorm(x.view(), &self.params[enc.norm]);
        Ok(EncTape {
            spec,
            pos,
            layers,
            pre_norm: x,
            inv,
            out,
        })
    }

    /// Memory rows for cross-attention: one per source frame, or a single
    /// row for the no-source condition.
    pub fn multi_source_encode(&self, src: &SourceCondition) -> Result<Array2<T>> {
        Ok(self.encode_tape(src)?.out)
    }

    /// Logits for token rows `0..=R`, where `rows` holds R input rows
    /// (row-major, K ids each) with their stream-0 frame indices. Output
    /// row j is the prediction made after the prefix and input rows `< j`.
    pub fn forward(&self, cond: &Conditioning, rows: &[u32], frames: &[usize]) -> Result<Array3<T>> {
        Ok(self.forward_tape(cond, rows, frames, None)?.0)
    }

    /// Forward pass keeping activations. `memory_override` replaces the
    /// encoder output (used to probe the cross-attention path).
    pub fn forward_tape(
        &self,
        cond: &Conditioning,
        rows: &[u32],
        frames: &[usize],
        memory_override: Option<&Array2<T>>,
    ) -> Result<(Array3<T>, Tape<T>)> {
        let k = self.config.streams;
        if !rows.len().is_multiple_of(k) {
            return Err(Error::Shape(format!("{} ids do not form rows of {k}", rows.len())));
        }
        let r_in = rows.len() / k;
        if frames.len() != r_in {
            return Err(Error::Shape(format!("{} frame indices for {r_in} rows", frames.len())));
        }
        let mut spec = self.prefix_specs(cond)?;
        let plen = spec.len();
        for row in rows.chunks(k) {
            spec.push(self.token_row_spec(row)?);
        }
        let n = spec.len();
        if n > self.config.max_sequence {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_sequence,
            });
        }
        let mut memory = if self.config.cross_attention {
            Some(self.encode_tape(&cond.source)?)
        } else {
            if cond.source.kind != SourceKind::None {
                return Err(Error::InvalidArgument(
                    "source condition given to a model without cross-attention".into(),
                ));
            }
            None
        };
        if let (Some(m), Some(o)) = (memory.as_mut(), memory_override) {
            if o.dim() != m.out.dim() {
                return Err(Error::Shape("memory override shape mismatch".into()));
            }
            m.out = o.clone();
        }
        let self_pos: Vec<usize> = (0..n).collect();
        let mut cross_pos = vec![0usize; plen];
        cross_pos.extend_from_slice(frames);

        let mut x = self.gather(&spec);
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for li in &self.layout.layers {
            let ci = memory.as_ref().map(|m| CrossIn {
                memory: &m.out,
                qpos: &cross_pos,
                mpos: &m.pos,
            });
            let (y, t) = self.layer_forward(li, x, &self_pos, true, ci.as_ref());
            layers.push(t);
            x = y;
        }
        let (y, final_inv) = rmsnorm(x.view(), &self.params[self.layout.final_norm]);
        let hsel = y.slice(s![plen - 1.., ..]).to_owned();
        let logits = self.project(&hsel);
        Ok((
            logits,
            Tape {
                spec,
                prefix_len: plen,
                self_pos,
                cross_pos,
                layers,
                pre_final: x,
                final_inv,
                hsel,
                memory,
            },
        ))
    }

    /// Per-stream output heads over final hidden rows: rows×K×V.
    pub(crate) fn project(&self, h: &Array2<T>) -> Array3<T> {
        let k = self.config.streams;
        let v = self.config.vocab().size();
        let mut logits = Array3::zeros((h.nrows(), k, v));
        for (s, &hi) in self.layout.heads.iter().enumerate() {
            logits.slice_mut(s![.., s, ..]).assign(&h.dot(&self.params[hi]));
        }
        logits
    }

    pub fn backward(&self, tape: &Tape<T>, dlogits: &Array3<T>) -> Params<T> {
        let mut g = Params::zeros(&self.layout);
        let d = self.config.model_dim;
        let mut dh = Array2::zeros(tape.hsel.raw_dim());
        for (s, &hi) in self.layout.heads.iter().enumerate() {
            let dl = dlogits.slice(s![.., s, ..]);
            g[hi] += &tape.hsel.t().dot(&dl);
            dh += &dl.dot(&self.params[hi].t());
        }
        let n = tape.spec.len();
        let mut dy = Array2::zeros((n, d));
        dy.slice_mut(s![tape.prefix_len - 1.., ..]).assign(&dh);
        let fnorm = self.layout.final_norm;
        let (mut dx, dg) = rmsnorm_backward(tape.pre_final.view(), &self.params[fnorm], &tape.final_inv, &dy);
        g[fnorm] += &dg;

        let mut dmem = tape.memory.as_ref().map(|m| Array2::zeros(m.out.raw_dim()));
        for (li, lt) in self.layout.layers.iter().zip(&tape.layers).rev() {
            let ci = tape.memory.as_ref().map(|m| CrossIn {
                memory: &m.out,
                qpos: &tape.cross_pos,
                mpos: &m.pos,
            });
            let cross = ci.as_ref().zip(dmem.as_mut());
            dx = self.layer_backward(li, lt, dx, &mut g, &tape.self_pos, cross);
        }
        Self::scatter(&mut g, &tape.spec, &dx);

        if let (Some(m), Some(dmem), Some(enc)) = (&tape.memory, dmem, &self.layout.encoder) {
            let (mut dx, dg) = rmsnorm_backward(m.pre_norm.view(), &self.params[enc.norm], &m.inv, &dmem);
            g[enc.norm] += &dg;
            for (li, lt) in enc.layers.iter().zip(&m.layers).rev() {
                dx = self.layer_backward(li, lt, dx, &mut g, &m.pos, None);
            }
            Self::scatter(&mut g, &m.spec, &dx);
        }
        g
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::super::{Conditioning, LyricToken};
    use super::*;
    use crate::lyricproc::StructureTag;
    use crate::tokenizer::SemanticTokens;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_config(cross: bool) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ff_dim: 24,
            codebook_size: 8,
            syllable_vocab: 6,
            cross_attention: cross,
            encoder_layers: 1,
            max_sequence: 128,
            init_seed: 3,
            ..Default::default()
        }
    }

    pub(crate) fn rand_grid(rng: &mut ChaCha8Rng, t: usize, c: u32) -> SemanticTokens {
        let mut g = SemanticTokens::new(4, 25);
        g.data = (0..t * 4).map(|_| rng.random_range(0..c)).collect();
        g
    }

    pub(crate) fn toy_cond(rng: &mut ChaCha8Rng, kind: SourceKind) -> Conditioning {
        let lyrics = vec![
            LyricToken {
                symbol: Some(2),
                tag: StructureTag::Verse,
            },
            LyricToken {
                symbol: None,
                tag: StructureTag::Inst,
            },
            LyricToken {
                symbol: Some(5),
                tag: StructureTag::Chorus,
            },
        ];
        let source = match kind {
            SourceKind::None => SourceCondition::none(),
            k => SourceCondition::new(k, Some(rand_grid(rng, 6, 8))).unwrap(),
        };
        Conditioning::new(Some(rand_grid(rng, 2, 8)), lyrics, source)
    }

    #[test]
    fn embed_step_is_additive() {
        let m = Model::<f64>::new(toy_config(false)).unwrap();
        let pad = m.config.vocab().pad();
        let l = &m.layout;
        let e = m.embed_step(&[1, 3, pad, pad]).unwrap();
        let expected = &m.params[l.stream_emb[0]].row(1)
            + &m.params[l.stream_emb[1]].row(3)
            + m.params[l.stream_emb[2]].row(pad as usize)
            + m.params[l.stream_emb[3]].row(pad as usize);
        assert_eq!(e, expected);
        assert_ne!(m.embed_step(&[1, 3, 0, 0]).unwrap(), m.embed_step(&[3, 1, 0, 0]).unwrap());
        assert!(matches!(m.embed_step(&[99, 0, 0, 0]), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn encoder_shapes_and_gating() {
        let m = Model::<f64>::new(toy_config(true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.multi_source_encode(&SourceCondition::none()).unwrap().dim(), (1, 16));
        let g = rand_grid(&mut rng, 40, 8);
        let v = m
            .multi_source_encode(&SourceCondition::new(SourceKind::Vocal, Some(g.clone())).unwrap())
            .unwrap();
        let a = m
            .multi_source_encode(&SourceCondition::new(SourceKind::Accompaniment, Some(g)).unwrap())
            .unwrap();
        assert_eq!(v.dim(), (40, 16));
        assert_ne!(v, a);
        let bad = SourceCondition {
            kind: SourceKind::None,
            tokens: Some(rand_grid(&mut rng, 2, 8)),
        };
        assert!(m.multi_source_encode(&bad).is_err());
    }

    #[test]
    fn causality_probe() {
        let m = Model::<f64>::new(toy_config(true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cond = toy_cond(&mut rng, SourceKind::Vocal);
        let rows = rand_grid(&mut rng, 8, 11);
        let frames: Vec<usize> = (0..8).collect();
        let base = m.forward(&cond, &rows.data, &frames).unwrap();
        assert_eq!(base.dim(), (9, 4, 11));
        for j in 0..8 {
            let mut pert = rows.clone();
            pert.data[j * 4 + rng.random_range(0..4)] = (pert.data[j * 4] + 1) % 11;
            let out = m.forward(&cond, &pert.data, &frames).unwrap();
            for i in 0..=j {
                assert_eq!(out.slice(s![i, .., ..]), base.slice(s![i, .., ..]), "row {i} saw row {j}");
            }
            assert_ne!(out.slice(s![j + 1, .., ..]), base.slice(s![j + 1, .., ..]));
        }
    }

    #[test]
    fn cross_attention_ablation() {
        let with = Model::<f64>::new(toy_config(true)).unwrap();
        let mut without = Model::<f64>::new(toy_config(false)).unwrap();
        // copy shared decoder weights by name
        for (i, name) in without.layout.names.clone().iter().enumerate() {
            let j = with.layout.names.iter().position(|n| n == name).unwrap();
            without.params[i] = with.params[j].clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cond = toy_cond(&mut rng, SourceKind::None);
        let rows = rand_grid(&mut rng, 5, 11);
        let frames: Vec<usize> = (10..15).collect();
        let zero = Array2::zeros((1, 16));
        let (a, _) = with.forward_tape(&cond, &rows.data, &frames, Some(&zero)).unwrap();
        let b = without.forward(&cond, &rows.data, &frames).unwrap();
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let plain = with.forward(&cond, &rows.data, &frames).unwrap();
        assert_eq!(plain.dim(), b.dim());
    }

    #[test]
    fn overlong_and_bad_source() {
        let m = Model::<f64>::new(ModelConfig {
            max_sequence: 8,
            ..toy_config(false)
        })
        .unwrap();
        let cond = Conditioning::new(None, vec![], SourceCondition::none());
        let rows = vec![0u32; 4 * 8];
        assert!(matches!(
            m.forward(&cond, &rows, &[0; 8]),
            Err(Error::SequenceTooLong { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = toy_cond(&mut rng, SourceKind::Vocal);
        assert!(m.forward(&c, &rows[..8], &[0, 1]).is_err());
    }

    /// Central differences on f64 against backprop over parameters drawn
    /// from every tensor.
    #[test]
    fn gradient_matches_finite_differences() {
        let m = Model::<f64>::new(toy_config(true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cond = toy_cond(&mut rng, SourceKind::Accompaniment);
        let rows = rand_grid(&mut rng, 6, 11);
        let frames: Vec<usize> = (0..6).collect();
        let w = Array3::from_shape_fn((7, 4, 11), |_| rng.random_range(-1.0..1.0));
        let objective = |model: &Model<f64>| (model.forward(&cond, &rows.data, &frames).unwrap() * &w).sum();
        let (_, tape) = m.forward_tape(&cond, &rows.data, &frames, None).unwrap();
        let g = m.backward(&tape, &w);
        let mut checked = 0;
        for t in 0..m.layout.len() {
            for _ in 0..2 {
                let (r, c) = m.layout.shapes[t];
                let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
                let analytic = g[t][[i, j]];
                let h = 1e-5;
                let mut mp = m.clone();
                mp.params[t][[i, j]] += h;
                let mut mm = m.clone();
                mm.params[t][[i, j]] -= h;
                let numeric = (objective(&mp) - objective(&mm)) / (2.0 * h);
                if analytic.abs() < 1e-9 && numeric.abs() < 1e-9 {
                    continue;
                }
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                assert!(rel < 1e-3, "{} [{i},{j}]: {analytic} vs {numeric}", m.layout.names[t]);
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }
}

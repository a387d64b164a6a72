//! Incremental decoding with cached keys and values.

use ndarray::{Array2, Zip};

use super::model::Model;
use super::ops::{attention, rmsnorm, silu};
use super::{Conditioning, Real, SourceKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    /// Rows consumed so far, prefix included.
    pub pos: usize,
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    cross: Vec<Option<(Array2<T>, Array2<T>)>>,
    /// Prediction for the next token row (K×V).
    pub logits: Array2<T>,
}

impl<T: Real> Model<T> {
    /// Encodes the source, precomputes cross-attention keys and values, and
    /// consumes the conditioning prefix.
    pub fn start(&self, cond: &Conditioning) -> Result<DecoderState<T>> {
        let d = self.config.model_dim;
        let memory = if self.config.cross_attention {
            Some(self.multi_source_encode(&cond.source)?)
        } else {
            if cond.source.kind != SourceKind::None {
                return Err(Error::InvalidArgument(
                    "source condition given to a model without cross-attention".into(),
                ));
            }
            None
        };
        let cross = self
            .layout
            .layers
            .iter()
            .map(|li| match (&li.cross, &memory) {
                (Some(c), Some(m)) => {
                    let mut k = m.dot(&self.params[c.wk]);
                    let v = m.dot(&self.params[c.wv]);
                    let pos: Vec<usize> = (0..m.nrows()).collect();
                    self.rope.apply(&mut k, &pos, false);
                    Some((k, v))
                }
                _ => None,
            })
            .collect();
        let n = self.layout.layers.len();
        let mut state = DecoderState {
            pos: 0,
            keys: vec![Array2::zeros((0, d)); n],
            values: vec![Array2::zeros((0, d)); n],
            cross,
            logits: Array2::zeros((0, 0)),
        };
        let spec = self.prefix_specs(cond)?;
        let x = self.gather(&spec);
        for r in 0..x.nrows() {
            self.step(&mut state, x.row(r).to_owned().insert_axis(ndarray::Axis(0)), 0)?;
        }
        Ok(state)
    }

    /// Consumes one token row at song frame `frame`; returns the next
    /// prediction (also kept in `state.logits`).
    pub fn feed<'s>(&self, state: &'s mut DecoderState<T>, row: &[u32], frame: usize) -> Result<&'s Array2<T>> {
        let spec = self.token_row_spec(row)?;
        let x = self.gather(&[spec]);
        self.step(state, x, frame)?;
        Ok(&state.logits)
    }

    fn step(&self, state: &mut DecoderState<T>, mut x: Array2<T>, frame: usize) -> Result<()> {
        if state.pos + 1 > self.config.max_sequence {
            return Err(Error::SequenceTooLong {
                len: state.pos + 1,
                max: self.config.max_sequence,
            });
        }
        let p = &self.params;
        let heads = self.config.heads;
        let pos = [state.pos];
        for (l, li) in self.layout.layers.iter().enumerate() {
            let a = &li.attn;
            let (h1, _) = rmsnorm(x.view(), &p[a.norm]);
            let mut q = h1.dot(&p[a.wq]);
            let mut k = h1.dot(&p[a.wk]);
            let v = h1.dot(&p[a.wv]);
            self.rope.apply(&mut q, &pos, false);
            self.rope.apply(&mut k, &pos, false);
            state.keys[l].push_row(k.row(0)).map_err(|e| Error::Shape(e.to_string()))?;
            state.values[l].push_row(v.row(0)).map_err(|e| Error::Shape(e.to_string()))?;
            let (att, _) = attention(&q, &state.keys[l], &state.values[l], heads, false);
            x = &x + &att.dot(&p[a.wo]);
            if let (Some(c), Some((ck, cv))) = (&li.cross, &state.cross[l]) {
                let (h, _) = rmsnorm(x.view(), &p[c.norm]);
                let mut cq = h.dot(&p[c.wq]);
                self.rope.apply(&mut cq, &[frame], false);
                let (catt, _) = attention(&cq, ck, cv, heads, false);
                x = &x + &catt.dot(&p[c.wo]);
            }
            let (h3, _) = rmsnorm(x.view(), &p[li.ffn_norm]);
            let mut m = h3.dot(&p[li.w_gate]).mapv(silu);
            let bu = h3.dot(&p[li.w_up]);
            Zip::from(&mut m).and(&bu).for_each(|a, &b| *a *= b);
            x = &x + &m.dot(&p[li.w_down]);
        }
        let (y, _) = rmsnorm(x.view(), &p[self.layout.final_norm]);
        state.logits = self.project(&y).index_axis_move(ndarray::Axis(0), 0);
        state.pos += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::model::tests::{rand_grid, toy_cond, toy_config};
    use super::*;
    use ndarray::s;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check<T: Real>(model: &Model<T>, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [SourceKind::Vocal, SourceKind::None] {
            let cond = if model.config.cross_attention {
                toy_cond(&mut rng, kind)
            } else {
                toy_cond(&mut rng, SourceKind::None)
            };
            let rows = rand_grid(&mut rng, 20, 11);
            let frames: Vec<usize> = (3..23).collect();
            let full = model.forward(&cond, &rows.data, &frames).unwrap();
            let mut st = model.start(&cond).unwrap();
            let mut worst = 0.0f64;
            for r in 0..=20 {
                let diff = (&st.logits - &full.slice(s![r, .., ..]))
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.to_f64().unwrap().abs()));
                worst = worst.max(diff);
                if r < 20 {
                    model.feed(&mut st, rows.row(r), frames[r]).unwrap();
                }
            }
            assert!(worst < tol, "cache mismatch {worst}");
        }
    }

    #[test]
    fn cache_matches_full_forward() {
        let m = Model::<f64>::new(toy_config(true)).unwrap();
        check(&m, 1e-10);
        check(&Model::<f64>::new(toy_config(false)).unwrap(), 1e-10);
    }

    #[test]
    fn cache_matches_full_forward_f32_desk_model() {
        let m = Model::<f32>::new(super::super::ModelConfig {
            codebook_size: 8,
            syllable_vocab: 6,
            ..Default::default()
        })
        .unwrap();
        check(&m, 1e-5);
    }
}

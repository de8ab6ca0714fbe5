//! Batched forward pass on a [`Tape`].

use std::ops::Range;
use std::rc::Rc;

use super::{
    build_mask, FusedModel, Modality, PerModality, Token, TokenStream,
};
use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Real, SequenceSpan, Tape, Tensor, Var};

/// Sinusoidal embedding of a diffusion step: sines in the first half,
/// cosines in the second.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Rows of one stream inside the batch matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamRows {
    pub offset: usize,
    pub len: usize,
    /// Range into [`BatchLayout::text_rows`].
    pub text: Range<usize>,
    /// Range into [`BatchLayout::image_rows`].
    pub image: Range<usize>,
}

/// How a batch of streams maps onto the rows of the activation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub n_rows: usize,
    pub streams: Vec<StreamRows>,
    pub text_rows: Rc<[usize]>,
    pub text_ids: Vec<usize>,
    pub image_rows: Rc<[usize]>,
    /// Noise level of every image row.
    pub image_t: Vec<usize>,
    /// Flattened (noisy) patches of every image row.
    pub patches: Vec<f64>,
    pub positions: Rc<[usize]>,
    pub attention: Rc<AttentionLayout>,
}

impl BatchLayout {
    pub fn new<T: Real>(model: &FusedModel<T>, streams: &[TokenStream]) -> Result<Self> {
        let cfg = model.config();
        if streams.is_empty() {
            return Err(Error::invalid("model_forward", "empty batch"));
        }
        let mut rows = Vec::with_capacity(streams.len());
        let (mut text_rows, mut text_ids) = (Vec::new(), Vec::new());
        let (mut image_rows, mut image_t, mut patches) = (Vec::new(), Vec::new(), Vec::new());
        let mut positions = Vec::new();
        let mut spans = Vec::new();
        let mut offset = 0;
        for s in streams {
            if s.len() > cfg.max_seq {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: cfg.max_seq,
                });
            }
            s.validate(cfg.vocab_size, cfg.patches_per_image, cfg.patch_dim)?;
            let (t0, i0) = (text_rows.len(), image_rows.len());
            for (pos, tok) in s.tokens().iter().enumerate() {
                match tok {
                    Token::Text(id) => {
                        text_rows.push(offset + pos);
                        text_ids.push(*id as usize);
                    }
                    Token::Patch(p) => {
                        image_rows.push(offset + pos);
                        let seg = s.segment_of(pos).expect("validated");
                        image_t.push(s.segments()[seg].t);
                        patches.extend(p.iter().map(|&x| x as f64));
                    }
                }
                positions.push(pos);
            }
            spans.push(SequenceSpan {
                start: offset,
                len: s.len(),
                allowed: build_mask(s).as_slice().to_vec(),
            });
            rows.push(StreamRows {
                offset,
                len: s.len(),
                text: t0..text_rows.len(),
                image: i0..image_rows.len(),
            });
            offset += s.len();
        }
        for &t in &image_t {
            if t > cfg.diffusion_steps {
                return Err(Error::StepOutOfRange {
                    t,
                    lo: 0,
                    hi: cfg.diffusion_steps,
                });
            }
        }
        Ok(BatchLayout {
            n_rows: offset,
            streams: rows,
            text_rows: text_rows.into(),
            text_ids,
            image_rows: image_rows.into(),
            image_t,
            patches,
            positions: positions.into(),
            attention: Rc::new(AttentionLayout {
                spans,
                n_heads: cfg.n_heads,
                head_dim: cfg.head_dim(),
            }),
        })
    }

    fn rows(&self, m: Modality) -> &Rc<[usize]> {
        match m {
            Modality::Text => &self.text_rows,
            Modality::Image => &self.image_rows,
        }
    }
}

/// Tape handles produced by [`FusedModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One handle per model parameter, in [`FusedModel::params`] order.
    pub params: Vec<Var>,
    /// `[n_text_rows × V]`, absent when the batch holds no text.
    pub logits: Option<Var>,
    /// `[n_image_rows × patch_dim]`, absent when the batch holds no image.
    pub eps: Option<Var>,
    /// The embedded input `[n_rows × d_model]`.
    pub embedded: Var,
    /// Residual stream after the last layer, before the final norm.
    pub hidden: Var,
    pub layout: BatchLayout,
}

/// Per-stream outputs of an inference forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// Logits of every text position, in stream order.
    pub logits: Tensor<T>,
    /// Predicted noise for every image segment.
    pub eps: Vec<Tensor<T>>,
}

struct Ctx<'a> {
    layout: &'a BatchLayout,
}

impl Ctx<'_> {
    /// Applies `f` to each modality's rows with that modality's weights and
    /// scatters the results back into sequence order.
    fn route<T: Real, S: Copy>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        slots: PerModality<S>,
        mut f: impl FnMut(&mut Tape<T>, Var, S) -> Result<Vec<Var>>,
    ) -> Result<Vec<Var>> {
        let has_text = !self.layout.text_rows.is_empty();
        let has_image = !self.layout.image_rows.is_empty();
        if slots.shared || !has_image {
            return f(tape, x, slots.text);
        }
        if !has_text {
            return f(tape, x, slots.image);
        }
        let mut per = Vec::new();
        for m in [Modality::Text, Modality::Image] {
            let rows = self.layout.rows(m).clone();
            let xm = tape.gather_rows(x, rows.clone())?;
            per.push((f(tape, xm, slots.get(m))?, rows));
        }
        let n_out = per[0].0.len();
        (0..n_out)
            .map(|i| {
                let parts = per.iter().map(|(v, r)| (v[i], r.clone())).collect();
                tape.merge_rows(parts, self.layout.n_rows)
            })
            .collect()
    }
}

impl<T: Real> FusedModel<T> {
    /// Records the forward pass of `streams` on `tape`. Parameters are bound
    /// as leaves that track gradients iff `track_grads`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        streams: &[TokenStream],
        track_grads: bool,
    ) -> Result<ForwardOutput> {
        let layout = BatchLayout::new(self, streams)?;
        let params: Vec<Var> = self
            .params()
            .iter()
            .map(|p| {
                if track_grads {
                    tape.leaf(&p.tensor)
                } else {
                    let t = &p.tensor;
                    tape.constant(t.shape().to_vec(), t.data().to_vec())
                        .expect("parameter shapes are valid")
                }
            })
            .collect();
        let cfg = self.config();
        let (d, pd) = (cfg.d_model, cfg.patch_dim);
        let ctx = Ctx {
            layout: &layout,
        };
        let s = &self.slots;
        let n_img = layout.image_rows.len();
        let conv = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();

        // Inputs.
        let mut parts = Vec::new();
        if !layout.text_rows.is_empty() {
            let ids: Rc<[usize]> = layout.text_ids.clone().into();
            let e = tape.gather_rows(params[s.embed], ids)?;
            parts.push((e, layout.text_rows.clone()));
        }
        let mut image_aux = None;
        if n_img > 0 {
            let x = tape.constant(vec![n_img, pd], conv(&layout.patches))?;
            let temb: Vec<f64> = layout
                .image_t
                .iter()
                .flat_map(|&t| timestep_embedding(t, d))
                .collect();
            let temb = tape.constant(vec![n_img, d], conv(&temb))?;
            let proj = tape.matmul(x, params[s.down])?;
            let e = tape.add(proj, temb)?;
            parts.push((e, layout.image_rows.clone()));
            image_aux = Some((x, temb));
        }
        let embedded = tape.merge_rows(parts, layout.n_rows)?;

        // Layers.
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let mut h = embedded;
        for layer in &s.layers {
            let qkv = ctx.route(tape, h, layer.attn, |tape, x, w| {
                let xn = tape.rmsnorm(x, params[w.norm])?;
                Ok(vec![
                    tape.matmul(xn, params[w.wq])?,
                    tape.matmul(xn, params[w.wk])?,
                    tape.matmul(xn, params[w.wv])?,
                ])
            })?;
            let q = tape.rope(qkv[0], layout.positions.clone(), nh, hd)?;
            let k = tape.rope(qkv[1], layout.positions.clone(), nh, hd)?;
            let a = tape.attention(q, k, qkv[2], layout.attention.clone())?;
            let o = ctx.route(tape, a, layer.attn, |tape, x, w| {
                Ok(vec![tape.matmul(x, params[w.wo])?])
            })?;
            h = tape.add(h, o[0])?;
            let f = ctx.route(tape, h, layer.ffn, |tape, x, w| {
                let xn = tape.rmsnorm(x, params[w.norm])?;
                let g = tape.matmul(xn, params[w.w_gate])?;
                let g = tape.silu(g);
                let u = tape.matmul(xn, params[w.w_up])?;
                let gu = tape.mul(g, u)?;
                Ok(vec![tape.matmul(gu, params[w.w_down])?])
            })?;
            h = tape.add(h, f[0])?;
        }

        // Heads.
        let mut logits = None;
        if !layout.text_rows.is_empty() {
            let x = tape.gather_rows(h, layout.text_rows.clone())?;
            let x = tape.rmsnorm(x, params[s.final_norm.text])?;
            logits = Some(tape.matmul(x, params[s.lm_head])?);
        }
        let mut eps = None;
        if let Some((skip, temb)) = image_aux {
            let x = tape.gather_rows(h, layout.image_rows.clone())?;
            let x = tape.rmsnorm(x, params[s.final_norm.image])?;
            let x = tape.add(x, temb)?;
            let x = tape.concat_cols(x, skip)?;
            eps = Some(tape.matmul(x, params[s.up])?);
        }
        Ok(ForwardOutput {
            params,
            logits,
            eps,
            embedded,
            hidden: h,
            layout,
        })
    }

    /// Inference forward returning per-stream outputs.
    pub fn predict(&self, streams: &[TokenStream]) -> Result<Vec<Prediction<T>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, streams, false)?;
        let (v, pd) = (self.config().vocab_size, self.config().patch_dim);
        let ppi = self.config().patches_per_image;
        let logits = out.logits.map(|l| tape.value(l));
        let eps = out.eps.map(|e| tape.value(e));
        let mut preds = Vec::with_capacity(streams.len());
        for r in &out.layout.streams {
            let l = match logits {
                Some(l) if !r.text.is_empty() => {
                    Tensor::new(vec![r.text.len(), v], l[r.text.start * v..r.text.end * v].to_vec())?
                }
                _ => Tensor::zeros(&[1, v]),
            };
            let mut segs = Vec::new();
            if let Some(e) = eps {
                let mut row = r.image.start;
                while row < r.image.end {
                    let data = e[row * pd..(row + ppi) * pd].to_vec();
                    segs.push(Tensor::new(vec![ppi, pd], data)?);
                    row += ppi;
                }
            }
            preds.push(Prediction { logits: l, eps: segs });
        }
        Ok(preds)
    }

    /// Inputs after projection, `[len × d_model]`, for a single stream.
    pub fn embed_inputs(&self, stream: &TokenStream) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let cfg = self.config().clone();
        let shallow = FusedModel {
            cfg: super::ModelConfig { n_layers: 0, ..cfg },
            params: self.params().to_vec(),
            slots: super::Slots {
                layers: Vec::new(),
                ..self.slots.clone()
            },
        };
        let out = shallow.forward(&mut tape, std::slice::from_ref(stream), false)?;
        Ok(tape.tensor(out.embedded))
    }
}

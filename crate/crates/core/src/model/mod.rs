//! The modality-fused decoder.
//!
//! Text rows and image rows of a batch share one residual stream and one
//! attention computation, but each modality is projected by its own weight
//! set wherever the [`Separation`] mode says so. A `Pair`-like slot with the
//! same index for both modalities means the tensor is shared.
//!
//! Parameter names carry their ownership scope as the first component:
//! `text.*`, `image.*` or `shared.*`.

mod config;
mod forward;
mod stream;

pub use config::{ModelConfig, Separation};
pub use forward::{timestep_embedding, BatchLayout, ForwardOutput, Prediction};
pub use stream::{
    build_mask, AttentionMask, ImageSegment, Modality, StreamBuilder, Token, TokenStream, BOI,
    BOS, EOI, EOS, NULL,
};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Parameter indices for one modality, or for both when `shared`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PerModality<S> {
    pub text: S,
    pub image: S,
    pub shared: bool,
}

impl<S: Copy> PerModality<S> {
    pub fn get(&self, m: Modality) -> S {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnSlots {
    pub norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct FfnSlots {
    pub norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerSlots {
    pub attn: PerModality<AttnSlots>,
    pub ffn: PerModality<FfnSlots>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Slots {
    pub embed: usize,
    pub layers: Vec<LayerSlots>,
    pub final_norm: PerModality<usize>,
    pub lm_head: usize,
    pub down: usize,
    pub up: usize,
}

const ATTN_KINDS: [&str; 5] = ["attn_norm", "wq", "wk", "wv", "wo"];
const FFN_KINDS: [&str; 4] = ["ffn_norm", "w_gate", "w_up", "w_down"];

/// Text-only weights keyed by scope-free names (`embed`, `layers.0.wq`, ...).
/// This is what a pretrained language model contributes.
#[derive(Clone, Debug, PartialEq)]
pub struct TextWeights<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel<T> {
    cfg: ModelConfig,
    params: Vec<Param<T>>,
    pub(crate) slots: Slots,
}

struct Builder<'a, T> {
    cfg: &'a ModelConfig,
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
    base: Option<&'a TextWeights<T>>,
}

impl<T: Real> Builder<'_, T> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(std * self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    fn fresh(&mut self, kind: &str) -> Tensor<T> {
        let (d, h, v) = (self.cfg.d_model, self.cfg.ffn_hidden, self.cfg.vocab_size);
        let residual_std = INIT_STD / ((2 * self.cfg.n_layers) as f64).sqrt();
        match kind {
            "embed" => self.normal(&[v, d], INIT_STD),
            "lm_head" => Tensor::zeros(&[d, v]),
            "attn_norm" | "ffn_norm" | "final_norm" => Tensor::full(&[d], T::one()),
            "wq" | "wk" | "wv" => self.normal(&[d, d], INIT_STD),
            "wo" => self.normal(&[d, d], residual_std),
            "w_gate" | "w_up" => self.normal(&[d, h], INIT_STD),
            "w_down" => self.normal(&[h, d], residual_std),
            other => unreachable!("unknown kind {other}"),
        }
    }

    /// Adds one tensor for the scope-free `key`, copying from the base when
    /// one is given.
    fn add(&mut self, scope: &str, key: &str, kind: &str) -> Result<usize> {
        let tensor = match self.base {
            Some(base) => {
                let t = base
                    .tensors
                    .get(key)
                    .ok_or_else(|| Error::Config(format!("base weights lack `{key}`")))?;
                let want = self.fresh_shape(kind);
                if t.shape() != want.as_slice() {
                    return Err(Error::ParamShape {
                        name: key.to_string(),
                        expected: want,
                        found: t.shape().to_vec(),
                    });
                }
                t.clone()
            }
            None => self.fresh(kind),
        };
        self.push(format!("{scope}.{key}"), tensor)
    }

    fn fresh_shape(&self, kind: &str) -> Vec<usize> {
        let (d, h, v) = (self.cfg.d_model, self.cfg.ffn_hidden, self.cfg.vocab_size);
        match kind {
            "embed" => vec![v, d],
            "lm_head" => vec![d, v],
            "attn_norm" | "ffn_norm" | "final_norm" => vec![d],
            "wq" | "wk" | "wv" | "wo" => vec![d, d],
            "w_gate" | "w_up" => vec![d, h],
            "w_down" => vec![h, d],
            other => unreachable!("unknown kind {other}"),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> Result<usize> {
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
        });
        Ok(self.params.len() - 1)
    }

    /// Creates a text/image pair (or one shared tensor) for `key`.
    fn pair(&mut self, key: &str, kind: &str, separate: bool) -> Result<PerModality<usize>> {
        if separate {
            let text = self.add("text", key, kind)?;
            let image = self.add("image", key, kind)?;
            Ok(PerModality {
                text,
                image,
                shared: false,
            })
        } else {
            let i = self.add("shared", key, kind)?;
            Ok(PerModality {
                text: i,
                image: i,
                shared: true,
            })
        }
    }
}

fn attn_slots(v: &[usize]) -> AttnSlots {
    AttnSlots {
        norm: v[0],
        wq: v[1],
        wk: v[2],
        wv: v[3],
        wo: v[4],
    }
}

fn ffn_slots(v: &[usize]) -> FfnSlots {
    FfnSlots {
        norm: v[0],
        w_gate: v[1],
        w_up: v[2],
        w_down: v[3],
    }
}

impl<T: Real> FusedModel<T> {
    /// Builds a model. With `base`, every transformer weight of both
    /// modalities starts as a copy of the base; the patch projectors are
    /// always drawn fresh.
    pub fn init(cfg: &ModelConfig, seed: u64, base: Option<&TextWeights<T>>) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            base,
        };
        let embed = b.add("text", "embed", "embed")?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let sep_attn = cfg.separation.separate_attention();
            let sep_ffn = cfg.separation.separate_ffn();
            let mut attn = Vec::new();
            for kind in ATTN_KINDS {
                attn.push(b.pair(&format!("layers.{l}.{kind}"), kind, sep_attn)?);
            }
            let mut ffn = Vec::new();
            for kind in FFN_KINDS {
                ffn.push(b.pair(&format!("layers.{l}.{kind}"), kind, sep_ffn)?);
            }
            let pick = |v: &[PerModality<usize>], m: Modality| v.iter().map(|p| p.get(m)).collect::<Vec<_>>();
            layers.push(LayerSlots {
                attn: PerModality {
                    text: attn_slots(&pick(&attn, Modality::Text)),
                    image: attn_slots(&pick(&attn, Modality::Image)),
                    shared: !sep_attn,
                },
                ffn: PerModality {
                    text: ffn_slots(&pick(&ffn, Modality::Text)),
                    image: ffn_slots(&pick(&ffn, Modality::Image)),
                    shared: !sep_ffn,
                },
            });
        }
        let final_norm = b.pair("final_norm", "final_norm", cfg.separation == Separation::Deep)?;
        let lm_head = b.add("text", "lm_head", "lm_head")?;

        // Patch projectors: never part of the base.
        let (d, p) = (cfg.d_model, cfg.patch_dim);
        let down = b.normal(&[p, d], INIT_STD);
        let down = b.push("image.down".into(), down)?;
        let mut up = Tensor::zeros(&[d + p, p]);
        let skip = b.normal(&[p, p], INIT_STD);
        up.data_mut()[d * p..].copy_from_slice(skip.data());
        let up = b.push("image.up".into(), up)?;

        Ok(FusedModel {
            cfg: cfg.clone(),
            params: b.params,
            slots: Slots {
                embed,
                layers,
                final_norm,
                lm_head,
                down,
                up,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Scope-free key for a parameter name, or `None` for the projectors.
    fn text_key(name: &str) -> Option<&str> {
        let (scope, rest) = name.split_once('.')?;
        match (scope, rest) {
            ("image", "down" | "up") => None,
            _ => Some(rest),
        }
    }

    /// The weights the text modality actually runs through.
    pub fn text_weights(&self) -> TextWeights<T> {
        let mut tensors = BTreeMap::new();
        for p in &self.params {
            let Some(key) = Self::text_key(&p.name) else {
                continue;
            };
            if p.name.starts_with("image.") {
                continue;
            }
            let mut t = p.tensor.clone();
            t.zero_grad();
            tensors.insert(key.to_string(), t);
        }
        TextWeights { tensors }
    }

    /// Overwrites every image-side transformer tensor with its text-side
    /// counterpart.
    pub fn tie_image_to_text(&mut self) {
        let text = self.text_weights();
        for p in &mut self.params {
            if let Some(rest) = p.name.strip_prefix("image.") {
                if let Some(t) = text.tensors.get(rest) {
                    p.tensor = t.clone().with_grad();
                }
            }
        }
    }

    /// The same network with every tensor converted to `U`.
    pub fn cast<U: Real>(&self) -> FusedModel<U> {
        FusedModel {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            slots: self.slots.clone(),
        }
    }

    /// A model with separation `sep` whose text weights and projectors are
    /// copied from `self`; image-side transformer tensors copy the text side.
    pub fn with_separation(&self, sep: Separation) -> Result<FusedModel<T>> {
        let cfg = self.cfg.clone().with_separation(sep);
        let mut out = FusedModel::init(&cfg, 0, Some(&self.text_weights()))?;
        for name in ["image.down", "image.up"] {
            let src = self.param(name).expect("projectors always exist").tensor.clone();
            out.param_mut(name).unwrap().tensor = src;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(sep: Separation) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_hidden: 12,
            vocab_size: 10,
            patch_dim: 4,
            patches_per_image: 2,
            diffusion_steps: 10,
            separation: sep,
            max_seq: 16,
        }
    }

    #[test]
    fn base_copies_into_both_modalities() {
        let cfg = tiny(Separation::Deep);
        let base = FusedModel::<f32>::init(&cfg, 1, None).unwrap().text_weights();
        let m = FusedModel::init(&cfg, 2, Some(&base)).unwrap();
        for l in 0..2 {
            for kind in ATTN_KINDS.iter().chain(FFN_KINDS.iter()) {
                let t = &m.param(&format!("text.layers.{l}.{kind}")).unwrap().tensor;
                let i = &m.param(&format!("image.layers.{l}.{kind}")).unwrap().tensor;
                assert_eq!(t.data(), i.data());
            }
        }
    }

    #[test]
    fn fresh_init_draws_independent_sets() {
        let m = FusedModel::<f32>::init(&tiny(Separation::Deep), 3, None).unwrap();
        let t = &m.param("text.layers.0.wq").unwrap().tensor;
        let i = &m.param("image.layers.0.wq").unwrap().tensor;
        assert_ne!(t.data(), i.data());
    }

    #[test]
    fn base_shape_mismatch_is_rejected() {
        let base = FusedModel::<f32>::init(&tiny(Separation::Deep), 1, None).unwrap().text_weights();
        let mut cfg = tiny(Separation::Deep);
        cfg.ffn_hidden = 16;
        let err = FusedModel::init(&cfg, 2, Some(&base)).unwrap_err();
        assert!(matches!(err, Error::ParamShape { ref name, .. } if name == "layers.0.w_gate"), "{err}");
    }

    #[test]
    fn naming_follows_separation() {
        let names = |sep| {
            FusedModel::<f32>::init(&tiny(sep), 0, None)
                .unwrap()
                .params()
                .iter()
                .map(|p| p.name.clone())
                .collect::<Vec<_>>()
        };
        let dense = names(Separation::Dense);
        assert!(dense.contains(&"shared.layers.0.wq".to_string()));
        assert!(dense.contains(&"shared.layers.1.w_down".to_string()));
        let shallow = names(Separation::Shallow);
        assert!(shallow.contains(&"shared.layers.0.wq".to_string()));
        assert!(shallow.contains(&"image.layers.0.w_up".to_string()));
        let deep = names(Separation::Deep);
        assert!(deep.contains(&"image.layers.1.wo".to_string()));
        assert!(deep.contains(&"image.final_norm".to_string()));
        let unique: std::collections::BTreeSet<_> = deep.iter().collect();
        assert_eq!(unique.len(), deep.len());
    }
}

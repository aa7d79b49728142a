//! Tiny dual encoder: a patch vision transformer that emits a CLS embedding
//! plus a per-patch sequence, and a word-level text transformer that embeds
//! one prompt per class.

mod layers;
pub mod pretrain;
mod text;
mod vision;

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::param_tree;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use layers::{Block, LayerNormParams, Linear};
pub use pretrain::{clip_pretrain, info_nce, PretrainConfig, PretrainLog};
pub use text::{encode_text, encode_texts, text_forward, Vocab, PROMPT_TEMPLATE};
pub use vision::{encode_batch, encode_image, encode_images, patchify, stack_images, vision_forward, VisionTape};

/// Weight init standard deviation (truncated at ±2σ).
pub const INIT_STD: f64 = 0.02;
/// Upper clamp for the learnable log inverse temperature.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092; // ln 100

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub ln_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            width: 64,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            text_width: 64,
            text_depth: 2,
            text_heads: 4,
            ln_eps: 1e-6,
        }
    }
}

impl ArchConfig {
    /// The smallest architecture used for gradient checking.
    pub fn tiny() -> Self {
        ArchConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            width: 8,
            embed_dim: 6,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            text_width: 8,
            text_depth: 1,
            text_heads: 2,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image side {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.text_heads == 0 || !self.text_width.is_multiple_of(self.text_heads) {
            return bad(format!(
                "text width {} not divisible by {} heads",
                self.text_width, self.text_heads
            ));
        }
        if [self.channels, self.width, self.embed_dim, self.text_width, self.mlp_ratio]
            .contains(&0)
        {
            return bad("zero-sized dimension in architecture".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length L (patch tokens, CLS excluded).
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoderParams<T = Tensor> {
    pub cls_token: T,
    pub pos_embed: T,
    pub proj: T,
    pub patch: Linear<T>,
    pub ln_final: LayerNormParams<T>,
    pub blocks: Vec<Block<T>>,
}
param_tree!(VisionEncoderParams { leaves: [cls_token, pos_embed, proj], children: [patch, ln_final], lists: [blocks] });

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams<T = Tensor> {
    pub token_embed: T,
    pub pos_embed: T,
    pub proj: T,
    pub ln_final: LayerNormParams<T>,
    pub blocks: Vec<Block<T>>,
}
param_tree!(TextEncoderParams { leaves: [token_embed, pos_embed, proj], children: [ln_final], lists: [blocks] });

/// Both encoders plus the contrastive log inverse temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = Tensor> {
    pub logit_scale: T,
    pub vision: VisionEncoderParams<T>,
    pub text: TextEncoderParams<T>,
}
param_tree!(Model { leaves: [logit_scale], children: [vision, text], lists: [] });

/// Per-image encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Projected, L2-normalised CLS embedding (E).
    pub cls: Vec<f64>,
    /// Projected, per-token L2-normalised patch tokens (L×E).
    pub seq: Tensor,
    /// Final-layer patch tokens before projection (L×D).
    pub raw_seq: Tensor,
}

impl Model<Tensor> {
    /// Flat name → tensor map in visit order.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, t| {
            out.insert(name, t.clone());
        });
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name));
        out
    }

    /// Overwrites every parameter from `named`; all names must be present
    /// with matching shapes.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match named.get(&name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(Error::shape(
                        "load_named",
                        format!("{name}: expected {:?}, got {:?}", t.shape(), src.shape()),
                    ))
                }
                None => err = Some(Error::InvalidArgument(format!("missing parameter `{name}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Records every parameter on the tape; `trainable(name)` decides
    /// whether it enters as a differentiable input or a constant.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> Model<Var> {
        self.map("", &mut |name, t| {
            if trainable(&name) {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
    }

    /// Records the model on a fresh tape, runs `f`, and differentiates the
    /// loss it returns with respect to every trainable parameter.
    pub fn grad<R>(
        &self,
        trainable: &dyn Fn(&str) -> bool,
        f: impl FnOnce(&mut Graph, &Model<Var>) -> Result<(Var, R)>,
    ) -> Result<(f64, R, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, trainable);
        let (loss, extra) = f(&mut g, &vars)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss)?;
        let out = self
            .leaves()
            .into_iter()
            .zip(vars.leaves())
            .filter(|((name, _), _)| trainable(name))
            .map(|((name, t), (_, v))| {
                let grad = grads.get_shaped(&g, *v, t.shape());
                (name, grad)
            })
            .collect();
        Ok((value, extra, out))
    }

    pub fn clamp_logit_scale(&mut self) {
        let v = &mut self.logit_scale.data_mut()[0];
        *v = v.min(MAX_LOGIT_SCALE);
    }

    pub fn logit_scale_value(&self) -> f64 {
        self.logit_scale.data()[0]
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

impl<T> Model<T> {
    /// Names and leaves in visit order.
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }
}

fn init_matrix(rng: &RngStream, name: &str, shape: &[usize]) -> Tensor {
    let mut s = rng.split(name);
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| s.truncated_normal(INIT_STD)).collect())
}

fn init_block(rng: &RngStream, prefix: &str, d: usize, mlp: usize) -> Block {
    let lin = |name: &str, i: usize, o: usize| Linear {
        weight: init_matrix(rng, &format!("{prefix}.{name}.weight"), &[i, o]),
        bias: Tensor::zeros(&[o]),
    };
    Block {
        ln1: LayerNormParams::new(d),
        q: lin("q", d, d),
        k: lin("k", d, d),
        v: lin("v", d, d),
        out: lin("out", d, d),
        ln2: LayerNormParams::new(d),
        fc1: lin("fc1", d, d * mlp),
        fc2: lin("fc2", d * mlp, d),
    }
}

/// Draws fresh parameters. Each tensor uses its own stream split from
/// `rng` by parameter name, so layout changes never reshuffle other weights.
pub fn init_params(arch: &ArchConfig, vocab: &Vocab, rng: &RngStream) -> Result<Model> {
    arch.validate()?;
    let d = arch.width;
    let vision = VisionEncoderParams {
        cls_token: init_matrix(rng, "vision.cls_token", &[d]),
        pos_embed: init_matrix(rng, "vision.pos_embed", &[arch.seq_len() + 1, d]),
        proj: init_matrix(rng, "vision.proj", &[d, arch.embed_dim]),
        patch: Linear {
            weight: init_matrix(rng, "vision.patch.weight", &[arch.patch_dim(), d]),
            bias: Tensor::zeros(&[d]),
        },
        ln_final: LayerNormParams::new(d),
        blocks: (0..arch.depth)
            .map(|i| init_block(rng, &format!("vision.blocks.{i}"), d, arch.mlp_ratio))
            .collect(),
    };
    let dt = arch.text_width;
    let text = TextEncoderParams {
        token_embed: init_matrix(rng, "text.token_embed", &[vocab.len(), dt]),
        pos_embed: init_matrix(rng, "text.pos_embed", &[vocab.max_prompt_len(), dt]),
        proj: init_matrix(rng, "text.proj", &[dt, arch.embed_dim]),
        ln_final: LayerNormParams::new(dt),
        blocks: (0..arch.text_depth)
            .map(|i| init_block(rng, &format!("text.blocks.{i}"), dt, arch.mlp_ratio))
            .collect(),
    };
    Ok(Model {
        logit_scale: Tensor::scalar((1.0f64 / 0.07).ln()),
        vision,
        text,
    })
}

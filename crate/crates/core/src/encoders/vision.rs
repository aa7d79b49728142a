use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::layers::{block_forward, layer_norm, linear};
use super::{ArchConfig, EncoderOutput, Model, VisionEncoderParams};

/// Tape handles for a batch of `B` images.
#[derive(Clone, Copy, Debug)]
pub struct VisionTape {
    pub batch: usize,
    /// B×E, L2-normalised.
    pub cls: Var,
    /// (B·L)×E, per-row L2-normalised.
    pub seq: Var,
    /// (B·L)×D final-layer tokens before projection.
    pub raw_seq: Var,
}

/// Stacks channel-last `H×W×C` images into a `B×C×H×W` batch.
pub fn stack_images(arch: &ArchConfig, images: &[&Tensor]) -> Result<Tensor> {
    let (s, c) = (arch.image_size, arch.channels);
    let mut out = Vec::with_capacity(images.len() * s * s * c);
    for img in images {
        if img.shape() != [s, s, c] {
            return Err(Error::shape(
                "encode_image",
                format!("expected image {s}x{s}x{c}, got {:?}", img.shape()),
            ));
        }
        let px = img.data();
        for ch in 0..c {
            out.extend((0..s * s).map(|i| px[i * c + ch]));
        }
    }
    Tensor::new(vec![images.len(), c, s, s], out)
}

/// Flattens a `B×C×H×W` batch into `(B·L) × (C·P²)` patch rows. Patches
/// are ordered row-major over the grid; within a patch the layout is
/// channel, row, column.
pub fn patchify(arch: &ArchConfig, batch: &Tensor) -> Result<Tensor> {
    let (s, p, c) = (arch.image_size, arch.patch_size, arch.channels);
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != [c, s, s] {
        return Err(Error::shape(
            "encode_image",
            format!("expected batch Bx{c}x{s}x{s}, got {shape:?}"),
        ));
    }
    let b = shape[0];
    let grid = arch.grid();
    let px = batch.data();
    let mut out = Vec::with_capacity(b * arch.seq_len() * arch.patch_dim());
    for i in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for dy in 0..p {
                        let start = ((i * c + ch) * s + gy * p + dy) * s + gx * p;
                        out.extend_from_slice(&px[start..start + p]);
                    }
                }
            }
        }
    }
    Tensor::matrix(b * arch.seq_len(), arch.patch_dim(), out)
}

pub fn vision_forward(
    g: &mut Graph,
    p: &VisionEncoderParams<Var>,
    arch: &ArchConfig,
    images: &Tensor,
) -> Result<VisionTape> {
    let patches = patchify(arch, images)?;
    let b = images.shape()[0];
    let l = arch.seq_len();
    let t = l + 1;
    let patches = g.constant(&patches);
    let tokens = linear(g, patches, &p.patch)?;
    // Row 0 is the CLS token, rows 1.. the patch tokens of every image.
    let stacked = g.concat_rows(&[p.cls_token, tokens])?;
    let order: Vec<usize> = (0..b)
        .flat_map(|i| std::iter::once(0).chain((0..l).map(move |j| 1 + i * l + j)))
        .collect();
    let x = g.gather_rows(stacked, &order)?;
    let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = g.gather_rows(p.pos_embed, &pos_idx)?;
    let mut x = g.add(x, pos)?;
    for block in &p.blocks {
        x = block_forward(g, x, block, b, t, arch.heads, arch.ln_eps)?;
    }
    let y = layer_norm(g, x, &p.ln_final, arch.ln_eps)?;
    let cls_idx: Vec<usize> = (0..b).map(|i| i * t).collect();
    let seq_idx: Vec<usize> = (0..b).flat_map(|i| (1..t).map(move |j| i * t + j)).collect();
    let cls_raw = g.gather_rows(y, &cls_idx)?;
    let raw_seq = g.gather_rows(y, &seq_idx)?;
    let cls = g.matmul(cls_raw, p.proj)?;
    let cls = g.l2_normalize_rows(cls)?;
    let seq = g.matmul(raw_seq, p.proj)?;
    let seq = g.l2_normalize_rows(seq)?;
    Ok(VisionTape {
        batch: b,
        cls,
        seq,
        raw_seq,
    })
}

/// Forward pass without gradients for a batch of images.
pub fn encode_images(model: &Model, arch: &ArchConfig, images: &[&Tensor]) -> Result<Vec<EncoderOutput>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    encode_batch(model, arch, &stack_images(arch, images)?)
}

/// Forward pass without gradients for a `B×C×H×W` batch.
pub fn encode_batch(model: &Model, arch: &ArchConfig, batch: &Tensor) -> Result<Vec<EncoderOutput>> {
    let mut g = Graph::new();
    let vision = model.vision.map("vision", &mut |_, t| g.constant(t));
    let tape = vision_forward(&mut g, &vision, arch, batch)?;
    let n = tape.batch;
    let l = arch.seq_len();
    let (e, d) = (arch.embed_dim, arch.width);
    let cls = g.data(tape.cls);
    let seq = g.data(tape.seq);
    let raw = g.data(tape.raw_seq);
    Ok((0..n)
        .map(|i| EncoderOutput {
            cls: cls[i * e..(i + 1) * e].to_vec(),
            seq: Tensor::from_parts(vec![l, e], seq[i * l * e..(i + 1) * l * e].to_vec()),
            raw_seq: Tensor::from_parts(vec![l, d], raw[i * l * d..(i + 1) * l * d].to_vec()),
        })
        .collect())
}

pub fn encode_image(model: &Model, arch: &ArchConfig, image: &Tensor) -> Result<EncoderOutput> {
    Ok(encode_images(model, arch, &[image])?.remove(0))
}

//! Contrastive image-caption pretraining that produces the starting
//! checkpoint for grounding. Captions are the prompt of each image's
//! dominant class.

use crate::autodiff::{Graph, Var};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, GaLoreHyper, Optimizer, OptimizerKind, Schedule, ScheduleShape, SelectOptions};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::{stack_images, text_forward, vision_forward, ArchConfig, Model, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 16,
            batch_size: 64,
            lr: 3e-4,
            warmup_steps: 20,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    /// Loss at every step.
    pub losses: Vec<f64>,
}

/// Symmetric InfoNCE over a `B×B` logit matrix whose diagonal holds the
/// matching pairs.
pub fn info_nce(g: &mut Graph, logits: Var) -> Result<Var> {
    let (b, c) = g.shape(logits);
    if b != c {
        return Err(Error::shape("info_nce", format!("logits must be square, got {b}x{c}")));
    }
    let eye = g.constant(&Tensor::eye(b));
    let rows = g.log_softmax_rows(logits)?;
    let t = g.transpose(logits)?;
    let cols = g.log_softmax_rows(t)?;
    let both = g.add(rows, cols)?;
    let diag = g.mul(both, eye)?;
    let s = g.sum_all(diag)?;
    g.scale(s, -0.5 / b as f64)
}

/// [`info_nce`] on a plain logit matrix.
pub fn info_nce_loss(logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = info_nce(&mut g, l)?;
    Ok(g.scalar(loss))
}

/// Full-parameter AdamW on the CLS-caption contrastive loss over the train
/// split. Any numerical failure is reported with its step.
pub fn clip_pretrain(
    mut model: Model,
    arch: &ArchConfig,
    vocab: &Vocab,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    rng: &RngStream,
) -> Result<(Model, PretrainLog)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("pretraining needs positive epochs and batch size".into()));
    }
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: (steps_per_epoch * cfg.epochs) as u64,
        shape: ScheduleShape::WarmupCosine,
    };
    let adam = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let opts = SelectOptions {
        optimizer: OptimizerKind::AdamW,
        freeze_text: false,
        freeze_cls: false,
    };
    let mut opt = Optimizer::new(&model, &opts, adam, GaLoreHyper::default(), schedule);
    let all_classes: Vec<usize> = (0..vocab.num_classes()).collect();
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        rng.split(&format!("pretrain/epoch{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let step = log.losses.len();
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.images[i].pixels).collect();
            let captions: Vec<usize> = chunk.iter().map(|&i| dataset.images[i].dominant_class).collect();
            let batch = stack_images(arch, &imgs)?;
            let result = model.grad(&|_| true, |g, p| {
                let tape = vision_forward(g, &p.vision, arch, &batch)?;
                let text = text_forward(g, &p.text, arch, vocab, &all_classes)?;
                let txt = g.gather_rows(text, &captions)?;
                let cos = g.matmul_nt(tape.cls, txt)?;
                let scale = g.exp(p.logit_scale)?;
                let logits = g.scale_by(cos, scale)?;
                Ok((info_nce(g, logits)?, ()))
            });
            let (loss, (), grads) = result.map_err(|e| diverged(step, e))?;
            opt.step(&mut model, &grads).map_err(|e| diverged(step, e))?;
            log::debug!("pretrain epoch {epoch} step {step} loss {loss:.4}");
            log.losses.push(loss);
        }
        log::info!(
            "pretrain epoch {} done, last loss {:.4}",
            epoch + 1,
            log.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok((model, log))
}

fn diverged(step: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            step,
            source: Box::new(e),
        }
    } else {
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_has_zero_loss() {
        assert_eq!(info_nce_loss(&Tensor::matrix(1, 1, vec![3.7]).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_b() {
        let l = info_nce_loss(&Tensor::full(&[4, 4], 0.3)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_hand_computation() {
        let logits = Tensor::matrix(2, 2, vec![2.0, 0.5, -1.0, 1.0]).unwrap();
        let lse = |a: f64, b: f64| (a.exp() + b.exp()).ln();
        let rows = (lse(2.0, 0.5) - 2.0) + (lse(-1.0, 1.0) - 1.0);
        let cols = (lse(2.0, -1.0) - 2.0) + (lse(0.5, 1.0) - 1.0);
        let expected = 0.5 * (rows + cols) / 2.0;
        assert!((info_nce_loss(&logits).unwrap() - expected).abs() < 1e-12);
    }
}

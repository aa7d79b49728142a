//! The grounding objective: instance-level contrastive loss against every
//! class prompt, per-class sigmoid match scores with a multi-class binary
//! cross-entropy, and their unweighted sum.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{sigmoid, Graph, Var};
use crate::data::Batch;
use crate::encoders::{encode_texts, text_forward, vision_forward, ArchConfig, Model, Vocab};
use crate::error::{Error, Result};
use crate::grounding::{pool_tokens, PooledObjectEmbedding};
use crate::tensor::Tensor;

/// Scores are clamped to `[SCORE_EPS, 1 − SCORE_EPS]` before logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Class names with their current unit-norm text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    /// K×E, unit rows.
    pub text_embeddings: Tensor,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, text_embeddings: Tensor) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", names.len())));
        }
        if text_embeddings.rank() != 2 || text_embeddings.rows() != names.len() {
            return Err(Error::shape(
                "class_vocabulary",
                format!("{} names vs embeddings {:?}", names.len(), text_embeddings.shape()),
            ));
        }
        for r in 0..names.len() {
            let n = text_embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("embedding of `{}` has norm {n}", names[r])));
            }
        }
        Ok(ClassVocabulary { names, text_embeddings })
    }

    /// Embeds every class prompt with the model's current text encoder.
    pub fn from_model(model: &Model, arch: &ArchConfig, vocab: &Vocab) -> Result<Self> {
        let ids: Vec<usize> = (0..vocab.num_classes()).collect();
        let emb = encode_texts(model, arch, vocab, &ids)?;
        ClassVocabulary::new(vocab.class_names().to_vec(), emb)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Cosine similarity of a unit vector against every class.
    pub fn cosines(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.text_embeddings.cols() {
            return Err(Error::shape(
                "class_cosines",
                format!("embedding width {} vs {}", v.len(), self.text_embeddings.cols()),
            ));
        }
        Ok((0..self.len())
            .map(|j| self.text_embeddings.row(j).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ins: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_ins: f64, l_ce: f64) -> Self {
        LossBreakdown {
            l_ins,
            l_ce,
            total: l_ins + l_ce,
        }
    }
}

/// Which image embedding the objective supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supervision {
    /// The CLS embedding, labelled with the sampled mask's class.
    Cls,
    /// The masked average pool of the patch sequence.
    Seq,
    /// Sum of both objectives.
    Both,
}

impl Supervision {
    pub const ALL: [Supervision; 3] = [Supervision::Cls, Supervision::Seq, Supervision::Both];

    pub fn uses_seq(self) -> bool {
        matches!(self, Supervision::Seq | Supervision::Both)
    }

    pub fn uses_cls(self) -> bool {
        matches!(self, Supervision::Cls | Supervision::Both)
    }
}

impl FromStr for Supervision {
    type Err = Error;
    fn from_str(s: &str) -> std::result::Result<Self, Error> {
        match s {
            "cls" => Ok(Supervision::Cls),
            "seq" => Ok(Supervision::Seq),
            "both" => Ok(Supervision::Both),
            other => Err(Error::Config(format!("unknown supervision `{other}` (cls|seq|both)"))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Cls => "cls",
            Supervision::Seq => "seq",
            Supervision::Both => "both",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub sig_scale: f64,
    pub sig_bias: f64,
    pub supervision: Supervision,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sig_scale: 10.0,
            sig_bias: 0.0,
            supervision: Supervision::Seq,
        }
    }
}

fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mean K-way cross-entropy of `exp(logit_scale)·cos` against each
/// embedding's class.
pub fn instance_contrastive_loss(
    pooled: &[PooledObjectEmbedding],
    vocab: &ClassVocabulary,
    logit_scale: f64,
) -> Result<f64> {
    if pooled.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = logit_scale.exp();
    let mut total = 0.0;
    for p in pooled {
        if p.class_id >= vocab.len() {
            return Err(Error::InvalidArgument(format!("class {} outside vocabulary", p.class_id)));
        }
        let logits: Vec<f64> = vocab.cosines(&p.vector)?.iter().map(|c| scale * c).collect();
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite {
                op: "instance_contrastive_loss",
            });
        }
        total += softmax_cross_entropy(&logits, p.class_id);
    }
    Ok(total / pooled.len() as f64)
}

/// Match scores `σ(sig_scale·cos_j + sig_bias)`.
pub fn class_scores(pooled: &[f64], vocab: &ClassVocabulary, sig_scale: f64, sig_bias: f64) -> Result<Vec<f64>> {
    Ok(vocab.cosines(pooled)?.iter().map(|c| sigmoid(sig_scale * c + sig_bias)).collect())
}

/// `−(1/K)·Σ_j [c_j log s_j + (1−c_j) log(1−s_j)]` with one-hot `c`.
pub fn multiclass_bce_loss(scores: &[f64], target: usize, num_classes: usize) -> Result<f64> {
    if scores.len() != num_classes {
        return Err(Error::shape(
            "multiclass_bce_loss",
            format!("{} scores for {num_classes} classes", scores.len()),
        ));
    }
    if target >= num_classes {
        return Err(Error::InvalidArgument(format!("class {target} outside vocabulary")));
    }
    let sum: f64 = scores
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let s = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
            if j == target {
                s.ln()
            } else {
                (1.0 - s).ln()
            }
        })
        .sum();
    Ok(-sum / num_classes as f64)
}

fn one_hot(g: &mut Graph, targets: &[usize], k: usize) -> Result<Var> {
    let mut data = vec![0.0; targets.len() * k];
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::InvalidArgument(format!("class {t} outside vocabulary")));
        }
        data[i * k + t] = 1.0;
    }
    Ok(g.constant_matrix(targets.len(), k, data))
}

/// Tape version of [`instance_contrastive_loss`]: `emb` is B×E, `text` K×E,
/// `logit_scale` 1×1.
pub fn instance_contrastive_graph(g: &mut Graph, emb: Var, text: Var, logit_scale: Var, targets: &[usize]) -> Result<Var> {
    let cos = g.matmul_nt(emb, text)?;
    let (b, k) = g.shape(cos);
    if b != targets.len() {
        return Err(Error::shape("instance_contrastive_loss", format!("{b} embeddings, {} targets", targets.len())));
    }
    let scale = g.exp(logit_scale)?;
    let logits = g.scale_by(cos, scale)?;
    let lsm = g.log_softmax_rows(logits)?;
    let mask = one_hot(g, targets, k)?;
    let picked = g.mul(lsm, mask)?;
    let s = g.sum_all(picked)?;
    g.scale(s, -1.0 / b as f64)
}

/// Tape version of the multi-class BCE averaged over the batch.
pub fn multiclass_bce_graph(
    g: &mut Graph,
    emb: Var,
    text: Var,
    targets: &[usize],
    sig_scale: f64,
    sig_bias: f64,
) -> Result<Var> {
    let cos = g.matmul_nt(emb, text)?;
    let (b, k) = g.shape(cos);
    if b != targets.len() {
        return Err(Error::shape("multiclass_bce_loss", format!("{b} embeddings, {} targets", targets.len())));
    }
    let z = g.scale(cos, sig_scale)?;
    let z = g.add_scalar(z, sig_bias)?;
    let s = g.sigmoid(z)?;
    let s = g.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS)?;
    let log_s = g.log(s)?;
    let neg = g.scale(s, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let log_1ms = g.log(one_minus)?;
    let c = one_hot(g, targets, k)?;
    // c·log s + (1−c)·log(1−s) = log(1−s) + c·(log s − log(1−s))
    let diff = g.sub(log_s, log_1ms)?;
    let cd = g.mul(c, diff)?;
    let all = g.add(log_1ms, cd)?;
    let sum = g.sum_all(all)?;
    g.scale(sum, -1.0 / (b * k) as f64)
}

/// Tape handles of the objective's parts.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_ins: Var,
    pub l_ce: Var,
    pub total: Var,
}

/// Records the full objective for `batch` on `g`.
pub fn eagle_objective(
    g: &mut Graph,
    model: &Model<Var>,
    arch: &ArchConfig,
    vocab: &Vocab,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let tape = vision_forward(g, &model.vision, arch, &batch.images)?;
    let ids: Vec<usize> = (0..vocab.num_classes()).collect();
    let text = text_forward(g, &model.text, arch, vocab, &ids)?;
    let mut embeddings = Vec::new();
    if cfg.supervision.uses_seq() {
        let overlaps: Vec<_> = batch.overlaps.iter().collect();
        let pooled = pool_tokens(g, tape.raw_seq, &overlaps, arch.seq_len())?;
        let z = g.matmul(pooled, model.vision.proj)?;
        embeddings.push(g.l2_normalize_rows(z)?);
    }
    if cfg.supervision.uses_cls() {
        embeddings.push(tape.cls);
    }
    let mut l_ins = None;
    let mut l_ce = None;
    for emb in embeddings {
        let a = instance_contrastive_graph(g, emb, text, model.logit_scale, &batch.class_ids)?;
        let b = multiclass_bce_graph(g, emb, text, &batch.class_ids, cfg.sig_scale, cfg.sig_bias)?;
        l_ins = Some(match l_ins {
            Some(prev) => g.add(prev, a)?,
            None => a,
        });
        l_ce = Some(match l_ce {
            Some(prev) => g.add(prev, b)?,
            None => b,
        });
    }
    let (l_ins, l_ce) = (l_ins.expect("at least one embedding"), l_ce.expect("at least one embedding"));
    let total = g.add(l_ins, l_ce)?;
    Ok(LossVars { l_ins, l_ce, total })
}

/// Evaluates the objective without gradients.
pub fn total_loss(model: &Model, arch: &ArchConfig, vocab: &Vocab, batch: &Batch, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, &|_| false);
    let lv = eagle_objective(&mut g, &vars, arch, vocab, batch, cfg)?;
    Ok(LossBreakdown::new(g.scalar(lv.l_ins), g.scalar(lv.l_ce)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_vocab(cosines: &[f64]) -> (ClassVocabulary, Vec<f64>) {
        // φ = e₀ and l_j = (c_j, √(1−c_j²), 0) gives ⟨φ, l_j⟩ = c_j.
        let rows: Vec<Vec<f64>> = cosines.iter().map(|&c| vec![c, (1.0 - c * c).sqrt(), 0.0]).collect();
        let names = (0..cosines.len()).map(|j| format!("c{j}")).collect();
        (
            ClassVocabulary::new(names, Tensor::from_rows(&rows).unwrap()).unwrap(),
            vec![1.0, 0.0, 0.0],
        )
    }

    fn pooled(v: &[f64], class_id: usize) -> PooledObjectEmbedding {
        PooledObjectEmbedding {
            vector: v.to_vec(),
            class_id,
            image_id: "x".into(),
            mask_id: 0,
        }
    }

    #[test]
    fn equal_logits_give_log_k() {
        for k in [2usize, 8] {
            let (voc, phi) = unit_vocab(&vec![0.3; k]);
            let l = instance_contrastive_loss(&[pooled(&phi, 1)], &voc, 0.7).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn three_class_contrastive_value() {
        let (voc, phi) = unit_vocab(&[0.9, 0.1, -0.2]);
        let l = instance_contrastive_loss(&[pooled(&phi, 0)], &voc, 0.0).unwrap();
        let e = [0.9f64.exp(), 0.1f64.exp(), (-0.2f64).exp()];
        let expected = -(e[0] / (e[0] + e[1] + e[2])).ln();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn saturated_target_gives_zero() {
        let (voc, phi) = unit_vocab(&[1.0, -1.0]);
        let l = instance_contrastive_loss(&[pooled(&phi, 0)], &voc, 6.0).unwrap();
        assert!(l < 1e-100);
    }

    #[test]
    fn scores() {
        let (voc, phi) = unit_vocab(&[0.0, 1.0]);
        let s = class_scores(&phi, &voc, 10.0, 0.0).unwrap();
        assert_eq!(s[0], 0.5);
        assert!((s[1] - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn bce_values() {
        for k in [2usize, 5] {
            assert!((multiclass_bce_loss(&vec![0.5; k], 0, k).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
        let v = multiclass_bce_loss(&[0.9, 0.2, 0.1], 0, 3).unwrap();
        assert!((v - 0.1446).abs() < 1e-4);
        assert!(multiclass_bce_loss(&[1.0, 0.0, 0.0], 0, 3).unwrap() < 1e-6);
        assert!(multiclass_bce_loss(&[0.5, 0.5], 0, 3).is_err());
    }

    #[test]
    fn graph_losses_match_scalar_versions() {
        let (voc, _) = unit_vocab(&[0.9, 0.1, -0.2]);
        let embs = [vec![0.6, 0.8, 0.0], vec![0.0, 0.6, 0.8]];
        let targets = [2usize, 1];
        let mut g = Graph::new();
        let e = g.constant(&Tensor::from_rows(&embs).unwrap());
        let t = g.constant(&voc.text_embeddings);
        let ls = g.constant(&Tensor::scalar(0.4));
        let ins = instance_contrastive_graph(&mut g, e, t, ls, &targets).unwrap();
        let bce = multiclass_bce_graph(&mut g, e, t, &targets, 10.0, 0.5).unwrap();
        let p: Vec<_> = embs.iter().zip(targets).map(|(v, c)| pooled(v, c)).collect();
        let ins_ref = instance_contrastive_loss(&p, &voc, 0.4).unwrap();
        let bce_ref = p
            .iter()
            .map(|q| multiclass_bce_loss(&class_scores(&q.vector, &voc, 10.0, 0.5).unwrap(), q.class_id, 3).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((g.scalar(ins) - ins_ref).abs() < 1e-12);
        assert!((g.scalar(bce) - bce_ref).abs() < 1e-12);
    }

    #[test]
    fn supervision_round_trip() {
        for s in Supervision::ALL {
            assert_eq!(s.to_string().parse::<Supervision>().unwrap(), s);
        }
    }
}

//! Zero-shot accuracy from the CLS embedding and from the patch sequence,
//! multi-label false positives in the top K, linear probes on frozen
//! features, and before/after drift.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Dataset, SegmentedImage, Split};
use crate::encoders::{encode_images, ArchConfig, EncoderOutput, Model};
use crate::error::{Error, Result};
use crate::losses::ClassVocabulary;
use crate::tensor::Tensor;

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

pub const DEFAULT_FP_KS: [usize; 3] = [1, 3, 5];

/// Encodes `images` in fixed-size chunks, in parallel, preserving order.
pub fn encode_all(model: &Model, arch: &ArchConfig, images: &[&SegmentedImage]) -> Result<Vec<EncoderOutput>> {
    let chunks: Vec<Vec<EncoderOutput>> = images
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let px: Vec<&Tensor> = c.iter().map(|s| &s.pixels).collect();
            encode_images(model, arch, &px)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Class logits of one image: cosine of the CLS embedding, and the mean
/// over tokens of each token's cosine.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageLogits {
    pub cls: Vec<f64>,
    pub seq: Vec<f64>,
}

pub fn image_logits(output: &EncoderOutput, vocab: &ClassVocabulary) -> Result<ImageLogits> {
    let cls = vocab.cosines(&output.cls)?;
    let l = output.seq.rows();
    let mut seq = vec![0.0; vocab.len()];
    for r in 0..l {
        for (acc, c) in seq.iter_mut().zip(vocab.cosines(output.seq.row(r))?) {
            *acc += c;
        }
    }
    seq.iter_mut().for_each(|v| *v /= l as f64);
    Ok(ImageLogits { cls, seq })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let hits = logits.iter().zip(labels).filter(|(l, y)| argmax(l) == **y).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn all_logits(model: &Model, arch: &ArchConfig, vocab: &ClassVocabulary, images: &[&SegmentedImage]) -> Result<Vec<ImageLogits>> {
    encode_all(model, arch, images)?.iter().map(|o| image_logits(o, vocab)).collect()
}

fn dominant_labels(images: &[&SegmentedImage]) -> Vec<usize> {
    images.iter().map(|s| s.dominant_class).collect()
}

/// Accuracy of the CLS-embedding prediction against each image's dominant
/// class.
pub fn zero_shot_cls(model: &Model, arch: &ArchConfig, vocab: &ClassVocabulary, images: &[&SegmentedImage]) -> Result<f64> {
    let logits: Vec<Vec<f64>> = all_logits(model, arch, vocab, images)?.into_iter().map(|l| l.cls).collect();
    accuracy(&logits, &dominant_labels(images))
}

/// Accuracy of the token-averaged prediction against each image's dominant
/// class.
pub fn zero_shot_seq(model: &Model, arch: &ArchConfig, vocab: &ClassVocabulary, images: &[&SegmentedImage]) -> Result<f64> {
    let logits: Vec<Vec<f64>> = all_logits(model, arch, vocab, images)?.into_iter().map(|l| l.seq).collect();
    accuracy(&logits, &dominant_labels(images))
}

/// Mean over images of `|top-K \ GT| / K` for each K in `ks`.
pub fn fp_at_k(logits: &[Vec<f64>], truth: &[BTreeSet<usize>], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if logits.is_empty() || logits.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rankings for {} ground-truth sets",
            logits.len(),
            truth.len()
        )));
    }
    let k_max = logits[0].len();
    let mut out = BTreeMap::new();
    for &k in ks {
        if k == 0 || k > k_max {
            return Err(Error::InvalidArgument(format!("K = {k} outside 1..={k_max}")));
        }
        let mut total = 0.0;
        for (row, gt) in logits.iter().zip(truth) {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let fp = order[..k].iter().filter(|c| !gt.contains(c)).count();
            total += fp as f64 / k as f64;
        }
        out.insert(k, total / logits.len() as f64);
    }
    Ok(out)
}

/// FP@K from the token-averaged logits, with every instance class of an
/// image as ground truth.
pub fn false_positives_at_k(
    model: &Model,
    arch: &ArchConfig,
    vocab: &ClassVocabulary,
    images: &[&SegmentedImage],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if let Some(&k) = ks.iter().find(|&&k| k > vocab.len()) {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds the {} classes", vocab.len())));
    }
    let logits: Vec<Vec<f64>> = all_logits(model, arch, vocab, images)?.into_iter().map(|l| l.seq).collect();
    let truth: Vec<BTreeSet<usize>> = images.iter().map(|s| s.class_set()).collect();
    fp_at_k(&logits, &truth, ks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    Cls,
    Seq,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 0.1, epochs: 500 }
    }
}

/// Softmax regression from zero weights by full-batch gradient descent.
/// Returns `(W, b)` with `W` as `dim×K` row-major.
pub fn fit_linear(features: &[Vec<f64>], labels: &[usize], k: usize, cfg: &ProbeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument("probe needs matching, nonempty features and labels".into()));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    let mut z = vec![0.0; k];
    for _ in 0..cfg.epochs {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        for (x, &y) in features.iter().zip(labels) {
            for j in 0..k {
                z[j] = b[j] + (0..d).map(|i| x[i] * w[i * k + j]).sum::<f64>();
            }
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                let p = (z[j] - max).exp() / sum - if j == y { 1.0 } else { 0.0 };
                gb[j] += p;
                for i in 0..d {
                    gw[i * k + j] += p * x[i];
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g / n;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * g / n;
        }
    }
    Ok((w, b))
}

/// Trains on `(train_x, train_y)` and reports accuracy on the validation
/// pair.
pub fn probe_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    k: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (w, b) = fit_linear(train_x, train_y, k, cfg)?;
    let d = b.len();
    let logits: Vec<Vec<f64>> = val_x
        .iter()
        .map(|x| (0..d).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * d + j]).sum::<f64>()).collect())
        .collect();
    accuracy(&logits, val_y)
}

/// Probe features: the CLS embedding, or the token mean (a linear probe's
/// averaged per-token logits equal its logits on the token mean).
pub fn probe_features(output: &EncoderOutput, mode: ProbeMode) -> Vec<f64> {
    match mode {
        ProbeMode::Cls => output.cls.clone(),
        ProbeMode::Seq => {
            let (l, e) = (output.seq.rows(), output.seq.cols());
            (0..e).map(|j| (0..l).map(|r| output.seq.at(r, j)).sum::<f64>() / l as f64).collect()
        }
    }
}

/// Linear-probe validation accuracy on frozen features, labels being each
/// image's dominant class.
pub fn linear_probe(model: &Model, arch: &ArchConfig, dataset: &Dataset, mode: ProbeMode, cfg: &ProbeConfig) -> Result<f64> {
    let feats = |split| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let imgs = dataset.split(split);
        let out = encode_all(model, arch, &imgs)?;
        Ok((out.iter().map(|o| probe_features(o, mode)).collect(), dominant_labels(&imgs)))
    };
    let (tx, ty) = feats(Split::Train)?;
    let (vx, vy) = feats(Split::Val)?;
    probe_accuracy(&tx, &ty, &vx, &vy, dataset.num_classes(), cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub cls_acc: f64,
    pub seq_acc: f64,
    pub fp_at: BTreeMap<usize, f64>,
    pub probe_cls_acc: Option<f64>,
    pub probe_seq_acc: Option<f64>,
}

impl EvalReport {
    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "cls_acc={}", self.cls_acc);
        let _ = writeln!(s, "seq_acc={}", self.seq_acc);
        for (k, v) in &self.fp_at {
            let _ = writeln!(s, "fp@{k}={v}");
        }
        if let Some(v) = self.probe_cls_acc {
            let _ = writeln!(s, "probe_cls_acc={v}");
        }
        if let Some(v) = self.probe_seq_acc {
            let _ = writeln!(s, "probe_seq_acc={v}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("report line `{line}` lacks `=`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("report lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("report value `{k}` is not a number")))
        };
        let mut fp_at = BTreeMap::new();
        for (k, v) in &map {
            if let Some(n) = k.strip_prefix("fp@") {
                let n: usize = n.parse().map_err(|_| Error::InvalidArgument(format!("bad report key `{k}`")))?;
                let v: f64 = v.parse().map_err(|_| Error::InvalidArgument(format!("bad value for `{k}`")))?;
                fp_at.insert(n, v);
            }
        }
        Ok(EvalReport {
            n_samples: num("n_samples")? as usize,
            cls_acc: num("cls_acc")?,
            seq_acc: num("seq_acc")?,
            fp_at,
            probe_cls_acc: map.contains_key("probe_cls_acc").then(|| num("probe_cls_acc")).transpose()?,
            probe_seq_acc: map.contains_key("probe_seq_acc").then(|| num("probe_seq_acc")).transpose()?,
        })
    }

    pub fn fp(&self, k: usize) -> Option<f64> {
        self.fp_at.get(&k).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub fp_ks: Vec<usize>,
    /// Also run linear probes (slow).
    pub probe: Option<ProbeConfig>,
}

/// Zero-shot accuracies over `split` and FP@K over its multi-object images.
pub fn evaluate(
    model: &Model,
    arch: &ArchConfig,
    vocab: &ClassVocabulary,
    dataset: &Dataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let images = dataset.split(split);
    if images.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let logits = all_logits(model, arch, vocab, &images)?;
    let labels = dominant_labels(&images);
    let cls: Vec<Vec<f64>> = logits.iter().map(|l| l.cls.clone()).collect();
    let seq: Vec<Vec<f64>> = logits.iter().map(|l| l.seq.clone()).collect();
    let (multi_seq, truth): (Vec<Vec<f64>>, Vec<BTreeSet<usize>>) = images
        .iter()
        .zip(&seq)
        .filter(|(img, _)| img.instances.len() >= 2)
        .map(|(img, s)| (s.clone(), img.class_set()))
        .unzip();
    let fp_at = if opts.fp_ks.is_empty() || multi_seq.is_empty() {
        BTreeMap::new()
    } else {
        fp_at_k(&multi_seq, &truth, &opts.fp_ks)?
    };
    let (probe_cls_acc, probe_seq_acc) = match &opts.probe {
        Some(cfg) => (
            Some(linear_probe(model, arch, dataset, ProbeMode::Cls, cfg)?),
            Some(linear_probe(model, arch, dataset, ProbeMode::Seq, cfg)?),
        ),
        None => (None, None),
    };
    Ok(EvalReport {
        n_samples: images.len(),
        cls_acc: accuracy(&cls, &labels)?,
        seq_acc: accuracy(&seq, &labels)?,
        fp_at,
        probe_cls_acc,
        probe_seq_acc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub cls_delta: f64,
    pub seq_delta: f64,
    pub fp_deltas: BTreeMap<usize, f64>,
    pub probe_cls_delta: Option<f64>,
    pub probe_seq_delta: Option<f64>,
}

/// `after − before` for every shared metric.
pub fn drift_report(before: &EvalReport, after: &EvalReport) -> DriftReport {
    if before.n_samples != after.n_samples {
        log::warn!("drift between reports over {} and {} samples", before.n_samples, after.n_samples);
    }
    let fp_deltas = before
        .fp_at
        .iter()
        .filter_map(|(k, b)| after.fp_at.get(k).map(|a| (*k, a - b)))
        .collect();
    let delta = |b: Option<f64>, a: Option<f64>| b.zip(a).map(|(b, a)| a - b);
    DriftReport {
        cls_delta: after.cls_acc - before.cls_acc,
        seq_delta: after.seq_acc - before.seq_acc,
        fp_deltas,
        probe_cls_delta: delta(before.probe_cls_acc, after.probe_cls_acc),
        probe_seq_delta: delta(before.probe_seq_acc, after.probe_seq_acc),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn fp_worst_and_best_cases() {
        let r = fp_at_k(&[vec![0.0, 1.0, 2.0]], &[set(&[0])], &[1]).unwrap();
        assert_eq!(r[&1], 1.0);
        let r = fp_at_k(&[vec![0.3, 0.1, 0.2]], &[set(&[0, 1, 2])], &[1, 2, 3]).unwrap();
        assert!(r.values().all(|v| *v == 0.0));
        assert!(fp_at_k(&[vec![0.0; 3]], &[set(&[0])], &[4]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn separable_probe_is_perfect() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.1 * i as f64]).collect();
        let ys: Vec<usize> = (0..20).map(|i| i % 2).collect();
        assert_eq!(probe_accuracy(&xs, &ys, &xs, &ys, 2, &ProbeConfig::default()).unwrap(), 1.0);
    }

    fn report(cls: f64, seq: f64, fp1: f64) -> EvalReport {
        EvalReport {
            n_samples: 10,
            cls_acc: cls,
            seq_acc: seq,
            fp_at: [(1, fp1)].into_iter().collect(),
            probe_cls_acc: Some(0.5),
            probe_seq_acc: None,
        }
    }

    #[test]
    fn drift_identity_and_swap() {
        let (a, b) = (report(0.5, 0.25, 0.75), report(0.625, 0.5, 0.125));
        let id = drift_report(&a, &a);
        assert_eq!((id.cls_delta, id.seq_delta, id.fp_deltas[&1]), (0.0, 0.0, 0.0));
        let f = drift_report(&a, &b);
        let r = drift_report(&b, &a);
        assert_eq!(f.cls_delta, -r.cls_delta);
        assert_eq!(f.seq_delta, -r.seq_delta);
        assert_eq!(f.fp_deltas[&1], -r.fp_deltas[&1]);
    }

    #[test]
    fn report_round_trip() {
        let r = report(0.1 + 0.2, 1.0 / 3.0, 0.7);
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
    }
}

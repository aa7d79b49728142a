//! End-to-end runs: pretraining, the grounding tuning loop with periodic
//! evaluation, checkpoints and exact resume, gradient checks and the
//! training-strategy grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::checkpoint::{self, tensor_u64, u64_tensor};
use crate::config::TrainConfig;
use crate::data::{generate_samples, make_batch, Dataset, DatasetManifest, MaskSampler, Split};
use crate::encoders::{clip_pretrain, init_params, Model, PretrainLog, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, DEFAULT_FP_KS};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::losses::{eagle_objective, ClassVocabulary, LossBreakdown, Supervision};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,lr,loss_ins,loss_ce,loss_total,cls_acc,seq_acc,fp1,fp3,fp5";

pub fn root_rng(cfg: &TrainConfig) -> RngStream {
    RngStream::new(cfg.seed)
}

pub fn vocab_for(dataset: &Dataset) -> Result<Vocab> {
    Vocab::new(dataset.class_names())
}

/// Fresh parameters for `cfg`.
pub fn init_model(cfg: &TrainConfig, vocab: &Vocab) -> Result<Model> {
    init_params(&cfg.arch, vocab, &root_rng(cfg).split("init"))
}

/// Builds the dataset in memory (no files), for tests and gradient checks.
pub fn in_memory_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let gen = cfg.generate_config();
    let images = generate_samples(&gen, &root_rng(cfg).split("data"))?;
    let entries = images
        .iter()
        .map(|img| crate::data::ManifestEntry {
            image_id: img.id.clone(),
            image_path: format!("images/{}.ppm", img.id).into(),
            masks: img
                .instances
                .iter()
                .enumerate()
                .map(|(j, inst)| (format!("masks/{}_{j}.pgm", img.id).into(), inst.class_id))
                .collect(),
            split: Split::of(&img.id),
        })
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            root: Default::default(),
            class_names: gen.class_names(),
            entries,
        },
        images,
    })
}

/// Contrastive pretraining from a fresh init.
pub fn pretrain(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Model, PretrainLog)> {
    let vocab = vocab_for(dataset)?;
    let model = init_model(cfg, &vocab)?;
    clip_pretrain(model, &cfg.arch, &vocab, dataset, &cfg.pretrain, &root_rng(cfg).split("pretrain"))
}

/// Model parameters as a checkpoint table.
pub fn model_checkpoint(model: &Model) -> BTreeMap<String, Tensor> {
    model.named()
}

/// Loads model parameters from a checkpoint table, ignoring `opt.` and
/// `rng.` entries.
pub fn model_from_checkpoint(cfg: &TrainConfig, vocab: &Vocab, tensors: BTreeMap<String, Tensor>) -> Result<Model> {
    let (params, _, _) = checkpoint::partition(tensors);
    let mut model = init_model(cfg, vocab)?;
    if params.len() != model.names().len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            model.names().len()
        )));
    }
    model.load_named(&params)?;
    Ok(model)
}

/// Zero-shot and FP@K metrics on the validation split.
pub fn evaluate_model(cfg: &TrainConfig, model: &Model, dataset: &Dataset, probe: bool) -> Result<EvalReport> {
    let vocab = vocab_for(dataset)?;
    let cv = ClassVocabulary::from_model(model, &cfg.arch, &vocab)?;
    let opts = EvalOptions {
        fp_ks: DEFAULT_FP_KS.iter().copied().filter(|&k| k <= cv.len()).collect(),
        probe: probe.then_some(cfg.probe),
    };
    evaluate(model, &cfg.arch, &cv, dataset, Split::Val, &opts)
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Completed optimizer steps.
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub eval: Option<EvalReport>,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.loss.l_ins, self.loss.l_ce, self.loss.total
        );
        match &self.eval {
            Some(e) => {
                let fp = |k| e.fp(k).map(|v| v.to_string()).unwrap_or_default();
                let _ = write!(s, ",{},{},{},{},{}", e.cls_acc, e.seq_acc, fp(1), fp(3), fp(5));
            }
            None => s.push_str(",,,,,"),
        }
        s
    }
}

/// Full CSV text for `rows`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn diverged(step: u64, e: Error) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            step: step as usize,
            source: Box::new(e),
        }
    } else {
        e
    }
}

/// Tuning state: everything a checkpoint must hold to resume exactly.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub dataset: &'a Dataset,
    pub vocab: Vocab,
    pub model: Model,
    pub optimizer: Optimizer,
    pub sampler: MaskSampler,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, dataset: &'a Dataset, model: Model) -> Result<Self> {
        cfg.validate()?;
        let vocab = vocab_for(dataset)?;
        let optimizer = Optimizer::new(&model, &cfg.select(), cfg.adam(), cfg.galore(), cfg.schedule());
        let sampler = MaskSampler::new(
            dataset,
            &dataset.indices(Split::Train),
            cfg.sampling,
            root_rng(cfg).split("sampler"),
        )?;
        Ok(Trainer {
            cfg: cfg.clone(),
            dataset,
            vocab,
            model,
            optimizer,
            sampler,
        })
    }

    /// Restores a trainer from a tuning checkpoint.
    pub fn resume(cfg: &TrainConfig, dataset: &'a Dataset, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let (params, opt, rng) = checkpoint::partition(tensors);
        let vocab = vocab_for(dataset)?;
        let mut model = init_model(cfg, &vocab)?;
        model.load_named(&params)?;
        let mut t = Trainer::new(cfg, dataset, model)?;
        t.optimizer.load_named(&opt)?;
        let get = |k: &str| {
            rng.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{k}`")))
                .and_then(tensor_u64)
        };
        if get("rng.sampler.seed")? != t.sampler.seed() {
            return Err(Error::InvalidArgument("checkpoint was written with a different seed".into()));
        }
        t.sampler.set_position(get("rng.sampler.position")?);
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    pub fn is_done(&self) -> bool {
        self.optimizer.step >= self.cfg.total_steps
    }

    pub fn checkpoint(&self) -> BTreeMap<String, Tensor> {
        let mut t = self.model.named();
        t.extend(self.optimizer.to_named());
        t.insert("rng.seed".into(), u64_tensor(self.cfg.seed));
        t.insert("rng.sampler.seed".into(), u64_tensor(self.sampler.seed()));
        t.insert("rng.sampler.position".into(), u64_tensor(self.sampler.position()));
        t
    }

    /// Samples a batch, takes one optimizer step and evaluates if due.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let step = self.optimizer.step;
        let refs = self.sampler.next_batch(self.dataset, self.cfg.batch_size)?;
        let batch = make_batch(self.dataset, &refs, &self.cfg.arch, self.cfg.theta)?;
        let loss_cfg = self.cfg.loss();
        let (arch, vocab) = (&self.cfg.arch, &self.vocab);
        let opt = &self.optimizer;
        let (_, parts, grads) = self
            .model
            .grad(&|name| opt.is_trainable(name), |g: &mut Graph, p| {
                let lv = eagle_objective(g, p, arch, vocab, &batch, &loss_cfg)?;
                Ok((lv.total, LossBreakdown::new(g.scalar(lv.l_ins), g.scalar(lv.l_ce))))
            })
            .map_err(|e| diverged(step, e))?;
        let lr = self.optimizer.step(&mut self.model, &grads).map_err(|e| diverged(step, e))?;
        let done = self.optimizer.step;
        let due = (self.cfg.eval_every > 0 && done.is_multiple_of(self.cfg.eval_every)) || done == self.cfg.total_steps;
        let eval = if due {
            Some(evaluate_model(&self.cfg, &self.model, self.dataset, false)?)
        } else {
            None
        };
        Ok(MetricsRow {
            step: done,
            lr,
            loss: parts,
            eval,
        })
    }

    /// Steps until `total_steps`, calling `on_step` after each; it may
    /// write checkpoints.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &MetricsRow) -> Result<()>) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            let row = self.step()?;
            log::info!(
                "step {} lr {:.3e} loss {:.4} (ins {:.4}, ce {:.4})",
                row.step,
                row.lr,
                row.loss.total,
                row.loss.l_ins,
                row.loss.l_ce
            );
            on_step(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Tunes `model` to completion without checkpoints.
pub fn tune(cfg: &TrainConfig, dataset: &Dataset, model: Model) -> Result<(Model, Vec<MetricsRow>)> {
    let mut t = Trainer::new(cfg, dataset, model)?;
    let rows = t.run(|_, _| Ok(()))?;
    Ok((t.model, rows))
}

/// Central-difference check of the full objective on a small batch from
/// the training split, over every parameter tensor.
pub fn gradient_check(cfg: &TrainConfig, dataset: &Dataset, model: &Model) -> Result<GradCheckReport> {
    let vocab = vocab_for(dataset)?;
    let mut sampler = MaskSampler::new(
        dataset,
        &dataset.indices(Split::Train),
        cfg.sampling,
        root_rng(cfg).split("gradcheck"),
    )?;
    let refs = sampler.next_batch(dataset, cfg.gradcheck_batch)?;
    let batch = make_batch(dataset, &refs, &cfg.arch, cfg.theta)?;
    let loss_cfg = cfg.loss();
    let named = model.named();
    check_gradients(
        &named,
        |g, vars| {
            let p = model.map("", &mut |name, _| vars[&name]);
            Ok(eagle_objective(g, &p, &cfg.arch, &vocab, &batch, &loss_cfg)?.total)
        },
        cfg.gradcheck_h,
        cfg.gradcheck_tol,
        cfg.seed,
    )
}

/// One cell of the training-strategy grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub optimizer: OptimizerKind,
    pub supervision: Supervision,
}

impl AblationCell {
    pub fn grid() -> Vec<AblationCell> {
        let mut out = Vec::new();
        for optimizer in [OptimizerKind::AdamW, OptimizerKind::GaLoreAdamW] {
            for supervision in Supervision::ALL {
                out.push(AblationCell { optimizer, supervision });
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let opt = match self.optimizer {
            OptimizerKind::AdamW => "full",
            OptimizerKind::GaLoreAdamW => "galore",
        };
        format!("{opt}_{}", self.supervision)
    }

    /// `base` with this cell's optimizer and supervision. The CLS token is
    /// trainable whenever the CLS embedding is supervised.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            supervision: self.supervision,
            freeze_cls: base.freeze_cls && !self.supervision.uses_cls(),
            ..base.clone()
        }
    }
}

/// Tunes `start` under every grid cell and evaluates each result.
pub fn ablate(cfg: &TrainConfig, dataset: &Dataset, start: &Model) -> Result<Vec<(AblationCell, EvalReport)>> {
    AblationCell::grid()
        .into_iter()
        .map(|cell| {
            log::info!("ablation cell {}", cell.name());
            let (model, _) = tune(&cell.config(cfg), dataset, start.clone())?;
            Ok((cell, evaluate_model(cfg, &model, dataset, false)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_row_layout() {
        let row = MetricsRow {
            step: 3,
            lr: 0.5,
            loss: LossBreakdown::new(1.0, 0.25),
            eval: None,
        };
        assert_eq!(row.csv(), "3,0.5,1,0.25,1.25,,,,,");
        assert_eq!(METRICS_HEADER.split(',').count(), row.csv().split(',').count());
    }

    #[test]
    fn grid_has_six_cells() {
        let names: Vec<String> = AblationCell::grid().iter().map(|c| c.name()).collect();
        assert_eq!(names, ["full_cls", "full_seq", "full_both", "galore_cls", "galore_seq", "galore_both"]);
    }

    #[test]
    fn tiny_tune_runs_and_is_deterministic() {
        let cfg = TrainConfig::tiny();
        let data = in_memory_dataset(&cfg).unwrap();
        let vocab = vocab_for(&data).unwrap();
        let m = init_model(&cfg, &vocab).unwrap();
        let (_, a) = tune(&cfg, &data, m.clone()).unwrap();
        let (_, b) = tune(&cfg, &data, m).unwrap();
        assert_eq!(metrics_csv(&a), metrics_csv(&b));
        assert_eq!(a.len() as u64, cfg.total_steps);
        assert!(a.last().unwrap().eval.is_some());
    }
}

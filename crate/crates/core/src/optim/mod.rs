//! Parameter selection and the model-level optimizer.

mod adamw;
mod galore;
mod schedule;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use adamw::{AdamHyper, AdamState, Moments};
pub use galore::{refresh_projection, GaLoreHyper, GaLoreParamState, ProjectionType, Side};
pub use schedule::{Schedule, ScheduleShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Full-parameter AdamW ("full-finetune").
    AdamW,
    /// Low-rank projected AdamW on attention/MLP matrices, AdamW elsewhere.
    GaLoreAdamW,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> std::result::Result<Self, Error> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "galore_adamw" => Ok(OptimizerKind::GaLoreAdamW),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (adamw|galore_adamw)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::GaLoreAdamW => "galore_adamw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Projected,
    Full,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectOptions {
    pub optimizer: OptimizerKind,
    pub freeze_text: bool,
    pub freeze_cls: bool,
}

/// True for attention q/k/v/out and MLP fc1/fc2 weight matrices and the
/// patch embedding.
pub fn is_projectable(name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    matches!(
        parts.as_slice(),
        ["vision", "patch", "weight"]
    ) || matches!(
        parts.as_slice(),
        [_, "blocks", idx, layer, "weight"]
            if idx.parse::<usize>().is_ok()
                && matches!(*layer, "q" | "k" | "v" | "out" | "fc1" | "fc2")
    )
}

/// Partitions the model's parameters by how they are optimized.
pub fn select_params(model: &Model, opts: &SelectOptions) -> BTreeMap<String, ParamGroup> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, _| {
        let group = if (opts.freeze_text && name.starts_with("text."))
            || (opts.freeze_cls && name == "vision.cls_token")
        {
            ParamGroup::Frozen
        } else if opts.optimizer == OptimizerKind::GaLoreAdamW && is_projectable(&name) {
            ParamGroup::Projected
        } else {
            ParamGroup::Full
        };
        out.insert(name, group);
    });
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamState {
    Adam(AdamState),
    GaLore(GaLoreParamState),
    Frozen,
}

/// Optimizer state for every model parameter plus the global step.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub adam: AdamHyper,
    pub galore: GaLoreHyper,
    pub schedule: Schedule,
    pub states: BTreeMap<String, ParamState>,
    pub step: u64,
}

impl Optimizer {
    pub fn new(model: &Model, opts: &SelectOptions, adam: AdamHyper, galore: GaLoreHyper, schedule: Schedule) -> Self {
        let groups = select_params(model, opts);
        let named = model.named();
        let states = groups
            .into_iter()
            .map(|(name, group)| {
                let t = &named[&name];
                let st = match group {
                    ParamGroup::Frozen => ParamState::Frozen,
                    ParamGroup::Full => ParamState::Adam(AdamState::new(t.shape())),
                    ParamGroup::Projected => {
                        let (m, n) = (t.rows(), t.cols());
                        if galore.rank > m.min(n) {
                            warn!("galore rank {} exceeds min dim of `{name}` ({m}x{n}); clamping", galore.rank);
                        }
                        ParamState::GaLore(GaLoreParamState::new(m, n, galore.rank))
                    }
                };
                (name, st)
            })
            .collect();
        Optimizer {
            adam,
            galore,
            schedule,
            states,
            step: 0,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !matches!(self.states.get(name), Some(ParamState::Frozen) | None)
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.states
            .values()
            .filter(|s| {
                matches!(
                    (s, group),
                    (ParamState::Adam(_), ParamGroup::Full)
                        | (ParamState::GaLore(_), ParamGroup::Projected)
                        | (ParamState::Frozen, ParamGroup::Frozen)
                )
            })
            .count()
    }

    /// Applies one update to every trainable parameter; returns the
    /// learning rate used.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let lr = self.schedule.lr(self.step);
        let (adam, galore) = (self.adam, self.galore);
        let mut result = Ok(());
        let states = &mut self.states;
        model.visit_mut("", &mut |name, w| {
            if result.is_err() {
                return;
            }
            let Some(state) = states.get_mut(&name) else {
                result = Err(Error::InvalidArgument(format!("no optimizer state for `{name}`")));
                return;
            };
            if matches!(state, ParamState::Frozen) {
                return;
            }
            let Some(g) = grads.get(&name) else {
                result = Err(Error::InvalidArgument(format!("missing gradient for `{name}`")));
                return;
            };
            let delta = match state {
                ParamState::Adam(s) => s.step(w, g, lr, &adam),
                ParamState::GaLore(s) => s.step(w, g, lr, &adam, &galore),
                ParamState::Frozen => unreachable!(),
            };
            match delta {
                Ok(d) => w.data_mut().iter_mut().zip(d.data()).for_each(|(x, dx)| *x += dx),
                Err(e) => result = Err(e),
            }
        });
        result?;
        model.clamp_logit_scale();
        self.step += 1;
        Ok(lr)
    }

    /// Serialises the state as named tensors under the `opt.` prefix.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("opt.step".to_string(), Tensor::scalar(self.step as f64));
        for (name, st) in &self.states {
            let p = format!("opt.{name}");
            match st {
                ParamState::Frozen => {
                    out.insert(format!("{p}.meta"), Tensor::new(vec![1], vec![0.0]).unwrap());
                }
                ParamState::Adam(s) => {
                    out.insert(format!("{p}.meta"), Tensor::new(vec![2], vec![1.0, s.moments.t as f64]).unwrap());
                    out.insert(format!("{p}.m"), s.moments.m.clone());
                    out.insert(format!("{p}.v"), s.moments.v.clone());
                }
                ParamState::GaLore(s) => {
                    let side = match s.side {
                        Side::Left => 0.0,
                        Side::Right => 1.0,
                    };
                    let meta = vec![2.0, s.moments.t as f64, s.step as f64, s.last_refresh as f64, side, s.rank as f64];
                    out.insert(format!("{p}.meta"), Tensor::new(vec![6], meta).unwrap());
                    out.insert(format!("{p}.m"), s.moments.m.clone());
                    out.insert(format!("{p}.v"), s.moments.v.clone());
                    if let Some(proj) = &s.projection {
                        out.insert(format!("{p}.proj"), proj.clone());
                    }
                }
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::to_named`]; hyperparameters
    /// come from `self`, the per-parameter states from `named`.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        let missing = |k: &str| Error::InvalidArgument(format!("checkpoint lacks `{k}`"));
        let get = |k: &str| named.get(k).ok_or_else(|| missing(k));
        self.step = get("opt.step")?.data()[0] as u64;
        for (name, st) in self.states.iter_mut() {
            let p = format!("opt.{name}");
            let meta = get(&format!("{p}.meta"))?.data().to_vec();
            let kind = meta[0] as u32;
            *st = match kind {
                0 => ParamState::Frozen,
                1 => ParamState::Adam(AdamState {
                    moments: Moments {
                        m: get(&format!("{p}.m"))?.clone(),
                        v: get(&format!("{p}.v"))?.clone(),
                        t: meta[1] as u64,
                    },
                }),
                2 => {
                    let side = if meta[4] == 0.0 { Side::Left } else { Side::Right };
                    ParamState::GaLore(GaLoreParamState {
                        side,
                        rank: meta[5] as usize,
                        projection: named.get(&format!("{p}.proj")).cloned(),
                        moments: Moments {
                            m: get(&format!("{p}.m"))?.clone(),
                            v: get(&format!("{p}.v"))?.clone(),
                            t: meta[1] as u64,
                        },
                        step: meta[2] as u64,
                        last_refresh: meta[3] as u64,
                    })
                }
                other => return Err(Error::InvalidArgument(format!("bad optimizer state kind {other} for `{name}`"))),
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_params, ArchConfig, Vocab};
    use crate::rng::RngStream;

    fn model() -> Model {
        let vocab = Vocab::new(&["disk", "square", "triangle", "ring", "cross", "bar", "diamond", "ell"]).unwrap();
        init_params(&ArchConfig::default(), &vocab, &RngStream::new(1)).unwrap()
    }

    fn count(groups: &BTreeMap<String, ParamGroup>, prefix: &str, g: ParamGroup) -> usize {
        groups.iter().filter(|(n, v)| n.starts_with(prefix) && **v == g).count()
    }

    #[test]
    fn projected_set_for_default_arch() {
        let arch = ArchConfig::default();
        let opts = SelectOptions {
            optimizer: OptimizerKind::GaLoreAdamW,
            freeze_text: false,
            freeze_cls: false,
        };
        let groups = select_params(&model(), &opts);
        // q, k, v, out, fc1, fc2 per block.
        assert_eq!(count(&groups, "vision.", ParamGroup::Projected), 6 * arch.depth + 1);
        assert_eq!(count(&groups, "text.", ParamGroup::Projected), 6 * arch.text_depth);
        assert_eq!(groups["vision.patch.weight"], ParamGroup::Projected);
        assert_eq!(groups["vision.proj"], ParamGroup::Full);
        assert_eq!(groups["vision.blocks.0.q.bias"], ParamGroup::Full);
        assert_eq!(groups["vision.blocks.1.ln2.gamma"], ParamGroup::Full);
        assert_eq!(groups["vision.cls_token"], ParamGroup::Full);
    }

    #[test]
    fn freeze_flags() {
        let opts = SelectOptions {
            optimizer: OptimizerKind::GaLoreAdamW,
            freeze_text: true,
            freeze_cls: true,
        };
        let groups = select_params(&model(), &opts);
        assert_eq!(count(&groups, "text.", ParamGroup::Projected), 0);
        assert_eq!(count(&groups, "text.", ParamGroup::Full), 0);
        assert_eq!(groups["vision.cls_token"], ParamGroup::Frozen);
    }

    #[test]
    fn full_finetune_projects_nothing() {
        let opts = SelectOptions {
            optimizer: OptimizerKind::AdamW,
            freeze_text: false,
            freeze_cls: false,
        };
        let groups = select_params(&model(), &opts);
        assert!(groups.values().all(|g| *g == ParamGroup::Full));
    }

    #[test]
    fn oversized_rank_is_clamped() {
        let m = model();
        let opts = SelectOptions {
            optimizer: OptimizerKind::GaLoreAdamW,
            freeze_text: false,
            freeze_cls: false,
        };
        let galore = GaLoreHyper {
            rank: 1000,
            ..GaLoreHyper::default()
        };
        let opt = Optimizer::new(&m, &opts, AdamHyper::default(), galore, Schedule::constant(1e-3));
        match &opt.states["vision.blocks.0.q.weight"] {
            ParamState::GaLore(s) => assert_eq!(s.rank, 64),
            other => panic!("unexpected {other:?}"),
        }
    }
}

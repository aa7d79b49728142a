//! Gradient low-rank projection around an AdamW core.
//!
//! For a weight `W ∈ ℝ^{m×n}` the gradient is projected onto the top-r
//! singular subspace of a recent gradient, Adam runs on the `r`-row (or
//! `r`-column) projected gradient, and the normalised direction is mapped
//! back to full size and scaled by `α`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{self, svd_topk};
use crate::tensor::Tensor;

use super::adamw::{AdamHyper, Moments};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `P = U_r` (m×r); projected gradient `PᵀG` is r×n.
    Left,
    /// `P = V_r` (n×r); projected gradient `G·P` is m×r.
    Right,
}

impl Side {
    /// The "std" projection type: project along the smaller dimension.
    pub fn std_for(rows: usize, cols: usize) -> Side {
        if rows <= cols {
            Side::Left
        } else {
            Side::Right
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionType {
    Std,
}

impl FromStr for ProjectionType {
    type Err = Error;
    fn from_str(s: &str) -> std::result::Result<Self, Error> {
        match s {
            "std" => Ok(ProjectionType::Std),
            other => Err(Error::Config(format!("unsupported galore projection type `{other}` (std)"))),
        }
    }
}

impl fmt::Display for ProjectionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("std")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaLoreHyper {
    pub rank: usize,
    pub scale: f64,
    pub refresh_period: u64,
    pub projection: ProjectionType,
}

impl Default for GaLoreHyper {
    fn default() -> Self {
        GaLoreHyper {
            rank: 4,
            scale: 0.25,
            refresh_period: 200,
            projection: ProjectionType::Std,
        }
    }
}

/// Orthonormal basis of the top-`r` singular subspace on `side`.
pub fn refresh_projection(g: &Tensor, r: usize, side: Side) -> Result<Tensor> {
    g.ensure_finite("galore_refresh")?;
    let svd = svd_topk(g, r)?;
    Ok(match side {
        Side::Left => svd.u,
        Side::Right => svd.v,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaLoreParamState {
    pub side: Side,
    pub rank: usize,
    pub projection: Option<Tensor>,
    pub moments: Moments,
    /// Optimizer steps taken on this parameter.
    pub step: u64,
    pub last_refresh: u64,
}

impl GaLoreParamState {
    /// State for an `rows×cols` weight; the rank is clamped to
    /// `min(rows, cols)`.
    pub fn new(rows: usize, cols: usize, rank: usize) -> Self {
        let rank = rank.min(rows.min(cols)).max(1);
        let side = Side::std_for(rows, cols);
        let moment_shape = match side {
            Side::Left => [rank, cols],
            Side::Right => [rows, rank],
        };
        GaLoreParamState {
            side,
            rank,
            projection: None,
            moments: Moments::zeros(&moment_shape),
            step: 0,
            last_refresh: 0,
        }
    }

    pub fn project(&self, g: &Tensor) -> Result<Tensor> {
        let p = self.projection.as_ref().ok_or_else(|| Error::InvalidArgument("projection not initialised".into()))?;
        let (m, n) = (g.rows(), g.cols());
        Ok(match self.side {
            Side::Left => Tensor::from_parts(vec![self.rank, n], linalg::matmul_tn(p.data(), g.data(), m, self.rank, n)),
            Side::Right => Tensor::from_parts(vec![m, self.rank], linalg::matmul(g.data(), p.data(), m, n, self.rank)),
        })
    }

    pub fn project_back(&self, low: &Tensor) -> Result<Tensor> {
        let p = self.projection.as_ref().ok_or_else(|| Error::InvalidArgument("projection not initialised".into()))?;
        Ok(match self.side {
            Side::Left => p.matmul(low)?,
            Side::Right => Tensor::from_parts(
                vec![low.rows(), p.rows()],
                linalg::matmul_nt(low.data(), p.data(), low.rows(), self.rank, p.rows()),
            ),
        })
    }

    /// One GaLore-AdamW step; returns `ΔW`.
    pub fn step(&mut self, w: &Tensor, g: &Tensor, lr: f64, adam: &AdamHyper, hyper: &GaLoreHyper) -> Result<Tensor> {
        if g.shape() != w.shape() || g.rank() != 2 {
            return Err(Error::shape("galore_step", format!("weight {:?} gradient {:?}", w.shape(), g.shape())));
        }
        let period = hyper.refresh_period.max(1);
        if self.projection.is_none() || self.step.is_multiple_of(period) {
            self.projection = Some(refresh_projection(g, self.rank, self.side)?);
            self.moments.reset();
            self.last_refresh = self.step;
        }
        let low = self.project(g)?;
        let dir = self.moments.update(&low, adam)?;
        let full = self.project_back(&dir)?;
        let delta: Vec<f64> = full
            .data()
            .iter()
            .zip(w.data())
            .map(|(d, wi)| -lr * hyper.scale * d - lr * adam.weight_decay * wi)
            .collect();
        self.step += 1;
        let delta = Tensor::from_parts(w.shape().to_vec(), delta);
        delta.ensure_finite("galore_step")?;
        Ok(delta)
    }
}

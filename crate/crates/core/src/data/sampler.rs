use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};
use crate::grounding::sample_mask;
use crate::rng::RngStream;

/// One sampled mask: indices into `Dataset::images` and its instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub image: usize,
    pub mask: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Every mask weighted by the inverse frequency of its class.
    Balanced,
    /// Uniform image, then a uniform mask within it.
    Natural,
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> std::result::Result<Self, Error> {
        match s {
            "balanced" => Ok(SamplingMode::Balanced),
            "natural" => Ok(SamplingMode::Natural),
            other => Err(Error::Config(format!("unknown sampling mode `{other}` (balanced|natural)"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Balanced => "balanced",
            SamplingMode::Natural => "natural",
        })
    }
}

/// Infinite deterministic stream of masks. Draw `p` depends only on the
/// root stream and `p`, so the whole state is the position counter.
#[derive(Clone, Debug)]
pub struct MaskSampler {
    mode: SamplingMode,
    items: Vec<SampleRef>,
    item_class: Vec<usize>,
    cumulative: Vec<f64>,
    images: Vec<usize>,
    rng: RngStream,
    position: u64,
}

impl MaskSampler {
    /// Sampler over the masks of `indices` (image indices of `dataset`).
    pub fn new(dataset: &Dataset, indices: &[usize], mode: SamplingMode, rng: RngStream) -> Result<Self> {
        let counts = dataset.class_counts(indices);
        for (c, n) in counts.iter().enumerate() {
            if *n == 0 {
                log::warn!("class `{}` has no instances and is never sampled", dataset.class_names()[c]);
            }
        }
        let mut items = Vec::new();
        let mut item_class = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for &i in indices {
            for (j, inst) in dataset.images[i].instances.iter().enumerate() {
                items.push(SampleRef { image: i, mask: j });
                item_class.push(inst.class_id);
                acc += 1.0 / counts[inst.class_id] as f64;
                cumulative.push(acc);
            }
        }
        if items.is_empty() {
            return Err(Error::Data("no masks to sample from".into()));
        }
        Ok(MaskSampler {
            mode,
            items,
            item_class,
            cumulative,
            images: indices.to_vec(),
            rng,
            position: 0,
        })
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn set_position(&mut self, position: u64) {
        self.position = position;
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed
    }

    /// Probability of drawing each mask, in item order.
    pub fn probabilities(&self) -> Vec<(SampleRef, usize, f64)> {
        let total = *self.cumulative.last().expect("nonempty");
        let mut prev = 0.0;
        self.items
            .iter()
            .zip(&self.item_class)
            .zip(&self.cumulative)
            .map(|((r, c), cum)| {
                let p = (cum - prev) / total;
                prev = *cum;
                (*r, *c, p)
            })
            .collect()
    }

    fn epoch_len(&self) -> u64 {
        match self.mode {
            SamplingMode::Balanced => self.items.len() as u64,
            SamplingMode::Natural => self.images.len() as u64,
        }
    }

    pub fn next_ref(&mut self, dataset: &Dataset) -> Result<SampleRef> {
        let n = self.epoch_len();
        let (epoch, i) = (self.position / n, self.position % n);
        self.position += 1;
        let stream = self.rng.split(&format!("epoch{epoch}"));
        let u = stream.uniform_at(i);
        match self.mode {
            SamplingMode::Balanced => {
                let total = *self.cumulative.last().expect("nonempty");
                let target = u * total;
                let k = self.cumulative.partition_point(|c| *c <= target).min(self.items.len() - 1);
                Ok(self.items[k])
            }
            SamplingMode::Natural => {
                let image = self.images[((u * n as f64) as usize).min(n as usize - 1)];
                let sample = &dataset.images[image];
                let mut r = self.rng.split(&format!("{}/{epoch}", sample.id));
                let (mask, _) = sample_mask(sample, &mut r)?;
                Ok(SampleRef { image, mask })
            }
        }
    }

    pub fn next_batch(&mut self, dataset: &Dataset, size: usize) -> Result<Vec<SampleRef>> {
        (0..size).map(|_| self.next_ref(dataset)).collect()
    }
}

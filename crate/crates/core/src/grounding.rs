//! Instance masks at patch resolution and masked average pooling of the
//! patch-token sequence.

use crate::autodiff::{Graph, Var};
use crate::data::SegmentedImage;
use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Default fraction of a patch a mask must cover for the patch to count.
pub const DEFAULT_THETA: f64 = 0.25;

/// Binary `H×W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} bits for a {height}x{width} mask", bits.len()),
            ));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Number of pixels set in both masks.
    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

/// Per-patch coverage of one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPatchOverlap {
    /// Fraction of each patch's pixels inside the mask.
    pub coverage: Vec<f64>,
    pub selected: Vec<bool>,
}

impl MaskPatchOverlap {
    /// Builds an overlap from an explicit selection, with coverage 1 on
    /// selected patches.
    pub fn from_selection(selected: Vec<bool>) -> Result<Self> {
        if !selected.iter().any(|s| *s) {
            return Err(Error::InvalidArgument("selection is empty".into()));
        }
        Ok(MaskPatchOverlap {
            coverage: selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
            selected,
        })
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect()
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }
}

/// Counts mask pixels per `patch_size` patch. Patches with coverage ≥
/// `theta` are selected; if none qualifies the best-covered patch is used
/// (lowest index on ties).
pub fn rasterize(mask: &Mask, patch_size: usize, theta: f64) -> Result<MaskPatchOverlap> {
    if patch_size == 0 || !mask.height.is_multiple_of(patch_size) || !mask.width.is_multiple_of(patch_size) {
        return Err(Error::shape(
            "rasterize",
            format!("{}x{} mask is not divisible into {patch_size}px patches", mask.height, mask.width),
        ));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidArgument(format!("coverage threshold {theta} outside (0, 1]")));
    }
    let (gh, gw) = (mask.height / patch_size, mask.width / patch_size);
    let mut counts = vec![0usize; gh * gw];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                counts[(y / patch_size) * gw + x / patch_size] += 1;
            }
        }
    }
    if counts.iter().all(|c| *c == 0) {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    let area = (patch_size * patch_size) as f64;
    let coverage: Vec<f64> = counts.iter().map(|&c| c as f64 / area).collect();
    let mut selected: Vec<bool> = coverage.iter().map(|&c| c >= theta).collect();
    if !selected.iter().any(|s| *s) {
        let mut best = 0;
        for (i, c) in counts.iter().enumerate() {
            if *c > counts[best] {
                best = i;
            }
        }
        selected[best] = true;
    }
    Ok(MaskPatchOverlap { coverage, selected })
}

/// Mean of the selected rows of `raw_seq` (divided by the number of
/// selected rows).
pub fn pool_raw(raw_seq: &Tensor, overlap: &MaskPatchOverlap) -> Result<Vec<f64>> {
    if raw_seq.rows() != overlap.selected.len() {
        return Err(Error::shape(
            "masked_average_pool",
            format!("{} tokens vs {} patches", raw_seq.rows(), overlap.selected.len()),
        ));
    }
    let n = overlap.selected_count();
    if n == 0 {
        return Err(Error::InvalidArgument("no selected patches to pool".into()));
    }
    let d = raw_seq.cols();
    let mut acc = vec![0.0; d];
    for i in overlap.selected_indices() {
        for (a, v) in acc.iter_mut().zip(raw_seq.row(i)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// One pooled object embedding together with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledObjectEmbedding {
    pub vector: Vec<f64>,
    pub class_id: usize,
    pub image_id: String,
    pub mask_id: usize,
}

/// Pools the selected raw tokens, applies the `D×E` projection `proj` and
/// L2-normalises.
pub fn masked_average_pool(
    proj: &Tensor,
    output: &EncoderOutput,
    overlap: &MaskPatchOverlap,
    image_id: &str,
    mask_id: usize,
    class_id: usize,
) -> Result<PooledObjectEmbedding> {
    let raw = pool_raw(&output.raw_seq, overlap)?;
    if proj.rows() != raw.len() {
        return Err(Error::shape(
            "masked_average_pool",
            format!("projection {:?} for width {}", proj.shape(), raw.len()),
        ));
    }
    let mut v = linalg::matmul(&raw, proj.data(), 1, raw.len(), proj.cols());
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(PooledObjectEmbedding {
        vector: v,
        class_id,
        image_id: image_id.to_string(),
        mask_id,
    })
}

/// Batched pooling on the tape: `raw_seq` is `(B·L)×D`, one overlap per
/// image; returns the `B×D` pooled raw tokens.
pub fn pool_tokens(g: &mut Graph, raw_seq: Var, overlaps: &[&MaskPatchOverlap], seq_len: usize) -> Result<Var> {
    let b = overlaps.len();
    let (rows, _) = g.shape(raw_seq);
    if rows != b * seq_len {
        return Err(Error::shape(
            "masked_average_pool",
            format!("{rows} token rows for {b} masks of {seq_len} patches"),
        ));
    }
    let mut weights = vec![0.0; b * rows];
    for (i, ov) in overlaps.iter().enumerate() {
        if ov.selected.len() != seq_len {
            return Err(Error::shape(
                "masked_average_pool",
                format!("{} patches, expected {seq_len}", ov.selected.len()),
            ));
        }
        let idx = ov.selected_indices();
        if idx.is_empty() {
            return Err(Error::InvalidArgument("no selected patches to pool".into()));
        }
        let w = 1.0 / idx.len() as f64;
        for j in idx {
            weights[i * rows + i * seq_len + j] = w;
        }
    }
    let w = g.constant_matrix(b, rows, weights);
    g.matmul(w, raw_seq)
}

/// Uniform choice of one of the sample's masks; returns `(mask index,
/// class id)`.
pub fn sample_mask(sample: &SegmentedImage, rng: &mut RngStream) -> Result<(usize, usize)> {
    if sample.instances.is_empty() {
        return Err(Error::Data(format!("image `{}` has no masks", sample.id)));
    }
    let i = rng.below(sample.instances.len());
    Ok((i, sample.instances[i].class_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_mask(y0: usize, x0: usize, h: usize, w: usize) -> Mask {
        Mask::from_fn(32, 32, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w)
    }

    #[test]
    fn full_mask_selects_everything() {
        let ov = rasterize(&Mask::from_fn(32, 32, |_, _| true), 8, DEFAULT_THETA).unwrap();
        assert!(ov.coverage.iter().all(|c| *c == 1.0));
        assert!(ov.selected.iter().all(|s| *s));
    }

    #[test]
    fn aligned_patch() {
        let ov = rasterize(&block_mask(8, 16, 8, 8), 8, DEFAULT_THETA).unwrap();
        for (i, c) in ov.coverage.iter().enumerate() {
            assert_eq!(*c, if i == 6 { 1.0 } else { 0.0 });
        }
        assert_eq!(ov.selected_indices(), vec![6]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(rasterize(&Mask::from_fn(32, 32, |_, _| false), 8, 0.25).is_err());
    }

    #[test]
    fn sliver_falls_back_to_lowest_best_patch() {
        // Two pixels in patch 1, two in patch 2: tie goes to patch 1.
        let m = Mask::from_fn(32, 32, |y, x| y == 0 && (x == 8 || x == 9 || x == 16 || x == 17));
        let ov = rasterize(&m, 8, 0.25).unwrap();
        assert_eq!(ov.selected_indices(), vec![1]);
        assert_eq!(ov.coverage[2], 2.0 / 64.0);
    }

    #[test]
    fn singleton_pool_is_the_token() {
        let seq = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.37 - 1.0).collect()).unwrap();
        let ov = MaskPatchOverlap::from_selection(vec![false, false, true, false]).unwrap();
        assert_eq!(pool_raw(&seq, &ov).unwrap(), seq.row(2).to_vec());
    }

    #[test]
    fn full_selection_is_global_mean() {
        let seq = Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let ov = MaskPatchOverlap::from_selection(vec![true; 4]).unwrap();
        assert_eq!(pool_raw(&seq, &ov).unwrap(), vec![4.0, 5.0]);
    }

    #[test]
    fn union_is_count_weighted_average() {
        let seq = Tensor::matrix(5, 2, (0..10).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = MaskPatchOverlap::from_selection(vec![true, false, false, true, false]).unwrap();
        let b = MaskPatchOverlap::from_selection(vec![false, true, false, false, false]).unwrap();
        let u = MaskPatchOverlap::from_selection(vec![true, true, false, true, false]).unwrap();
        let (pa, pb, pu) = (pool_raw(&seq, &a).unwrap(), pool_raw(&seq, &b).unwrap(), pool_raw(&seq, &u).unwrap());
        for j in 0..2 {
            assert!((pu[j] - (2.0 * pa[j] + pb[j]) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_pool_matches_direct() {
        let seq = Tensor::matrix(8, 3, (0..24).map(|v| (v as f64 * 0.3).cos()).collect()).unwrap();
        let a = MaskPatchOverlap::from_selection(vec![true, false, true, true]).unwrap();
        let b = MaskPatchOverlap::from_selection(vec![false, false, false, true]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(&seq);
        let pooled = pool_tokens(&mut g, x, &[&a, &b], 4).unwrap();
        let top = Tensor::matrix(4, 3, seq.data()[..12].to_vec()).unwrap();
        let bottom = Tensor::matrix(4, 3, seq.data()[12..].to_vec()).unwrap();
        let got = g.value(pooled);
        assert!(got.row(0).iter().zip(pool_raw(&top, &a).unwrap()).all(|(x, y)| (x - y).abs() < 1e-15));
        assert_eq!(got.row(1), pool_raw(&bottom, &b).unwrap().as_slice());
    }
}

//! Segmented images, the on-disk dataset layout, class-balanced sampling
//! and batch assembly.
//!
//! A dataset directory holds `images/*.ppm` (P6), one `masks/*.pgm` (P5,
//! nonzero = inside) per instance, and three text files:
//!
//! ```text
//! index.txt    <image-relpath> <mask-relpath> <class-id>
//! classes.txt  <class-id> <name>
//! split.txt    <image-id> train|val
//! ```

mod generate;
pub mod netpbm;
mod sampler;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::encoders::{stack_images, ArchConfig};
use crate::error::{Error, Result};
use crate::grounding::{rasterize, Mask, MaskPatchOverlap};
use crate::rng::{hash64, RngStream};
use crate::tensor::Tensor;

pub use generate::{class_weights, generate_image, generate_samples, shape_contains, GenerateConfig, SHAPE_NAMES};
pub use netpbm::Raster;
pub use sampler::{MaskSampler, SampleRef, SamplingMode};

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: Mask,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedImage {
    pub id: String,
    /// H×W×3 in [0, 1].
    pub pixels: Tensor,
    pub instances: Vec<Instance>,
    /// Class of the instance with the most pixels (lowest index on ties).
    pub dominant_class: usize,
}

impl SegmentedImage {
    pub fn new(id: String, pixels: Tensor, instances: Vec<Instance>) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Data(format!("image `{id}`: pixels must be HxWx3, got {shape:?}")));
        }
        if instances.is_empty() {
            return Err(Error::Data(format!("image `{id}` has no instances")));
        }
        let mut best = (0, 0);
        for (i, inst) in instances.iter().enumerate() {
            if inst.mask.height() != shape[0] || inst.mask.width() != shape[1] {
                return Err(Error::Data(format!(
                    "image `{id}`: mask {i} is {}x{}, image is {}x{}",
                    inst.mask.height(),
                    inst.mask.width(),
                    shape[0],
                    shape[1]
                )));
            }
            let n = inst.mask.count();
            if n == 0 {
                return Err(Error::Data(format!("image `{id}`: mask {i} is empty")));
            }
            if instances[..i].iter().any(|o| o.mask == inst.mask) {
                return Err(Error::Data(format!("image `{id}`: mask {i} duplicates an earlier mask")));
            }
            if n > best.1 {
                best = (i, n);
            }
        }
        let dominant_class = instances[best.0].class_id;
        Ok(SegmentedImage {
            id,
            pixels,
            instances,
            dominant_class,
        })
    }

    /// Distinct classes present in the image.
    pub fn class_set(&self) -> BTreeSet<usize> {
        self.instances.iter().map(|i| i.class_id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// 80/20 assignment from a hash of the image id.
    pub fn of(image_id: &str) -> Split {
        if hash64(0x5EED, image_id).is_multiple_of(5) {
            Split::Val
        } else {
            Split::Train
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> std::result::Result<Self, Error> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Relative to the dataset root.
    pub image_path: PathBuf,
    /// `(mask path, class id)` per instance, relative to the root.
    pub masks: Vec<(PathBuf, usize)>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn image_id_of(rel: &Path) -> Option<String> {
    rel.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Reads the three index files (no pixel data).
    pub fn read(root: &Path) -> Result<Self> {
        let classes_path = root.join("classes.txt");
        let mut class_names = Vec::new();
        for (ln, line) in read_text(&classes_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(id), Some(name), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::format(&classes_path, format!("line {}: expected `<id> <name>`", ln + 1)));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(&classes_path, format!("line {}: bad class id `{id}`", ln + 1)))?;
            if id != class_names.len() {
                return Err(Error::format(&classes_path, format!("line {}: class ids must be 0..K in order", ln + 1)));
            }
            class_names.push(name.to_string());
        }
        if class_names.len() < 2 {
            return Err(Error::format(&classes_path, "need at least two classes"));
        }

        let split_path = root.join("split.txt");
        let mut splits = BTreeMap::new();
        for (ln, line) in read_text(&split_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(id), Some(tag), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::format(&split_path, format!("line {}: expected `<image-id> train|val`", ln + 1)));
            };
            let split = tag
                .parse()
                .map_err(|_| Error::format(&split_path, format!("line {}: bad split `{tag}`", ln + 1)))?;
            splits.insert(id.to_string(), split);
        }

        let index_path = root.join("index.txt");
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut position = BTreeMap::new();
        for (ln, line) in read_text(&index_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::format(&index_path, format!("line {}: {m}", ln + 1));
            let mut it = line.split_whitespace();
            let (Some(img), Some(mask), Some(class), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad("expected `<image> <mask> <class-id>`"));
            };
            let class: usize = class.parse().map_err(|_| bad("bad class id"))?;
            if class >= class_names.len() {
                return Err(bad(&format!("class id {class} ≥ K = {}", class_names.len())));
            }
            let image_path = PathBuf::from(img);
            let id = image_id_of(&image_path).ok_or_else(|| bad("image path has no file name"))?;
            let idx = match position.get(&id) {
                Some(&i) => i,
                None => {
                    let split = *splits
                        .get(&id)
                        .ok_or_else(|| Error::format(&split_path, format!("no split for image `{id}`")))?;
                    position.insert(id.clone(), entries.len());
                    entries.push(ManifestEntry {
                        image_id: id,
                        image_path,
                        masks: Vec::new(),
                        split,
                    });
                    entries.len() - 1
                }
            };
            if entries[idx].image_path != Path::new(img) {
                return Err(bad("image id maps to two different files"));
            }
            entries[idx].masks.push((PathBuf::from(mask), class));
        }
        if entries.is_empty() {
            return Err(Error::format(&index_path, "no entries"));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            class_names,
            entries,
        })
    }
}

/// A fully loaded, validated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// One per manifest entry, same order.
    pub images: Vec<SegmentedImage>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.manifest.entries[i].split == split).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&SegmentedImage> {
        self.indices(split).into_iter().map(|i| &self.images[i]).collect()
    }

    /// Instance count per class over the given images.
    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &i in indices {
            for inst in &self.images[i].instances {
                counts[inst.class_id] += 1;
            }
        }
        counts
    }
}

fn load_image(root: &Path, entry: &ManifestEntry) -> Result<SegmentedImage> {
    let path = root.join(&entry.image_path);
    let img = netpbm::read(&path)?;
    if img.channels != 3 {
        return Err(Error::format(&path, "expected a colour (P6) image"));
    }
    let pixels = Tensor::new(
        vec![img.height, img.width, 3],
        img.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let mut instances = Vec::with_capacity(entry.masks.len());
    for (rel, class_id) in &entry.masks {
        let mpath = root.join(rel);
        let m = netpbm::read(&mpath)?;
        if m.channels != 1 {
            return Err(Error::format(&mpath, "expected a greyscale (P5) mask"));
        }
        if (m.height, m.width) != (img.height, img.width) {
            return Err(Error::format(
                &mpath,
                format!("mask is {}x{}, image is {}x{}", m.height, m.width, img.height, img.width),
            ));
        }
        let mask = Mask::new(m.height, m.width, m.data.iter().map(|&b| b != 0).collect())?;
        if mask.count() == 0 {
            return Err(Error::format(&mpath, "mask is empty"));
        }
        instances.push(Instance {
            mask,
            class_id: *class_id,
        });
    }
    SegmentedImage::new(entry.image_id.clone(), pixels, instances)
        .map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads and validates every file of the dataset at `root`.
pub fn load(root: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(root)?;
    let images = manifest
        .entries
        .par_iter()
        .map(|e| load_image(root, e))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = images.first() {
        let shape = first.pixels.shape().to_vec();
        if let Some((img, entry)) = images.iter().zip(&manifest.entries).find(|(i, _)| i.pixels.shape() != shape) {
            return Err(Error::format(
                root.join(&entry.image_path),
                format!("image is {:?}, dataset images are {shape:?}", img.pixels.shape()),
            ));
        }
    }
    Ok(Dataset { manifest, images })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `images` under `root` in the on-disk layout.
pub fn write_dataset(root: &Path, class_names: &[String], images: &[SegmentedImage]) -> Result<DatasetManifest> {
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    let entries: Vec<ManifestEntry> = images
        .par_iter()
        .map(|img| {
            let image_path = PathBuf::from(format!("images/{}.ppm", img.id));
            let (h, w) = (img.pixels.shape()[0], img.pixels.shape()[1]);
            let raster = Raster {
                width: w,
                height: h,
                channels: 3,
                data: img.pixels.data().iter().map(|v| generate::quantize(*v)).collect(),
            };
            netpbm::write(&root.join(&image_path), &raster)?;
            let mut masks = Vec::new();
            for (j, inst) in img.instances.iter().enumerate() {
                let rel = PathBuf::from(format!("masks/{}_{j}.pgm", img.id));
                let raster = Raster {
                    width: w,
                    height: h,
                    channels: 1,
                    data: inst.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
                };
                netpbm::write(&root.join(&rel), &raster)?;
                masks.push((rel, inst.class_id));
            }
            Ok(ManifestEntry {
                image_id: img.id.clone(),
                image_path,
                masks,
                split: Split::of(&img.id),
            })
        })
        .collect::<Result<_>>()?;

    let mut index = String::new();
    let mut split = String::new();
    for e in &entries {
        for (m, c) in &e.masks {
            index.push_str(&format!("{} {} {c}\n", e.image_path.display(), m.display()));
        }
        split.push_str(&format!("{} {}\n", e.image_id, e.split));
    }
    let classes: String = class_names.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect();
    for (name, body) in [("index.txt", index), ("split.txt", split), ("classes.txt", classes)] {
        let p = root.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names: class_names.to_vec(),
        entries,
    })
}

/// Generates a corpus and writes it to `root`.
pub fn generate(cfg: &GenerateConfig, root: &Path, rng: &RngStream) -> Result<DatasetManifest> {
    let images = generate_samples(cfg, rng)?;
    write_dataset(root, &cfg.class_names(), &images)
}

/// Model-ready tensors for a list of sampled masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// B×C×H×W.
    pub images: Tensor,
    pub overlaps: Vec<MaskPatchOverlap>,
    pub class_ids: Vec<usize>,
    pub image_ids: Vec<String>,
    pub mask_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

pub fn make_batch(dataset: &Dataset, refs: &[SampleRef], arch: &ArchConfig, theta: f64) -> Result<Batch> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut imgs = Vec::with_capacity(refs.len());
    let mut overlaps = Vec::with_capacity(refs.len());
    let mut class_ids = Vec::with_capacity(refs.len());
    let mut image_ids = Vec::with_capacity(refs.len());
    for r in refs {
        let img = dataset
            .images
            .get(r.image)
            .ok_or_else(|| Error::InvalidArgument(format!("image index {} out of range", r.image)))?;
        let inst = img
            .instances
            .get(r.mask)
            .ok_or_else(|| Error::InvalidArgument(format!("image `{}` has no mask {}", img.id, r.mask)))?;
        imgs.push(&img.pixels);
        overlaps.push(rasterize(&inst.mask, arch.patch_size, theta)?);
        class_ids.push(inst.class_id);
        image_ids.push(img.id.clone());
    }
    Ok(Batch {
        images: stack_images(arch, &imgs)?,
        overlaps,
        class_ids,
        image_ids,
        mask_ids: refs.iter().map(|r| r.mask).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image(id: &str) -> SegmentedImage {
        let pixels = Tensor::zeros(&[4, 4, 3]);
        let a = Mask::from_fn(4, 4, |y, _| y == 0);
        let b = Mask::from_fn(4, 4, |y, _| y >= 2);
        SegmentedImage::new(
            id.into(),
            pixels,
            vec![Instance { mask: a, class_id: 1 }, Instance { mask: b, class_id: 0 }],
        )
        .unwrap()
    }

    #[test]
    fn dominant_is_largest_instance() {
        assert_eq!(tiny_image("a").dominant_class, 0);
    }

    #[test]
    fn invariants_are_checked() {
        let m = Mask::from_fn(4, 4, |_, x| x == 0);
        let dup = vec![Instance { mask: m.clone(), class_id: 0 }, Instance { mask: m, class_id: 1 }];
        assert!(SegmentedImage::new("d".into(), Tensor::zeros(&[4, 4, 3]), dup).is_err());
        assert!(SegmentedImage::new("e".into(), Tensor::zeros(&[4, 4, 3]), vec![]).is_err());
        let empty = vec![Instance {
            mask: Mask::from_fn(4, 4, |_, _| false),
            class_id: 0,
        }];
        assert!(SegmentedImage::new("f".into(), Tensor::zeros(&[4, 4, 3]), empty).is_err());
    }

    #[test]
    fn split_is_roughly_eighty_twenty() {
        let val = (0..5000).filter(|i| Split::of(&format!("img{i:05}")) == Split::Val).count();
        assert!((900..1100).contains(&val), "{val}");
    }
}

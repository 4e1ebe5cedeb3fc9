//! Datasets: two synthetic tasks built from the frozen backbone, and a raw
//! image-folder loader.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::param::ParamLookup;
use crate::tensor::{Element, Tensor};
use crate::vit::{embed, forward_with_taps, pooled_features, ViT, ViTConfig};

pub const IMAGE_MAGIC: &[u8; 7] = b"DTLIMG1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataVariant {
    /// Labels are the argmax of a random linear map of the frozen pooled feature.
    SyntheticLinear,
    /// Binary labels from a non-monotone function of a mid-depth cls feature,
    /// on inputs jittered around one base image.
    SyntheticPlanted { shift_strength: f64 },
    ImageFolder { path: PathBuf, labels_csv: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub variant: DataVariant,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_classes < 2 {
            errs.push(format!("data.n_classes ({}) must be at least 2", self.n_classes));
        }
        if let DataVariant::SyntheticPlanted { shift_strength } = self.variant {
            if self.n_classes != 2 {
                errs.push(format!("data.n_classes must be 2 for synthetic_planted, got {}", self.n_classes));
            }
            if !(shift_strength > 0.0 && shift_strength.is_finite()) {
                errs.push(format!("data.shift_strength ({shift_strength}) must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Images `[n, C, H, W]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Element> Split<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        gather_rows(&self.images, indices)
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self { images: self.gather(indices), labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }
}

pub(crate) fn gather_rows<T: Element>(t: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let per = t.numel() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(per * indices.len());
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).expect("row gather keeps the row size")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub train: Split<T>,
    pub test: Split<T>,
    pub n_classes: usize,
}

/// Builds the dataset `spec` describes. Synthetic labels are read off
/// `backbone`; relative image-folder paths resolve against `base_dir`.
pub fn build<T: Element>(spec: &DatasetSpec, backbone: &ViT<T>, seed: u64, base_dir: &Path) -> Result<Dataset<T>> {
    spec.validate()?;
    let data = match &spec.variant {
        DataVariant::SyntheticLinear => synthetic_linear(backbone, spec, seed)?,
        DataVariant::SyntheticPlanted { shift_strength } => synthetic_planted(backbone, spec, *shift_strength, seed)?,
        DataVariant::ImageFolder { path, labels_csv } => {
            let all = image_folder(&base_dir.join(path), &base_dir.join(labels_csv), &backbone.config, spec.n_classes)?;
            split_shuffled(all, spec, seed)?
        }
    };
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(data)
}

fn gaussian<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Runs `f` on chunks of `images` through an inference graph and returns
/// one row per image.
fn per_image_rows<T: Element>(
    images: &Tensor<T>,
    f: impl Fn(&mut Graph<T>, &Tensor<T>) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let mut g = Graph::inference();
        out.extend(f(&mut g, &gather_rows(images, &idx))?);
    }
    Ok(out)
}

fn rows_of<T: Element>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = *t.shape().last().expect("rank >= 1");
    t.data().chunks(d).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
}

/// Final-norm cls features of the frozen backbone.
pub fn frozen_features<T: Element>(backbone: &ViT<T>, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let cfg = &backbone.config;
    per_image_rows(images, |g, x| {
        let (z, _) = forward_with_taps(g, cfg, &backbone.params, x)?;
        let f = pooled_features(g, cfg, &backbone.params, z, 0)?;
        Ok(rows_of(g.value(f)))
    })
}

/// Raw cls token of the stream entering block `i` (1-based).
pub fn cls_at_block<T: Element>(backbone: &ViT<T>, images: &Tensor<T>, i: usize) -> Result<Vec<Vec<f64>>> {
    let cfg = &backbone.config;
    per_image_rows(images, |g, x| {
        let z = if i == 1 {
            embed(g, cfg, &backbone.params as &dyn ParamLookup<T>, x)?
        } else {
            forward_with_taps(g, cfg, &backbone.params, x)?.1[i - 2]
        };
        let t = g.value(z);
        let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        Ok((0..b).map(|k| t.data()[k * n * d..k * n * d + d].iter().map(|x| x.as_f64()).collect()).collect())
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Keeps the `keep` samples with the largest margins, in original order.
fn keep_widest(margins: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..margins.len()).collect();
    order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

fn into_dataset<T: Element>(images: Tensor<T>, labels: Vec<usize>, kept: &[usize], spec: &DatasetSpec) -> Dataset<T> {
    let all = Split { images, labels };
    let train: Vec<usize> = kept[..spec.n_train].to_vec();
    let test: Vec<usize> = kept[spec.n_train..].to_vec();
    Dataset { train: all.subset(&train), test: all.subset(&test), n_classes: spec.n_classes }
}

fn image_shape(cfg: &ViTConfig, n: usize) -> [usize; 4] {
    [n, cfg.channels, cfg.img, cfg.img]
}

/// Gaussian images; the label is the argmax of a random linear map of the
/// standardized frozen feature. Four times the needed samples are drawn and
/// the quarter with the widest top-two score gap is kept.
pub fn synthetic_linear<T: Element>(backbone: &ViT<T>, spec: &DatasetSpec, seed: u64) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = spec.n_train + spec.n_test;
    let images: Tensor<T> = gaussian(&mut rng, &image_shape(&backbone.config, 4 * need));
    let feats = frozen_features(backbone, &images)?;
    let d = feats[0].len();
    let k = spec.n_classes;
    let w: Vec<f64> = (0..d * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = feats.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> =
        (0..d).map(|j| (feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12)).collect();
    let mut labels = Vec::with_capacity(feats.len());
    let mut margins = Vec::with_capacity(feats.len());
    for f in &feats {
        let scores: Vec<f64> = (0..k).map(|c| (0..d).map(|j| (f[j] - mean[j]) / std[j] * w[j * k + c]).sum()).collect();
        let best = (0..k).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).expect("k >= 2");
        let runner = (0..k).filter(|&c| c != best).map(|c| scores[c]).fold(f64::NEG_INFINITY, f64::max);
        labels.push(best);
        margins.push(scores[best] - runner);
    }
    Ok(into_dataset(images, labels, &keep_widest(&margins, need), spec))
}

/// Inputs are one base image plus `shift_strength` Gaussian noise. With
/// `v = ⟨r, cls of the stream entering block N/2 + 1⟩` for a random unit `r`,
/// the label is whether `|v − median(v)|` exceeds its own median. The label
/// is even in `v`, so a linear read-out of features that are close to linear
/// in the noise sits near chance. Twice the needed samples are drawn and the
/// half furthest from the decision threshold is kept.
pub fn synthetic_planted<T: Element>(
    backbone: &ViT<T>,
    spec: &DatasetSpec,
    shift_strength: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &backbone.config;
    let need = spec.n_train + spec.n_test;
    let base: Tensor<T> = gaussian(&mut rng, &image_shape(cfg, 1));
    let noise: Tensor<T> = gaussian(&mut rng, &image_shape(cfg, 2 * need));
    let per = base.numel();
    let data = noise.data().iter().enumerate().map(|(i, &e)| base.data()[i % per] + T::lit(shift_strength) * e).collect();
    let images = Tensor::new(noise.shape().to_vec(), data)?;

    let cls = cls_at_block(backbone, &images, cfg.depth / 2 + 1)?;
    let d = cls[0].len();
    let r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let v: Vec<f64> = cls.iter().map(|c| c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / norm).collect();
    let med = median(&v);
    let dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&dev);
    let labels: Vec<usize> = dev.iter().map(|&x| usize::from(x > mad)).collect();
    let margins: Vec<f64> = dev.iter().map(|&x| (x - mad).abs()).collect();
    Ok(into_dataset(images, labels, &keep_widest(&margins, need), spec))
}

/// Every sample of every file listed in `labels_csv`, scaled to [-1, 1].
/// Each file holds the magic, a u32 count, a u32 side, then `count` images
/// of `side × side` interleaved 8-bit RGB; all carry the file's label.
pub fn image_folder<T: Element>(dir: &Path, labels_csv: &Path, cfg: &ViTConfig, n_classes: usize) -> Result<Split<T>> {
    if cfg.channels != 3 {
        return Err(Error::Config(vec![format!("image folders hold RGB, model.channels is {}", cfg.channels)]));
    }
    let mut reader = csv::Reader::from_path(labels_csv).map_err(|e| Error::Io(format!("{}: {e}", labels_csv.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let side = cfg.img;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Io(format!("{}: {e}", labels_csv.display())))?;
        let bad = |what: String| Error::Config(vec![format!("{} row {}: {what}", labels_csv.display(), line + 2)]);
        let (Some(file), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(bad("expected filename,label".into()));
        };
        let label: usize = label.trim().parse().map_err(|_| bad(format!("label {label:?} is not an integer")))?;
        if label >= n_classes {
            return Err(bad(format!("label {label} outside [0, {n_classes})")));
        }
        let path = dir.join(file.trim());
        let bytes = fs::read(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let pixels = parse_image_file(&bytes, side).map_err(|m| Error::Io(format!("{}: {m}", path.display())))?;
        let count = pixels.len() / (side * side * 3);
        for img in pixels.chunks(side * side * 3) {
            for c in 0..3 {
                for px in 0..side * side {
                    data.push(T::lit(img[px * 3 + c] as f64 / 127.5 - 1.0));
                }
            }
        }
        labels.extend(std::iter::repeat_n(label, count));
    }
    let n = labels.len();
    Ok(Split { images: Tensor::new(vec![n, 3, side, side], data)?, labels })
}

fn parse_image_file(bytes: &[u8], side: usize) -> std::result::Result<&[u8], String> {
    let header = IMAGE_MAGIC.len() + 8;
    if bytes.len() < header || &bytes[..IMAGE_MAGIC.len()] != IMAGE_MAGIC {
        return Err("missing DTLIMG1 header".into());
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let count = word(IMAGE_MAGIC.len());
    let file_side = word(IMAGE_MAGIC.len() + 4);
    if file_side != side {
        return Err(format!("side {file_side}, model expects {side}"));
    }
    let body = &bytes[header..];
    let want = count * side * side * 3;
    if body.len() != want {
        return Err(format!("{} pixel bytes for {count} images, expected {want}", body.len()));
    }
    Ok(body)
}

/// Encodes interleaved RGB images in the image-folder file layout.
pub fn encode_image_file(side: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = IMAGE_MAGIC.to_vec();
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
    for img in images {
        assert_eq!(img.len(), side * side * 3, "image byte count");
        out.extend_from_slice(img);
    }
    out
}

fn split_shuffled<T: Element>(all: Split<T>, spec: &DatasetSpec, seed: u64) -> Result<Dataset<T>> {
    let need = spec.n_train + spec.n_test;
    if all.len() < need {
        return Err(Error::Config(vec![format!(
            "image folder has {} samples, data.n_train + data.n_test is {need}",
            all.len()
        )]));
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Dataset {
        train: all.subset(&order[..spec.n_train]),
        test: all.subset(&order[spec.n_train..need]),
        n_classes: spec.n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_file_round_trip() {
        let cfg = ViTConfig::micro();
        let dir = tempfile::tempdir().unwrap();
        let side = cfg.img;
        let img: Vec<u8> = (0..side * side * 3).map(|i| (i % 256) as u8).collect();
        fs::write(dir.path().join("a.bin"), encode_image_file(side, &[img.clone(), img.clone()])).unwrap();
        fs::write(dir.path().join("labels.csv"), "filename,label\na.bin,1\n").unwrap();
        let split: Split<f32> = image_folder(dir.path(), &dir.path().join("labels.csv"), &cfg, 2).unwrap();
        assert_eq!(split.labels, vec![1, 1]);
        assert_eq!(split.images.shape(), &[2, 3, side, side]);
        assert_eq!(split.images.data()[0], -1.0);
        assert_eq!(split.images.data()[1], 3.0 / 127.5 - 1.0);
    }

    #[test]
    fn truncated_image_file_is_rejected() {
        let mut bytes = encode_image_file(2, &[vec![0; 12]]);
        bytes.pop();
        assert!(parse_image_file(&bytes, 2).is_err());
    }
}

//! Synthetic planted-relevance images and dataset containers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::rng::{stream_id, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Patch indices (row-major over the patch grid) that carry the class signal.
    pub informative_mask: Vec<usize>,
    pub signal_strength: f64,
    pub background_noise: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// 32×32 images, 4×4 patches, two classes, signal in the central 4×4 block of patches.
    fn default() -> Self {
        let grid = 8;
        let informative_mask = (2..6)
            .flat_map(|r| (2..6).map(move |c| r * grid + c))
            .collect();
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            num_classes: 2,
            informative_mask,
            signal_strength: 1.0,
            background_noise: 0.5,
            samples_per_class: 2000,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size.max(1);
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channels and num_classes must be positive".into()));
        }
        if self.informative_mask.is_empty() {
            return Err(Error::Config("informative_mask must not be empty".into()));
        }
        if let Some(&bad) = self.informative_mask.iter().find(|&&i| i >= self.num_patches()) {
            return Err(Error::Config(format!(
                "informative patch {bad} outside [0, {})",
                self.num_patches()
            )));
        }
        // zero signal is allowed as a no-signal control
        if !(self.signal_strength >= 0.0) || !(self.background_noise >= 0.0) {
            return Err(Error::Config(
                "signal_strength and background_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn sorted_mask(&self) -> Vec<usize> {
        let mut m = self.informative_mask.clone();
        m.sort_unstable();
        m.dedup();
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`
    pub image: Tensor,
    pub label: usize,
    /// Ground-truth informative patches, ascending (synthetic data only).
    pub mask: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            channels: self.channels,
            image_size: self.image_size,
            patch_size: self.patch_size,
            num_classes: self.num_classes,
            samples,
        }
    }

    /// Splits into (train, held-out): the last `round(fraction·n)` samples are held out.
    /// Generated data interleaves classes, so both halves stay balanced.
    pub fn split(&self, holdout_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout fraction must be in [0, 1), got {holdout_fraction}"
            )));
        }
        let n = self.samples.len();
        let held = ((n as f64) * holdout_fraction).round() as usize;
        let train = self.samples[..n - held].to_vec();
        let test = self.samples[n - held..].to_vec();
        Ok((self.with_samples(train), self.with_samples(test)))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        self.with_samples(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let meta = Tensor::from_vec(vec![
            self.channels as f64,
            self.image_size as f64,
            self.image_size as f64,
            self.num_classes as f64,
            self.patch_size as f64,
        ]);
        let mut out = vec![("meta".to_string(), meta)];
        let n = self.samples.len();
        if n == 0 {
            return out;
        }
        let (c, s) = (self.channels, self.image_size);
        let mut images = Vec::with_capacity(n * c * s * s);
        for smp in &self.samples {
            images.extend_from_slice(smp.image.data());
        }
        out.push((
            "images".into(),
            Tensor::new(vec![n, c, s, s], images).expect("consistent image shapes"),
        ));
        out.push((
            "labels".into(),
            Tensor::from_vec(self.samples.iter().map(|s| s.label as f64).collect()),
        ));
        if self.samples.iter().all(|s| s.mask.is_some()) {
            let np = self.num_patches();
            let mut mask = vec![0.0; n * np];
            for (i, smp) in self.samples.iter().enumerate() {
                for &p in smp.mask.as_ref().unwrap() {
                    mask[i * np + p] = 1.0;
                }
            }
            out.push((
                "mask".into(),
                Tensor::new(vec![n, np], mask).expect("mask shape"),
            ));
        }
        out
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Dataset> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let fmt = |msg: String| Error::Format { offset: 0, msg };
        let meta = find("meta").ok_or_else(|| fmt("dataset container has no meta tensor".into()))?;
        let m: Vec<usize> = meta.data().iter().map(|&v| v as usize).collect();
        if m.len() != 5 || m[1] != m[2] || m[4] == 0 || m[1] % m[4] != 0 {
            return Err(fmt(format!("bad dataset meta {:?}", meta.data())));
        }
        let mut ds = Dataset {
            channels: m[0],
            image_size: m[1],
            patch_size: m[4],
            num_classes: m[3],
            samples: Vec::new(),
        };
        let (images, labels) = match (find("images"), find("labels")) {
            (None, None) => return Ok(ds),
            (Some(i), Some(l)) => (i, l),
            _ => return Err(fmt("dataset needs both images and labels".into())),
        };
        let (c, s) = (ds.channels, ds.image_size);
        let n = labels.numel();
        if images.shape() != [n, c, s, s] {
            return Err(fmt(format!(
                "images shape {:?} inconsistent with {n} labels and meta",
                images.shape()
            )));
        }
        let mask = find("mask");
        let np = ds.num_patches();
        if let Some(mk) = mask {
            if mk.shape() != [n, np] {
                return Err(fmt(format!("mask shape {:?} expected [{n}, {np}]", mk.shape())));
            }
        }
        let per = c * s * s;
        for i in 0..n {
            let label = labels.data()[i];
            if label < 0.0 || label.fract() != 0.0 || label as usize >= ds.num_classes {
                return Err(fmt(format!("label {label} at sample {i} is not a valid class")));
            }
            let image = Tensor::new(vec![c, s, s], images.data()[i * per..(i + 1) * per].to_vec())?;
            let mask = mask.map(|mk| {
                (0..np)
                    .filter(|&p| mk.data()[i * np + p] != 0.0)
                    .collect::<Vec<_>>()
            });
            ds.samples.push(Sample {
                image,
                label: label as usize,
                mask,
            });
        }
        Ok(ds)
    }
}

/// Background Gaussian noise everywhere plus a per-class template inside the
/// informative patches. Samples interleave classes: sample `k` has label `k mod C`.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (c, s, p) = (spec.channels, spec.image_size, spec.patch_size);
    let grid = s / p;
    let mask = spec.sorted_mask();
    // pixel offsets covered by the informative patches
    let mut pixels = Vec::with_capacity(mask.len() * c * p * p);
    for &patch in &mask {
        let (py, px) = (patch / grid, patch % grid);
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    pixels.push(ch * s * s + (py * p + dy) * s + px * p + dx);
                }
            }
        }
    }
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|k| {
            let mut rng = RngStream::new(spec.seed, stream_id(10, k as u64));
            pixels.iter().map(|_| rng.normal()).collect()
        })
        .collect();

    let total = spec.samples_per_class * spec.num_classes;
    let samples = (0..total)
        .map(|k| {
            let label = k % spec.num_classes;
            let mut rng = RngStream::new(spec.seed, stream_id(11, k as u64));
            let mut image =
                Tensor::from_fn(&[c, s, s], |_| spec.background_noise * rng.normal());
            let data = image.data_mut();
            for (&px, &t) in pixels.iter().zip(&templates[label]) {
                data[px] += spec.signal_strength * t;
            }
            Sample {
                image,
                label,
                mask: Some(mask.clone()),
            }
        })
        .collect();
    Ok(Dataset {
        channels: c,
        image_size: s,
        patch_size: p,
        num_classes: spec.num_classes,
        samples,
    })
}

pub fn save_container(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    container::save(path, &data.to_tensors())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_tensors(container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            samples_per_class: 5,
            num_classes: 3,
            seed: 17,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn default_spec_matches_documented_values() {
        let s = DatasetSpec::default();
        assert_eq!(s.num_patches(), 64);
        assert_eq!(s.informative_mask.len(), 16);
        assert_eq!(s.samples_per_class, 2000);
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            assert_eq!(a.samples.iter().filter(|s| s.label == k).count(), 5);
        }
        assert!(a.samples.iter().all(|s| s.mask.as_ref().unwrap().len() == 16));
    }

    #[test]
    fn signal_lives_only_in_informative_patches() {
        let spec = DatasetSpec {
            background_noise: 0.0,
            ..small_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let img = &ds.samples[0].image;
        for y in 0..32 {
            for x in 0..32 {
                let patch = (y / 4) * 8 + x / 4;
                let v = img.data()[y * 32 + x];
                if !spec.informative_mask.contains(&patch) {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn container_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tntc");
        let ds = generate_synthetic(&small_spec()).unwrap();
        save_container(&ds, &path).unwrap();
        assert_eq!(load_container(&path).unwrap(), ds);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_container(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tntc");
        let ds = Dataset {
            channels: 3,
            image_size: 32,
            patch_size: 4,
            num_classes: 2,
            samples: vec![],
        };
        save_container(&ds, &path).unwrap();
        assert_eq!(load_container(&path).unwrap(), ds);
    }

    #[test]
    fn split_keeps_classes_balanced() {
        let ds = generate_synthetic(&DatasetSpec {
            samples_per_class: 10,
            ..DatasetSpec::default()
        })
        .unwrap();
        let (train, test) = ds.split(0.2).unwrap();
        assert_eq!((train.len(), test.len()), (16, 4));
        assert_eq!(test.samples.iter().filter(|s| s.label == 0).count(), 2);
    }
}

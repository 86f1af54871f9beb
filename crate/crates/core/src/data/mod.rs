//! Samples, manifests, the augmentation pipeline and the synthetic dataset.
//!
//! A dataset directory holds `manifest.json`, one `LKT1` tensor per clip
//! (`[T, H, W]`, grayscale in `[0, 1]`), and optionally per-clip landmark
//! files plus a `template.json` for alignment.

mod augment;
mod baseline;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{
    center_window, crop, epoch_shuffle, flip_video, hflip, resize_bilinear, resize_video, to_grayscale, window_indices,
    CropMode,
};
pub use baseline::nearest_centroid_baseline;
pub use synth::{generate_synthetic, SynthConfig};

use crate::align::{align_clip, FitMode, Point, Template};
use crate::error::{Error, Result};
use crate::model::BoundaryMask;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One clip with its label and word interval.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[T, H, W]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub label: usize,
    pub boundary: BoundaryMask,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Clip file, relative to the dataset directory.
    pub path: String,
    pub label: usize,
    pub boundary_start: usize,
    pub boundary_end: usize,
    pub split: Split,
    /// Per-frame landmark file, relative to the dataset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        if n < 2 {
            return Err(Error::Data("manifest needs at least two classes".into()));
        }
        for e in &self.samples {
            if e.label >= n {
                return Err(Error::Data(format!("{}: label {} but only {n} classes", e.path, e.label)));
            }
            if e.boundary_start >= e.boundary_end {
                return Err(Error::Data(format!("{}: empty word boundary", e.path)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let m: DatasetManifest =
            serde_json::from_slice(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// Preprocessing and augmentation settings (the `data` section of a run config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square side every frame is resized to on load; `None` keeps the stored size.
    pub resize: Option<usize>,
    /// Square crop side fed to the network.
    pub crop: usize,
    /// Random crop at train time (evaluation always crops the center).
    pub random_crop: bool,
    pub hflip_p: f64,
    /// Re-time every clip to this many frames around the word center.
    pub window: Option<usize>,
    /// Align frames to the dataset template using per-clip landmarks.
    pub align: bool,
    pub align_mode: FitMode,
    /// Use only the first `n` training clips (in manifest order).
    pub train_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            resize: Some(96),
            crop: 88,
            random_crop: true,
            hflip_p: 0.5,
            window: None,
            align: false,
            align_mode: FitMode::Similarity,
            train_limit: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 {
            return Err(Error::config("data.crop", "must be positive"));
        }
        if let Some(r) = self.resize {
            if r < self.crop {
                return Err(Error::config("data.resize", format!("{r} is smaller than the crop {}", self.crop)));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return Err(Error::config("data.hflip_p", "must lie in [0, 1]"));
        }
        if self.window == Some(0) {
            return Err(Error::config("data.window", "must be positive"));
        }
        Ok(())
    }
}

/// All clips of a dataset, loaded and deterministically preprocessed
/// (alignment and resizing) once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<VideoSample>,
}

fn read_landmarks(path: &Path) -> Result<Vec<Vec<Point>>> {
    let text = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl Dataset {
    pub fn open(root: &Path, cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let manifest = DatasetManifest::load(&root.join("manifest.json"))?;
        let template = if cfg.align {
            let p = root.join("template.json");
            let text = fs::read(&p).map_err(|e| Error::Data(format!("alignment needs {}: {e}", p.display())))?;
            let t: Template = serde_json::from_slice(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            t.validate()?;
            Some(t)
        } else {
            None
        };
        let samples = manifest
            .samples
            .par_iter()
            .map(|e| -> Result<VideoSample> {
                let path = root.join(&e.path);
                let mut frames = Tensor::<f32>::load(&path).map_err(|err| Error::Data(format!("{}: {err}", path.display())))?;
                if frames.rank() != 3 {
                    return Err(Error::Data(format!("{}: clip must be [T, H, W]", e.path)));
                }
                if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data(format!("{}: values outside [0, 1]", e.path)));
                }
                if let Some(t) = &template {
                    let rel = e
                        .landmarks
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("{}: alignment requested but no landmarks listed", e.path)))?;
                    let marks = read_landmarks(&root.join(rel))?;
                    frames = align_clip(&frames, &marks, t, cfg.align_mode)
                        .map_err(|err| Error::Data(format!("{}: {err}", e.path)))?;
                }
                if let Some(side) = cfg.resize {
                    frames = resize_video(&frames, side, side)?;
                }
                let boundary = BoundaryMask::new(frames.shape()[0], e.boundary_start, e.boundary_end)
                    .map_err(|err| Error::Data(format!("{}: {err}", e.path)))?;
                Ok(VideoSample { frames, label: e.label, boundary, id: e.id() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root: root.to_path_buf(), manifest, samples })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    /// Sample indices of `split` in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.manifest.samples[i].split == split).collect()
    }
}

/// Network-ready batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 1, T, H, W]`.
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[B, T]` word-boundary indicators.
    pub boundary: Tensor<f32>,
    pub ids: Vec<String>,
}

/// Window, crop and flip one sample. Training draws from `rng`; evaluation is deterministic.
pub fn augment_sample(sample: &VideoSample, cfg: &DataConfig, train: bool, rng: &mut Rng) -> Result<VideoSample> {
    let mut s = match cfg.window {
        Some(n) => center_window(sample, n)?,
        None => sample.clone(),
    };
    let mode = if train && cfg.random_crop { CropMode::Random } else { CropMode::Center };
    s.frames = crop(&s.frames, cfg.crop, mode, rng)?.0;
    if train && cfg.hflip_p > 0.0 {
        s.frames = hflip(&s.frames, cfg.hflip_p, rng)?.0;
    }
    Ok(s)
}

/// Stream identifier for augmentation draws.
pub const STREAM_AUGMENT: u64 = 11;
/// Stream identifier for epoch shuffles.
pub const STREAM_SHUFFLE: u64 = 12;

/// Builds the batch for `indices`. Each sample's augmentation stream is
/// derived from `(seed, epoch, sample index)`, so the result does not depend
/// on batch composition or worker scheduling.
pub fn make_batch(ds: &Dataset, indices: &[usize], cfg: &DataConfig, train: bool, seed: u64, epoch: usize) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let prepared = indices
        .par_iter()
        .map(|&i| {
            let mut rng = Rng::derive(seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
            augment_sample(&ds.samples[i], cfg, train, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = prepared[0].frames.shape().to_vec();
    if let Some(bad) = prepared.iter().find(|s| s.frames.shape() != shape.as_slice()) {
        return Err(Error::Data(format!(
            "clip {} has shape {:?}, batch expects {shape:?}; set data.window to equalize lengths",
            bad.id,
            bad.frames.shape()
        )));
    }
    let frames: Vec<&Tensor<f32>> = prepared.iter().map(|s| &s.frames).collect();
    let x = Tensor::stack(&frames, 0)?;
    let b = prepared.len();
    let x = x.reshape(&[b, 1, shape[0], shape[1], shape[2]])?;
    let masks: Vec<Tensor<f32>> = prepared.iter().map(|s| s.boundary.to_tensor()).collect();
    Ok(Batch {
        x,
        labels: prepared.iter().map(|s| s.label).collect(),
        boundary: Tensor::stack(&masks.iter().collect::<Vec<_>>(), 0)?,
        ids: prepared.into_iter().map(|s| s.id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(jitter: bool) -> (tempfile::TempDir, SynthConfig) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { classes: 3, per_class: 6, frames: 10, size: 20, jitter, seed: 2, ..Default::default() };
        generate_synthetic(&cfg, dir.path()).unwrap();
        (dir, cfg)
    }

    fn small_cfg() -> DataConfig {
        DataConfig { resize: None, crop: 16, ..Default::default() }
    }

    #[test]
    fn open_and_batch() {
        let (dir, _) = dataset(false);
        let ds = Dataset::open(dir.path(), &small_cfg()).unwrap();
        assert_eq!(ds.num_classes(), 3);
        let train = ds.indices(Split::Train);
        assert_eq!(train.len(), 12);
        let b = make_batch(&ds, &train[..4], &small_cfg(), true, 1, 0).unwrap();
        assert_eq!(b.x.shape(), &[4, 1, 10, 16, 16]);
        assert_eq!(b.boundary.shape(), &[4, 10]);
        assert!(make_batch(&ds, &[], &small_cfg(), true, 1, 0).is_err());
    }

    #[test]
    fn batches_are_reproducible_and_keep_pairing() {
        let (dir, _) = dataset(false);
        let cfg = small_cfg();
        let ds = Dataset::open(dir.path(), &cfg).unwrap();
        let mut order = ds.indices(Split::Train);
        epoch_shuffle(order.len(), &mut Rng::derive(3, &[STREAM_SHUFFLE, 0]))
            .into_iter()
            .map(|i| order[i])
            .collect::<Vec<_>>()
            .clone_into(&mut order);
        let a = make_batch(&ds, &order[..5], &cfg, true, 9, 4).unwrap();
        let b = make_batch(&ds, &order[..5], &cfg, true, 9, 4).unwrap();
        assert_eq!(a, b);
        let bytes = |t: &Tensor<f32>| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a.x), bytes(&b.x));
        for (k, &i) in order[..5].iter().enumerate() {
            assert_eq!(a.ids[k], ds.samples[i].id);
            assert_eq!(a.labels[k], ds.manifest.samples[i].label);
        }
        // The same sample is augmented identically regardless of its batch.
        let single = make_batch(&ds, &order[2..3], &cfg, true, 9, 4).unwrap();
        assert_eq!(single.x.data(), a.x.select(0, 2).unwrap().data());
        let other_epoch = make_batch(&ds, &order[..5], &cfg, true, 9, 5).unwrap();
        assert_ne!(other_epoch.x, a.x);
    }

    #[test]
    fn eval_batches_use_the_center_crop() {
        let (dir, _) = dataset(false);
        let cfg = small_cfg();
        let ds = Dataset::open(dir.path(), &cfg).unwrap();
        let val = ds.indices(Split::Val);
        let a = make_batch(&ds, &val, &cfg, false, 1, 0).unwrap();
        let b = make_batch(&ds, &val, &cfg, false, 2, 7).unwrap();
        assert_eq!(a, b);
        let (expect, _) = crop(&ds.samples[val[0]].frames, 16, CropMode::Center, &mut Rng::new(0)).unwrap();
        assert_eq!(a.x.select(0, 0).unwrap().data(), expect.data());
    }

    #[test]
    fn alignment_on_load() {
        let (dir, _) = dataset(true);
        let cfg = DataConfig { align: true, ..small_cfg() };
        let ds = Dataset::open(dir.path(), &cfg).unwrap();
        assert_eq!(ds.samples[0].frames.shape(), &[10, 20, 20]);
        let (plain, _) = dataset(false);
        assert!(matches!(Dataset::open(plain.path(), &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_validation() {
        let m = DatasetManifest {
            class_names: vec!["a".into(), "b".into()],
            samples: vec![ManifestEntry {
                path: "clips/x.lkt".into(),
                label: 2,
                boundary_start: 0,
                boundary_end: 1,
                split: Split::Train,
                landmarks: None,
            }],
        };
        assert!(m.validate().is_err());
        let mut ok = m.clone();
        ok.samples[0].label = 1;
        ok.validate().unwrap();
        assert_eq!(ok.samples[0].id(), "x");
        ok.samples[0].boundary_end = 0;
        assert!(ok.validate().is_err());
        let text = serde_json::to_string(&m).unwrap();
        assert!(!text.contains("landmarks"));
        assert!(serde_json::from_str::<DatasetManifest>(&text.replace("\"split\"", "\"splt\"")).is_err());
    }

    #[test]
    fn data_config_validation() {
        DataConfig::default().validate().unwrap();
        let e = DataConfig { resize: Some(80), ..Default::default() }.validate().unwrap_err();
        assert!(e.to_string().contains("data.resize"));
        assert!(DataConfig { hflip_p: 1.5, ..Default::default() }.validate().is_err());
    }
}

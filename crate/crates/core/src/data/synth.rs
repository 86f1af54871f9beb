//! Deterministic synthetic "video word" dataset.
//!
//! Each clip shows a mouth-like ellipse whose opening oscillates at a
//! class-specific frequency while the word is spoken and rests otherwise.
//! The oscillation phase is drawn per sample, so any single frame is
//! uninformative about the class and a classifier has to look at motion.
//!
//! With `boundary_context`, the word is placed at one end of the clip and the
//! remaining frames oscillate at another class's frequency. Both segments
//! have the same length distribution, so without the word-boundary indicator
//! a model cannot tell which one is the word.
//!
//! With `jitter`, every frame is additionally rotated, scaled and shifted at
//! random (in-plane head motion), and per-frame landmarks are written for
//! the alignment stage.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry, Split};
use crate::align::{Affine, Point, SimilarityTransform, Template};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    /// Rendered frame side in pixels.
    pub size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-range of the per-clip brightness offset.
    pub brightness: f64,
    /// Half-range of the per-clip translation, as a fraction of `size`.
    pub translation: f64,
    /// Minimum gap between class frequencies, in cycles per frame.
    pub separation: f64,
    pub boundary_context: bool,
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            per_class: 120,
            frames: 20,
            size: 96,
            noise: 0.05,
            brightness: 0.1,
            translation: 0.03,
            separation: 0.035,
            boundary_context: false,
            jitter: false,
            seed: 0,
        }
    }
}

const F_MIN: f64 = 0.06;
const F_MAX: f64 = 0.45;
const SKIN: f64 = 0.62;
const MOUTH: f64 = 0.12;

/// Per-stream identifiers for [`Rng::derive`].
const STREAM_SPLIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class < 2 || self.frames < 8 {
            return Err(Error::invalid("synthetic data needs K >= 2, n >= 2 and T >= 8"));
        }
        if self.size < 8 {
            return Err(Error::invalid("frame size must be at least 8"));
        }
        if self.noise < 0.0 || self.brightness < 0.0 || self.translation < 0.0 {
            return Err(Error::invalid("nuisance levels must be non-negative"));
        }
        if !(self.separation > 0.0) || self.step() < self.separation {
            return Err(Error::invalid(format!(
                "{} classes do not fit between {F_MIN} and {F_MAX} cycles/frame at separation {}",
                self.classes, self.separation
            )));
        }
        Ok(())
    }

    fn step(&self) -> f64 {
        (F_MAX - F_MIN) / (self.classes - 1) as f64
    }

    /// Oscillation frequency of each class in cycles per frame, evenly spread.
    pub fn class_frequencies(&self) -> Vec<f64> {
        (0..self.classes).map(|k| F_MIN + k as f64 * self.step()).collect()
    }

    pub fn template(&self) -> Template {
        Template { crop_side: self.size, lip_center: [0.5 * self.size as f64, 0.5 * self.size as f64], ..Template::builtin().scaled_to(self.size) }
    }
}

struct Scene {
    /// Ellipse center in canonical coordinates.
    mouth: Point,
    landmarks: Vec<Point>,
    eyes: [Point; 2],
    half_width: f64,
    base_open: f64,
    swing: f64,
    brightness: f64,
}

impl Scene {
    /// Pixel value of the canonical (un-jittered) face at `p` with mouth half-height `b`.
    fn shade(&self, p: Point, b: f64) -> f64 {
        let s = self.half_width;
        let mut v = SKIN + self.brightness - 0.08 * (p[1] / (4.0 * s)).min(1.0);
        for e in &self.eyes {
            let d2 = (p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2);
            v -= 0.3 * (-d2 / (0.05 * s * s)).exp();
        }
        let (dx, dy) = ((p[0] - self.mouth[0]) / s, (p[1] - self.mouth[1]) / b);
        let r = (dx * dx + dy * dy).sqrt();
        // Signed distance in pixels, approximated along the short axis; one-pixel soft edge.
        let dist = (r - 1.0) * b.min(s);
        let cover = (0.5 - dist).clamp(0.0, 1.0);
        v + cover * (MOUTH - v)
    }
}

struct Rendered {
    frames: Tensor<f32>,
    landmarks: Option<Vec<Vec<Point>>>,
    start: usize,
    end: usize,
}

fn render_clip(cfg: &SynthConfig, label: usize, rng: &mut Rng) -> Result<Rendered> {
    let (t_len, size) = (cfg.frames, cfg.size);
    let sz = size as f64;
    let freqs = cfg.class_frequencies();

    let lo = (t_len * 2).div_ceil(5);
    let hi = (t_len * 3 / 5).max(lo);
    let len = lo + rng.below(hi - lo + 1);
    // With context the word sits at one end and a single distractor block of
    // similar length fills the rest, so nothing but the boundary marks the word.
    let start = if cfg.boundary_context {
        if rng.bernoulli(0.5) { 0 } else { t_len - len }
    } else {
        rng.below(t_len - len + 1)
    };
    let end = start + len;

    let tpl = cfg.template();
    let shift = [rng.uniform(-1.0, 1.0) * cfg.translation * sz, rng.uniform(-1.0, 1.0) * cfg.translation * sz];
    let moved = |p: Point| [p[0] + shift[0], p[1] + shift[1]];
    let mouth_mid = [
        0.5 * (tpl.points[3][0] + tpl.points[4][0]),
        0.5 * (tpl.points[3][1] + tpl.points[4][1]),
    ];
    let scene = Scene {
        mouth: moved(mouth_mid),
        landmarks: tpl.points.iter().map(|&p| moved(p)).collect(),
        eyes: [moved(tpl.points[0]), moved(tpl.points[1])],
        half_width: 0.18 * sz,
        base_open: 0.07 * sz,
        swing: 0.06 * sz,
        brightness: rng.uniform(-cfg.brightness, cfg.brightness),
    };
    let phase = rng.uniform(0.0, 2.0 * PI);
    let distractor = if cfg.boundary_context {
        let other = (label + 1 + rng.below(cfg.classes - 1)) % cfg.classes;
        Some((freqs[other], rng.uniform(0.0, 2.0 * PI)))
    } else {
        None
    };
    let opening = |t: usize| -> f64 {
        let wave = if (start..end).contains(&t) {
            (2.0 * PI * freqs[label] * (t - start) as f64 + phase).sin()
        } else if let Some((f, ph)) = distractor {
            (2.0 * PI * f * t as f64 + ph).sin()
        } else {
            0.0
        };
        scene.base_open + scene.swing * wave
    };

    let center = [0.5 * (sz - 1.0), 0.5 * (sz - 1.0)];
    let mut data = Vec::with_capacity(t_len * size * size);
    let mut marks = Vec::new();
    for t in 0..t_len {
        // Maps canonical coordinates to image coordinates.
        let xf = if cfg.jitter {
            let sim = SimilarityTransform {
                scale: rng.uniform(0.9, 1.1),
                theta: rng.uniform(-0.25, 0.25),
                tx: 0.0,
                ty: 0.0,
            };
            let j = [rng.uniform(-0.05, 0.05) * sz, rng.uniform(-0.05, 0.05) * sz];
            Affine::translation(center[0] + j[0], center[1] + j[1])
                .then_after(&sim.to_affine().then_after(&Affine::translation(-center[0], -center[1])))
        } else {
            Affine::IDENTITY
        };
        let inv = xf.inverse()?;
        let b = opening(t);
        for r in 0..size {
            for c in 0..size {
                let p = inv.apply([c as f64, r as f64]);
                let v = scene.shade(p, b) + cfg.noise * rng.normal();
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        if cfg.jitter {
            marks.push(scene.landmarks.iter().map(|&p| xf.apply(p)).collect());
        }
    }
    Ok(Rendered {
        frames: Tensor::new(&[t_len, size, size], data)?,
        landmarks: cfg.jitter.then_some(marks),
        start,
        end,
    })
}

/// Writes clips, manifest (and landmarks plus template when jittered) under `out`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let io = |e: std::io::Error| Error::Data(format!("cannot write dataset to {}: {e}", out.display()));
    fs::create_dir_all(out.join("clips")).map_err(io)?;
    if cfg.jitter {
        fs::create_dir_all(out.join("landmarks")).map_err(io)?;
    }
    let class_names: Vec<String> = (0..cfg.classes).map(|k| format!("word_{k:02}")).collect();

    let mut jobs = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (k, name) in class_names.iter().enumerate() {
        let mut order: Vec<usize> = (0..cfg.per_class).collect();
        Rng::derive(cfg.seed, &[STREAM_SPLIT, k as u64]).shuffle(&mut order);
        let n_train = (0.7 * cfg.per_class as f64).round() as usize;
        let n_val = (0.15 * cfg.per_class as f64).round() as usize;
        for i in 0..cfg.per_class {
            let rank = order.iter().position(|&o| o == i).unwrap();
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            jobs.push((k, i, format!("{name}_{i:04}"), split));
        }
    }

    let samples = jobs
        .par_iter()
        .map(|(k, i, id, split)| -> Result<ManifestEntry> {
            let mut rng = Rng::derive(cfg.seed, &[STREAM_SAMPLE, *k as u64, *i as u64]);
            let clip = render_clip(cfg, *k, &mut rng)?;
            let path = format!("clips/{id}.lkt");
            clip.frames.save(out.join(&path)).map_err(|e| Error::Data(format!("{path}: {e}")))?;
            let landmarks = match &clip.landmarks {
                Some(marks) => {
                    let rel = format!("landmarks/{id}.json");
                    fs::write(out.join(&rel), serde_json::to_vec(marks)?).map_err(io)?;
                    Some(rel)
                }
                None => None,
            };
            Ok(ManifestEntry {
                path,
                label: *k,
                boundary_start: clip.start,
                boundary_end: clip.end,
                split: *split,
                landmarks,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest { class_names, samples };
    manifest.save(&out.join("manifest.json"))?;
    if cfg.jitter {
        fs::write(out.join("template.json"), serde_json::to_vec_pretty(&cfg.template())?).map_err(io)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(boundary_context: bool, jitter: bool) -> SynthConfig {
        SynthConfig {
            classes: 3,
            per_class: 4,
            frames: 10,
            size: 16,
            boundary_context,
            jitter,
            seed: 5,
            ..Default::default()
        }
    }

    fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = walk(dir)
            .into_iter()
            .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn generation_is_byte_identical() {
        for (ctx, jit) in [(false, false), (true, true)] {
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            generate_synthetic(&tiny(ctx, jit), a.path()).unwrap();
            generate_synthetic(&tiny(ctx, jit), b.path()).unwrap();
            assert_eq!(read_all(a.path()), read_all(b.path()));
        }
    }

    #[test]
    fn manifest_contents() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { per_class: 20, ..tiny(false, true) };
        let m = generate_synthetic(&cfg, dir.path()).unwrap();
        m.validate().unwrap();
        assert_eq!(m.samples.len(), 60);
        let count = |s: Split| m.samples.iter().filter(|e| e.split == s && e.label == 0).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (14, 3, 3));
        let e = &m.samples[0];
        let clip = Tensor::<f32>::load(dir.path().join(&e.path)).unwrap();
        assert_eq!(clip.shape(), &[10, 16, 16]);
        assert!(clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let marks: Vec<Vec<Point>> = serde_json::from_slice(&fs::read(dir.path().join(e.landmarks.as_ref().unwrap())).unwrap()).unwrap();
        assert_eq!(marks.len(), 10);
        assert!(marks.iter().all(|f| f.len() == 5));
        assert!(dir.path().join("template.json").exists());
    }

    #[test]
    fn class_frequencies_are_separated() {
        for k in [2, 5, 10] {
            let cfg = SynthConfig { classes: k, ..Default::default() };
            let f = cfg.class_frequencies();
            let gap = f.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            assert!(gap >= cfg.separation);
            assert!(f.iter().all(|&v| v < 0.5));
        }
        assert!(SynthConfig { classes: 20, separation: 0.05, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { frames: 7, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn frames_outside_the_word_are_static_without_context() {
        let cfg = SynthConfig { noise: 0.0, ..tiny(false, false) };
        let mut rng = Rng::new(1);
        let clip = render_clip(&cfg, 1, &mut rng).unwrap();
        let outside: Vec<usize> = (0..cfg.frames).filter(|t| !(clip.start..clip.end).contains(t)).collect();
        for w in outside.windows(2) {
            assert_eq!(clip.frames.select(0, w[0]).unwrap(), clip.frames.select(0, w[1]).unwrap());
        }
        let ctx = render_clip(&SynthConfig { noise: 0.0, ..tiny(true, false) }, 1, &mut Rng::new(1)).unwrap();
        let outside: Vec<usize> = (0..cfg.frames).filter(|t| !(ctx.start..ctx.end).contains(t)).collect();
        assert!(outside.windows(2).any(|w| ctx.frames.select(0, w[0]).unwrap() != ctx.frames.select(0, w[1]).unwrap()));
    }

    #[test]
    fn unwritable_directory_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(generate_synthetic(&tiny(false, false), &file), Err(Error::Data(_))));
    }
}

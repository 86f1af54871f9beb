//! Per-clip preprocessing and augmentation. Random choices are drawn once per
//! clip, so every frame of a clip receives the same crop window and flip.

use super::VideoSample;
use crate::error::{Error, Result};
use crate::model::BoundaryMask;
use crate::tensor::{Rng, Scalar, Tensor};

/// BT.601 luma of a `[3, H, W]` RGB frame.
pub fn to_grayscale<S: Scalar>(rgb: &Tensor<S>) -> Result<Tensor<S>> {
    if rgb.rank() != 3 || rgb.shape()[0] != 3 {
        return Err(Error::invalid(format!("expected [3, H, W], got {:?}", rgb.shape())));
    }
    let plane = rgb.len() / 3;
    let d = rgb.data();
    let (wr, wg, wb) = (S::of(0.299), S::of(0.587), S::of(0.114));
    let out = (0..plane).map(|i| wr * d[i] + wg * d[plane + i] + wb * d[2 * plane + i]).collect();
    Tensor::new(&rgb.shape()[1..], out)
}

/// Source coordinate for output index `i` with corner-aligned sampling.
fn source_coord(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize of one `[H, W]` frame; corners of input and output coincide.
pub fn resize_bilinear<S: Scalar>(frame: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    if frame.rank() != 2 || frame.shape()[0] < 2 || frame.shape()[1] < 2 {
        return Err(Error::invalid(format!("resize needs a frame of at least 2x2, got {:?}", frame.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    if (h, w) == (out_h, out_w) {
        return Ok(frame.clone());
    }
    let d = frame.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = source_coord(r, out_h, h);
        let y0 = (y.floor() as usize).min(h - 2);
        let fy = y - y0 as f64;
        for c in 0..out_w {
            let x = source_coord(c, out_w, w);
            let x0 = (x.floor() as usize).min(w - 2);
            let fx = x - x0 as f64;
            let at = |rr: usize, cc: usize| d[rr * w + cc].f64();
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(S::of(top * (1.0 - fy) + bot * fy));
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

/// Resizes every frame of a `[T, H, W]` clip.
pub fn resize_video<S: Scalar>(video: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    check_video(video)?;
    let frames = (0..video.shape()[0])
        .map(|t| resize_bilinear(&video.select(0, t)?, out_h, out_w))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&frames.iter().collect::<Vec<_>>(), 0)
}

fn check_video<S: Scalar>(video: &Tensor<S>) -> Result<()> {
    if video.rank() != 3 {
        return Err(Error::invalid(format!("clip must be [T, H, W], got {:?}", video.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Offset uniform over every valid position.
    Random,
    Center,
}

/// Cuts the same `size × size` window from every frame. Returns the clip and the `(row, col)` offset.
pub fn crop<S: Scalar>(video: &Tensor<S>, size: usize, mode: CropMode, rng: &mut Rng) -> Result<(Tensor<S>, [usize; 2])> {
    check_video(video)?;
    let (t, h, w) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(format!("cannot crop {size}x{size} from {h}x{w}")));
    }
    let (r0, c0) = match mode {
        CropMode::Random => (rng.below(h - size + 1), rng.below(w - size + 1)),
        CropMode::Center => ((h - size) / 2, (w - size) / 2),
    };
    let d = video.data();
    let mut out = Vec::with_capacity(t * size * size);
    for f in 0..t {
        for r in r0..r0 + size {
            let row = (f * h + r) * w;
            out.extend_from_slice(&d[row + c0..row + c0 + size]);
        }
    }
    Ok((Tensor::new(&[t, size, size], out)?, [r0, c0]))
}

/// Mirrors every frame left to right.
pub fn flip_video<S: Scalar>(video: &Tensor<S>) -> Result<Tensor<S>> {
    check_video(video)?;
    let w = video.shape()[2];
    let mut out = video.data().to_vec();
    out.chunks_mut(w).for_each(|row| row.reverse());
    Tensor::new(video.shape(), out)
}

/// Flips the whole clip with probability `p` (one draw). Returns whether it flipped.
pub fn hflip<S: Scalar>(video: &Tensor<S>, p: f64, rng: &mut Rng) -> Result<(Tensor<S>, bool)> {
    if rng.bernoulli(p) {
        Ok((flip_video(video)?, true))
    } else {
        check_video(video)?;
        Ok((video.clone(), false))
    }
}

/// Source frame for each of `target` output positions, centered on the word
/// and clamped to the clip (edge frames are repeated).
pub fn window_indices(len: usize, boundary: &BoundaryMask, target: usize) -> Vec<usize> {
    let start = boundary.center() as i64 - (target / 2) as i64;
    (0..target as i64).map(|i| (start + i).clamp(0, len as i64 - 1) as usize).collect()
}

/// Re-times a sample to `target` frames around its word center and re-indexes the boundary.
pub fn center_window(sample: &VideoSample, target: usize) -> Result<VideoSample> {
    if target == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    let len = sample.frames.shape()[0];
    let idx = window_indices(len, &sample.boundary, target);
    let frames = idx.iter().map(|&i| sample.frames.select(0, i)).collect::<Result<Vec<_>>>()?;
    let mask = sample.boundary.values();
    let new_mask: Vec<f64> = idx.iter().map(|&i| mask[i]).collect();
    Ok(VideoSample {
        frames: Tensor::stack(&frames.iter().collect::<Vec<_>>(), 0)?,
        label: sample.label,
        boundary: BoundaryMask::from_values(&new_mask)?,
        id: sample.id.clone(),
    })
}

/// A fresh uniform permutation of `0..n`.
pub fn epoch_shuffle(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rand_uniform;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn ramp_clip(t: usize) -> VideoSample {
        let frames: Vec<f32> = (0..t * 4).map(|i| (i / 4) as f32 / t as f32).collect();
        VideoSample {
            frames: Tensor::new(&[t, 2, 2], frames).unwrap(),
            label: 0,
            boundary: BoundaryMask::new(t, 0, 1).unwrap(),
            id: "x".into(),
        }
    }

    fn frame_ids(s: &VideoSample, t: usize) -> Vec<usize> {
        (0..s.frames.shape()[0]).map(|i| (s.frames.at(&[i, 0, 0]).unwrap() * t as f32).round() as usize).collect()
    }

    #[test]
    fn grayscale_examples() {
        let rgb = |r: f64, g: f64, b: f64| Tensor::<f64>::from_f64(&[3, 1, 1], &[r, g, b]).unwrap();
        assert!((to_grayscale(&rgb(1.0, 1.0, 1.0)).unwrap().data()[0] - 1.0).abs() < 1e-12);
        assert!((to_grayscale(&rgb(0.0, 1.0, 0.0)).unwrap().data()[0] - 0.587).abs() < 1e-12);
        assert!((to_grayscale(&rgb(0.3, 0.3, 0.3)).unwrap().data()[0] - 0.3).abs() < 1e-12);
        assert!(to_grayscale(&Tensor::<f64>::zeros(&[2, 1, 1]).unwrap()).is_err());
    }

    #[test]
    fn resize_examples() {
        let img: Tensor<f64> = rand_uniform(&mut Rng::new(0), &[96, 96], 0.0, 1.0).unwrap();
        assert_eq!(resize_bilinear(&img, 96, 96).unwrap(), img);
        let flat = Tensor::<f64>::full(&[5, 7], 0.25).unwrap();
        assert!(resize_bilinear(&flat, 9, 3).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let checker = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let up: Tensor<f64> = resize_bilinear(&checker, 3, 3).unwrap();
        assert!((up.at(&[1, 1]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(up.at(&[0, 0]).unwrap(), 1.0);
        assert_eq!(up.at(&[2, 2]).unwrap(), 1.0);
        assert!(resize_bilinear(&Tensor::<f64>::zeros(&[1, 4]).unwrap(), 3, 3).is_err());
    }

    #[test]
    fn crop_examples() {
        let clip: Tensor<f32> = rand_uniform(&mut Rng::new(1), &[2, 96, 96], 0.0, 1.0).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let (c, [r, k]) = crop(&clip, 88, CropMode::Random, &mut rng).unwrap();
            assert!(r <= 8 && k <= 8);
            assert_eq!(c.shape(), &[2, 88, 88]);
            assert_eq!(c.at(&[1, 3, 5]).unwrap(), clip.at(&[1, r + 3, k + 5]).unwrap());
        }
        let (_, off) = crop(&clip, 88, CropMode::Center, &mut rng).unwrap();
        assert_eq!(off, [4, 4]);
        let small: Tensor<f32> = rand_uniform(&mut Rng::new(1), &[2, 88, 88], 0.0, 1.0).unwrap();
        assert_eq!(crop(&small, 88, CropMode::Random, &mut rng).unwrap().0, small);
        assert!(crop(&small, 89, CropMode::Center, &mut rng).is_err());
    }

    #[test]
    fn crop_covers_all_offsets() {
        let clip = Tensor::<f32>::zeros(&[1, 96, 96]).unwrap();
        let mut rng = Rng::new(3);
        let mut seen = [[false; 9]; 9];
        for _ in 0..2000 {
            let (_, [r, c]) = crop(&clip, 88, CropMode::Random, &mut rng).unwrap();
            seen[r][c] = true;
        }
        assert!(seen.iter().flatten().all(|&s| s));
    }

    #[test]
    fn flip_examples() {
        let clip: Tensor<f32> = rand_uniform(&mut Rng::new(4), &[3, 4, 5], 0.0, 1.0).unwrap();
        assert_eq!(flip_video(&flip_video(&clip).unwrap()).unwrap(), clip);
        assert_eq!(flip_video(&clip).unwrap().at(&[2, 1, 0]).unwrap(), clip.at(&[2, 1, 4]).unwrap());
        let mut rng = Rng::new(5);
        assert!(!hflip(&clip, 0.0, &mut rng).unwrap().1);
        let flips = (0..10_000).filter(|_| hflip(&clip, 0.5, &mut rng).unwrap().1).count();
        assert!((flips as f64 / 1e4 - 0.5).abs() < 0.02, "{flips}");
    }

    #[test]
    fn window_examples() {
        let b = |len, s, e| BoundaryMask::new(len, s, e).unwrap();
        assert_eq!(window_indices(60, &b(60, 25, 35), 40), (10..50).collect::<Vec<_>>());
        assert_eq!(window_indices(40, &b(40, 10, 30), 40), (0..40).collect::<Vec<_>>());
        let idx = window_indices(30, &b(30, 10, 20), 40);
        assert_eq!(&idx[..6], &[0, 0, 0, 0, 0, 0]);
        assert_eq!(idx[5], 0);
        assert_eq!(idx[6], 1);
        assert_eq!(&idx[34..], &[29; 6]);

        let mut s = ramp_clip(30);
        s.boundary = b(30, 10, 20);
        let w = center_window(&s, 40).unwrap();
        assert_eq!(w.frames.shape(), &[40, 2, 2]);
        assert_eq!(frame_ids(&w, 30)[20], 15);
        assert_eq!(w.boundary, b(40, 15, 25));
    }

    #[test]
    fn shuffle_is_a_deterministic_bijection_and_near_uniform() {
        let a = epoch_shuffle(10, &mut Rng::new(3));
        assert_eq!(a, epoch_shuffle(10, &mut Rng::new(3)));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let n = 5;
        let epochs = 20_000;
        let mut counts = vec![vec![0usize; n]; n];
        for e in 0..epochs {
            let p = epoch_shuffle(n, &mut Rng::derive(7, &[e]));
            for (pos, &item) in p.iter().enumerate() {
                counts[pos][item] += 1;
            }
        }
        for row in counts {
            for c in row {
                assert!((c as f64 / epochs as f64 - 0.2).abs() < 0.015);
            }
        }
    }

    proptest! {
        #[test]
        fn window_has_target_length_and_centered_word(len in 1usize..80, s_frac in 0.0f64..1.0, l_frac in 0.0f64..1.0) {
            let start = ((len as f64 * s_frac) as usize).min(len - 1);
            let end = start + 1 + ((len - start - 1) as f64 * l_frac) as usize;
            let mut sample = ramp_clip(len);
            sample.boundary = BoundaryMask::new(len, start, end).unwrap();
            let w = center_window(&sample, 40).unwrap();
            prop_assert_eq!(w.frames.shape()[0], 40);
            let c = sample.boundary.center();
            if c >= 20 && c + 20 <= len {
                prop_assert_eq!(frame_ids(&w, len)[20], c);
            }
            prop_assert!(w.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn augmentations_preserve_range(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let clip: Tensor<f32> = rand_uniform(&mut rng, &[2, 10, 12], 0.0, 1.0).unwrap();
            let (c, _) = crop(&clip, 8, CropMode::Random, &mut rng).unwrap();
            let (f, _) = hflip(&c, 0.5, &mut rng).unwrap();
            let r = resize_video(&f, 13, 5).unwrap();
            for t in [&c, &f, &r] {
                prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

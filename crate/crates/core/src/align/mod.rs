//! Landmark-based face alignment.
//!
//! A similarity transform (scale, rotation, translation) is fitted in closed
//! form from per-frame landmarks to a canonical template, the frame is warped
//! into the template's coordinates, and a fixed square around the canonical
//! lip center is cut out.
//!
//! Points are `[x, y]` in pixel units with pixel centers on integer
//! coordinates: `x` indexes columns and `y` rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type Point = [f64; 2];

/// `y = s·R(θ)·x + t` with `R(θ) = [[cos θ, −sin θ], [sin θ, cos θ]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform { scale: 1.0, theta: 0.0, tx: 0.0, ty: 0.0 };

    pub fn apply(&self, p: Point) -> Point {
        self.to_affine().apply(p)
    }

    pub fn rotation(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        [[c, -s], [s, c]]
    }

    pub fn to_affine(&self) -> Affine {
        let [[a, b], [c, d]] = self.rotation();
        let s = self.scale;
        Affine { m: [[s * a, s * b, self.tx], [s * c, s * d, self.ty]] }
    }
}

/// General 2×3 affine map `y = A x + t`, stored row-major as `[[a, b, tx], [c, d, ty]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine { m: [[1.0, 0.0, tx], [0.0, 1.0, ty]] }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        let norm = self.m.iter().flat_map(|r| &r[..2]).fold(0.0f64, |a, v| a.max(v.abs()));
        if !(det.abs() > 1e-12 * norm * norm) {
            return Err(Error::invalid("transform is not invertible"));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Affine { m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]] })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine) -> Affine {
        let (p, q) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = p[r][0] * q[0][0] + p[r][1] * q[1][0];
            m[r][1] = p[r][0] * q[0][1] + p[r][1] * q[1][1];
            m[r][2] = p[r][0] * q[0][2] + p[r][1] * q[1][2] + p[r][2];
        }
        Affine { m }
    }
}

fn check_pair(src: &[Point], dst: &[Point]) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::invalid(format!("{} source points but {} target points", src.len(), dst.len())));
    }
    if src.len() < 2 {
        return Err(Error::invalid("need at least two landmarks"));
    }
    if src.iter().chain(dst).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("landmarks must be finite"));
    }
    Ok(())
}

fn centroid(p: &[Point]) -> Point {
    let n = p.len() as f64;
    [p.iter().map(|q| q[0]).sum::<f64>() / n, p.iter().map(|q| q[1]).sum::<f64>() / n]
}

/// Least-squares similarity transform taking `src` onto `dst`.
pub fn procrustes_fit(src: &[Point], dst: &[Point]) -> Result<SimilarityTransform> {
    check_pair(src, dst)?;
    let (mx, my) = (centroid(src), centroid(dst));
    let (mut dot, mut cross, mut var, mut extent) = (0.0, 0.0, 0.0, 0.0f64);
    for (x, y) in src.iter().zip(dst) {
        let (ax, ay) = (x[0] - mx[0], x[1] - mx[1]);
        let (bx, by) = (y[0] - my[0], y[1] - my[1]);
        dot += ax * bx + ay * by;
        cross += ax * by - ay * bx;
        var += ax * ax + ay * ay;
        extent = extent.max(x[0].abs()).max(x[1].abs());
    }
    if var <= 1e-18 * (1.0 + extent * extent) * src.len() as f64 {
        return Err(Error::invalid("source landmarks are coincident"));
    }
    let theta = cross.atan2(dot);
    let scale = dot.hypot(cross) / var;
    if !(scale > 0.0) {
        return Err(Error::invalid("target landmarks are coincident"));
    }
    let mut xf = SimilarityTransform { scale, theta, tx: 0.0, ty: 0.0 };
    let r = xf.apply(mx);
    xf.tx = my[0] - r[0];
    xf.ty = my[1] - r[1];
    Ok(xf)
}

/// Least-squares general affine map taking `src` onto `dst`; needs three non-collinear points.
pub fn affine_fit(src: &[Point], dst: &[Point]) -> Result<Affine> {
    check_pair(src, dst)?;
    let (mx, my) = (centroid(src), centroid(dst));
    // Centered normal equations: A · Sxx = Syx.
    let (mut sxx, mut syx) = ([[0.0; 2]; 2], [[0.0; 2]; 2]);
    for (x, y) in src.iter().zip(dst) {
        let a = [x[0] - mx[0], x[1] - mx[1]];
        let b = [y[0] - my[0], y[1] - my[1]];
        for i in 0..2 {
            for j in 0..2 {
                sxx[i][j] += a[i] * a[j];
                syx[i][j] += b[i] * a[j];
            }
        }
    }
    let det = sxx[0][0] * sxx[1][1] - sxx[0][1] * sxx[1][0];
    let tr = sxx[0][0] + sxx[1][1];
    if !(det > 1e-12 * tr * tr) {
        return Err(Error::invalid("affine fit needs three non-collinear landmarks"));
    }
    let inv = [[sxx[1][1] / det, -sxx[0][1] / det], [-sxx[1][0] / det, sxx[0][0] / det]];
    let mut m = [[0.0; 3]; 2];
    for r in 0..2 {
        m[r][0] = syx[r][0] * inv[0][0] + syx[r][1] * inv[1][0];
        m[r][1] = syx[r][0] * inv[0][1] + syx[r][1] * inv[1][1];
        m[r][2] = my[r] - m[r][0] * mx[0] - m[r][1] * mx[1];
    }
    Ok(Affine { m })
}

/// Bilinear sample at `(x, y)` with coordinates clamped to the image (edge replication).
fn sample<S: Scalar>(img: &[S], h: usize, w: usize, x: f64, y: f64) -> S {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| img[r * w + c].f64();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    S::of(top * (1.0 - fy) + bot * fy)
}

/// Renders `image` (`[H, W]`) under `xf`, which maps input coordinates to
/// output coordinates. Each output pixel samples the input at `xf⁻¹(p)`.
pub fn warp_image<S: Scalar>(image: &Tensor<S>, xf: &Affine, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    if image.rank() != 2 {
        return Err(Error::invalid(format!("warp expects [H, W], got {:?}", image.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let inv = xf.inverse()?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            let p = inv.apply([c as f64, r as f64]);
            out.push(sample(src, h, w, p[0], p[1]));
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

/// First row/column of a side-`k` window centered on `c`.
fn window_start(c: f64, k: usize) -> i64 {
    (c - k as f64 / 2.0).floor() as i64
}

/// `k × k` window `[cx − k/2, cx + k/2) × [cy − k/2, cy + k/2)`, out-of-range
/// indices clamped to the nearest edge pixel.
pub fn crop_lip<S: Scalar>(image: &Tensor<S>, center: Point, k: usize) -> Result<Tensor<S>> {
    if image.rank() != 2 {
        return Err(Error::invalid(format!("crop expects [H, W], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if k == 0 || k > h || k > w {
        return Err(Error::invalid(format!("crop side {k} does not fit a {h}x{w} image")));
    }
    let (r0, c0) = (window_start(center[1], k), window_start(center[0], k));
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k as i64 {
        let rr = clamp(r0 + r, h);
        for c in 0..k as i64 {
            out.push(image.data()[rr * w + clamp(c0 + c, w)]);
        }
    }
    Tensor::new(&[k, k], out)
}

/// Canonical landmark layout with the lip crop it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Side of the square canvas the points are expressed in.
    #[serde(default)]
    pub canvas: Option<f64>,
    pub points: Vec<Point>,
    pub lip_center: Point,
    pub crop_side: usize,
}

fn default_version() -> u32 {
    1
}

const BUILTIN_TEMPLATE: &str = include_str!("../../data/template_v1.json");

impl Template {
    /// The shipped five-point template (eyes, nose tip, mouth corners) on a 96-pixel canvas.
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_TEMPLATE).expect("shipped template parses")
    }

    /// Rescales points, lip center and crop side to a square canvas of `side` pixels.
    pub fn scaled_to(&self, side: usize) -> Self {
        let from = self.canvas.unwrap_or(96.0);
        let k = side as f64 / from;
        Template {
            version: self.version,
            canvas: Some(side as f64),
            points: self.points.iter().map(|p| [p[0] * k, p[1] * k]).collect(),
            lip_center: [self.lip_center[0] * k, self.lip_center[1] * k],
            crop_side: ((self.crop_side as f64 * k).round() as usize).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 || self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("template needs at least two finite points".into()));
        }
        if self.crop_side == 0 {
            return Err(Error::Data("template crop_side must be positive".into()));
        }
        Ok(())
    }
}

/// Transform family used by [`align_clip`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    #[default]
    Similarity,
    Affine,
}

/// Aligns every frame of `frames` (`[T, H, W]`) to `template` and crops the lip square.
///
/// Frames are processed in parallel; output order matches input order.
pub fn align_clip<S: Scalar>(
    frames: &Tensor<S>,
    landmarks: &[Vec<Point>],
    template: &Template,
    mode: FitMode,
) -> Result<Tensor<S>> {
    if frames.rank() != 3 {
        return Err(Error::invalid(format!("clip must be [T, H, W], got {:?}", frames.shape())));
    }
    let (t, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    if landmarks.len() != t {
        return Err(Error::Data(format!("{} landmark frames for a {t}-frame clip", landmarks.len())));
    }
    let crops = (0..t)
        .into_par_iter()
        .map(|i| -> Result<Tensor<S>> {
            let wrap = |e: Error| Error::Data(format!("alignment failed at frame {i}: {e}"));
            if landmarks[i].len() != template.points.len() {
                return Err(wrap(Error::invalid(format!(
                    "{} landmarks, template has {}",
                    landmarks[i].len(),
                    template.points.len()
                ))));
            }
            let xf = match mode {
                FitMode::Similarity => procrustes_fit(&landmarks[i], &template.points).map(|s| s.to_affine()),
                FitMode::Affine => affine_fit(&landmarks[i], &template.points),
            }
            .map_err(wrap)?;
            let frame = frames.select(0, i)?;
            let warped = warp_image(&frame, &xf, h, w).map_err(wrap)?;
            crop_lip(&warped, template.lip_center, template.crop_side).map_err(wrap)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&crops.iter().collect::<Vec<_>>(), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn cloud(rng: &mut Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0)]).collect()
    }

    fn smooth_image(h: usize, w: usize) -> Tensor<f64> {
        let v: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                0.5 + 0.25 * (r / 7.0).sin() * (c / 9.0).cos()
            })
            .collect();
        Tensor::new(&[h, w], v).unwrap()
    }

    fn residual(xf: &Affine, src: &[Point], dst: &[Point]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(x, y)| {
                let p = xf.apply(*x);
                (p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2)
            })
            .sum()
    }

    #[test]
    fn fit_examples() {
        let src = cloud(&mut Rng::new(1), 5);
        let id = procrustes_fit(&src, &src).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12 && id.theta.abs() < 1e-12);
        assert!(id.tx.abs() < 1e-12 && id.ty.abs() < 1e-12);

        let moved: Vec<Point> = src.iter().map(|p| [p[0] + 5.0, p[1] - 3.0]).collect();
        let xf = procrustes_fit(&src, &moved).unwrap();
        assert!((xf.scale - 1.0).abs() < 1e-12 && xf.theta.abs() < 1e-12);
        assert!((xf.tx - 5.0).abs() < 1e-12 && (xf.ty + 3.0).abs() < 1e-12);

        let c = centroid(&src);
        let rot = SimilarityTransform { scale: 2.0, theta: 30f64.to_radians(), tx: 0.0, ty: 0.0 };
        let spun: Vec<Point> = src
            .iter()
            .map(|p| {
                let q = rot.apply([p[0] - c[0], p[1] - c[1]]);
                [q[0] + c[0], q[1] + c[1]]
            })
            .collect();
        let xf = procrustes_fit(&src, &spun).unwrap();
        assert!((xf.scale - 2.0).abs() < 1e-6);
        assert!((xf.theta - 30f64.to_radians()).abs() < 1e-6);
    }

    #[test]
    fn fit_errors() {
        assert!(procrustes_fit(&[[1.0, 1.0]; 4], &cloud(&mut Rng::new(0), 4)).is_err());
        assert!(procrustes_fit(&[[0.0, 0.0]], &[[1.0, 1.0]]).is_err());
        assert!(procrustes_fit(&cloud(&mut Rng::new(0), 3), &cloud(&mut Rng::new(0), 4)).is_err());
        assert!(affine_fit(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], &cloud(&mut Rng::new(0), 3)).is_err());
    }

    #[test]
    fn affine_fit_recovers_shear() {
        let src = cloud(&mut Rng::new(4), 6);
        let truth = Affine { m: [[1.2, 0.3, 4.0], [-0.1, 0.8, -2.0]] };
        let dst: Vec<Point> = src.iter().map(|&p| truth.apply(p)).collect();
        let fit = affine_fit(&src, &dst).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((fit.m[r][c] - truth.m[r][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reflected_target_still_gives_a_rotation() {
        let src = cloud(&mut Rng::new(2), 6);
        let mirrored: Vec<Point> = src.iter().map(|p| [-p[0], p[1]]).collect();
        let xf = procrustes_fit(&src, &mirrored).unwrap();
        let r = xf.rotation();
        assert!((r[0][0] * r[1][1] - r[0][1] * r[1][0] - 1.0).abs() < 1e-12);
        assert!(xf.scale > 0.0);
    }

    #[test]
    fn warp_examples() {
        let img = smooth_image(24, 30);
        let same = warp_image(&img, &Affine::IDENTITY, 24, 30).unwrap();
        assert!(same.sub(&img).unwrap().max_abs() < 1e-15);

        let flat = Tensor::<f64>::full(&[10, 10], 0.4).unwrap();
        let shifted = warp_image(&flat, &Affine::translation(3.0, -2.0), 10, 10).unwrap();
        assert!(shifted.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let (h, w) = (48, 48);
        let img = smooth_image(h, w);
        let about_center = |theta: f64| {
            let c = [(w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0];
            let r = SimilarityTransform { scale: 1.0, theta, tx: 0.0, ty: 0.0 }.to_affine();
            Affine::translation(c[0], c[1]).then_after(&r.then_after(&Affine::translation(-c[0], -c[1])))
        };
        let there = warp_image(&img, &about_center(0.4), h, w).unwrap();
        let back = warp_image(&there, &about_center(-0.4), h, w).unwrap();
        let (a, b) = (crop_lip(&img, [24.0, 24.0], 24).unwrap(), crop_lip(&back, [24.0, 24.0], 24).unwrap());
        let mad = a.sub(&b).unwrap().data().iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
        assert!(mad < 2e-2, "{mad}");
    }

    #[test]
    fn warp_stays_in_input_range() {
        let mut rng = Rng::new(9);
        let img: Tensor<f64> = crate::tensor::rand_uniform(&mut rng, &[12, 12], 0.0, 1.0).unwrap();
        let xf = SimilarityTransform { scale: 1.3, theta: 0.7, tx: -4.0, ty: 2.5 }.to_affine();
        let out = warp_image(&img, &xf, 15, 9).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(warp_image(&img, &Affine { m: [[0.0; 3]; 2] }, 4, 4).is_err());
    }

    #[test]
    fn crop_examples() {
        let v: Vec<f64> = (0..96 * 96).map(|i| i as f64).collect();
        let img = Tensor::new(&[96, 96], v).unwrap();
        assert_eq!(crop_lip(&img, [48.0, 48.0], 96).unwrap(), img);
        let c = crop_lip(&img, [48.0, 60.0], 40).unwrap();
        assert_eq!(c.at(&[0, 0]).unwrap(), (40 * 96 + 28) as f64);
        assert_eq!(c.at(&[39, 39]).unwrap(), (79 * 96 + 67) as f64);
        let edge = crop_lip(&img, [2.0, 2.0], 8).unwrap();
        assert_eq!(edge.at(&[0, 0]).unwrap(), 0.0);
        assert_eq!(edge.at(&[1, 1]).unwrap(), 0.0);
        assert_eq!(edge.at(&[3, 3]).unwrap(), (96 + 1) as f64);
        assert!(crop_lip(&img, [48.0, 48.0], 97).is_err());
    }

    #[test]
    fn warp_then_crop_matches_direct_window() {
        let img = smooth_image(40, 40);
        let xf = SimilarityTransform { scale: 0.9, theta: 0.3, tx: 3.0, ty: -1.0 }.to_affine();
        let full = warp_image(&img, &xf, 40, 40).unwrap();
        let (center, k) = ([20.0, 22.0], 16);
        let a = crop_lip(&full, center, k).unwrap();
        let (r0, c0) = (window_start(center[1], k) as f64, window_start(center[0], k) as f64);
        let direct = warp_image(&img, &Affine::translation(-c0, -r0).then_after(&xf), k, k).unwrap();
        assert!(a.sub(&direct).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn clip_alignment_undoes_roll() {
        let (h, w) = (48, 48);
        let base = smooth_image(h, w);
        let tpl = Template::builtin().scaled_to(48);
        let mut frames = Vec::new();
        let mut marks = Vec::new();
        for (i, theta) in [0.0, 0.15, -0.2, 0.3].into_iter().enumerate() {
            let c = tpl.lip_center;
            let r = SimilarityTransform { scale: 1.0 + 0.05 * i as f64, theta, tx: 0.0, ty: 0.0 }.to_affine();
            let xf = Affine::translation(c[0] + i as f64, c[1]).then_after(&r.then_after(&Affine::translation(-c[0], -c[1])));
            frames.push(warp_image(&base, &xf, h, w).unwrap());
            marks.push(tpl.points.iter().map(|&p| xf.apply(p)).collect::<Vec<_>>());
        }
        let clip = Tensor::stack(&frames.iter().collect::<Vec<_>>(), 0).unwrap();
        let tpl = Template { crop_side: 20, ..tpl };
        let out = align_clip(&clip, &marks, &tpl, FitMode::Similarity).unwrap();
        assert_eq!(out.shape(), &[4, 20, 20]);
        let f0 = out.select(0, 0).unwrap();
        for i in 1..4 {
            let fi = out.select(0, i).unwrap();
            let mad = fi.sub(&f0).unwrap().data().iter().map(|v| v.abs()).sum::<f64>() / f0.len() as f64;
            assert!(mad < 2e-2, "frame {i}: {mad}");
        }
        let mut bad = marks.clone();
        bad[2].pop();
        let err = align_clip(&clip, &bad, &tpl, FitMode::Similarity).unwrap_err();
        assert!(err.to_string().contains("frame 2"));
        let identity = vec![tpl.points.clone(); 4];
        let pass = align_clip(&clip, &identity, &tpl, FitMode::Affine).unwrap();
        assert_eq!(pass.select(0, 1).unwrap(), crop_lip(&frames[1], tpl.lip_center, 20).unwrap());
    }

    #[test]
    fn builtin_template_is_valid() {
        let t = Template::builtin();
        t.validate().unwrap();
        assert_eq!(t.points.len(), 5);
        let s = t.scaled_to(48);
        assert_eq!(s.crop_side, 32);
        assert!((s.lip_center[1] - 33.6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn recovers_random_similarity(
            seed in 0u64..10_000,
            scale in 0.5f64..2.0,
            theta in -std::f64::consts::PI + 1e-9..std::f64::consts::PI,
            tx in -20.0f64..20.0,
            ty in -20.0f64..20.0,
        ) {
            let src = cloud(&mut Rng::new(seed), 5);
            let truth = SimilarityTransform { scale, theta, tx, ty };
            let dst: Vec<Point> = src.iter().map(|&p| truth.apply(p)).collect();
            let fit = procrustes_fit(&src, &dst).unwrap();
            prop_assert!((fit.scale - scale).abs() <= 1e-6 * scale);
            let dtheta = (fit.theta - theta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
            prop_assert!(dtheta.abs() <= 1e-6);
            prop_assert!((fit.tx - tx).abs() <= 1e-6 * tx.abs().max(1.0));
            prop_assert!((fit.ty - ty).abs() <= 1e-6 * ty.abs().max(1.0));
            let r = fit.rotation();
            prop_assert!((r[0][0] * r[1][1] - r[0][1] * r[1][0] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fit_beats_identity(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let src = cloud(&mut rng, 6);
            let dst = cloud(&mut rng, 6);
            let fit = procrustes_fit(&src, &dst).unwrap().to_affine();
            prop_assert!(residual(&fit, &src, &dst) <= residual(&Affine::IDENTITY, &src, &dst) + 1e-9);
        }
    }
}

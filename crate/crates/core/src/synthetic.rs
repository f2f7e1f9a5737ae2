//! Seeded planar scenes: a smooth random texture, a random homography and the
//! backward-warped second view, with exact supervision.

use nalgebra::Matrix3;

use crate::backbone::{grid_keypoints, Image, COARSE_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::losses::{fine_targets, gt_coarse_labels, GroundTruthLabels};
use crate::rng::XorShift64Star;

const BUMPS: usize = 32;
const MAX_DRAWS: u64 = 64;

/// Sum of randomly placed Gaussian bumps with signed amplitudes, rescaled to
/// `[0, 1]`.
pub fn gen_texture(height: usize, width: usize, seed: u64) -> Result<Image> {
    let img = Image::zeros(height, width);
    img.check_dims()?;
    let mut rng = XorShift64Star::derive(seed, 0);
    let side = height.min(width) as f64;
    let bumps: Vec<[f64; 4]> = (0..BUMPS)
        .map(|_| {
            let cx = rng.uniform(0.0, width as f64);
            let cy = rng.uniform(0.0, height as f64);
            let sigma = rng.uniform(0.03, 0.12) * side;
            let amp = rng.uniform(-1.0, 1.0);
            [cx, cy, sigma, amp]
        })
        .collect();
    let mut data = vec![0.0; height * width];
    for (k, v) in data.iter_mut().enumerate() {
        let (x, y) = ((k % width) as f64, (k / width) as f64);
        *v = bumps
            .iter()
            .map(|&[cx, cy, s, a]| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
            .sum();
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut data {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
    }
    Image::new(height, width, data)
}

/// Ranges the random homography is drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyLimits {
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub translation: f64,
    pub perspective: f64,
}

impl Default for HomographyLimits {
    fn default() -> Self {
        Self {
            rotation_deg: 25.0,
            scale: (0.8, 1.25),
            translation: 8.0,
            perspective: 1e-3,
        }
    }
}

impl HomographyLimits {
    pub fn zero() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translation: 0.0,
            perspective: 0.0,
        }
    }

    fn det_bounds(&self) -> (f64, f64) {
        (self.scale.0 * self.scale.0, self.scale.1 * self.scale.1)
    }
}

/// `translate · rotate · scale · perspective`, all about the image centre.
pub fn compose_about_center(
    rotation_rad: f64,
    scale: f64,
    translation: [f64; 2],
    perspective: [f64; 2],
    width: usize,
    height: usize,
) -> Result<Homography> {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let to_center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let from_center = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
    let (s, c) = rotation_rad.sin_cos();
    let t = Matrix3::new(1.0, 0.0, translation[0], 0.0, 1.0, translation[1], 0.0, 0.0, 1.0);
    let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let sc = Matrix3::new(scale, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, 1.0);
    let p = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, perspective[0], perspective[1], 1.0);
    Homography::new(from_center * t * r * sc * p * to_center)
}

/// Draws a homography within `limits` for a `width × height` image. Draws
/// whose upper-left 2×2 determinant leaves `[scale.0², scale.1²]` (possible
/// once perspective rescales the matrix) are rejected and redrawn.
pub fn sample_homography(seed: u64, limits: &HomographyLimits, width: usize, height: usize) -> Result<Homography> {
    let (lo, hi) = limits.scale;
    if !(lo > 0.0 && lo <= hi) || limits.rotation_deg < 0.0 || limits.translation < 0.0 || limits.perspective < 0.0 {
        return Err(Error::Config(format!("invalid homography limits {limits:?}")));
    }
    let (dmin, dmax) = limits.det_bounds();
    let mut last = None;
    for draw in 0..MAX_DRAWS {
        let mut rng = XorShift64Star::derive(seed, 1 + draw);
        let rot = limits.rotation_deg.to_radians();
        let theta = rng.uniform(-rot, rot);
        let scale = rng.uniform(lo.ln(), hi.ln()).exp();
        let t = [rng.uniform(-limits.translation, limits.translation), rng.uniform(-limits.translation, limits.translation)];
        let p = [rng.uniform(-limits.perspective, limits.perspective), rng.uniform(-limits.perspective, limits.perspective)];
        let h = compose_about_center(theta, scale, t, p, width, height)?;
        let m = h.matrix();
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if det >= dmin && det <= dmax {
            return Ok(h);
        }
        last = Some((theta, scale, t));
    }
    // fall back to the last draw without perspective, which always satisfies the bound
    let (theta, scale, t) = last.expect("at least one draw");
    compose_about_center(theta, scale, t, [0.0, 0.0], width, height)
}

fn bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width, img.height);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let top = img.at(y0, x0) * (1.0 - fx) + if fx > 0.0 { img.at(y0, x1) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = img.at(y1, x0) * (1.0 - fx) + if fx > 0.0 { img.at(y1, x1) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// Output pixel `p` samples `img` at `H⁻¹(p)`; samples outside the source
/// are 0.
pub fn warp_bilinear(img: &Image, h: &Homography) -> Result<Image> {
    let inv = h.inverse()?;
    let mut out = Image::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            if let Ok(q) = inv.apply([x as f64, y as f64]) {
                out.data[y * img.width + x] = bilinear(img, q[0], q[1]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarScene {
    pub image_a: Image,
    pub image_b: Image,
    /// Maps A pixels to B pixels.
    pub h_gt: Homography,
    pub seed: u64,
    /// Labels for the ground-truth coarse pairs, offsets relative to the
    /// B-cell centres.
    pub gt_labels: GroundTruthLabels,
}

impl PlanarScene {
    /// Derives the labels for an existing image pair related by `h_gt`.
    pub fn from_parts(image_a: Image, image_b: Image, h_gt: Homography, seed: u64, psi: f64) -> Result<Self> {
        if (image_a.height, image_a.width) != (image_b.height, image_b.width) {
            return Err(Error::shape(
                "scene images",
                &[image_a.height, image_a.width],
                &[image_b.height, image_b.width],
            ));
        }
        let (height, width) = (image_a.height, image_a.width);
        let matches = gt_coarse_labels(&h_gt, height, width)?;
        let centers = grid_keypoints(height, width, COARSE_STRIDE)?;
        let pairs: Vec<_> = matches.iter().map(|&(i, j)| (centers[i], centers[j])).collect();
        let (offsets, confidence, valid) = fine_targets(&h_gt, &pairs, psi)?;
        Ok(Self {
            image_a,
            image_b,
            h_gt,
            seed,
            gt_labels: GroundTruthLabels {
                matches,
                offsets,
                confidence,
                valid,
            },
        })
    }
}

pub fn make_pair(height: usize, width: usize, seed: u64, limits: &HomographyLimits, psi: f64) -> Result<PlanarScene> {
    let image_a = gen_texture(height, width, seed)?;
    let h_gt = sample_homography(seed, limits, width, height)?;
    let image_b = warp_bilinear(&image_a, &h_gt)?;
    PlanarScene::from_parts(image_a, image_b, h_gt, seed, psi)
}

/// Number of distinct [`augment`] variants.
pub const AUGMENT_VARIANTS: u8 = 16;

/// Pixel map of dihedral variant `d` on a `width × height` image: bit 2
/// transposes (square images only), then bit 0 mirrors x and bit 1 mirrors y.
fn dihedral_matrix(d: u8, width: usize, height: usize) -> Matrix3<f64> {
    let mut m = Matrix3::identity();
    if d & 4 != 0 {
        m = Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0) * m;
    }
    if d & 1 != 0 {
        m = Matrix3::new(-1.0, 0.0, width as f64 - 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0) * m;
    }
    if d & 2 != 0 {
        m = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, height as f64 - 1.0, 0.0, 0.0, 1.0) * m;
    }
    m
}

fn dihedral_image(img: &Image, d: u8) -> Image {
    let (w, h) = (img.width, img.height);
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            // undo the mirrors, then the transpose
            let sx = if d & 1 != 0 { w - 1 - x } else { x };
            let sy = if d & 2 != 0 { h - 1 - y } else { y };
            let (sx, sy) = if d & 4 != 0 { (sy, sx) } else { (sx, sy) };
            out.data[y * w + x] = img.at(sy, sx);
        }
    }
    out
}

/// Label-preserving variant of a scene: bits 0 to 2 of `variant` pick a
/// dihedral transform applied to both views, bit 3 swaps the views. Labels
/// are recomputed from the conjugated homography, so they stay exact.
/// Variant 0 is the scene itself; non-square scenes ignore the transpose bit.
pub fn augment(scene: &PlanarScene, variant: u8, psi: f64) -> Result<PlanarScene> {
    if variant >= AUGMENT_VARIANTS {
        return Err(Error::InvalidArgument(format!("augmentation variant {variant} out of range")));
    }
    if variant == 0 {
        return Ok(scene.clone());
    }
    let (w, h) = (scene.image_a.width, scene.image_a.height);
    let d = if w == h { variant & 7 } else { variant & 3 };
    let (mut a, mut b, mut hg) = (&scene.image_a, &scene.image_b, scene.h_gt.clone());
    if variant & 8 != 0 {
        std::mem::swap(&mut a, &mut b);
        hg = hg.inverse()?;
    }
    let m = dihedral_matrix(d, w, h);
    let inv = m.try_inverse().expect("dihedral maps are invertible");
    let hg = Homography::new(m * hg.matrix() * inv)?;
    PlanarScene::from_parts(dihedral_image(a, d), dihedral_image(b, d), hg, scene.seed, psi)
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    XorShift64Star::derive(base, index).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_deterministic_and_normalized() {
        let a = gen_texture(64, 64, 3).unwrap();
        assert_eq!(a, gen_texture(64, 64, 3).unwrap());
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let b = gen_texture(64, 64, 4).unwrap();
        let mad: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4096.0;
        assert!(mad > 0.0);
        assert!(gen_texture(60, 64, 3).is_err());
    }

    #[test]
    fn zero_limits_identity() {
        let h = sample_homography(9, &HomographyLimits::zero(), 64, 64).unwrap();
        assert_eq!(h, Homography::identity());
    }

    #[test]
    fn quarter_turn_about_center() {
        let h = compose_about_center(std::f64::consts::FRAC_PI_2, 1.0, [0.0, 0.0], [0.0, 0.0], 65, 65).unwrap();
        let q = h.apply([33.0, 32.0]).unwrap();
        assert!((q[0] - 32.0).abs() < 1e-12 && (q[1] - 33.0).abs() < 1e-12);
    }

    #[test]
    fn det_within_scale_bounds() {
        let lim = HomographyLimits::default();
        for seed in 0..200 {
            let m = *sample_homography(seed, &lim, 64, 64).unwrap().matrix();
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            assert!((0.64..=1.5625).contains(&det), "seed {seed}: {det}");
        }
    }

    #[test]
    fn warp_identity_exact() {
        let a = gen_texture(32, 32, 1).unwrap();
        assert_eq!(warp_bilinear(&a, &Homography::identity()).unwrap(), a);
    }

    #[test]
    fn warp_integer_shift() {
        let a = gen_texture(32, 32, 1).unwrap();
        let b = warp_bilinear(&a, &Homography::translation(3.0, 0.0)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let expect = if x >= 3 { a.at(y, x - 3) } else { 0.0 };
                assert_eq!(b.at(y, x), expect);
            }
        }
    }

    #[test]
    fn augmented_labels_follow_pixels() {
        let s = make_pair(64, 64, 12, &HomographyLimits::default(), 8.0).unwrap();
        for v in 0..AUGMENT_VARIANTS {
            let t = augment(&s, v, 8.0).unwrap();
            let d = dihedral_matrix(v & 7, 64, 64);
            let map = |p: [f64; 2]| {
                let q = d * nalgebra::Vector3::new(p[0], p[1], 1.0);
                [q[0], q[1]]
            };
            for y in (0..64).step_by(7) {
                for x in (0..64).step_by(5) {
                    let q = [x as f64, y as f64];
                    let m = map(q);
                    let (mx, my) = (m[0].round() as usize, m[1].round() as usize);
                    let (src, dst) = if v & 8 == 0 { (&t.image_a, &t.image_b) } else { (&t.image_b, &t.image_a) };
                    assert_eq!(src.at(my, mx), s.image_a.at(y, x));
                    assert_eq!(dst.at(my, mx), s.image_b.at(y, x));
                    // the original correspondence q -> H(q), seen in the new frames
                    let hq = map(s.h_gt.apply(q).unwrap());
                    let (from, to) = if v & 8 == 0 { (m, hq) } else { (hq, m) };
                    let got = t.h_gt.apply(from).unwrap();
                    assert!((got[0] - to[0]).abs() < 1e-9 && (got[1] - to[1]).abs() < 1e-9, "variant {v}");
                }
            }
            assert!(!t.gt_labels.matches.is_empty());
        }
        assert_eq!(augment(&s, 0, 8.0).unwrap(), s);
        assert!(augment(&s, AUGMENT_VARIANTS, 8.0).is_err());
        let r = make_pair(32, 64, 3, &HomographyLimits::default(), 8.0).unwrap();
        let t = augment(&r, 7, 8.0).unwrap();
        assert_eq!((t.image_a.height, t.image_a.width), (32, 64));
    }

    #[test]
    fn scene_identity_diagonal() {
        let s = make_pair(32, 32, 5, &HomographyLimits::zero(), 8.0).unwrap();
        assert_eq!(s.image_a, s.image_b);
        assert!(s.gt_labels.matches.iter().all(|(i, j)| i == j));
        assert_eq!(s.gt_labels.matches.len(), 16);
        assert!(s.gt_labels.offsets.data().iter().all(|&v| v == 0.0));
    }
}

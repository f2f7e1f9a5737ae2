//! Homography algebra, relative-pose error and the evaluation metrics
//! (pose AUC, mean matching accuracy, corner correctness).

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

/// A point correspondence `(p_a, p_b)` in pixel coordinates.
pub type Correspondence = ([f64; 2], [f64; 2]);

/// Invertible 3×3 projective map, stored with `h[2][2] == 1` whenever that
/// entry is non-zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("homography".into()));
        }
        let m = if m[(2, 2)].abs() > DET_EPS {
            m / m[(2, 2)]
        } else {
            let n = m.norm();
            if n == 0.0 {
                return Err(Error::Degenerate("zero homography".into()));
            }
            m / n
        };
        if m.determinant().abs() <= DET_EPS {
            return Err(Error::Degenerate(format!(
                "homography determinant {:.3e} is not invertible",
                m.determinant()
            )));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    /// Row-major entries.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Format(format!("homography needs 9 entries, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn scaling(s: f64) -> Result<Self> {
        Self::new(Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.m[(i, j)]))
    }

    /// Row-major entries.
    pub fn to_vec(&self) -> Vec<f64> {
        let r = self.to_rows();
        r.iter().flatten().copied().collect()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is singular".into()))?;
        Self::new(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.m * other.m)
    }

    /// Projective warp of a pixel coordinate.
    pub fn apply(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let v = self.m * Vector3::new(p[0], p[1], 1.0);
        if v.z.abs() <= W_EPS {
            return Err(Error::Degenerate(format!("point {p:?} maps to infinity")));
        }
        Ok([v.x / v.z, v.y / v.z])
    }

    /// Max absolute entry difference after both are normalised.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).amax()
    }
}

fn normalising_transform(pts: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalised direct linear transform: least-squares homography mapping
/// each `p_a` onto its `p_b` (exact on noiseless data).
pub fn homography_dlt(pairs: &[Correspondence]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "homography estimation needs at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let src: Vec<[f64; 2]> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<[f64; 2]> = pairs.iter().map(|p| p.1).collect();
    let ts = normalising_transform(&src)?;
    let td = normalising_transform(&dst)?;
    let norm = |t: &Matrix3<f64>, p: [f64; 2]| {
        let v = t * Vector3::new(p[0], p[1], 1.0);
        [v.x / v.z, v.y / v.z]
    };
    // At least 9 rows so the SVD yields the full right singular basis.
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(&dst).enumerate() {
        let [x, y] = norm(&ts, *s);
        let [u, v] = norm(&td, *d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * k, j)] = r0[j];
            a[(2 * k + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |r: usize| svd.singular_values[order[r]];
    if sv(7) <= 1e-10 * sv(0) {
        return Err(Error::Degenerate(
            "correspondences do not determine a homography (rank < 8)".into(),
        ));
    }
    let h = vt.row(order[8]);
    let hn = Matrix3::from_fn(|i, j| h[3 * i + j]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalisation".into()))?;
    Homography::new(td_inv * hn * ts)
}

/// Rotation and translation-direction errors of an estimated relative pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDelta {
    pub rotation_deg: f64,
    pub translation_deg: f64,
    /// `max(rotation_deg, translation_deg)`.
    pub max_deg: f64,
}

fn check_rotation(r: &Matrix3<f64>, what: &str) -> Result<()> {
    let dev = (r.transpose() * r - Matrix3::identity()).amax();
    if !(dev <= 1e-6) {
        return Err(Error::InvalidArgument(format!(
            "{what} is not orthonormal (deviation {dev:.2e})"
        )));
    }
    Ok(())
}

fn clamped_acos_deg(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angular pose error between ground truth `(r, t)` and estimate `(r_est, t_est)`.
pub fn pose_error(r: &Matrix3<f64>, t: &Vector3<f64>, r_est: &Matrix3<f64>, t_est: &Vector3<f64>) -> Result<PoseDelta> {
    check_rotation(r, "ground-truth rotation")?;
    check_rotation(r_est, "estimated rotation")?;
    let (nt, ne) = (t.norm(), t_est.norm());
    if !(nt > 0.0) || !(ne > 0.0) {
        return Err(Error::InvalidArgument("zero-norm translation".into()));
    }
    let translation_deg = clamped_acos_deg(t_est.dot(t) / (nt * ne));
    let rotation_deg = clamped_acos_deg(((r_est.transpose() * r).trace() - 1.0) / 2.0);
    Ok(PoseDelta {
        rotation_deg,
        translation_deg,
        max_deg: rotation_deg.max(translation_deg),
    })
}

/// Area under the empirical error CDF up to each threshold, divided by the
/// threshold. The step CDF is integrated exactly:
/// `AUC(t) = (1/(n·t)) Σ max(0, t − e_i)`.
pub fn auc_at_thresholds(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("AUC of an empty error list".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("pose error {e} is negative or NaN")));
    }
    let n = errors.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("threshold {t} must be positive")));
            }
            let area: f64 = errors.iter().map(|&e| (t - e).max(0.0)).sum();
            Ok(area / (n * t))
        })
        .collect()
}

/// Reprojection error `‖H(p_a) − p_b‖` of every correspondence.
pub fn match_errors(matches: &[Correspondence], h: &Homography) -> Result<Vec<f64>> {
    matches
        .iter()
        .map(|(a, b)| {
            let p = h.apply(*a)?;
            Ok(((p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2)).sqrt())
        })
        .collect()
}

/// Mean over pairs of the fraction of matches with error `<= t`. A pair with
/// no matches contributes 0.
pub fn mma(per_pair_errors: &[Vec<f64>], t: f64) -> f64 {
    if per_pair_errors.is_empty() {
        return 0.0;
    }
    let sum: f64 = per_pair_errors
        .iter()
        .map(|errs| {
            if errs.is_empty() {
                0.0
            } else {
                errs.iter().filter(|&&e| e <= t).count() as f64 / errs.len() as f64
            }
        })
        .sum();
    sum / per_pair_errors.len() as f64
}

/// Image corners `(0,0), (W−1,0), (0,H−1), (W−1,H−1)`.
pub fn image_corners(width: usize, height: usize) -> [[f64; 2]; 4] {
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

/// Mean distance between the four corners warped by the two homographies.
pub fn corner_error(h_gt: &Homography, h_pred: &Homography, width: usize, height: usize) -> Result<f64> {
    let mut sum = 0.0;
    for c in image_corners(width, height) {
        let a = h_gt.apply(c)?;
        let b = h_pred.apply(c)?;
        sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    Ok(sum / 4.0)
}

/// Fraction of corner errors `<= t` for each threshold.
pub fn ccm(corner_errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if corner_errors.is_empty() {
                0.0
            } else {
                corner_errors.iter().filter(|&&e| e <= t).count() as f64 / corner_errors.len() as f64
            }
        })
        .collect()
}

pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];
pub const CCM_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];
pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

#[cfg(test)]
mod tests {
    use super::*;

    fn rot_z(deg: f64) -> Matrix3<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn apply_examples() {
        assert_eq!(Homography::identity().apply([2.5, -1.0]).unwrap(), [2.5, -1.0]);
        assert_eq!(Homography::translation(3.0, -1.0).apply([0.0, 0.0]).unwrap(), [3.0, -1.0]);
        assert_eq!(Homography::scaling(2.0).unwrap().apply([1.0, 1.0]).unwrap(), [2.0, 2.0]);
    }

    #[test]
    fn point_at_infinity_errors() {
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(h.apply([-1.0, 0.0]).is_err());
    }

    #[test]
    fn singular_rejected() {
        assert!(Homography::from_rows([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn dlt_unit_square_identity() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let pairs: Vec<Correspondence> = sq.iter().map(|&p| (p, p)).collect();
        let h = homography_dlt(&pairs).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) <= 1e-10);
    }

    #[test]
    fn dlt_collinear_is_degenerate() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let pairs: Vec<Correspondence> = pts.iter().map(|&p| (p, p)).collect();
        assert!(matches!(homography_dlt(&pairs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pose_examples() {
        let t = Vector3::new(1.0, 2.0, 3.0);
        let i = Matrix3::identity();
        assert_eq!(pose_error(&i, &t, &i, &t).unwrap().max_deg, 0.0);
        let d = pose_error(&i, &t, &i, &(-t)).unwrap();
        assert!((d.translation_deg - 180.0).abs() < 1e-9);
        let d = pose_error(&i, &t, &rot_z(90.0), &t).unwrap();
        assert!((d.rotation_deg - 90.0).abs() < 1e-9);
        assert!(pose_error(&i, &Vector3::zeros(), &i, &t).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_at_thresholds(&[0.0, 0.0], &AUC_THRESHOLDS).unwrap(), vec![1.0; 3]);
        assert_eq!(auc_at_thresholds(&[10.0], &[20.0]).unwrap(), vec![0.5]);
        assert_eq!(auc_at_thresholds(&[25.0], &[20.0]).unwrap(), vec![0.0]);
        assert!(auc_at_thresholds(&[], &[5.0]).is_err());
    }

    #[test]
    fn mma_examples() {
        assert!((mma(&[vec![1.0, 2.0, 5.0]], 3.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mma(&[vec![0.0; 4]], 1.0), 1.0);
        assert_eq!(mma(&[vec![11.0, 12.0]], 10.0), 0.0);
        assert_eq!(mma(&[vec![0.0], vec![]], 1.0), 0.5);
    }

    #[test]
    fn ccm_examples() {
        let h = Homography::from_rows([[1.1, 0.05, 3.0], [-0.02, 0.95, -2.0], [1e-4, 2e-4, 1.0]]).unwrap();
        assert_eq!(corner_error(&h, &h, 64, 48).unwrap(), 0.0);
        let shifted = Homography::translation(2.0, 0.0).compose(&h).unwrap();
        let e = corner_error(&h, &shifted, 64, 48).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
        assert_eq!(ccm(&[e], &CCM_THRESHOLDS), vec![0.0, 1.0, 1.0]);
        assert_eq!(ccm(&[3.0], &[3.0]), vec![1.0]);
    }
}

//! Dense f64 kernels. Every kernel has a sequential form; the `parallel`
//! feature adds row/channel-parallel forms that produce bit-identical output
//! (each output element is computed by exactly one thread in the same order).

/// Below this many multiply-accumulates the dispatcher stays sequential.
pub const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
fn matmul_rows(a: &[f64], b: &[f64], k: usize, n: usize, out: &mut [f64], row0: usize) {
    let rows = out.len() / n.max(1);
    for r in 0..rows {
        let i = row0 + r;
        let orow = &mut out[r * n..(r + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        // four rows of b per pass keep the output row in registers longer
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for p in p..k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (u, v) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += u[l] * v[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(u, v)| u * v).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn matmul_nt_rows(a: &[f64], b: &[f64], k: usize, n: usize, out: &mut [f64], row0: usize) {
    let rows = out.len() / n.max(1);
    for r in 0..rows {
        let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
        for (j, o) in out[r * n..(r + 1) * n].iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `a · bᵀ` with `a` m×k and `b` n×k, both row-major.
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    if n > 0 {
        matmul_nt_rows(a, b, k, n, &mut out, 0);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let rows_per_task = (m / (4 * rayon::current_num_threads()).max(1)).max(1);
    out.par_chunks_mut(rows_per_task * n)
        .enumerate()
        .for_each(|(t, chunk)| matmul_nt_rows(a, b, k, n, chunk, t * rows_per_task));
    out
}

pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        return matmul_nt_par(a, b, m, k, n);
    }
    matmul_nt_seq(a, b, m, k, n)
}

/// `a` is m×k, `b` is k×n, both row-major.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n > 0 {
        matmul_rows(a, b, k, n, &mut out, 0);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let rows_per_task = (m / (4 * rayon::current_num_threads()).max(1)).max(1);
    out.par_chunks_mut(rows_per_task * n)
        .enumerate()
        .for_each(|(t, chunk)| matmul_rows(a, b, k, n, chunk, t * rows_per_task));
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution on a `channels × h × w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit in the padded input.
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        if p < 0 || p as usize >= extent {
            None
        } else {
            Some(p as usize)
        }
    }
}

/// Unfolds the input to a `(channels·k·k) × (ho·wo)` column matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; g.channels * g.k * g.k * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let orow = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            orow[oy * g.wo + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.ho * g.wo;
    let mut out = vec![0.0; g.channels * g.h * g.w];
    for c in 0..g.channels {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let crow = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += crow[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_plane(x: &[f64], kern: &[f64], g: &ConvGeom, out: &mut [f64]) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let mut acc = 0.0;
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    if let Some(ix) = g.src(ox, kx, g.w) {
                        acc += kern[ky * g.k + kx] * x[iy * g.w + ix];
                    }
                }
            }
            out[oy * g.wo + ox] = acc;
        }
    }
}

/// Depthwise convolution: one `k×k` kernel per channel, no bias.
pub fn depthwise_seq(x: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let mut out = vec![0.0; g.channels * ohw];
    for (c, o) in out.chunks_mut(ohw.max(1)).enumerate().take(g.channels) {
        depthwise_plane(&x[c * hw..(c + 1) * hw], &kernels[c * kk..(c + 1) * kk], g, o);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn depthwise_par(x: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    use rayon::prelude::*;
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let mut out = vec![0.0; g.channels * ohw];
    out.par_chunks_mut(ohw.max(1))
        .enumerate()
        .take(g.channels)
        .for_each(|(c, o)| {
            depthwise_plane(&x[c * hw..(c + 1) * hw], &kernels[c * kk..(c + 1) * kk], g, o)
        });
    out
}

pub fn depthwise(x: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if g.channels * g.ho * g.wo * g.k * g.k >= PAR_THRESHOLD {
        return depthwise_par(x, kernels, g);
    }
    depthwise_seq(x, kernels, g)
}

/// Gradients of a depthwise convolution w.r.t. input and kernels.
pub fn depthwise_backward(x: &[f64], kernels: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernels.len()];
    for c in 0..g.channels {
        let xp = &x[c * hw..(c + 1) * hw];
        let kp = &kernels[c * kk..(c + 1) * kk];
        let dyp = &dy[c * ohw..(c + 1) * ohw];
        let dxp = &mut dx[c * hw..(c + 1) * hw];
        let dkp = &mut dk[c * kk..(c + 1) * kk];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let d = dyp[oy * g.wo + ox];
                if d == 0.0 {
                    continue;
                }
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dkp[ky * g.k + kx] += d * xp[iy * g.w + ix];
                            dxp[iy * g.w + ix] += d * kp[ky * g.k + kx];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let out = matmul_seq(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(out, vec![11.0]);
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn matmul_forms_agree_with_naive() {
        for (m, k, n) in [(1, 1, 1), (3, 7, 5), (9, 16, 2), (4, 13, 11)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.61).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.7).cos()).collect();
            let want = naive(&a, &b, m, k, n);
            let got = matmul_seq(&a, &b, m, k, n);
            let nt = matmul_nt_seq(&a, &transpose(&b, k, n), m, k, n);
            for ((w, g), t) in want.iter().zip(&got).zip(&nt) {
                assert!((w - g).abs() < 1e-12 && (w - t).abs() < 1e-12);
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_nt_is_bit_identical() {
        let (m, k, n) = (41, 130, 23);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.7).cos()).collect();
        assert_eq!(matmul_nt_seq(&a, &b, m, k, n), matmul_nt_par(&a, &b, m, k, n));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_is_bit_identical() {
        let (m, k, n) = (67, 33, 29);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 101) as f64 / 37.0 - 1.3).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104_729) % 89) as f64 / 17.0 - 2.1).collect();
        assert_eq!(matmul_seq(&a, &b, m, k, n), matmul_par(&a, &b, m, k, n));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.91).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn geometry_formula() {
        let g = ConvGeom::new(1, 8, 8, 3, 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (4, 4));
        assert!(ConvGeom::new(1, 2, 2, 7, 1, 1).is_none());
    }
}

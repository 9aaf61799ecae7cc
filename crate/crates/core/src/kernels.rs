//! Slice-level dense kernels shared by the autodiff ops.

/// Square-kernel convolution geometry (zero padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output extent of a convolution over an input of extent `n`.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        if self.stride == 0 || n + 2 * self.pad < self.kernel {
            return None;
        }
        Some((n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over an input of extent `n`.
    pub fn transpose_out(&self, n: usize, output_pad: usize) -> Option<usize> {
        if n == 0 || self.stride == 0 {
            return None;
        }
        ((n - 1) * self.stride + self.kernel + output_pad).checked_sub(2 * self.pad)
    }
}

/// `c[m×p] += a[m×k] · b[k×p]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * p && c.len() >= m * p);
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×p] += aᵀ · b` with `a: [k×m]`, `b: [k×p]`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * p && c.len() >= m * p);
    for l in 0..k {
        let b_row = &b[l * p..(l + 1) * p];
        for (i, &av) in a[l * m..(l + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * p..(i + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×p] += a · bᵀ` with `a: [m×k]`, `b: [p×k]`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= p * k && c.len() >= m * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * p + j] += dot(a_row, b_row);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the loop vectorizable; order is fixed so results are reproducible
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Column ranges `[lo, hi)` of output positions whose input tap `o*stride + tap - pad` is in bounds.
#[inline]
fn valid_range(out: usize, input: usize, tap: usize, geom: &ConvGeom) -> (usize, usize) {
    let s = geom.stride;
    // smallest o with o*s + tap >= pad
    let lo = if tap >= geom.pad { 0 } else { (geom.pad - tap).div_ceil(s) };
    // largest o with o*s + tap - pad < input
    let limit = input + geom.pad;
    let hi = if limit <= tap { 0 } else { ((limit - tap - 1) / s + 1).min(out) };
    (lo.min(hi), hi)
}

/// Unfolds one `[channels, h, w]` image into `[channels·k·k, ho·wo]` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let s = geom.stride;
    let plane = ho * wo;
    cols[..channels * k * k * plane].fill(0.0);
    for c in 0..channels {
        let img = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, h, kh, geom);
            for kw in 0..k {
                let (ow_lo, ow_hi) = valid_range(wo, w, kw, geom);
                let row = ((c * k + kh) * k + kw) * plane;
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + kh - geom.pad;
                    let src = &img[ih * w..(ih + 1) * w];
                    let dst = &mut cols[row + oh * wo..row + (oh + 1) * wo];
                    for ow in ow_lo..ow_hi {
                        dst[ow] = src[ow * s + kw - geom.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `[channels, h, w]` image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let k = geom.kernel;
    let s = geom.stride;
    let plane = ho * wo;
    for c in 0..channels {
        let img = &mut x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, h, kh, geom);
            for kw in 0..k {
                let (ow_lo, ow_hi) = valid_range(wo, w, kw, geom);
                let row = ((c * k + kh) * k + kw) * plane;
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + kh - geom.pad;
                    let src = &cols[row + oh * wo..row + (oh + 1) * wo];
                    let dst = &mut img[ih * w..(ih + 1) * w];
                    for ow in ow_lo..ow_hi {
                        dst[ow * s + kw - geom.pad] += src[ow];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // aᵀ with a stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm_tn_acc(&at, &b, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // bᵀ as 2x3
        let mut c3 = [0.0; 4];
        gemm_nt_acc(&a, &bt, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        let geom = ConvGeom::new(3, 2, 1);
        let (h, w) = (5, 4);
        let x: vec::Vec<f64> = (0..2 * h * w).map(|v| v as f64 + 1.0).collect();
        let ho = geom.conv_out(h).unwrap();
        let wo = geom.conv_out(w).unwrap();
        let mut cols = vec![0.0; 2 * 9 * ho * wo];
        im2col(&x, 2, h, w, &geom, ho, wo, &mut cols);
        for c in 0..2 {
            for kh in 0..3 {
                for kw in 0..3 {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let ih = (oh * 2 + kh) as isize - 1;
                            let iw = (ow * 2 + kw) as isize - 1;
                            let want = if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                0.0
                            } else {
                                x[c * h * w + ih as usize * w + iw as usize]
                            };
                            let r = (c * 3 + kh) * 3 + kw;
                            assert_eq!(cols[r * ho * wo + oh * wo + ow], want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_size_formula() {
        let g = ConvGeom::new(3, 2, 1);
        assert_eq!(g.transpose_out(4, 0), Some(7));
        assert_eq!(g.transpose_out(4, 1), Some(8));
        assert_eq!(g.conv_out(8), Some(4));
    }
}

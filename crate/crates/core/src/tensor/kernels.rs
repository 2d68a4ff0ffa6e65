// Dense loops shared by forward and adjoint passes. All matrices row-major.

/// out[m×n] += a[m×k] · b[k×n]
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (n, 1), out, (m, k, n));
}

/// out[m×k] += a[m×n] · b[k×n]ᵀ
pub fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    gemm_strided(a, (n, 1), b, (1, n), out, (m, n, k));
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (1, k), b, (n, 1), out, (k, m, n));
}

/// Row-major `out[rows×cols] += A·B` with `A: rows×inner` and `B: inner×cols` given by
/// (row, column) strides.
fn gemm_strided(
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    out: &mut [f64],
    (rows, inner, cols): (usize, usize, usize),
) {
    assert!(a.len() >= rows * inner && b.len() >= inner * cols && out.len() >= rows * cols);
    if rows == 0 || cols == 0 || inner == 0 {
        return;
    }
    // SAFETY: the slices cover every index the strides reach, checked above.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inner,
            cols,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one frame `[cin, h, w]` into `[cin·k·k, ho·wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the frame.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Source taps for 1-D linear interpolation, half-pixel centres (align-corners off).
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w = src - i0 as f64;
            (i0, i1, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 0.0 + 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);

        // bᵀ is 2x3
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        // aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        gemm_tn_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn conv_geometry_halves() {
        let g = ConvGeom::new(3, 32, 32, 5, 4);
        assert_eq!((g.ho, g.wo), (8, 8));
        let g = ConvGeom::new(3, 8, 8, 3, 2);
        assert_eq!((g.ho, g.wo), (4, 4));
        let g = ConvGeom::new(3, 7, 7, 3, 1);
        assert_eq!((g.ho, g.wo), (7, 7));
    }

    #[test]
    fn linear_taps_two_to_four() {
        let taps = linear_taps(2, 4);
        let ramp = [0.0, 1.0];
        let vals: Vec<f64> = taps
            .iter()
            .map(|&(i0, i1, w)| ramp[i0] * (1.0 - w) + ramp[i1] * w)
            .collect();
        assert_eq!(vals, vec![0.0, 0.25, 0.75, 1.0]);
    }
}

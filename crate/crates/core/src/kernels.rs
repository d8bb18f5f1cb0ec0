//! Numeric kernels: matrix multiply, convolution via im2col, pixel shuffle.
//!
//! All loops go through [`crate::exec`], so they run on rayon when enabled and
//! sequentially otherwise, with identical results.

use crate::exec;

/// Rows of the output matrix handled by one parallel task in [`gemm`].
const GEMM_ROW_CHUNK: usize = 32;

/// A strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` view.
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c = a · b + (accumulate ? c : 0)` with `c` row-major `a.rows × b.cols`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions differ");
    assert_eq!(c.len(), m * n, "gemm output has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    exec::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |chunk_idx, c_chunk| {
        let row0 = chunk_idx * GEMM_ROW_CHUNK;
        let rows = c_chunk.len() / n;
        let a_off = row0 * a.rs;
        // SAFETY: the view bounds were checked on construction; the chunk covers
        // rows row0..row0+rows of `a` and of `c`, and `b` is read-only.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().add(a_off),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let h = self.in_h + 2 * self.pad;
        let w = self.in_w + 2 * self.pad;
        if h < self.kernel || w < self.kernel || self.stride == 0 {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample `(c, h, w)` into a `(c·k·k) × (oh·ow)` matrix.
pub fn im2col(input: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (oh, ow) = g.out_hw().expect("convolution output is empty");
    let p = oh * ow;
    let kk = g.kernel * g.kernel;
    exec::for_each_chunk_mut(col, p, |row, dst| {
        let c = row / kk;
        let ky = (row % kk) / g.kernel;
        let kx = row % g.kernel;
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for oy in 0..oh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
            if iy < 0 || iy >= g.in_h as isize {
                out_row.fill(0.0);
                continue;
            }
            let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
            for (ox, v) in out_row.iter_mut().enumerate() {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                *v = if ix < 0 || ix >= g.in_w as isize {
                    0.0
                } else {
                    src[ix as usize]
                };
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto a zeroed sample.
pub fn col2im(col: &[f32], g: &ConvGeom, output: &mut [f32]) {
    let (oh, ow) = g.out_hw().expect("convolution output is empty");
    let p = oh * ow;
    let kk = g.kernel * g.kernel;
    let plane_len = g.in_h * g.in_w;
    exec::for_each_chunk_mut(output, plane_len, |c, plane| {
        plane.fill(0.0);
        for k in 0..kk {
            let ky = k / g.kernel;
            let kx = k % g.kernel;
            let src = &col[(c * kk + k) * p..(c * kk + k + 1) * p];
            for oy in 0..oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                for ox in 0..ow {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.in_w {
                        dst[ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    });
}

/// Forward convolution of a batch. `input` is `(n, in_c, in_h, in_w)`,
/// `weight` is `(out_c, in_c, k, k)`; returns `(n, out_c, oh, ow)` data.
pub fn conv2d_forward(
    input: &[f32],
    n: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
) -> Vec<f32> {
    let (oh, ow) = g.out_hw().expect("convolution output is empty");
    let p = oh * ow;
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * p;
    let mut out = vec![0.0f32; n * out_len];
    let w = MatRef::new(weight, g.out_c, g.col_rows());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; g.col_rows() * p]
    };
    for s in 0..n {
        let x = &input[s * in_len..(s + 1) * in_len];
        let o = &mut out[s * out_len..(s + 1) * out_len];
        if g.is_pointwise() {
            gemm(w, MatRef::new(x, g.in_c, p), o, false);
        } else {
            im2col(x, g, &mut col);
            gemm(w, MatRef::new(&col, g.col_rows(), p), o, false);
        }
        if let Some(b) = bias {
            for (oc, row) in o.chunks_mut(p).enumerate() {
                let bv = b[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution. Each output is computed only when requested.
pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f32],
    n: usize,
    weight: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let (oh, ow) = g.out_hw().expect("convolution output is empty");
    let p = oh * ow;
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * p;
    let rows = g.col_rows();
    let w = MatRef::new(weight, g.out_c, rows);

    let mut d_in = want_input.then(|| vec![0.0f32; n * in_len]);
    let mut d_w = want_weight.then(|| vec![0.0f32; g.out_c * rows]);
    let d_b = want_bias.then(|| {
        let mut b = vec![0.0f32; g.out_c];
        for s in 0..n {
            for (oc, row) in grad_out[s * out_len..(s + 1) * out_len]
                .chunks(p)
                .enumerate()
            {
                b[oc] += row.iter().sum::<f32>();
            }
        }
        b
    });

    let mut col = if want_weight && !g.is_pointwise() {
        vec![0.0f32; rows * p]
    } else {
        Vec::new()
    };
    let mut dcol = if want_input && !g.is_pointwise() {
        vec![0.0f32; rows * p]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let go = MatRef::new(&grad_out[s * out_len..(s + 1) * out_len], g.out_c, p);
        let x = &input[s * in_len..(s + 1) * in_len];
        if let Some(dw) = d_w.as_mut() {
            if g.is_pointwise() {
                gemm(go, MatRef::new(x, rows, p).t(), dw, true);
            } else {
                im2col(x, g, &mut col);
                gemm(go, MatRef::new(&col, rows, p).t(), dw, true);
            }
        }
        if let Some(di) = d_in.as_mut() {
            let di = &mut di[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(w.t(), go, di, false);
            } else {
                gemm(w.t(), go, &mut dcol, false);
                col2im(&dcol, g, di);
            }
        }
    }
    ConvGrads {
        input: d_in,
        weight: d_w,
        bias: d_b,
    }
}

/// `(n, c·r², h, w)` → `(n, c, h·r, w·r)`; output channel `c`, offset `(i, j)`
/// reads input channel `c·r² + i·r + j`.
pub fn pixel_shuffle(input: &[f32], _n: usize, c_in: usize, h: usize, w: usize, r: usize) -> Vec<f32> {
    let c_out = c_in / (r * r);
    let mut out = vec![0.0f32; input.len()];
    let plane_out = h * r * w * r;
    exec::for_each_chunk_mut(&mut out, plane_out, |nc, dst| {
        let (s, c) = (nc / c_out, nc % c_out);
        for i in 0..r {
            for j in 0..r {
                let src_c = c * r * r + i * r + j;
                let src = &input[(s * c_in + src_c) * h * w..(s * c_in + src_c + 1) * h * w];
                for y in 0..h {
                    let dst_row = &mut dst[(y * r + i) * w * r..(y * r + i + 1) * w * r];
                    for x in 0..w {
                        dst_row[x * r + j] = src[y * w + x];
                    }
                }
            }
        }
    });
    out
}

/// Inverse permutation of [`pixel_shuffle`]; also its gradient.
pub fn pixel_unshuffle(
    input: &[f32],
    n: usize,
    c_out: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<f32> {
    let c_in = c_out * r * r;
    let mut out = vec![0.0f32; input.len()];
    exec::for_each_chunk_mut(&mut out, h * w, |nc, dst| {
        let (s, ci) = (nc / c_in, nc % c_in);
        let c = ci / (r * r);
        let i = (ci % (r * r)) / r;
        let j = ci % r;
        let src = &input[(s * c_out + c) * h * r * w * r..(s * c_out + c + 1) * h * r * w * r];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y * r + i) * w * r + x * r + j];
            }
        }
    });
    let _ = n;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_across_chunks() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 3) % 5) as f32 - 2.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(MatRef::new(&a, m, k), MatRef::new(&b, k, n), &mut c, false);
        assert_eq!(c, naive_matmul(&a, &b, m, k, n));
    }

    #[test]
    fn gemm_transposed_views() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = vec![0.0; 9];
        // aᵀ a is 3x3
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), &mut c, false);
        assert_eq!(c, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeom {
            in_c: 2,
            in_h: 5,
            in_w: 6,
            out_c: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..2 * 30).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..3 * 2 * 9).map(|i| (i as f32 * 0.11).cos()).collect();
        let b = [0.1, -0.2, 0.3];
        let out = conv2d_forward(&x, 1, &w, Some(&b), &g);
        let (oh, ow) = g.out_hw().unwrap();
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o] as f64;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    acc += (x[c * 30 + iy as usize * 6 + ix as usize]
                                        * w[((o * 2 + c) * 3 + ky) * 3 + kx])
                                        as f64;
                                }
                            }
                        }
                    }
                    let got = out[(o * oh + oy) * ow + ox] as f64;
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_c: 2,
            in_h: 6,
            in_w: 5,
            out_c: 1,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let (oh, ow) = g.out_hw().unwrap();
        let x: Vec<f32> = (0..60).map(|i| (i as f32 * 0.3).sin()).collect();
        let y: Vec<f32> = (0..32 * oh * ow).map(|i| (i as f32 * 0.7).cos()).collect();
        let mut col = vec![0.0; 32 * oh * ow];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 60];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| (*a * *b) as f64).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a * *b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn pixel_shuffle_known_layout() {
        // one sample, 4 channels of 2x2 -> 1 channel of 4x4
        let input: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = pixel_shuffle(&input, 1, 4, 2, 2, 2);
        #[rustfmt::skip]
        let expected = vec![
            0.0, 4.0, 1.0, 5.0,
            8.0, 12.0, 9.0, 13.0,
            2.0, 6.0, 3.0, 7.0,
            10.0, 14.0, 11.0, 15.0,
        ];
        assert_eq!(out, expected);
        assert_eq!(pixel_unshuffle(&out, 1, 1, 2, 2, 2), input);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let g = ConvGeom {
            in_c: 8,
            in_h: 16,
            in_w: 16,
            out_c: 40,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x: Vec<f32> = (0..8 * 256).map(|i| (i as f32 * 0.013).sin()).collect();
        let w: Vec<f32> = (0..40 * 72).map(|i| (i as f32 * 0.029).cos()).collect();
        exec::set_parallel(false);
        let a = conv2d_forward(&x, 1, &w, None, &g);
        exec::set_parallel(true);
        let b = conv2d_forward(&x, 1, &w, None, &g);
        assert_eq!(a, b);
    }
}

//! 2-D convolution kernels (im2col + sgemm) and their adjoints.
//!
//! A transposed convolution is the adjoint of a forward convolution, so both
//! layer kinds share one [`ConvGeometry`] describing the forward direction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward convolution geometry: `in_c x in_h x in_w -> out_c x out_h x out_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// "Same" padding: `out = ceil(in / stride)`, surplus padding on the bottom/right.
    pub fn same(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
    ) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        ConvGeometry {
            in_c,
            out_c,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    /// Rows of the im2col matrix (`in_c * k * k`).
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch_len()
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        if t.shape()[1..] != [self.in_c, self.in_h, self.in_w] {
            return Err(Error::mismatch(
                format!("[_, {}, {}, {}]", self.in_c, self.in_h, self.in_w),
                format!("{:?}", t.shape()),
            ));
        }
        Ok(())
    }

    fn check_output(&self, t: &Tensor) -> Result<()> {
        if t.shape()[1..] != [self.out_c, self.out_h, self.out_w] {
            return Err(Error::mismatch(
                format!("[_, {}, {}, {}]", self.out_c, self.out_h, self.out_w),
                format!("{:?}", t.shape()),
            ));
        }
        Ok(())
    }
}

fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let k = g.kernel;
    let p = g.out_positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let k = g.kernel;
    let p = g.out_positions();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &v) in row[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided views; the
    // lengths are asserted by the layer shape checks.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = conv(x, weight) + bias`; weight layout `[out_c, in_c, k, k]`.
pub fn conv_forward(
    x: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeometry,
) -> Result<Tensor> {
    g.check_input(x)?;
    let (kl, p) = (g.patch_len(), g.out_positions());
    let mut y = Tensor::zeros([x.n(), g.out_c, g.out_h, g.out_w]);
    let mut cols = vec![0.0; kl * p];
    for i in 0..x.n() {
        let out = y.sample_mut(i);
        if g.kernel == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0 {
            gemm(
                g.out_c,
                kl,
                p,
                weight,
                (kl as isize, 1),
                x.sample(i),
                (p as isize, 1),
                0.0,
                out,
            );
        } else {
            im2col(x.sample(i), g, &mut cols);
            gemm(
                g.out_c,
                kl,
                p,
                weight,
                (kl as isize, 1),
                &cols,
                (p as isize, 1),
                0.0,
                out,
            );
        }
        if let Some(b) = bias {
            for (oc, plane) in out.chunks_exact_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    }
    Ok(y)
}

/// Gradient of the convolution w.r.t. its input: `dx = col2im(W^T dy)`.
///
/// This is also the forward pass of the matching transposed convolution.
pub fn conv_backward_input(dy: &Tensor, weight: &[f32], g: &ConvGeometry) -> Result<Tensor> {
    g.check_output(dy)?;
    let (kl, p) = (g.patch_len(), g.out_positions());
    let mut dx = Tensor::zeros([dy.n(), g.in_c, g.in_h, g.in_w]);
    let mut cols = vec![0.0; kl * p];
    for i in 0..dy.n() {
        // W^T is (kl x out_c): row stride 1, column stride kl.
        gemm(
            kl,
            g.out_c,
            p,
            weight,
            (1, kl as isize),
            dy.sample(i),
            (p as isize, 1),
            0.0,
            &mut cols,
        );
        col2im(&cols, g, dx.sample_mut(i));
    }
    Ok(dx)
}

/// Accumulates `dW += dy * cols^T` and `db += sum(dy)` over the batch.
pub fn conv_backward_weight(
    x: &Tensor,
    dy: &Tensor,
    g: &ConvGeometry,
    dw: &mut [f32],
    db: Option<&mut [f32]>,
) -> Result<()> {
    g.check_input(x)?;
    g.check_output(dy)?;
    let (kl, p) = (g.patch_len(), g.out_positions());
    let mut cols = vec![0.0; kl * p];
    for i in 0..x.n() {
        im2col(x.sample(i), g, &mut cols);
        // cols^T is (p x kl): row stride 1, column stride p.
        gemm(
            g.out_c,
            p,
            kl,
            dy.sample(i),
            (p as isize, 1),
            &cols,
            (1, p as isize),
            1.0,
            dw,
        );
    }
    if let Some(db) = db {
        for i in 0..dy.n() {
            for (oc, plane) in dy.sample(i).chunks_exact(p).enumerate() {
                db[oc] += plane.iter().sum::<f32>();
            }
        }
    }
    Ok(())
}

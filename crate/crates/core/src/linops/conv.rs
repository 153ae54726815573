//! Multi-channel 2-D convolution with zero "same" padding and stride 1.
//!
//! Images are stored channel-major: index `(c * height + h) * width + w`.
//! The operator computes a cross-correlation,
//! `(A x)[o, h, w] = Σ_i Σ_{k,l} θ[o, i, k, l] · x[i, h + k − p, w + l − p]`
//! with `p = (w − 1)/2`, which in matrix form is a `c_out × c_in` grid of
//! Toeplitz-structured blocks. Near the border some taps fall outside the image,
//! so border columns carry fewer than `w² c_out` nonzeros.

use crate::error::{check_dim, Error, Result};

/// Kernel tensor `[c_out, c_in, w, w]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    c_out: usize,
    c_in: usize,
    width: usize,
    data: Vec<f64>,
}

impl KernelTensor {
    pub fn new(c_out: usize, c_in: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if width.is_multiple_of(2) || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel width must be odd, got {width}"
            )));
        }
        if c_out == 0 || c_in == 0 {
            return Err(Error::InvalidParameter("kernel needs at least one channel".into()));
        }
        check_dim("KernelTensor::new", c_out * c_in * width * width, data.len())?;
        Ok(Self {
            c_out,
            c_in,
            width,
            data,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, width: usize) -> Result<Self> {
        Self::new(c_out, c_in, width, vec![0.0; c_out * c_in * width * width])
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Coefficients of output channel `o` (all input channels): one block-row.
    pub fn block_row(&self, o: usize) -> &[f64] {
        let len = self.c_in * self.width * self.width;
        &self.data[o * len..(o + 1) * len]
    }

    pub fn get(&self, o: usize, i: usize, k: usize, l: usize) -> f64 {
        self.data[((o * self.c_in + i) * self.width + k) * self.width + l]
    }

    pub fn set(&mut self, o: usize, i: usize, k: usize, l: usize, v: f64) {
        self.data[((o * self.c_in + i) * self.width + k) * self.width + l] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    kernels: KernelTensor,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn new(kernels: KernelTensor, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("image must be non-empty".into()));
        }
        Ok(Self { kernels, height, width })
    }

    pub fn kernels(&self) -> &KernelTensor {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut KernelTensor {
        &mut self.kernels
    }

    pub fn set_kernels(&mut self, kernels: KernelTensor) -> Result<()> {
        if kernels.c_out != self.kernels.c_out
            || kernels.c_in != self.kernels.c_in
            || kernels.width != self.kernels.width
        {
            return Err(Error::InvalidParameter("kernel shape changed".into()));
        }
        self.kernels = kernels;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_dim(&self) -> usize {
        self.kernels.c_in * self.height * self.width
    }

    pub fn out_dim(&self) -> usize {
        self.kernels.c_out * self.height * self.width
    }

    fn patch_rows(&self) -> usize {
        self.kernels.c_in * self.kernels.width * self.kernels.width
    }

    /// Unfolds `x` into a `[c_in·w·w, H·W]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (h, w, kw) = (self.height, self.width, self.kernels.width);
        let pad = (kw / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; self.patch_rows() * hw];
        for i in 0..self.kernels.c_in {
            let channel = &x[i * hw..(i + 1) * hw];
            for k in 0..kw {
                for l in 0..kw {
                    let row = (i * kw + k) * kw + l;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = k as isize - pad;
                    let dx = l as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    for y in valid_range_iter(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let src = &channel[sy * w..(sy + 1) * w];
                        let d = &mut dst[y * w..(y + 1) * w];
                        let sx0 = (x0 as isize + dx) as usize;
                        d[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                    }
                }
            }
        }
        cols
    }

    /// Adds a `[c_in·w·w, H·W]` patch matrix back into image layout.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (h, w, kw) = (self.height, self.width, self.kernels.width);
        let pad = (kw / 2) as isize;
        let hw = h * w;
        let mut x = vec![0.0; self.in_dim()];
        for i in 0..self.kernels.c_in {
            let channel = &mut x[i * hw..(i + 1) * hw];
            for k in 0..kw {
                for l in 0..kw {
                    let row = (i * kw + k) * kw + l;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = k as isize - pad;
                    let dx = l as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    for y in valid_range_iter(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut channel[sy * w..(sy + 1) * w];
                        let sx0 = (x0 as isize + dx) as usize;
                        for (d, s) in dst[sx0..sx0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("Conv2d::apply", self.in_dim(), x.len())?;
        let cols = self.im2col(x);
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.out_dim()];
        gemm(
            self.kernels.c_out,
            self.patch_rows(),
            hw,
            (&self.kernels.data, false),
            (&cols, false),
            &mut out,
        );
        Ok(out)
    }

    pub fn adjoint_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("Conv2d::adjoint_apply", self.out_dim(), u.len())?;
        let hw = self.height * self.width;
        let mut cols = vec![0.0; self.patch_rows() * hw];
        gemm(
            self.patch_rows(),
            self.kernels.c_out,
            hw,
            (&self.kernels.data, true),
            (u, false),
            &mut cols,
        );
        Ok(self.col2im(&cols))
    }

    /// Gradient of `⟨u, A x⟩` with respect to the kernel coefficients.
    pub fn kernel_grad(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dim("Conv2d::kernel_grad", self.out_dim(), u.len())?;
        check_dim("Conv2d::kernel_grad", self.in_dim(), x.len())?;
        let cols = self.im2col(x);
        let hw = self.height * self.width;
        let mut grad = vec![0.0; self.kernels.data.len()];
        gemm(
            self.kernels.c_out,
            hw,
            self.patch_rows(),
            (u, false),
            (&cols, true),
            &mut grad,
        );
        Ok(grad)
    }
}

/// Range of output columns whose shifted source index `x + shift` is inside `[0, n)`.
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

fn valid_range_iter(n: usize, shift: isize) -> std::ops::Range<usize> {
    let (lo, hi) = valid_range(n, shift);
    lo..hi
}

/// `c = op(a) · op(b)` for row-major operands, where `op` optionally transposes.
/// `a` is `m × k` after `op`, `b` is `k × n` after `op`, `c` is `m × n`.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], bool), b: (&[f64], bool), c: &mut [f64]) {
    let (a, at) = a;
    let (b, bt) = b;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the strides
    // describe row-major (or transposed row-major) layouts inside them.
    unsafe {
        matrixmultiply::dgemm(
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let mut k = KernelTensor::zeros(1, 1, 3).unwrap();
        k.set(0, 0, 1, 1, 1.0);
        let conv = Conv2d::new(k, 4, 5).unwrap();
        let x: Vec<f64> = (0..20).map(|v| v as f64 * 0.37 - 2.0).collect();
        assert_eq!(conv.apply(&x).unwrap(), x);
        assert_eq!(conv.adjoint_apply(&x).unwrap(), x);
    }

    #[test]
    fn shift_kernel_moves_pixels() {
        // Tap at (k, l) = (1, 2) reads x[h, w + 1].
        let mut k = KernelTensor::zeros(1, 1, 3).unwrap();
        k.set(0, 0, 1, 2, 1.0);
        let conv = Conv2d::new(k, 1, 4).unwrap();
        assert_eq!(conv.apply(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![2.0, 3.0, 4.0, 0.0]);
        assert_eq!(
            conv.adjoint_apply(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![0.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn even_width_rejected() {
        assert!(KernelTensor::zeros(1, 1, 2).is_err());
        assert!(KernelTensor::new(1, 1, 3, vec![0.0; 8]).is_err());
    }
}

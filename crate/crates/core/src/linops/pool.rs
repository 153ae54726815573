use crate::error::{check_dim, Error, Result};

/// Fixed 2×2 average pooling with stride 2 on a channel-major image stack.
///
/// Odd trailing rows and columns are dropped. Each output is the mean of four
/// inputs, so the operator norm is 1/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AvgPool2d {
    channels: usize,
    height: usize,
    width: usize,
}

impl AvgPool2d {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height < 2 || width < 2 {
            return Err(Error::InvalidParameter(format!(
                "pooling needs at least one channel and a 2x2 image, got {channels}x{height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn out_height(&self) -> usize {
        self.height / 2
    }

    pub fn out_width(&self) -> usize {
        self.width / 2
    }

    pub fn in_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_dim(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("AvgPool2d::apply", self.in_dim(), x.len())?;
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = Vec::with_capacity(self.out_dim());
        for c in 0..self.channels {
            let img = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..oh {
                let r0 = &img[2 * i * self.width..(2 * i + 1) * self.width];
                let r1 = &img[(2 * i + 1) * self.width..(2 * i + 2) * self.width];
                for j in 0..ow {
                    out.push(0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]));
                }
            }
        }
        Ok(out)
    }

    /// Upsampling that spreads each value over its window with weight 1/4.
    pub fn adjoint_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("AvgPool2d::adjoint_apply", self.out_dim(), u.len())?;
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut x = vec![0.0; self.in_dim()];
        for c in 0..self.channels {
            let img = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..oh {
                for j in 0..ow {
                    let v = 0.25 * u[(c * oh + i) * ow + j];
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        img[(2 * i + di) * self.width + 2 * j + dj] = v;
                    }
                }
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_windows_and_drops_odd_edges() {
        let pool = AvgPool2d::new(1, 3, 4).unwrap();
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(pool.apply(&x).unwrap(), vec![2.5, 4.5]);
        let up = pool.adjoint_apply(&[4.0, 8.0]).unwrap();
        assert_eq!(up[..8], [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(up[8..].iter().all(|v| *v == 0.0));
    }
}

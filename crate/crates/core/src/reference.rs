//! Direct nested-loop convolution kernels on plain slices, used to check the
//! im2col path.

/// Layout of a convolution: input `(n, c_in, h, w)`, weight `(c_out, c_in, k, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let o = |d: usize| (d + 2 * self.pad - self.k) / self.stride + 1;
        (o(self.h), o(self.w))
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.n, self.c_in, self.h, self.w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let (oh, ow) = self.out_hw();
        [self.n, self.c_out, oh, ow]
    }

    /// Calls `f(n, co, ci, oy, ox, iy, ix, ky, kx)` for every tap that lands
    /// inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut([usize; 9])) {
        let (oh, ow) = self.out_hw();
        for n in 0..self.n {
            for co in 0..self.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ci in 0..self.c_in {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                        continue;
                                    }
                                    f([n, co, ci, oy, ox, iy as usize, ix as usize, ky, kx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn x_at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c_in + c) * self.h + y) * self.w + x
    }

    fn w_at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.k + ky) * self.k + kx
    }

    fn y_at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let (oh, ow) = self.out_hw();
        ((n * self.c_out + c) * oh + y) * ow + x
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; g.output_shape().iter().product()];
    g.for_each_tap(|[n, co, ci, oy, ox, iy, ix, ky, kx]| {
        y[g.y_at(n, co, oy, ox)] += x[g.x_at(n, ci, iy, ix)] * w[g.w_at(co, ci, ky, kx)];
    });
    y
}

/// Gradients of `sum(conv2d(x, w) * dy)` wrt `x` and `w`.
pub fn conv2d_backward(g: &ConvGeometry, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    g.for_each_tap(|[n, co, ci, oy, ox, iy, ix, ky, kx]| {
        let up = dy[g.y_at(n, co, oy, ox)];
        dx[g.x_at(n, ci, iy, ix)] += up * w[g.w_at(co, ci, ky, kx)];
        dw[g.w_at(co, ci, ky, kx)] += up * x[g.x_at(n, ci, iy, ix)];
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let g = ConvGeometry { n: 1, c_in: 1, c_out: 1, h: 3, w: 3, k: 3, stride: 1, pad: 1 };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d_forward(&g, &x, &w), x);
    }
}

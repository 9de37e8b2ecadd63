//! Raw numeric kernels shared by the autograd ops: GEMM and im2col
//! convolution. Everything here works on flat row-major slices.

use crate::error::{shape_err, Result};

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were asserted against the dimensions above and the
    // strides describe exactly those row-major (or transposed) layouts.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Static description of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let (&[n, c, h, w], &[o, i, kh, kw]) = (input, weight) else {
            return shape_err(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {input:?} and {weight:?}"),
            );
        };
        if stride == 0 {
            return shape_err("conv2d", "stride must be >= 1");
        }
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return shape_err(
                "conv2d",
                format!("groups {groups} must divide in channels {c} and out channels {o}"),
            );
        }
        if c / groups != i {
            return shape_err(
                "conv2d",
                format!("input has {c} channels but weight expects {} ({i} per group x {groups})", i * groups),
            );
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            );
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            groups,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height(), self.out_width()]
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    fn patch(&self) -> usize {
        self.group_in() * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfolds the channels of group `g` into a `patch x positions` matrix.
fn im2col(geo: &ConvGeometry, input: &[f64], g: usize, cols: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let (h, w) = (geo.height as isize, geo.width as isize);
    let positions = geo.positions();
    let cg = geo.group_in();
    for ci in 0..cg {
        let c = g * cg + ci;
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let row = (ci * geo.kernel_h + ky) * geo.kernel_w + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                let mut p = 0;
                for n in 0..geo.batch {
                    let plane = &input[(n * geo.in_channels + c) * geo.height * geo.width..];
                    for oy in 0..ho {
                        let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                        for ox in 0..wo {
                            let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                            dst[p] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize]
                            } else {
                                0.0
                            };
                            p += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `patch x positions` matrix back into the input gradient.
fn col2im(geo: &ConvGeometry, cols: &[f64], g: usize, grad_input: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let (h, w) = (geo.height as isize, geo.width as isize);
    let positions = geo.positions();
    let cg = geo.group_in();
    for ci in 0..cg {
        let c = g * cg + ci;
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let row = (ci * geo.kernel_h + ky) * geo.kernel_w + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                let mut p = 0;
                for n in 0..geo.batch {
                    let base = (n * geo.in_channels + c) * geo.height * geo.width;
                    for oy in 0..ho {
                        let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                        for ox in 0..wo {
                            let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                grad_input[base + (iy * w + ix) as usize] += src[p];
                            }
                            p += 1;
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N*Ho*Wo]` (row-major per output channel) to NCHW.
fn channel_major_to_nchw(geo: &ConvGeometry, src: &[f64], dst: &mut [f64]) {
    let hw = geo.out_height() * geo.out_width();
    let positions = geo.positions();
    for o in 0..geo.out_channels {
        for n in 0..geo.batch {
            let from = &src[o * positions + n * hw..o * positions + (n + 1) * hw];
            let to = (n * geo.out_channels + o) * hw;
            dst[to..to + hw].copy_from_slice(from);
        }
    }
}

fn nchw_to_channel_major(geo: &ConvGeometry, src: &[f64], dst: &mut [f64]) {
    let hw = geo.out_height() * geo.out_width();
    let positions = geo.positions();
    for o in 0..geo.out_channels {
        for n in 0..geo.batch {
            let from = (n * geo.out_channels + o) * hw;
            dst[o * positions + n * hw..o * positions + (n + 1) * hw]
                .copy_from_slice(&src[from..from + hw]);
        }
    }
}

pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let patch = geo.patch();
    let positions = geo.positions();
    let og = geo.group_out();
    let mut cols = vec![0.0; patch * positions];
    let mut out_cm = vec![0.0; geo.out_channels * positions];
    for g in 0..geo.groups {
        im2col(geo, input, g, &mut cols);
        let w = &weight[g * og * patch..(g + 1) * og * patch];
        let c = &mut out_cm[g * og * positions..(g + 1) * og * positions];
        gemm(og, patch, positions, w, false, &cols, false, 0.0, c);
    }
    let mut out = vec![0.0; out_cm.len()];
    channel_major_to_nchw(geo, &out_cm, &mut out);
    out
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let patch = geo.patch();
    let positions = geo.positions();
    let og = geo.group_out();
    let mut dout_cm = vec![0.0; geo.out_channels * positions];
    nchw_to_channel_major(geo, grad_out, &mut dout_cm);

    let mut grad_input = vec![0.0; input.len()];
    let mut grad_weight = vec![0.0; weight.len()];
    let mut cols = vec![0.0; patch * positions];
    let mut dcols = vec![0.0; patch * positions];
    for g in 0..geo.groups {
        let dout = &dout_cm[g * og * positions..(g + 1) * og * positions];
        let w = &weight[g * og * patch..(g + 1) * og * patch];
        im2col(geo, input, g, &mut cols);
        gemm(
            og,
            positions,
            patch,
            dout,
            false,
            &cols,
            true,
            0.0,
            &mut grad_weight[g * og * patch..(g + 1) * og * patch],
        );
        gemm(patch, og, positions, w, true, dout, false, 0.0, &mut dcols);
        col2im(geo, &dcols, g, &mut grad_input);
    }
    (grad_input, grad_weight)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(geo: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let cg = geo.in_channels / geo.groups;
        let og = geo.out_channels / geo.groups;
        let mut out = vec![0.0; geo.batch * geo.out_channels * ho * wo];
        for n in 0..geo.batch {
            for o in 0..geo.out_channels {
                let g = o / og;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            let c = g * cg + ci;
                            for ky in 0..geo.kernel_h {
                                for kx in 0..geo.kernel_w {
                                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                                    let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= geo.height as isize || ix >= geo.width as isize {
                                        continue;
                                    }
                                    let iv = input[((n * geo.in_channels + c) * geo.height + iy as usize) * geo.width + ix as usize];
                                    let wv = weight[((o * cg + ci) * geo.kernel_h + ky) * geo.kernel_w + kx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((n * geo.out_channels + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_loops() {
        for &(stride, padding, groups) in &[(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 0, 2)] {
            let geo = ConvGeometry::new(&[2, 4, 5, 6], &[6, 4 / groups, 3, 3], stride, padding, groups).unwrap();
            let input: Vec<f64> = (0..2 * 4 * 5 * 6).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
            let weight: Vec<f64> = (0..6 * (4 / groups) * 9).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
            assert_eq!(conv2d_forward(&geo, &input, &weight), naive_conv(&geo, &input, &weight));
        }
    }

    #[test]
    fn geometry_errors() {
        assert!(ConvGeometry::new(&[1, 3, 4, 4], &[2, 2, 3, 3], 1, 0, 1).is_err());
        assert!(ConvGeometry::new(&[1, 3, 2, 2], &[2, 3, 3, 3], 1, 0, 1).is_err());
        assert!(ConvGeometry::new(&[1, 3, 4, 4], &[2, 3, 3, 3], 0, 0, 1).is_err());
        assert!(ConvGeometry::new(&[1, 3, 4, 4], &[3, 1, 3, 3], 1, 0, 2).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

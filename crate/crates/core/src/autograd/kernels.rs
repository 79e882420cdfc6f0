//! Raw forward/backward loops for convolution and pooling on `[B, C, H, W]` buffers.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output column range whose input column `ow + kj - pad_left` is in bounds.
    #[inline]
    fn col_range(&self, kj: usize) -> Option<(usize, usize, usize)> {
        // input col = ow + kj - pad_left
        let lo = self.pad_left.saturating_sub(kj);
        let hi = (self.in_w + self.pad_left).saturating_sub(kj).min(self.out_w);
        (lo < hi).then(|| (lo, hi, lo + kj - self.pad_left))
    }

    #[inline]
    fn in_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let r = oh + ki;
        (r >= self.pad_top && r - self.pad_top < self.in_h).then(|| r - self.pad_top)
    }

    /// Visits every (input row slice, kernel tap, output row slice) triple.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        for b in 0..self.batch {
            for co in 0..self.out_channels {
                let g = co / opg;
                for cig in 0..ipg {
                    let ci = g * ipg + cig;
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let k_idx = ((co * ipg + cig) * self.kh + ki) * self.kw + kj;
                            let Some((lo, hi, in_lo)) = self.col_range(kj) else {
                                continue;
                            };
                            for oh in 0..self.out_h {
                                let Some(ih) = self.in_row(oh, ki) else {
                                    continue;
                                };
                                let out_off = ((b * self.out_channels + co) * self.out_h + oh)
                                    * self.out_w
                                    + lo;
                                let in_off = ((b * self.in_channels + ci) * self.in_h + ih)
                                    * self.in_w
                                    + in_lo;
                                f(k_idx, out_off, in_off, hi - lo);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(geom: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; geom.batch * geom.out_channels * geom.out_h * geom.out_w];
    geom.for_each_tap(|k_idx, out_off, in_off, n| {
        let w = kernel[k_idx];
        if w == 0.0 {
            return;
        }
        let dst = &mut out[out_off..out_off + n];
        let src = &input[in_off..in_off + n];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    });
    out
}

pub(crate) fn conv_backward_input(geom: &ConvGeom, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
    geom.for_each_tap(|k_idx, out_off, in_off, n| {
        let w = kernel[k_idx];
        let dst = &mut grad_in[in_off..in_off + n];
        let src = &grad_out[out_off..out_off + n];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    });
}

pub(crate) fn conv_backward_kernel(geom: &ConvGeom, grad_out: &[f64], input: &[f64], grad_k: &mut [f64]) {
    geom.for_each_tap(|k_idx, out_off, in_off, n| {
        let a = &grad_out[out_off..out_off + n];
        let b = &input[in_off..in_off + n];
        grad_k[k_idx] += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    });
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn avg_pool_forward(geom: &PoolGeom, input: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (geom.win_h * geom.win_w) as f64;
    let mut out = vec![0.0; geom.planes * geom.out_h * geom.out_w];
    for p in 0..geom.planes {
        let plane = &input[p * geom.in_h * geom.in_w..(p + 1) * geom.in_h * geom.in_w];
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let mut s = 0.0;
                for i in 0..geom.win_h {
                    let row = (oh * geom.stride_h + i) * geom.in_w + ow * geom.stride_w;
                    s += plane[row..row + geom.win_w].iter().sum::<f64>();
                }
                out[(p * geom.out_h + oh) * geom.out_w + ow] = s * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(geom: &PoolGeom, grad_out: &[f64], grad_in: &mut [f64]) {
    let scale = 1.0 / (geom.win_h * geom.win_w) as f64;
    for p in 0..geom.planes {
        let plane = &mut grad_in[p * geom.in_h * geom.in_w..(p + 1) * geom.in_h * geom.in_w];
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let g = grad_out[(p * geom.out_h + oh) * geom.out_w + ow] * scale;
                for i in 0..geom.win_h {
                    let row = (oh * geom.stride_h + i) * geom.in_w + ow * geom.stride_w;
                    for v in &mut plane[row..row + geom.win_w] {
                        *v += g;
                    }
                }
            }
        }
    }
}

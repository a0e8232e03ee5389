//! Ops over feature maps stored as `[height*width, channels]` (row index
//! `y*width + x`).

use std::rc::Rc;

use crate::{Graph, Mat, Real, Var};

/// Sparse linear resampling: output row `i` is a weighted sum of input rows.
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl ResamplePlan {
    /// Bilinear interpolation with half-pixel centres (edge samples clamp).
    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let (ih, iw) = in_hw;
        let (oh, ow) = out_hw;
        let axis = |out_len: usize, in_len: usize, o: usize| -> (usize, usize, f64) {
            let scale = in_len as f64 / out_len as f64;
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut taps = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let (y0, y1, ly) = axis(oh, ih, y);
            for x in 0..ow {
                let (x0, x1, lx) = axis(ow, iw, x);
                taps.push([
                    (y0 * iw + x0, (1.0 - ly) * (1.0 - lx)),
                    (y0 * iw + x1, (1.0 - ly) * lx),
                    (y1 * iw + x0, ly * (1.0 - lx)),
                    (y1 * iw + x1, ly * lx),
                ]);
            }
        }
        Self { in_hw, out_hw, taps }
    }
}

impl<T: Real> Graph<T> {
    /// 3x3 patch extraction with zero padding of one cell: `[h*w, c]` to
    /// `[h*w, 9c]`, column `(ky*3 + kx)*c + ch`. A 3x3 convolution is this
    /// followed by a `[9c, c_out]` matmul.
    pub fn im2col3x3(&self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), h * w, "im2col3x3: expected {h}x{w} rows");
        let mut out = Mat::zeros(h * w, 9 * c);
        for_each_tap(h, w, |dst, tap, src| {
            out.row_mut(dst)[tap * c..(tap + 1) * c].copy_from_slice(xv.row(src));
        });
        self.push_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for_each_tap(h, w, |dst, tap, src| {
                    let from = &g.row(dst)[tap * c..(tap + 1) * c];
                    for (o, &v) in gx.row_mut(src).iter_mut().zip(from) {
                        *o += v;
                    }
                });
            }
        })
    }

    pub fn resample(&self, x: Var, plan: Rc<ResamplePlan>) -> Var {
        let xv = self.value(x);
        let (ih, iw) = plan.in_hw;
        let (oh, ow) = plan.out_hw;
        assert_eq!(xv.rows(), ih * iw, "resample: input is not {ih}x{iw}");
        let c = xv.cols();
        let mut out = Mat::zeros(oh * ow, c);
        for (dst, taps) in plan.taps.iter().enumerate() {
            let row = out.row_mut(dst);
            for &(src, wgt) in taps {
                let wgt = T::of(wgt);
                for (o, &v) in row.iter_mut().zip(xv.row(src)) {
                    *o += wgt * v;
                }
            }
        }
        self.push_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for (dst, taps) in plan.taps.iter().enumerate() {
                    for &(src, wgt) in taps {
                        let wgt = T::of(wgt);
                        for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(dst)) {
                            *o += wgt * v;
                        }
                    }
                }
            }
        })
    }
}

fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    f(y * w + x, ky * 3 + kx, sy as usize * w + sx as usize);
                }
            }
        }
    }
}

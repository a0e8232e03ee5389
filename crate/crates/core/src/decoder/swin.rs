//! Windowed self-attention blocks over the cost feature grid.

use std::rc::Rc;

use qica_autograd::{Mat, Real, Var, MASKED};

use crate::params::{Ctx, Init, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};

/// Row layout for one window partition of an `h x w` grid.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    /// Source row (or `h*w` for a padding row) for each windowed position.
    pub gather: Rc<Vec<usize>>,
    /// Windowed position of each original grid cell.
    pub scatter: Rc<Vec<usize>>,
    pub groups: usize,
    pub tokens: usize,
    /// Additive mask `[groups * n * n]` separating regions that the
    /// cyclic shift made adjacent.
    pub mask: Option<Rc<Vec<f64>>>,
    /// Index into the relative position table for each `(i, j)` pair.
    pub relative_index: Rc<Vec<usize>>,
}

impl WindowLayout {
    /// Zero-pads the grid to a multiple of `window`, rolls it by `-shift`
    /// in both axes, then partitions it into `window x window` windows.
    pub fn new(grid: (usize, usize), window: usize, shift: usize) -> Self {
        let (h, w) = grid;
        let ph = h.div_ceil(window) * window;
        let pw = w.div_ceil(window) * window;
        let (wy, wx) = (ph / window, pw / window);
        let n = window * window;
        let pad_row = h * w;

        let mut gather = Vec::with_capacity(ph * pw);
        let mut scatter = vec![0; h * w];
        let mut labels = Vec::with_capacity(ph * pw);
        let region = |pos: usize, len: usize| -> usize {
            if shift == 0 || pos < len - window {
                0
            } else if pos < len - shift {
                1
            } else {
                2
            }
        };
        for by in 0..wy {
            for bx in 0..wx {
                for iy in 0..window {
                    for ix in 0..window {
                        let (ry, rx) = (by * window + iy, bx * window + ix);
                        let (sy, sx) = ((ry + shift) % ph, (rx + shift) % pw);
                        let slot = gather.len();
                        if sy < h && sx < w {
                            gather.push(sy * w + sx);
                            scatter[sy * w + sx] = slot;
                        } else {
                            gather.push(pad_row);
                        }
                        labels.push(region(ry, ph) * 3 + region(rx, pw));
                    }
                }
            }
        }
        let groups = wy * wx;
        let mask = (shift > 0).then(|| {
            let mut m = vec![0.0; groups * n * n];
            for gi in 0..groups {
                for i in 0..n {
                    for j in 0..n {
                        if labels[gi * n + i] != labels[gi * n + j] {
                            m[gi * n * n + i * n + j] = MASKED;
                        }
                    }
                }
            }
            Rc::new(m)
        });
        let span = 2 * window - 1;
        let mut relative_index = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) + window - 1 - (j / window);
                let dx = (i % window) + window - 1 - (j % window);
                relative_index.push(dy * span + dx);
            }
        }
        Self {
            gather: Rc::new(gather),
            scatter: Rc::new(scatter),
            groups,
            tokens: n,
            mask,
            relative_index: Rc::new(relative_index),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    ln_attn: LayerNorm,
    guidance: Option<Linear>,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    relative_bias: ParamId,
    ln_mlp: LayerNorm,
    fc_in: Linear,
    fc_out: Linear,
    heads: usize,
    window: usize,
    shift: usize,
}

pub struct SwinSpec {
    pub width: usize,
    pub guidance_width: Option<usize>,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub mlp_ratio: usize,
}

impl SwinBlock {
    pub fn new<T: Real>(spec: SwinSpec, name: &str, store: &mut ParamStore<T>, init: &mut Init) -> Self {
        let group = ParamGroup::Decoder;
        let d = spec.width;
        let qk_in = d + spec.guidance_width.map_or(0, |_| d);
        let span = 2 * spec.window - 1;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), group, d),
            guidance: spec
                .guidance_width
                .map(|dv| Linear::new(store, init, &format!("{name}.guidance"), group, dv, d)),
            query: Linear::new(store, init, &format!("{name}.attn.query"), group, qk_in, d),
            key: Linear::new(store, init, &format!("{name}.attn.key"), group, qk_in, d),
            value: Linear::new(store, init, &format!("{name}.attn.value"), group, d, d),
            out: Linear::new(store, init, &format!("{name}.attn.out"), group, d, d),
            relative_bias: store.add(
                format!("{name}.attn.relative_bias"),
                group,
                init.normal(span * span, spec.heads, 0.02),
            ),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), group, d),
            fc_in: Linear::new(store, init, &format!("{name}.mlp.fc_in"), group, d, d * spec.mlp_ratio),
            fc_out: Linear::new(store, init, &format!("{name}.mlp.fc_out"), group, d * spec.mlp_ratio, d),
            heads: spec.heads,
            window: spec.window,
            shift: spec.shift,
        }
    }

    pub fn has_guidance(&self) -> bool {
        self.guidance.is_some()
    }

    /// `x` is `[h*w, d_g]`; `visual` (`[h*w, d_v]`) guides queries and keys
    /// when the block was built with guidance.
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var, visual: Option<Var>, grid: (usize, usize)) -> Var {
        let g = ctx.graph;
        let layout = WindowLayout::new(grid, self.window, self.shift);
        let to_windows = |t: Var| {
            let zero = g.constant(Mat::zeros(1, g.shape(t).1));
            let padded = g.concat_rows(&[t, zero]);
            g.gather_rows(padded, layout.gather.clone())
        };

        let normed = self.ln_attn.forward(ctx, x);
        let xw = to_windows(normed);
        let qk_in = match (self.guidance, visual) {
            (Some(guide), Some(v)) => {
                let gv = guide.forward(ctx, v);
                g.concat_cols(&[xw, to_windows(gv)])
            }
            _ => xw,
        };
        let q = self.query.forward(ctx, qk_in);
        let k = self.key.forward(ctx, qk_in);
        let v = self.value.forward(ctx, xw);

        let table = g.gather_rows(ctx.p(self.relative_bias), layout.relative_index.clone());
        let bias = g.transpose(table);
        let mask = layout
            .mask
            .as_ref()
            .map(|m| Rc::new(m.iter().map(|&x| T::of(x)).collect::<Vec<T>>()));
        let attended = g.attention(q, k, v, self.heads, layout.groups, Some(bias), mask);
        let attended = self.out.forward(ctx, attended);
        let back = g.gather_rows(attended, layout.scatter.clone());
        let x = g.add(x, back);

        let h = self.ln_mlp.forward(ctx, x);
        let h = self.fc_in.forward(ctx, h);
        let h = g.gelu(h);
        let h = self.fc_out.forward(ctx, h);
        g.add(x, h)
    }
}

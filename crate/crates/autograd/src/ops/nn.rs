use std::rc::Rc;

use crate::{Graph, Mat, Real, Var};

/// Additive attention logits offset; large enough that `exp` underflows to
/// zero in both precisions.
pub const MASKED: f64 = -1e9;

impl<T: Real> Graph<T> {
    /// `max(x, 0)` with subgradient 0 at the kink. The sign pattern feeds
    /// [`Graph::kink_signature`].
    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let signs: Vec<bool> = av.data().iter().map(|&x| x > T::zero()).collect();
        let on_kink = av.data().iter().filter(|x| **x == T::zero()).count();
        self.record_branches(&signs, on_kink);
        self.unary(
            a,
            // NaN must propagate so divergence is caught, unlike `max`
            |x| if x < T::zero() { T::zero() } else { x },
            |x, _, g| if x > T::zero() { g } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y, g| g * y * (T::one() - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.unary(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _, g| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
            },
        )
    }

    /// Row-wise layer normalisation of `x [n,c]` with gain and bias rows.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (n, c) = xv.shape();
        assert_eq!(gv.shape(), (1, c));
        assert_eq!(bv.shape(), (1, c));
        let eps = T::of(eps);
        let cn = T::of(c as f64);
        let mut xhat = Mat::zeros(n, c);
        let mut inv_std = vec![T::zero(); n];
        let mut out = Mat::zeros(n, c);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(r, j, h);
                out.set(r, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        self.push_op(out, &[x, gain, bias], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for r in 0..n {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gv.data()[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d = mean_d / cn;
                    mean_dh = mean_dh / cn;
                    let out = gx.row_mut(r);
                    for j in 0..c {
                        let d = gr[j] * gv.data()[j];
                        out[j] += inv_std[r] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
            }
            if let Some(gg) = sink.slot(gain) {
                for r in 0..n {
                    for j in 0..c {
                        gg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                    }
                }
            }
            if let Some(gb) = sink.slot(bias) {
                for r in 0..n {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
        })
    }

    /// Cosine similarity between every row of `v [n,d]` and `t [1,d]`,
    /// returned as `[n,1]`.
    ///
    /// The denominator is `max(|v_i| |t|, eps)`, and results are clamped to
    /// `[-1, 1]` (a clamped entry has zero gradient).
    pub fn cosine_rows(&self, v: Var, t: Var, eps: f64) -> Var {
        let (vv, tv) = (self.value(v), self.value(t));
        let (n, d) = vv.shape();
        assert_eq!(tv.shape(), (1, d), "cosine_rows: target must be 1x{d}");
        let eps = T::of(eps);
        let t_norm = tv.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let mut dots = vec![T::zero(); n];
        let mut norms = vec![T::zero(); n];
        let mut out = Mat::zeros(n, 1);
        let mut clamped = vec![false; n];
        for r in 0..n {
            let row = vv.row(r);
            dots[r] = row.iter().zip(tv.data()).map(|(&a, &b)| a * b).sum();
            norms[r] = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let den = (norms[r] * t_norm).max(eps);
            let s = dots[r] / den;
            clamped[r] = s.abs() >= T::one();
            out.data_mut()[r] = s.max(-T::one()).min(T::one());
        }
        let hits = clamped.iter().filter(|&&c| c).count();
        self.record_branches(&clamped, hits);
        self.push_op(out, &[v, t], move |g, sink| {
            let want_v = sink.wants(v);
            let want_t = sink.wants(t);
            let mut gt = vec![T::zero(); d];
            for r in 0..n {
                let up = g.data()[r];
                if clamped[r] || up == T::zero() {
                    continue;
                }
                let prod = norms[r] * t_norm;
                let row = vv.row(r);
                if prod <= eps {
                    // constant denominator branch
                    if want_v {
                        let gv = sink.slot(v).unwrap();
                        for (o, &b) in gv.row_mut(r).iter_mut().zip(tv.data()) {
                            *o += up * b / eps;
                        }
                    }
                    for (o, &a) in gt.iter_mut().zip(row) {
                        *o += up * a / eps;
                    }
                    continue;
                }
                let s = dots[r] / prod;
                if want_v {
                    let gv = sink.slot(v).unwrap();
                    let nv2 = norms[r] * norms[r];
                    for (j, o) in gv.row_mut(r).iter_mut().enumerate() {
                        *o += up * (tv.data()[j] / prod - s * row[j] / nv2);
                    }
                }
                let nt2 = t_norm * t_norm;
                for (j, o) in gt.iter_mut().enumerate() {
                    *o += up * (row[j] / prod - s * tv.data()[j] / nt2);
                }
            }
            if want_t {
                let gtm = sink.slot(t).unwrap();
                for (o, x) in gtm.data_mut().iter_mut().zip(gt) {
                    *o += x;
                }
            }
        })
    }

    /// Multi-head scaled dot-product attention over independent groups.
    ///
    /// `q`, `k` are `[groups*n, dk]` and `v` is `[groups*n, dv]`; rows
    /// `g*n..(g+1)*n` form group `g`. Both widths split evenly into
    /// `heads`. `bias` is an optional learnable `[heads, n*n]` logit offset
    /// shared by every group; `mask` is an optional constant offset of
    /// length `n*n` (shared) or `groups*n*n`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        bias: Option<Var>,
        mask: Option<Rc<Vec<T>>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dk) = qv.shape();
        assert_eq!(kv.shape(), (rows, dk), "attention: q and k differ in shape");
        let dv = vv.cols();
        assert_eq!(vv.rows(), rows);
        assert_eq!(rows % groups, 0, "attention: rows not divisible by groups");
        assert!(dk % heads == 0 && dv % heads == 0, "attention: width not divisible by heads");
        let n = rows / groups;
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = T::one() / T::of(hk as f64).sqrt();
        let bias_v = bias.map(|b| {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (heads, n * n), "attention: bias must be heads x n*n");
            bv
        });
        if let Some(m) = &mask {
            assert!(m.len() == n * n || m.len() == groups * n * n, "attention: bad mask length");
        }

        let mut probs = vec![T::zero(); groups * heads * n * n];
        let mut out = Mat::zeros(rows, dv);
        for gi in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(gi * heads + h) * n * n..(gi * heads + h + 1) * n * n];
                let qo = gi * n * dk + h * hk;
                T::gemm_acc(
                    n, hk, n,
                    &qv.data()[qo..], dk as isize, 1,
                    &kv.data()[qo..], 1, dk as isize,
                    p, n as isize, 1,
                );
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x *= scale;
                        if let Some(b) = &bias_v {
                            *x += b.data()[h * n * n + i * n + j];
                        }
                        if let Some(m) = &mask {
                            *x += m[(gi * n * n + i * n + j) % m.len()];
                        }
                    }
                    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut z = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / z;
                    }
                }
                let vo = gi * n * dv + h * hv;
                T::gemm_acc(
                    n, n, hv,
                    p, n as isize, 1,
                    &vv.data()[vo..], dv as isize, 1,
                    &mut out.data_mut()[vo..], dv as isize, 1,
                );
            }
        }

        let mut parents = vec![q, k, v];
        parents.extend(bias);
        self.push_op(out, &parents, move |g, sink| {
            let want_q = sink.wants(q);
            let want_k = sink.wants(k);
            let want_v = sink.wants(v);
            let want_b = bias.is_some_and(|b| sink.wants(b));
            let mut gq = vec![T::zero(); if want_q { rows * dk } else { 0 }];
            let mut gk = vec![T::zero(); if want_k { rows * dk } else { 0 }];
            let mut gvv = vec![T::zero(); if want_v { rows * dv } else { 0 }];
            let mut gb = vec![T::zero(); if want_b { heads * n * n } else { 0 }];
            let mut dp = vec![T::zero(); n * n];
            for gi in 0..groups {
                for h in 0..heads {
                    let p = &probs[(gi * heads + h) * n * n..(gi * heads + h + 1) * n * n];
                    let vo = gi * n * dv + h * hv;
                    let qo = gi * n * dk + h * hk;
                    if want_v {
                        // dV = P^T dO
                        T::gemm_acc(
                            n, n, hv,
                            p, 1, n as isize,
                            &g.data()[vo..], dv as isize, 1,
                            &mut gvv[vo..], dv as isize, 1,
                        );
                    }
                    // dP = dO V^T
                    dp.iter_mut().for_each(|x| *x = T::zero());
                    T::gemm_acc(
                        n, hv, n,
                        &g.data()[vo..], dv as isize, 1,
                        &vv.data()[vo..], 1, dv as isize,
                        &mut dp, n as isize, 1,
                    );
                    // dLogits = P * (dP - rowsum(dP * P))
                    for i in 0..n {
                        let pr = &p[i * n..(i + 1) * n];
                        let dr = &mut dp[i * n..(i + 1) * n];
                        let s: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in dr.iter_mut().zip(pr) {
                            *d = pp * (*d - s);
                        }
                    }
                    if want_b {
                        for (o, &x) in gb[h * n * n..(h + 1) * n * n].iter_mut().zip(&dp) {
                            *o += x;
                        }
                    }
                    for x in dp.iter_mut() {
                        *x *= scale;
                    }
                    if want_q {
                        T::gemm_acc(
                            n, n, hk,
                            &dp, n as isize, 1,
                            &kv.data()[qo..], dk as isize, 1,
                            &mut gq[qo..], dk as isize, 1,
                        );
                    }
                    if want_k {
                        T::gemm_acc(
                            n, n, hk,
                            &dp, 1, n as isize,
                            &qv.data()[qo..], dk as isize, 1,
                            &mut gk[qo..], dk as isize, 1,
                        );
                    }
                }
            }
            let pairs = [(q, gq), (k, gk), (v, gvv)];
            for (var, buf) in pairs {
                if let Some(slot) = sink.slot(var) {
                    for (o, x) in slot.data_mut().iter_mut().zip(buf) {
                        *o += x;
                    }
                }
            }
            if let Some(b) = bias {
                if let Some(slot) = sink.slot(b) {
                    for (o, x) in slot.data_mut().iter_mut().zip(gb) {
                        *o += x;
                    }
                }
            }
        })
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Upper-triangular causal mask of size `n*n` (query `i` sees keys `<= i`).
pub fn causal_mask<T: Real>(n: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = T::of(MASKED);
        }
    }
    m
}

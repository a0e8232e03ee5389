use std::rc::Rc;

use crate::mat::gemm_into;
use crate::{Graph, Mat, Real, Var};

impl<T: Real> Graph<T> {
    /// `a [n,k] x b [k,m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = av.shape();
        let (k2, m) = bv.shape();
        assert_eq!(k, k2, "matmul: {n}x{k} times {k2}x{m}");
        let mut out = Mat::zeros(n, m);
        gemm_into(out.data_mut(), n, k, m, av.data(), false, bv.data(), false);
        self.push_op(out, &[a, b], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                // dA = dC B^T
                gemm_into(ga.data_mut(), n, m, k, g.data(), false, bv.data(), true);
            }
            if let Some(gb) = sink.slot(b) {
                // dB = A^T dC
                gemm_into(gb.data_mut(), k, n, m, av.data(), true, g.data(), false);
            }
        })
    }

    /// `x W + b` with `W [in,out]` and bias row `[1,out]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_row(y, bias)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn zip(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise op on mismatched shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        self.push_op(out, &[a, b], move |g, sink| {
            let want_a = sink.wants(a);
            let want_b = sink.wants(b);
            let mut da = vec![T::zero(); g.len()];
            let mut db = vec![T::zero(); g.len()];
            for i in 0..g.len() {
                let (x, y) = df(av.data()[i], bv.data()[i], g.data()[i]);
                da[i] = x;
                db[i] = y;
            }
            if want_a {
                let s = sink.slot(a).unwrap();
                for (o, d) in s.data_mut().iter_mut().zip(&da) {
                    *o += *d;
                }
            }
            if want_b {
                let s = sink.slot(b).unwrap();
                for (o, d) in s.data_mut().iter_mut().zip(&db) {
                    *o += *d;
                }
            }
        })
    }

    /// Adds a `[1,c]` row to every row of `a [n,c]`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let (n, c) = av.shape();
        assert_eq!(rv.shape(), (1, c), "add_row: row must be 1x{c}");
        let mut out = (*av).clone();
        for r in 0..n {
            for (o, &x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        self.push_op(out, &[a, row], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                ga.add_assign(g);
            }
            if let Some(gr) = sink.slot(row) {
                for r in 0..n {
                    for (o, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
        })
    }

    /// Multiplies row `i` of `a [n,c]` by `col[i]` where `col` is `[n,1]`.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        let (n, c) = av.shape();
        assert_eq!(cv.shape(), (n, 1), "mul_col: column must be {n}x1");
        let out = Mat::from_fn(n, c, |r, j| av.get(r, j) * cv.data()[r]);
        self.push_op(out, &[a, col], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                for r in 0..n {
                    let s = cv.data()[r];
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                        *o += x * s;
                    }
                }
            }
            if let Some(gc) = sink.slot(col) {
                for r in 0..n {
                    let dot: T = g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum();
                    gc.data_mut()[r] += dot;
                }
            }
        })
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        self.unary(a, move |x| x * factor, move |_, _, g| g * factor)
    }

    pub fn add_scalar(&self, a: Var, shift: T) -> Var {
        self.unary(a, move |x| x + shift, |_, _, g| g)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _, g| g * (x + x))
    }

    /// Elementwise op with derivative `df(x, y, upstream)`.
    pub(crate) fn unary(
        &self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T, T) -> T + 'static,
    ) -> Var {
        let av = self.value(a);
        let out = av.map(f);
        let ov = Rc::new(out.clone());
        self.push_op(out, &[a], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (i, o) in ga.data_mut().iter_mut().enumerate() {
                    *o += df(av.data()[i], ov.data()[i], g.data()[i]);
                }
            }
        })
    }

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let out = Mat::scalar(av.sum());
        self.push_op(out, &[a], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                let s = g.item();
                debug_assert_eq!(ga.shape(), (n, c));
                for o in ga.data_mut() {
                    *o += s;
                }
            }
        })
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::scalar(av.data().iter().map(|&x| x * x).sum());
        self.push_op(out, &[a], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                let s = g.item();
                for (o, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                    *o += s * (x + x);
                }
            }
        })
    }

    /// Rows of `a` in the order given by `index`; rows may repeat.
    pub fn gather_rows(&self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let mut out = Mat::zeros(index.len(), c);
        for (r, &src) in index.iter().enumerate() {
            assert!(src < n, "gather_rows: row {src} out of range for {n} rows");
            out.row_mut(r).copy_from_slice(av.row(src));
        }
        self.push_op(out, &[a], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (r, &src) in index.iter().enumerate() {
                    for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
        })
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.gather_rows(a, Rc::new((start..start + len).collect()))
    }

    /// Element `(r, c)` as a `1 x 1` node.
    pub fn element(&self, a: Var, r: usize, c: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let out = Mat::scalar(av.get(r, c));
        self.push_op(out, &[a], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                ga.data_mut()[r * cols + c] += g.item();
            }
        })
    }

    /// Stacks `parts` vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let c = vals[0].cols();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for v in &vals {
            assert_eq!(v.cols(), c, "concat_rows: column counts differ");
            offsets.push(data.len());
            data.extend_from_slice(v.data());
        }
        let out = Mat::from_vec(data.len() / c.max(1), c, data);
        let parts_owned: Vec<Var> = parts.to_vec();
        self.push_op(out, parts, move |g, sink| {
            for (i, &p) in parts_owned.iter().enumerate() {
                if let Some(gp) = sink.slot(p) {
                    let len = gp.len();
                    for (o, &x) in gp.data_mut().iter_mut().zip(&g.data()[offsets[i]..offsets[i] + len]) {
                        *o += x;
                    }
                }
            }
        })
    }

    /// Joins `parts` side by side; all parts share the row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let n = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Mat::zeros(n, total);
        let mut off = 0;
        for v in &vals {
            assert_eq!(v.rows(), n, "concat_cols: row counts differ");
            for r in 0..n {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let parts_owned: Vec<Var> = parts.to_vec();
        self.push_op(out, parts, move |g, sink| {
            let mut off = 0;
            for (i, &p) in parts_owned.iter().enumerate() {
                let w = widths[i];
                if let Some(gp) = sink.slot(p) {
                    for r in 0..n {
                        for (o, &x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                            *o += x;
                        }
                    }
                }
                off += w;
            }
        })
    }

    pub fn transpose(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.transpose();
        self.push_op(out, &[a], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                ga.add_assign(&g.transpose());
            }
        })
    }
}

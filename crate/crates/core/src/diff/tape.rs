//! Reverse-mode tape over small planar tensors.
//!
//! Every node holds a `[c][h][w]` buffer. Each op records a hand-written
//! backward rule; nothing is derived symbolically. Nodes built only from
//! constants carry no backward closure, which also makes a constant-only tape
//! a plain forward evaluator.

use crate::field::{self, pairwise_sum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }
    pub const fn scalar() -> Self {
        Self::new(1, 1, 1)
    }
    pub const fn vector(n: usize) -> Self {
        Self::new(n, 1, 1)
    }
    pub const fn plane(h: usize, w: usize) -> Self {
        Self::new(1, h, w)
    }
    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }
    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn broadcast(a: Shape, b: Shape) -> Option<Shape> {
        fn dim(x: usize, y: usize) -> Option<usize> {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        }
        Some(Shape::new(dim(a.c, b.c)?, dim(a.h, b.h)?, dim(a.w, b.w)?))
    }

    #[inline]
    fn index_broadcast(&self, c: usize, y: usize, x: usize) -> usize {
        let c = if self.c == 1 { 0 } else { c };
        let y = if self.h == 1 { 0 } else { y };
        let x = if self.w == 1 { 0 } else { x };
        (c * self.h + y) * self.w + x
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    value: Vec<f64>,
    shape: Shape,
    backward: Option<BackwardFn>,
}

/// Gradient buffers, allocated on first touch.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    requires: Vec<bool>,
}

impl GradStore {
    /// Accumulator for node `v`, or `None` if `v` does not need a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    requires: Vec<bool>,
}

macro_rules! need {
    ($cond:expr, $($msg:tt)*) => {
        assert!($cond, $($msg)*)
    };
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Vec<f64>, shape: Shape, requires: bool, backward: Option<BackwardFn>) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node { value, shape, backward: if requires { backward } else { None } });
        self.requires.push(requires);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(value.len(), shape.len(), "param buffer does not match shape");
        self.push(value, shape, true, None)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(value.len(), shape.len(), "constant buffer does not match shape");
        self.push(value, shape, false, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(vec![v], Shape::scalar())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn any_requires(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires[v.0])
    }

    /// Gradient-stopped copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).to_vec();
        let shape = self.shape(v);
        self.push(value, shape, false, None)
    }

    /// Runs the backward pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss).len(), 1, "backward needs a scalar loss");
        let mut store = GradStore {
            grads: vec![None; self.nodes.len()],
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
            requires: self.requires.clone(),
        };
        if let Some(g) = store.slot(loss) {
            g[0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            let Some(back) = &self.nodes[i].backward else { continue };
            let Some(g) = store.grads[i].take() else { continue };
            back(&g, &mut store);
            store.grads[i] = Some(g);
        }
        Gradients { grads: store.grads, lens: store.lens }
    }

    // ----- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let so = Shape::broadcast(sa, sb).unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?}"));
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(so.len());
        for c in 0..so.c {
            for y in 0..so.h {
                for x in 0..so.w {
                    out.push(f(va[sa.index_broadcast(c, y, x)], vb[sb.index_broadcast(c, y, x)]));
                }
            }
        }
        let requires = self.any_requires(&[a, b]);
        let back: Option<BackwardFn> = requires.then(|| {
            let (va, vb) = (va.to_vec(), vb.to_vec());
            Box::new(move |g: &[f64], st: &mut GradStore| {
                if let Some(ga) = st.slot(a) {
                    let mut i = 0;
                    for c in 0..so.c {
                        for y in 0..so.h {
                            for x in 0..so.w {
                                let (ia, ib) = (sa.index_broadcast(c, y, x), sb.index_broadcast(c, y, x));
                                ga[ia] += g[i] * da(va[ia], vb[ib]);
                                i += 1;
                            }
                        }
                    }
                }
                if let Some(gb) = st.slot(b) {
                    let mut i = 0;
                    for c in 0..so.c {
                        for y in 0..so.h {
                            for x in 0..so.w {
                                let (ia, ib) = (sa.index_broadcast(c, y, x), sb.index_broadcast(c, y, x));
                                gb[ib] += g[i] * db(va[ia], vb[ib]);
                                i += 1;
                            }
                        }
                    }
                }
            }) as BackwardFn
        });
        self.push(out, so, requires, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Pointwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            f64::max,
            |x, y| if x >= y { 1.0 } else { 0.0 },
            |x, y| if x >= y { 0.0 } else { 1.0 },
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let va = self.value(a);
        let out: Vec<f64> = va.iter().map(|&x| f(x)).collect();
        let requires = self.any_requires(&[a]);
        let back: Option<BackwardFn> = requires.then(|| {
            let va = va.to_vec();
            let vo = out.clone();
            Box::new(move |g: &[f64], st: &mut GradStore| {
                if let Some(ga) = st.slot(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * df(va[i], vo[i]);
                    }
                }
            }) as BackwardFn
        });
        let shape = self.shape(a);
        self.push(out, shape, requires, back)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| k * x, move |_, _| k)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| x + k, |_, _| 1.0)
    }

    /// `k - a`
    pub fn rsub(&mut self, k: f64, a: Var) -> Var {
        self.unary(a, move |x| k - x, |_, _| -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Clamp; zero gradient outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    // ----- reductions and reshaping -------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.value(a));
        let n = self.shape(a).len();
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                for v in ga.iter_mut().take(n) {
                    *v += g[0];
                }
            }
        });
        self.push(vec![s], Shape::scalar(), requires, Some(back))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[c,h,w] -> [1,h,w]`
    pub fn mean_channels(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let p = s.h * s.w;
        let va = self.value(a);
        let mut out = vec![0.0; p];
        for c in 0..s.c {
            for i in 0..p {
                out[i] += va[c * p + i];
            }
        }
        let inv = 1.0 / s.c as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                for c in 0..s.c {
                    for i in 0..p {
                        ga[c * p + i] += g[i] * inv;
                    }
                }
            }
        });
        self.push(out, Shape::plane(s.h, s.w), requires, Some(back))
    }

    /// `[c,h,w] -> [1,h,w]`, gradient to the first maximal channel.
    pub fn max_channels(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let p = s.h * s.w;
        let va = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; p];
        let mut arg = vec![0usize; p];
        for c in 0..s.c {
            for i in 0..p {
                if va[c * p + i] > out[i] {
                    out[i] = va[c * p + i];
                    arg[i] = c;
                }
            }
        }
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                for i in 0..p {
                    ga[arg[i] * p + i] += g[i];
                }
            }
        });
        self.push(out, Shape::plane(s.h, s.w), requires, Some(back))
    }

    /// Global average pool: `[c,h,w] -> [c,1,1]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let p = s.h * s.w;
        let va = self.value(a);
        let out: Vec<f64> = (0..s.c).map(|c| pairwise_sum(&va[c * p..(c + 1) * p]) / p as f64).collect();
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                for c in 0..s.c {
                    let gc = g[c] / p as f64;
                    for v in &mut ga[c * p..(c + 1) * p] {
                        *v += gc;
                    }
                }
            }
        });
        self.push(out, Shape::vector(s.c), requires, Some(back))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, count: usize) -> Var {
        let s = self.shape(a);
        assert!(start + count <= s.c, "channel slice out of range");
        let p = s.h * s.w;
        let out = self.value(a)[start * p..(start + count) * p].to_vec();
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                for (d, v) in ga[start * p..(start + count) * p].iter_mut().zip(g) {
                    *d += v;
                }
            }
        });
        self.push(out, Shape::new(count, s.h, s.w), requires, Some(back))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let s0 = self.shape(parts[0]);
        let mut out = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut c = 0;
        for &v in parts {
            let s = self.shape(v);
            need!(s.h == s0.h && s.w == s0.w, "concat needs equal spatial dims");
            offsets.push((v, out.len(), s.len()));
            out.extend_from_slice(self.value(v));
            c += s.c;
        }
        let requires = self.any_requires(parts);
        let back: BackwardFn = Box::new(move |g, st| {
            for &(v, off, len) in &offsets {
                if let Some(gv) = st.slot(v) {
                    for (d, x) in gv.iter_mut().zip(&g[off..off + len]) {
                        *d += x;
                    }
                }
            }
        });
        self.push(out, Shape::new(c, s0.h, s0.w), requires, Some(back))
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Var {
        assert_eq!(self.shape(a).len(), shape.len(), "reshape must preserve size");
        let out = self.value(a).to_vec();
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                for (d, x) in ga.iter_mut().zip(g) {
                    *d += x;
                }
            }
        });
        self.push(out, shape, requires, Some(back))
    }

    /// Dot product of two equally-sized tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).len(), self.shape(b).len(), "dot needs equal sizes");
        let m = self.mul(a, b);
        self.sum(m)
    }

    // ----- dense layers -------------------------------------------------

    /// `W x` with `W: [m, n, 1]`, `x: [n, 1, 1]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let sw = self.shape(w);
        let (m, n) = (sw.c, sw.h);
        assert_eq!(sw.w, 1, "matvec weight must be [m, n, 1]");
        assert_eq!(self.shape(x).len(), n, "matvec input size mismatch");
        let (vw, vx) = (self.value(w).to_vec(), self.value(x).to_vec());
        let out: Vec<f64> = (0..m).map(|i| (0..n).map(|j| vw[i * n + j] * vx[j]).sum()).collect();
        let requires = self.any_requires(&[w, x]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(gw) = st.slot(w) {
                for i in 0..m {
                    for j in 0..n {
                        gw[i * n + j] += g[i] * vx[j];
                    }
                }
            }
            if let Some(gx) = st.slot(x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[j] += g[i] * vw[i * n + j];
                    }
                }
            }
        });
        self.push(out, Shape::vector(m), requires, Some(back))
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mx = va.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = va.iter().map(|&x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let y: Vec<f64> = e.iter().map(|v| v / z).collect();
        let requires = self.any_requires(&[a]);
        let yc = y.clone();
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                let gy: f64 = g.iter().zip(&yc).map(|(a, b)| a * b).sum();
                for i in 0..g.len() {
                    ga[i] += yc[i] * (g[i] - gy);
                }
            }
        });
        let shape = self.shape(a);
        self.push(y, shape, requires, Some(back))
    }

    // ----- spatial ops ----------------------------------------------------

    /// 2D convolution (correlation), odd kernel `k`, replicate padding.
    /// `input: [ci,h,w]`, `weight: [co, ci*k*k, 1]`, `bias: [co,1,1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, k: usize) -> Var {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let (ci, h, w) = (si.c, si.h, si.w);
        let co = sw.c;
        assert_eq!(sw.h, ci * k * k, "conv weight must be [co, ci*k*k, 1]");
        assert_eq!(self.shape(bias).len(), co, "conv bias size mismatch");
        let r = (k / 2) as isize;
        let vi = self.value(input).to_vec();
        let vw = self.value(weight).to_vec();
        let vb = self.value(bias);
        // Precompute replicate-clamped neighbour offsets.
        let mut taps = Vec::with_capacity(h * w * k * k);
        for y in 0..h {
            for x in 0..w {
                for dy in 0..k {
                    let sy = (y as isize + dy as isize - r).clamp(0, h as isize - 1) as usize;
                    for dx in 0..k {
                        let sx = (x as isize + dx as isize - r).clamp(0, w as isize - 1) as usize;
                        taps.push(sy * w + sx);
                    }
                }
            }
        }
        let p = h * w;
        let kk = k * k;
        let mut out = vec![0.0; co * p];
        for o in 0..co {
            for i in 0..p {
                let mut s = vb[o];
                for c in 0..ci {
                    let wrow = &vw[(o * ci + c) * kk..(o * ci + c + 1) * kk];
                    let src = &vi[c * p..(c + 1) * p];
                    for (t, wt) in wrow.iter().enumerate() {
                        s += wt * src[taps[i * kk + t]];
                    }
                }
                out[o * p + i] = s;
            }
        }
        let requires = self.any_requires(&[input, weight, bias]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(gb) = st.slot(bias) {
                for o in 0..co {
                    gb[o] += pairwise_sum(&g[o * p..(o + 1) * p]);
                }
            }
            if let Some(gw) = st.slot(weight) {
                for o in 0..co {
                    for c in 0..ci {
                        let src = &vi[c * p..(c + 1) * p];
                        for t in 0..kk {
                            let mut s = 0.0;
                            for i in 0..p {
                                s += g[o * p + i] * src[taps[i * kk + t]];
                            }
                            gw[(o * ci + c) * kk + t] += s;
                        }
                    }
                }
            }
            if let Some(gi) = st.slot(input) {
                for o in 0..co {
                    for c in 0..ci {
                        let wrow = &vw[(o * ci + c) * kk..(o * ci + c + 1) * kk];
                        for i in 0..p {
                            let go = g[o * p + i];
                            if go == 0.0 {
                                continue;
                            }
                            for (t, wt) in wrow.iter().enumerate() {
                                gi[c * p + taps[i * kk + t]] += go * wt;
                            }
                        }
                    }
                }
            }
        });
        self.push(out, Shape::new(co, h, w), requires, Some(back))
    }

    /// Fixed per-channel correlation kernel (`kh x kw`, odd), replicate padding.
    pub fn filter(&mut self, a: Var, kernel: &[f64], kh: usize, kw: usize) -> Var {
        let s = self.shape(a);
        assert_eq!(kernel.len(), kh * kw);
        let out = field::filter_planes(self.value(a), s.c, s.h, s.w, kernel, kh, kw);
        let requires = self.any_requires(&[a]);
        let kernel = kernel.to_vec();
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                field::filter_adjoint(g, s.c, s.h, s.w, &kernel, kh, kw, ga);
            }
        });
        self.push(out, s, requires, Some(back))
    }

    pub fn sobel_x(&mut self, a: Var) -> Var {
        self.filter(a, &field::SOBEL_X, 3, 3)
    }

    pub fn sobel_y(&mut self, a: Var) -> Var {
        self.filter(a, &field::SOBEL_Y, 3, 3)
    }

    /// 3x3 box mean, replicate padding.
    pub fn box3(&mut self, a: Var) -> Var {
        self.filter(a, &[1.0 / 9.0; 9], 3, 3)
    }

    /// Separable Gaussian blur with the given 1D taps.
    pub fn separable_blur(&mut self, a: Var, taps: &[f64]) -> Var {
        let n = taps.len();
        let h = self.filter(a, taps, 1, n);
        self.filter(h, taps, n, 1)
    }

    pub fn downsample(&mut self, a: Var, factor: usize) -> Var {
        let s = self.shape(a);
        let (out, oh, ow) = field::downsample_planes(self.value(a), s.c, s.h, s.w, factor);
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                field::downsample_adjoint(g, s.c, s.h, s.w, factor, ga);
            }
        });
        self.push(out, Shape::new(s.c, oh, ow), requires, Some(back))
    }

    pub fn upsample(&mut self, a: Var, factor: usize, th: usize, tw: usize) -> Var {
        let s = self.shape(a);
        assert!(th >= s.h && tw >= s.w, "upsample target smaller than input");
        let out = field::upsample_planes(self.value(a), s.c, s.h, s.w, factor, th, tw);
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                field::upsample_adjoint(g, s.c, s.h, s.w, factor, th, tw, ga);
            }
        });
        self.push(out, Shape::new(s.c, th, tw), requires, Some(back))
    }

    /// Linearly interpolated `q`-quantile over all elements; the gradient
    /// flows to the one or two order statistics it interpolates.
    pub fn quantile(&mut self, a: Var, q: f64) -> Var {
        let va = self.value(a);
        let n = va.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| va[i].total_cmp(&va[j]).then(i.cmp(&j)));
        let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = pos - lo as f64;
        let (ilo, ihi) = (order[lo], order[hi]);
        let v = va[ilo] * (1.0 - t) + va[ihi] * t;
        let requires = self.any_requires(&[a]);
        let back: BackwardFn = Box::new(move |g, st| {
            if let Some(ga) = st.slot(a) {
                ga[ilo] += g[0] * (1.0 - t);
                ga[ihi] += g[0] * t;
            }
        });
        self.push(vec![v], Shape::scalar(), requires, Some(back))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

/// Inverse of [`sigmoid`] for inputs in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&mut Tape, Var) -> Var>(x0: &[f64], shape: Shape, f: F) -> (Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let x = t.param(x0.to_vec(), shape);
        let y = f(&mut t, x);
        let g = t.backward(y).get(x);
        let h = 1e-6;
        let mut num = vec![0.0; x0.len()];
        for i in 0..x0.len() {
            let mut p = x0.to_vec();
            p[i] += h;
            let mut t1 = Tape::new();
            let xv = t1.constant(p.clone(), shape);
            let yp = f(&mut t1, xv);
            let fp = t1.scalar_value(yp);
            p[i] -= 2.0 * h;
            let mut t2 = Tape::new();
            let xv = t2.constant(p, shape);
            let ym = f(&mut t2, xv);
            num[i] = (fp - t2.scalar_value(ym)) / (2.0 * h);
        }
        (g, num)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let den = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / den < tol, "{x} vs {y}");
        }
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13 + 0.05).collect()
    }

    #[test]
    fn sum_and_quadratic_gradients() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, -2.0, 3.0], Shape::vector(3));
        let s = t.sum(x);
        assert_eq!(t.backward(s).get(x), vec![1.0; 3]);

        let mut t = Tape::new();
        let x = t.param(vec![1.0, -2.0, 3.0], Shape::vector(3));
        let q = t.square(x);
        let s = t.sum(q);
        let l = t.scale(s, 0.5);
        assert_eq!(t.backward(l).get(x), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let shape = Shape::new(3, 4, 5);
        let x0 = ramp(shape.len());
        let (g, n) = fd(&x0, shape, |t, x| {
            let k = t.constant(vec![0.5, -1.0, 2.0], Shape::vector(3));
            let plane = t.constant(ramp(20), Shape::plane(4, 5));
            let a = t.mul(x, k);
            let den = t_offset(t, plane);
            let b = t.div(a, den);
            let e = t.exp(b);
            let m = t.mean_channels(e);
            let mx = t.max_channels(x);
            let s = t.sigmoid(mx);
            let c = t.add(m, s);
            t.mean(c)
        });
        assert_close(&g, &n, 1e-6);
    }

    fn t_offset(t: &mut Tape, v: Var) -> Var {
        let sq = t.square(v);
        t.offset(sq, 1.0)
    }

    #[test]
    fn conv_and_filters_match_finite_differences() {
        let shape = Shape::new(2, 5, 6);
        let x0 = ramp(shape.len());
        let (g, n) = fd(&x0, shape, |t, x| {
            let w = t.constant(ramp(3 * 2 * 9), Shape::new(3, 18, 1));
            let b = t.constant(vec![0.1, -0.2, 0.3], Shape::vector(3));
            let y = t.conv2d(x, w, b, 3);
            let sx = t.sobel_x(y);
            let bx = t.box3(sx);
            let d = t.downsample(bx, 2);
            let u = t.upsample(d, 2, 5, 6);
            let q = t.square(u);
            let s = t.separable_blur(q, &[0.25, 0.5, 0.25]);
            t.mean(s)
        });
        assert_close(&g, &n, 1e-6);

        // Gradient w.r.t. the conv weights.
        let wshape = Shape::new(3, 18, 1);
        let w0 = ramp(wshape.len());
        let (g, n) = fd(&w0, wshape, |t, w| {
            let x = t.constant(ramp(60), Shape::new(2, 5, 6));
            let b = t.constant(vec![0.0; 3], Shape::vector(3));
            let y = t.conv2d(x, w, b, 3);
            let r = t.relu(y);
            let q = t.square(r);
            t.mean(q)
        });
        assert_close(&g, &n, 1e-6);
    }

    #[test]
    fn dense_softmax_quantile_gradients() {
        let x0 = vec![0.3, -0.7, 1.1, 0.2];
        let (g, n) = fd(&x0, Shape::vector(4), |t, x| {
            let w = t.constant(ramp(12), Shape::new(3, 4, 1));
            let h = t.matvec(w, x);
            let p = t.softmax(h);
            let anchors = t.constant(vec![0.0, 0.5, 1.0], Shape::vector(3));
            let d = t.dot(p, anchors);
            let q = t.quantile(x, 0.95);
            let qq = t.mul(q, d);
            t.add(qq, d)
        });
        assert_close(&g, &n, 1e-6);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec![2.0], Shape::scalar());
        let d = t.detach(x);
        let y = t.mul(x, d);
        assert_eq!(t.backward(y).get(x), vec![2.0]);
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-3, 0.07, 0.3, 2.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!((sigmoid(logit(0.3)) - 0.3).abs() < 1e-15);
    }
}

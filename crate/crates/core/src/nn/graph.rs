//! Reverse-mode differentiation over a tape of batched tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are inputs or
//! copies of parameters; [`Graph::backward`] returns the gradient of every
//! node given seed gradients on some outputs.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Mul { x: Var, g: Var },
    SumSpatial(Var),
    SumChannels(Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Concat(Vec<Var>),
    Upsample(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Per-op saved statistics (layer norm: mean and reciprocal std per sample).
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Lowers one sample `C x H x W` into a `(C k k) x (Ho Wo)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices, where the
/// strides select transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slice lengths cover every index reachable through the
    // given dimensions and strides; callers pass matching shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    /// Leaf holding a copy of parameter `id`; its gradient is reported by
    /// [`Graph::param_grads`].
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf { param: Some(id) })
    }

    /// 2-D convolution; `w` is `Cout x Cin x k x k`, `b` is `1 x Cout x 1 x 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, k, k2] = wv.shape();
        assert_eq!(cin, wcin, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let kk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        let mut cols = if direct { Vec::new() } else { vec![0.0; kk * ho * wo] };
        for s in 0..n {
            let xs = xv.sample(s);
            let src: &[f64] = if direct {
                xs
            } else {
                im2col(xs, cin, h, wd, k, stride, pad, &mut cols);
                &cols
            };
            gemm(cout, kk, ho * wo, wv.data(), (kk, 1), src, (ho * wo, 1), 0.0, out.sample_mut(s));
        }
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data().to_vec();
            assert_eq!(bv.len(), cout, "conv bias length");
            for s in 0..n {
                for (c, &bias) in bv.iter().enumerate() {
                    out.plane_mut(s, c).iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        self.push(out, Op::Conv { x, w, b, stride, pad })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value);
        self.push(out, Op::Add(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    /// Broadcast product `x * g` where `g` is `N x {1|C} x {1|H} x {1|W}`.
    pub fn mul(&mut self, x: Var, g: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[g.0].value;
        let map = BroadcastMap::new(xv.shape(), gv.shape());
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= gv.data()[map.index(i)];
        }
        self.push(out, Op::Mul { x, g })
    }

    pub fn sum_spatial(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let [n, c, _, _] = av.shape();
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for s in 0..n {
            for ch in 0..c {
                out.set(s, ch, 0, 0, av.plane(s, ch).iter().sum());
            }
        }
        self.push(out, Op::SumSpatial(a))
    }

    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let hw = {
            let v = &self.nodes[a.0].value;
            (v.h() * v.w()) as f64
        };
        let s = self.sum_spatial(a);
        self.scale(s, 1.0 / hw)
    }

    pub fn sum_channels(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let [n, c, h, w] = av.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for s in 0..n {
            for ch in 0..c {
                let src = av.plane(s, ch).to_vec();
                for (d, v) in out.plane_mut(s, 0).iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        self.push(out, Op::SumChannels(a))
    }

    /// Softmax over all `C x H x W` entries of each sample.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for s in 0..out.n() {
            let xs = out.sample_mut(s);
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in xs.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            xs.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Normalises each sample over `C x H x W`, then applies a per-channel
    /// affine map; `gamma` and `beta` are `1 x C x 1 x 1`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let [n, c, h, w] = xv.shape();
        assert_eq!(g.len(), c);
        let hw = h * w;
        let mut out = xv.clone();
        let mut aux = Vec::with_capacity(2 * n);
        for s in 0..n {
            let xs = out.sample_mut(s);
            let m = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in xs.iter_mut().enumerate() {
                let ch = i / hw;
                *v = (*v - mean) * rstd * g[ch] + b[ch];
            }
            aux.push(mean);
            aux.push(rstd);
        }
        let var = self.push(out, Op::LayerNorm { x, gamma, beta });
        self.nodes[var.0].aux = aux;
        var
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.nodes[parts[0].0].value.shape();
        let c_total: usize = parts.iter().map(|p| self.nodes[p.0].value.c()).sum();
        let [n, _, h, w] = first;
        let mut out = Tensor::zeros([n, c_total, h, w]);
        for s in 0..n {
            let mut off = 0;
            let dst = out.sample_mut(s);
            for p in parts {
                let pv = &self.nodes[p.0].value;
                assert_eq!([pv.n(), pv.h(), pv.w()], [n, h, w], "concat shape");
                let src = pv.sample(s);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Var {
        if factor == 1 {
            return a;
        }
        let av = &self.nodes[a.0].value;
        let [n, c, h, w] = av.shape();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for s in 0..n {
            for ch in 0..c {
                let src = av.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..ho {
                    for x in 0..wo {
                        dst[y * wo + x] = src[(y / factor) * w + x / factor];
                    }
                }
            }
        }
        self.push(out, Op::Upsample(a, factor))
    }

    /// Gradients of every node. `seeds` give d(loss)/d(output) for outputs.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let (dx, dw, db) = self.conv_backward(*x, *w, b.is_some(), *stride, *pad, &gy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gy.clone());
                    accumulate(&mut grads, *a, gy);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = gy;
                    for (g, &x) in d.data_mut().iter_mut().zip(av.data()) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = gy;
                    for (g, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Scale(a, k) => {
                    let d = gy.map(|v| v * k);
                    accumulate(&mut grads, *a, d);
                }
                Op::Mul { x, g } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[g.0].value;
                    let map = BroadcastMap::new(xv.shape(), gv.shape());
                    let mut dx = gy.clone();
                    let mut dg = Tensor::zeros(gv.shape());
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        let j = map.index(i);
                        dg.data_mut()[j] += *d * xv.data()[i];
                        *d *= gv.data()[j];
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *g, dg);
                }
                Op::SumSpatial(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    let mut d = Tensor::zeros(shape);
                    for s in 0..shape[0] {
                        for c in 0..shape[1] {
                            let g = gy.at(s, c, 0, 0);
                            d.plane_mut(s, c).fill(g);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumChannels(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    let mut d = Tensor::zeros(shape);
                    for s in 0..shape[0] {
                        let g = gy.plane(s, 0).to_vec();
                        for c in 0..shape[1] {
                            d.plane_mut(s, c).copy_from_slice(&g);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let mut d = gy;
                    for s in 0..d.n() {
                        let y = node.value.sample(s);
                        let ds = d.sample_mut(s);
                        let dot: f64 = ds.iter().zip(y).map(|(g, y)| g * y).sum();
                        for (g, &yv) in ds.iter_mut().zip(y) {
                            *g = yv * (*g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (dx, dg, db) = self.layer_norm_backward(node, *x, *gamma, &gy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape();
                        let k = shape[1] * shape[2] * shape[3];
                        let mut d = Tensor::zeros(shape);
                        for s in 0..shape[0] {
                            d.sample_mut(s).copy_from_slice(&gy.sample(s)[off..off + k]);
                        }
                        off += k;
                        accumulate(&mut grads, *p, d);
                    }
                }
                Op::Upsample(a, f) => {
                    let shape = self.nodes[a.0].value.shape();
                    let [n, c, h, w] = shape;
                    let wo = w * f;
                    let mut d = Tensor::zeros(shape);
                    for s in 0..n {
                        for ch in 0..c {
                            let src = gy.plane(s, ch);
                            let dst = d.plane_mut(s, ch);
                            for y in 0..h * f {
                                for x in 0..wo {
                                    dst[(y / f) * w + x / f] += src[y * wo + x];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        grads
    }

    /// Collects gradients of parameter leaves into `num_params` slots; a
    /// parameter used by several leaves gets the sum.
    pub fn param_grads(&self, grads: &[Option<Tensor>], num_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; num_params];
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, g) {
                match &mut out[*id] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        has_bias: bool,
        stride: usize,
        pad: usize,
        gy: &Tensor,
    ) -> (Tensor, Tensor, Option<Tensor>) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let [n, cin, h, wd] = xv.shape();
        let [cout, _, k, _] = wv.shape();
        let (ho, wo) = (gy.h(), gy.w());
        let hw_out = ho * wo;
        let kk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;

        let mut dx = Tensor::zeros(xv.shape());
        let mut dw = Tensor::zeros(wv.shape());
        let mut cols = if direct { Vec::new() } else { vec![0.0; kk * hw_out] };
        let mut dcols = vec![0.0; kk * hw_out];
        for s in 0..n {
            let g = gy.sample(s);
            let src: &[f64] = if direct {
                xv.sample(s)
            } else {
                im2col(xv.sample(s), cin, h, wd, k, stride, pad, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            gemm(cout, hw_out, kk, g, (hw_out, 1), src, (1, hw_out), 1.0, dw.data_mut());
            // dcols = W^T * dY
            gemm(kk, cout, hw_out, wv.data(), (1, kk), g, (hw_out, 1), 0.0, &mut dcols);
            if direct {
                dx.sample_mut(s).copy_from_slice(&dcols);
            } else {
                col2im(&dcols, cin, h, wd, k, stride, pad, dx.sample_mut(s));
            }
        }
        let db = has_bias.then(|| {
            let mut db = Tensor::zeros([1, cout, 1, 1]);
            for s in 0..n {
                for c in 0..cout {
                    db.data_mut()[c] += gy.plane(s, c).iter().sum::<f64>();
                }
            }
            db
        });
        (dx, dw, db)
    }

    fn layer_norm_backward(&self, node: &Node, x: Var, gamma: Var, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gamma.0].value.data();
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let mut dx = Tensor::zeros(xv.shape());
        let mut dgamma = Tensor::zeros([1, c, 1, 1]);
        let mut dbeta = Tensor::zeros([1, c, 1, 1]);
        for s in 0..n {
            let (mean, rstd) = (node.aux[2 * s], node.aux[2 * s + 1]);
            let xs = xv.sample(s);
            let gs = gy.sample(s);
            let m = xs.len() as f64;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for i in 0..xs.len() {
                let ch = i / hw;
                let xhat = (xs[i] - mean) * rstd;
                dgamma.data_mut()[ch] += gs[i] * xhat;
                dbeta.data_mut()[ch] += gs[i];
                let dxhat = gs[i] * g[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            let ds = dx.sample_mut(s);
            for i in 0..xs.len() {
                let ch = i / hw;
                let xhat = (xs[i] - mean) * rstd;
                let dxhat = gs[i] * g[ch];
                ds[i] = rstd * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
            }
        }
        (dx, dgamma, dbeta)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Maps a flat index of the full tensor to the flat index of a broadcast
/// operand.
struct BroadcastMap {
    full: [usize; 4],
    part: [usize; 4],
}

impl BroadcastMap {
    fn new(full: [usize; 4], part: [usize; 4]) -> Self {
        for d in 0..4 {
            assert!(
                part[d] == full[d] || part[d] == 1,
                "cannot broadcast {part:?} to {full:?}"
            );
        }
        BroadcastMap { full, part }
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        let [_, c, h, w] = self.full;
        let x = i % w;
        let y = (i / w) % h;
        let ch = (i / (w * h)) % c;
        let n = i / (w * h * c);
        let [_, pc, ph, pw] = self.part;
        let pick = |v: usize, size: usize| if size == 1 { 0 } else { v };
        ((pick(n, self.part[0]) * pc + pick(ch, pc)) * ph + pick(y, ph)) * pw + pick(x, pw)
    }
}

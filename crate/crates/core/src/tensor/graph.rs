use super::{Real, Tensor};
use crate::par;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Linear row-resampling operator (bilinear interpolation over a 2-D grid of rows).
#[derive(Clone, Debug)]
pub struct ResampleMap<T> {
    pub in_rows: usize,
    pub out_rows: usize,
    taps: Vec<[(usize, T); 4]>,
}

impl<T: Real> ResampleMap<T> {
    /// Half-pixel-centred bilinear map from an `in_h×in_w` grid to `out_h×out_w`.
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0);
        let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(ox, in_w, out_w);
                let w = |a: f64, b: f64| T::from_f64c(a * b);
                taps.push([
                    (y0 * in_w + x0, w(1.0 - fy, 1.0 - fx)),
                    (y0 * in_w + x1, w(1.0 - fy, fx)),
                    (y1 * in_w + x0, w(fy, 1.0 - fx)),
                    (y1 * in_w + x1, w(fy, fx)),
                ]);
            }
        }
        Self {
            in_rows: in_h * in_w,
            out_rows: out_h * out_w,
            taps,
        }
    }

    /// Source rows and weights of output row `r`.
    pub fn taps(&self, r: usize) -> &[(usize, T); 4] {
        &self.taps[r]
    }

    /// `out[r] = Σ w · x[src]` for row-major `x` with `cols` columns.
    pub fn apply(&self, x: &[T], cols: usize) -> Vec<T> {
        assert_eq!(x.len(), self.in_rows * cols);
        let mut out = vec![T::zero(); self.out_rows * cols];
        for (r, taps) in self.taps.iter().enumerate() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for &(src, w) in taps {
                if w == T::zero() {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(&x[src * cols..(src + 1) * cols]) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply), accumulated into `acc`.
    pub fn apply_transpose_into(&self, g: &[T], cols: usize, acc: &mut [T]) {
        for (r, taps) in self.taps.iter().enumerate() {
            let src_row = &g[r * cols..(r + 1) * cols];
            for &(dst, w) in taps {
                if w == T::zero() {
                    continue;
                }
                for (a, &s) in acc[dst * cols..(dst + 1) * cols].iter_mut().zip(src_row) {
                    *a += w * s;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Scale { x: usize, s: T },
    Gelu { x: usize },
    Relu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Attention { qkv: usize, batch: usize, tokens: usize, heads: usize, probs: Vec<T> },
    L2NormRows { x: usize, norms: Vec<T>, eps: T },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    MaskRows { x: usize, token: usize, mask: Vec<bool> },
    PrependCls { x: usize, cls: usize, batch: usize },
    AddTiled { x: usize, p: usize },
    Resample { x: usize, map: Arc<ResampleMap<T>> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<T> },
    AvgPool2 { x: usize },
    Upsample { x: usize },
    Fuse { inputs: Vec<usize>, w: usize, eps: T },
    SpatialMean { x: usize },
    NchwToTokens { x: usize },
    SoftCrossEntropy { logits: usize, targets: Vec<T>, weights: Vec<T>, temp: T, probs: Vec<T>, kept: Vec<bool> },
    KoLeo { x: usize, unit: Vec<T>, norms: Vec<T>, nn: Vec<usize>, dists: Vec<T>, eps: T },
    WeightedSum { parts: Vec<usize>, weights: Vec<T> },
    InnerConst { x: usize, c: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v.to_f64c().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for t in self.by_name.values_mut() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }
}

/// Reverse-mode autodiff tape. Build a forward pass with the op methods, then
/// call [`backward`](Graph::backward) on a scalar node.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var, bool)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64c(0.797_884_560_802_865_4);
    let a = T::from_f64c(0.044_715);
    let half = T::from_f64c(0.5);
    let one = T::one();
    let three = T::from_f64c(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let v = half * x * (one + t);
    let du = c * (one + three * a * x * x);
    let d = half * (one + t) + half * x * (one - t * t) * du;
    (v, d)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Input leaf. `requires_grad` leaves receive gradients from [`backward_vars`](Self::backward_vars).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Named parameter leaf. Repeated calls with the same name share one node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v, trainable));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let bs = &self.value(b).shape;
        assert_eq!(bs.len(), 2, "matmul rhs must be a matrix");
        assert_eq!(bs[0], k, "matmul inner dims {k} vs {}", bs[0]);
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            (k as isize, 1),
            &self.value(b).data,
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let ng = self.ng(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, trans_b: false }, ng)
    }

    /// `a · bᵀ` with `b` stored `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let bs = &self.value(b).shape;
        assert_eq!(bs.len(), 2);
        assert_eq!(bs[1], k, "matmul_nt inner dims {k} vs {}", bs[1]);
        let n = bs[0];
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            (k as isize, 1),
            &self.value(b).data,
            (1, k as isize),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let ng = self.ng(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, trans_b: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(&[a.0, b.0]);
        self.push(t, Op::Add { a: a.0, b: b.0 }, ng)
    }

    /// Broadcast-add a length-`n` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let (_, n) = vx.dims2();
        let vb = self.value(bias);
        assert_eq!(vb.len(), n, "bias length");
        let mut data = vx.data.clone();
        for row in data.chunks_mut(n) {
            for (d, &b) in row.iter_mut().zip(&vb.data) {
                *d += b;
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let ng = self.ng(&[x.0, bias.0]);
        self.push(t, Op::AddRow { x: x.0, bias: bias.0 }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|&v| v * s).collect());
        let ng = self.ng(&[x.0]);
        self.push(t, Op::Scale { x: x.0, s }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|&v| gelu_parts(v).0).collect());
        let ng = self.ng(&[x.0]);
        self.push(t, Op::Gelu { x: x.0 }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|&v| v.max(T::zero())).collect());
        let ng = self.ng(&[x.0]);
        self.push(t, Op::Relu { x: x.0 }, ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let eps = T::from_f64c(eps);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &vx.data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let ng = self.ng(&[x.0, gamma.0, beta.0]);
        self.push(t, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, ng)
    }

    /// Multi-head scaled dot-product self-attention over packed `qkv`
    /// (`batch·tokens × 3d`, columns `[q | k | v]`). Returns `batch·tokens × d`.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let v = self.value(qkv);
        let (rows, c3) = v.dims2();
        assert_eq!(rows, batch * tokens, "attention rows");
        assert_eq!(c3 % 3, 0);
        let d = c3 / 3;
        assert_eq!(d % heads, 0, "embed dim not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let src = &v.data;
        let per_batch: Vec<(Vec<T>, Vec<T>)> = par::map_range(batch, |b| {
            let base = b * tokens * c3;
            let mut out = vec![T::zero(); tokens * d];
            let mut probs = vec![T::zero(); heads * tokens * tokens];
            for h in 0..heads {
                let q = &src[base + h * dh..];
                let k = &src[base + d + h * dh..];
                let vv = &src[base + 2 * d + h * dh..];
                let p = &mut probs[h * tokens * tokens..(h + 1) * tokens * tokens];
                T::gemm(tokens, dh, tokens, q, (c3 as isize, 1), k, (1, c3 as isize), T::zero(), p, (tokens as isize, 1));
                for row in p.chunks_mut(tokens) {
                    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) * scale;
                    let mut s = T::zero();
                    for e in row.iter_mut() {
                        *e = (*e * scale - mx).exp();
                        s += *e;
                    }
                    for e in row.iter_mut() {
                        *e /= s;
                    }
                }
                T::gemm(tokens, tokens, dh, p, (tokens as isize, 1), vv, (c3 as isize, 1), T::zero(), &mut out[h * dh..], (d as isize, 1));
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::with_capacity(batch * heads * tokens * tokens);
        for (o, p) in per_batch {
            out.extend(o);
            probs.extend(p);
        }
        let ng = self.ng(&[qkv.0]);
        self.push(
            Tensor::new(vec![rows, d], out),
            Op::Attention { qkv: qkv.0, batch, tokens, heads, probs },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        let eps = T::from_f64c(eps);
        let mut norms = Vec::with_capacity(m);
        let mut out = vx.data.clone();
        for row in out.chunks_mut(n) {
            let nr = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = nr.max(eps);
            for e in row.iter_mut() {
                *e /= denom;
            }
            norms.push(nr);
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let ng = self.ng(&[x.0]);
        self.push(t, Op::L2NormRows { x: x.0, norms, eps }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < m, "gather index {i} out of {m} rows");
            out.extend_from_slice(&vx.data[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], out);
        let ng = self.ng(&[x.0]);
        self.push(t, Op::GatherRows { x: x.0, idx }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (m, c) = self.value(*p).dims2();
            assert_eq!(c, n, "concat column mismatch");
            out.extend_from_slice(&self.value(*p).data);
            rows += m;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        self.push(Tensor::new(vec![rows, n], out), Op::ConcatRows { parts: ids }, ng)
    }

    /// Replace rows where `mask` is true by the `token` vector.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: Vec<bool>) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        assert_eq!(mask.len(), m, "mask length");
        let tok = &self.value(token).data;
        assert_eq!(tok.len(), n);
        let mut out = vx.data.clone();
        for (r, &on) in mask.iter().enumerate() {
            if on {
                out[r * n..(r + 1) * n].copy_from_slice(tok);
            }
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let ng = self.ng(&[x.0, token.0]);
        self.push(t, Op::MaskRows { x: x.0, token: token.0, mask }, ng)
    }

    /// `batch·n × d` patch rows → `batch·(n+1) × d` with `cls` prepended per item.
    pub fn prepend_cls(&mut self, x: Var, cls: Var, batch: usize) -> Var {
        let vx = self.value(x);
        let (m, d) = vx.dims2();
        assert_eq!(m % batch, 0);
        let n = m / batch;
        let c = &self.value(cls).data;
        assert_eq!(c.len(), d);
        let mut out = Vec::with_capacity((m + batch) * d);
        for b in 0..batch {
            out.extend_from_slice(c);
            out.extend_from_slice(&vx.data[b * n * d..(b + 1) * n * d]);
        }
        let ng = self.ng(&[x.0, cls.0]);
        self.push(Tensor::new(vec![m + batch, d], out), Op::PrependCls { x: x.0, cls: cls.0, batch }, ng)
    }

    /// Add an `r×d` block to every consecutive group of `r` rows.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Var {
        let vx = self.value(x);
        let vp = self.value(p);
        let block = vp.len();
        assert_eq!(vx.len() % block, 0, "tile size mismatch");
        let mut out = vx.data.clone();
        for chunk in out.chunks_mut(block) {
            for (o, &q) in chunk.iter_mut().zip(&vp.data) {
                *o += q;
            }
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let ng = self.ng(&[x.0, p.0]);
        self.push(t, Op::AddTiled { x: x.0, p: p.0 }, ng)
    }

    pub fn resample(&mut self, x: Var, map: Arc<ResampleMap<T>>) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        assert_eq!(m, map.in_rows, "resample input rows");
        let out = map.apply(&vx.data, n);
        let ng = self.ng(&[x.0]);
        self.push(Tensor::new(vec![map.out_rows, n], out), Op::Resample { x: x.0, map }, ng)
    }

    /// 2-D convolution, NCHW input, `O×C×k×k` weights, square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.rank(), 4, "conv input must be NCHW");
        assert_eq!(vw.rank(), 4, "conv weight must be OCkk");
        let (batch, cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (cout, k) = (vw.shape[0], vw.shape[2]);
        assert_eq!(vw.shape[1], cin, "conv channel mismatch");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { batch, cin, h, w: wd, cout, k, stride, pad, ho, wo };
        let (pl, op) = (geom.patch_len(), geom.out_px());
        let xs = &vx.data;
        let ws = &vw.data;
        let bs = &self.value(b).data;
        assert_eq!(bs.len(), cout);
        let per: Vec<(Vec<T>, Vec<T>)> = par::map_range(batch, |bi| {
            let img = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let cols = im2col(img, &geom);
            let mut out = vec![T::zero(); cout * op];
            for (o, row) in out.chunks_mut(op).enumerate() {
                row.fill(bs[o]);
            }
            T::gemm(cout, pl, op, ws, (pl as isize, 1), &cols, (op as isize, 1), T::one(), &mut out, (op as isize, 1));
            (out, cols)
        });
        let mut out = Vec::with_capacity(batch * cout * op);
        let mut cols = Vec::with_capacity(batch * pl * op);
        for (o, c) in per {
            out.extend(o);
            cols.extend(c);
        }
        let ng = self.ng(&[x.0, w.0, b.0]);
        self.push(
            Tensor::new(vec![batch, cout, ho, wo], out),
            Op::Conv2d { x: x.0, w: w.0, b: b.0, geom, cols },
            ng,
        )
    }

    /// 2×2 average pooling, stride 2, ceil mode: windows hanging over an odd
    /// edge average their in-bounds cells.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = nchw(vx);
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![T::zero(); b * c * h2 * w2];
        for p in 0..b * c {
            let src = &vx.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / 2) * w2 + xx / 2] += src[y * w + xx] * pool_weight::<T>(y, xx, h, w);
                }
            }
        }
        let ng = self.ng(&[x.0]);
        self.push(Tensor::new(vec![b, c, h2, w2], out), Op::AvgPool2 { x: x.0 }, ng)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (_, _, h, w) = nchw(self.value(x));
        self.upsample_to(x, 2 * h, 2 * w)
    }

    /// Nearest-neighbour resize to `out_h×out_w` (source row `⌊y·h/out_h⌋`).
    pub fn upsample_to(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = nchw(vx);
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &vx.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for y in 0..out_h {
                for xx in 0..out_w {
                    dst[y * out_w + xx] = src[(y * h / out_h) * w + xx * w / out_w];
                }
            }
        }
        let ng = self.ng(&[x.0]);
        self.push(Tensor::new(vec![b, c, out_h, out_w], out), Op::Upsample { x: x.0 }, ng)
    }

    /// Fast normalized fusion: `Σ relu(w_i) x_i / (Σ relu(w_j) + eps)`.
    pub fn weighted_fusion(&mut self, inputs: &[Var], w: Var, eps: f64) -> Var {
        assert!(!inputs.is_empty());
        let wv = &self.value(w).data;
        assert_eq!(wv.len(), inputs.len(), "one fusion weight per input");
        let eps = T::from_f64c(eps);
        let a: Vec<T> = wv.iter().map(|&v| v.max(T::zero())).collect();
        let s = a.iter().copied().sum::<T>() + eps;
        let shape = self.value(inputs[0]).shape.clone();
        let mut out = vec![T::zero(); self.value(inputs[0]).len()];
        for (i, inp) in inputs.iter().enumerate() {
            let vi = self.value(*inp);
            assert_eq!(vi.shape, shape, "fusion input shapes differ");
            let c = a[i] / s;
            for (o, &v) in out.iter_mut().zip(&vi.data) {
                *o += c * v;
            }
        }
        let mut ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        ids.push(w.0);
        let ng = self.ng(&ids);
        ids.pop();
        self.push(Tensor::new(shape, out), Op::Fuse { inputs: ids, w: w.0, eps }, ng)
    }

    /// NCHW → `N×C` spatial average.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = nchw(vx);
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out: Vec<T> = vx
            .data
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(&[x.0]);
        self.push(Tensor::new(vec![b, c], out), Op::SpatialMean { x: x.0 }, ng)
    }

    /// NCHW → `(N·H·W) × C` token rows, row-major over space.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = nchw(vx);
        let hw = h * w;
        let mut out = vec![T::zero(); b * hw * c];
        for bi in 0..b {
            for ci in 0..c {
                let src = &vx.data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    out[(bi * hw + p) * c + ci] = v;
                }
            }
        }
        let ng = self.ng(&[x.0]);
        self.push(Tensor::new(vec![b * hw, c], out), Op::NchwToTokens { x: x.0 }, ng)
    }

    /// `Σ_r weights[r] · (−Σ_k targets[r,k] · log softmax(logits[r]/temp)_k)`.
    /// Log-probabilities are clamped below at `ln(log_floor)`.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        weights: &[T],
        temp: f64,
        log_floor: f64,
    ) -> Var {
        let vl = self.value(logits);
        let (m, k) = vl.dims2();
        assert_eq!(targets.dims2(), (m, k), "targets shape");
        assert_eq!(weights.len(), m, "one weight per row");
        let tau = T::from_f64c(temp);
        let floor = T::from_f64c(log_floor.ln());
        let mut probs = vec![T::zero(); m * k];
        let mut kept = vec![true; m * k];
        let mut loss = T::zero();
        for r in 0..m {
            let row = &vl.data[r * k..(r + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - mx) / tau).exp();
                probs[r * k + j] = e;
                s += e;
            }
            let lse = s.ln();
            let mut row_loss = T::zero();
            for j in 0..k {
                probs[r * k + j] /= s;
                let mut lp = (row[j] - mx) / tau - lse;
                if lp < floor {
                    lp = floor;
                    kept[r * k + j] = false;
                }
                row_loss -= targets.data[r * k + j] * lp;
            }
            loss += weights[r] * row_loss;
        }
        let ng = self.ng(&[logits.0]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: logits.0,
                targets: targets.data.clone(),
                weights: weights.to_vec(),
                temp: tau,
                probs,
                kept,
            },
            ng,
        )
    }

    /// Kozachenko–Leonenko repulsion on L2-normalized rows:
    /// `−(1/n) Σ_i log(max(d_i, eps))`, `d_i` the distance to the nearest other row.
    pub fn koleo(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (n, d) = vx.dims2();
        assert!(n >= 2, "koleo needs at least two rows");
        let norm_floor = T::from_f64c(1e-12);
        let mut unit = vx.data.clone();
        let mut norms = Vec::with_capacity(n);
        for row in unit.chunks_mut(d) {
            let nr = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let den = nr.max(norm_floor);
            for e in row.iter_mut() {
                *e /= den;
            }
            norms.push(nr);
        }
        let eps_t = T::from_f64c(eps);
        let mut nn = vec![0usize; n];
        let mut dists = vec![T::zero(); n];
        let mut loss = T::zero();
        let inv_n = T::one() / T::from_usize(n).unwrap();
        for i in 0..n {
            let ui = &unit[i * d..(i + 1) * d];
            let mut best = usize::MAX;
            let mut best_d2 = T::infinity();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let uj = &unit[j * d..(j + 1) * d];
                let d2 = ui.iter().zip(uj).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = j;
                }
            }
            nn[i] = best;
            dists[i] = best_d2.sqrt();
            loss -= inv_n * dists[i].max(eps_t).ln();
        }
        let ng = self.ng(&[x.0]);
        self.push(Tensor::scalar(loss), Op::KoLeo { x: x.0, unit, norms, nn, dists, eps: eps_t }, ng)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: &[f64]) -> Var {
        assert_eq!(parts.len(), weights.len());
        let w: Vec<T> = weights.iter().map(|&v| T::from_f64c(v)).collect();
        let mut s = T::zero();
        for (p, &wi) in parts.iter().zip(&w) {
            assert_eq!(self.value(*p).len(), 1, "weighted_sum takes scalars");
            s += wi * self.value(*p).item();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        self.push(Tensor::scalar(s), Op::WeightedSum { parts: ids, weights: w }, ng)
    }

    /// `Σ x ⊙ c` for a constant `c` of the same shape.
    pub fn inner_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape, c.shape, "inner_const shape");
        let s = vx.data.iter().zip(&c.data).map(|(&a, &b)| a * b).sum::<T>();
        let ng = self.ng(&[x.0]);
        self.push(Tensor::scalar(s), Op::InnerConst { x: x.0, c: c.data.clone() }, ng)
    }

    fn run_backward(&self, loss: Var) -> Vec<Option<Vec<T>>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    /// Gradients for every trainable named parameter; frozen parameters
    /// report exact zeros.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let grads = self.run_backward(loss);
        let mut by_name = BTreeMap::new();
        for (name, v, trainable) in &self.param_order {
            let shape = self.value(*v).shape.clone();
            let t = match (&grads[v.0], trainable) {
                (Some(g), true) => Tensor::new(shape, g.clone()),
                _ => Tensor::zeros(&shape),
            };
            by_name.insert(name.clone(), t);
        }
        Gradients { by_name }
    }

    /// Gradients with respect to arbitrary leaves.
    pub fn backward_vars(&self, loss: Var, vars: &[Var]) -> Vec<Tensor<T>> {
        let grads = self.run_backward(loss);
        vars.iter()
            .map(|v| {
                let shape = self.value(*v).shape.clone();
                match &grads[v.0] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect()
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: usize) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (m, k) = va.dims2();
                let n = out.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // da = dc · bᵀ (or dc · b when b is stored transposed)
                    let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, g, (n as isize, 1), &vb.data, bs, T::one(), ga, (k as isize, 1));
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        T::gemm(n, m, k, g, (1, n as isize), &va.data, (k as isize, 1), T::one(), gb, (k as isize, 1));
                    } else {
                        T::gemm(k, m, n, &va.data, (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                    }
                }
            }
            Op::Add { a, b } => {
                for i in [*a, *b] {
                    if let Some(gi) = self.acc(grads, i) {
                        add_into(gi, g);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, &v) in gx.iter_mut().zip(g) {
                        *a += v * *s;
                    }
                }
            }
            Op::Gelu { x } => {
                let vx = &self.nodes[*x].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &v), &xi) in gx.iter_mut().zip(g).zip(vx) {
                        *a += v * gelu_parts(xi).1;
                    }
                }
            }
            Op::Relu { x } => {
                let vx = &self.nodes[*x].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &v), &xi) in gx.iter_mut().zip(g).zip(vx) {
                        if xi > T::zero() {
                            *a += v;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.nodes[*gamma].value.len();
                let gam = &self.nodes[*gamma].value.data;
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += row[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = T::from_usize(n).unwrap();
                    let mut dh = vec![T::zero(); n];
                    for (r, (row, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            dh[c] = row[c] * gam[c];
                            s1 += dh[c];
                            s2 += dh[c] * hrow[c];
                        }
                        let (m1, m2) = (s1 / nf, s2 / nf);
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for c in 0..n {
                            dst[c] += rstd[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                }
            }
            Op::Attention { qkv, batch, tokens, heads, probs } => {
                let Some(_) = self.acc(grads, *qkv) else { return };
                let src = &self.nodes[*qkv].value.data;
                let (t, hds) = (*tokens, *heads);
                let c3 = src.len() / (batch * t);
                let d = c3 / 3;
                let dh = d / hds;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let per: Vec<Vec<T>> = par::map_range(*batch, |b| {
                    let base = b * t * c3;
                    let qkv_b = &src[base..base + t * c3];
                    let go = &g[b * t * d..(b + 1) * t * d];
                    let mut dq = vec![T::zero(); t * c3];
                    let mut dp = vec![T::zero(); t * t];
                    for h in 0..hds {
                        let p = &probs[(b * hds + h) * t * t..(b * hds + h + 1) * t * t];
                        let q = &qkv_b[h * dh..];
                        let k = &qkv_b[d + h * dh..];
                        let v = &qkv_b[2 * d + h * dh..];
                        let go_h = &go[h * dh..];
                        // dV = Pᵀ dO
                        T::gemm(t, t, dh, p, (1, t as isize), go_h, (d as isize, 1), T::one(), &mut dq[2 * d + h * dh..], (c3 as isize, 1));
                        // dP = dO Vᵀ
                        T::gemm(t, dh, t, go_h, (d as isize, 1), v, (1, c3 as isize), T::zero(), &mut dp, (t as isize, 1));
                        for (dprow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                            let dot = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                            for (e, &pv) in dprow.iter_mut().zip(prow) {
                                *e = pv * (*e - dot) * scale;
                            }
                        }
                        // dQ = dS K, dK = dSᵀ Q
                        T::gemm(t, t, dh, &dp, (t as isize, 1), k, (c3 as isize, 1), T::one(), &mut dq[h * dh..], (c3 as isize, 1));
                        T::gemm(t, t, dh, &dp, (1, t as isize), q, (c3 as isize, 1), T::one(), &mut dq[d + h * dh..], (c3 as isize, 1));
                    }
                    dq
                });
                let gq = self.acc(grads, *qkv).unwrap();
                for (b, part) in per.iter().enumerate() {
                    add_into(&mut gq[b * t * c3..(b + 1) * t * c3], part);
                }
            }
            Op::L2NormRows { x, norms, eps } => {
                let Some(gx) = self.acc(grads, *x) else { return };
                let n = out.dims2().1;
                for (r, (grow, yrow)) in g.chunks(n).zip(out.data.chunks(n)).enumerate() {
                    let dst = &mut gx[r * n..(r + 1) * n];
                    if norms[r] > *eps {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..n {
                            dst[c] += (grow[c] - yrow[c] * dot) / norms[r];
                        }
                    } else {
                        for c in 0..n {
                            dst[c] += grow[c] / *eps;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let Some(gx) = self.acc(grads, *x) else { return };
                let n = out.dims2().1;
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::MaskRows { x, token, mask } => {
                let n = out.dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &on) in mask.iter().enumerate() {
                        if !on {
                            add_into(&mut gx[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                }
                if let Some(gt) = self.acc(grads, *token) {
                    for (r, &on) in mask.iter().enumerate() {
                        if on {
                            add_into(gt, &g[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
            Op::PrependCls { x, cls, batch } => {
                let d = out.dims2().1;
                let per = out.dims2().0 / batch;
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..*batch {
                        let src = &g[(b * per + 1) * d..(b + 1) * per * d];
                        add_into(&mut gx[b * (per - 1) * d..(b + 1) * (per - 1) * d], src);
                    }
                }
                if let Some(gc) = self.acc(grads, *cls) {
                    for b in 0..*batch {
                        add_into(gc, &g[b * per * d..(b * per + 1) * d]);
                    }
                }
            }
            Op::AddTiled { x, p } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gp) = self.acc(grads, *p) {
                    let block = gp.len();
                    for chunk in g.chunks(block) {
                        add_into(gp, chunk);
                    }
                }
            }
            Op::Resample { x, map } => {
                let n = out.dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    map.apply_transpose_into(g, n, gx);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (pl, op) = (geom.patch_len(), geom.out_px());
                let cout = geom.cout;
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..geom.batch {
                        for o in 0..cout {
                            let s = g[(bi * cout + o) * op..(bi * cout + o + 1) * op].iter().copied().sum::<T>();
                            gb[o] += s;
                        }
                    }
                }
                let want_w = self.nodes[*w].needs_grad;
                let want_x = self.nodes[*x].needs_grad;
                let wdata = &self.nodes[*w].value.data;
                let in_len = geom.cin * geom.h * geom.w;
                let per: Vec<(Vec<T>, Vec<T>)> = par::map_range(geom.batch, |bi| {
                    let go = &g[bi * cout * op..(bi + 1) * cout * op];
                    let cb = &cols[bi * pl * op..(bi + 1) * pl * op];
                    let mut dw = Vec::new();
                    if want_w {
                        dw = vec![T::zero(); cout * pl];
                        T::gemm(cout, op, pl, go, (op as isize, 1), cb, (1, op as isize), T::zero(), &mut dw, (pl as isize, 1));
                    }
                    let mut dx = Vec::new();
                    if want_x {
                        let mut dcols = vec![T::zero(); pl * op];
                        T::gemm(pl, cout, op, wdata, (1, pl as isize), go, (op as isize, 1), T::zero(), &mut dcols, (op as isize, 1));
                        dx = vec![T::zero(); in_len];
                        col2im(&dcols, geom, &mut dx);
                    }
                    (dw, dx)
                });
                if let Some(gw) = self.acc(grads, *w) {
                    for (dw, _) in &per {
                        add_into(gw, dw);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (bi, (_, dx)) in per.iter().enumerate() {
                        add_into(&mut gx[bi * in_len..(bi + 1) * in_len], dx);
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let Some(gx) = self.acc(grads, *x) else { return };
                let (b, c, h, w) = nchw(&self.nodes[*x].value);
                let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
                for p in 0..b * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[p * h * w + y * w + xx] += g[p * h2 * w2 + (y / 2) * w2 + xx / 2] * pool_weight::<T>(y, xx, h, w);
                        }
                    }
                }
            }
            Op::Upsample { x } => {
                let Some(gx) = self.acc(grads, *x) else { return };
                let (b, c, h, w) = nchw(&self.nodes[*x].value);
                let (oh, ow) = (out.shape[2], out.shape[3]);
                for p in 0..b * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[p * h * w + (y * h / oh) * w + xx * w / ow] += g[p * oh * ow + y * ow + xx];
                        }
                    }
                }
            }
            Op::Fuse { inputs, w, eps } => {
                let wv = &self.nodes[*w].value.data;
                let a: Vec<T> = wv.iter().map(|&v| v.max(T::zero())).collect();
                let s = a.iter().copied().sum::<T>() + *eps;
                for (i, &inp) in inputs.iter().enumerate() {
                    if let Some(gi) = self.acc(grads, inp) {
                        let c = a[i] / s;
                        for (d, &v) in gi.iter_mut().zip(g) {
                            *d += c * v;
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    let gdot: Vec<T> = inputs
                        .iter()
                        .map(|&inp| {
                            self.nodes[inp].value.data.iter().zip(g).map(|(&x, &y)| x * y).sum::<T>()
                        })
                        .collect();
                    let cross = gdot.iter().zip(&a).map(|(&gi, &ai)| gi * ai).sum::<T>();
                    for j in 0..a.len() {
                        if wv[j] > T::zero() {
                            gw[j] += gdot[j] / s - cross / (s * s);
                        }
                    }
                }
            }
            Op::SpatialMean { x } => {
                let Some(gx) = self.acc(grads, *x) else { return };
                let (_, _, h, w) = nchw(&self.nodes[*x].value);
                let inv = T::one() / T::from_usize(h * w).unwrap();
                for (p, chunk) in gx.chunks_mut(h * w).enumerate() {
                    let v = g[p] * inv;
                    for e in chunk.iter_mut() {
                        *e += v;
                    }
                }
            }
            Op::NchwToTokens { x } => {
                let Some(gx) = self.acc(grads, *x) else { return };
                let (b, c, h, w) = nchw(&self.nodes[*x].value);
                let hw = h * w;
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            gx[(bi * c + ci) * hw + p] += g[(bi * hw + p) * c + ci];
                        }
                    }
                }
            }
            Op::SoftCrossEntropy { logits, targets, weights, temp, probs, kept } => {
                let Some(gl) = self.acc(grads, *logits) else { return };
                let k = self.nodes[*logits].value.dims2().1;
                let up = g[0];
                for (r, &wr) in weights.iter().enumerate() {
                    let t = &targets[r * k..(r + 1) * k];
                    let p = &probs[r * k..(r + 1) * k];
                    let kp = &kept[r * k..(r + 1) * k];
                    let tsum = t.iter().zip(kp).filter(|(_, &on)| on).map(|(&v, _)| v).sum::<T>();
                    let coef = up * wr / *temp;
                    let dst = &mut gl[r * k..(r + 1) * k];
                    for j in 0..k {
                        let own = if kp[j] { t[j] } else { T::zero() };
                        dst[j] += coef * (p[j] * tsum - own);
                    }
                }
            }
            Op::KoLeo { x, unit, norms, nn, dists, eps } => {
                let Some(_) = self.acc(grads, *x) else { return };
                let (n, d) = self.nodes[*x].value.dims2();
                let up = g[0];
                let inv_n = T::one() / T::from_usize(n).unwrap();
                let mut gu = vec![T::zero(); n * d];
                for i in 0..n {
                    if dists[i] <= *eps {
                        continue;
                    }
                    let j = nn[i];
                    let c = up * inv_n / (dists[i] * dists[i]);
                    for e in 0..d {
                        let diff = unit[i * d + e] - unit[j * d + e];
                        gu[i * d + e] -= c * diff;
                        gu[j * d + e] += c * diff;
                    }
                }
                let gx = self.acc(grads, *x).unwrap();
                let floor = T::from_f64c(1e-12);
                for i in 0..n {
                    let u = &unit[i * d..(i + 1) * d];
                    let gi = &gu[i * d..(i + 1) * d];
                    let dot = u.iter().zip(gi).map(|(&a, &b)| a * b).sum::<T>();
                    let nr = norms[i].max(floor);
                    for e in 0..d {
                        gx[i * d + e] += (gi[e] - u[e] * dot) / nr;
                    }
                }
            }
            Op::WeightedSum { parts, weights } => {
                for (&p, &w) in parts.iter().zip(weights) {
                    if let Some(gp) = self.acc(grads, p) {
                        gp[0] += g[0] * w;
                    }
                }
            }
            Op::InnerConst { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, &v) in gx.iter_mut().zip(c) {
                        *a += g[0] * v;
                    }
                }
            }
        }
    }
}

/// Share of input cell `(y, x)` in its ceil-mode 2×2 pooling window.
fn pool_weight<T: Real>(y: usize, x: usize, h: usize, w: usize) -> T {
    let rows = if y / 2 * 2 + 1 < h { 2 } else { 1 };
    let cols = if x / 2 * 2 + 1 < w { 2 } else { 1 };
    T::one() / T::from_usize(rows * cols).unwrap()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn nchw<T>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    assert_eq!(t.shape.len(), 4, "expected NCHW tensor, got {:?}", t.shape);
    (t.shape[0], t.shape[1], t.shape[2], t.shape[3])
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom) -> Vec<T> {
    let op = g.out_px();
    let mut cols = vec![T::zero(); g.patch_len() * op];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * op..(r + 1) * op];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.wo + ox] = img[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let op = g.out_px();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols[r * op..(r + 1) * op];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Relu(Var),
    Embedding { table: Var, indices: Vec<usize> },
    PairGather { table: Var, indices: Vec<usize> },
    PermuteTwoSided { x: Var, map: Arc<[usize]> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<u32> },
    AdaptiveAvgPool { x: Var, s: usize },
    Dense { x: Var, w: Var, b: Var },
    Dropout { x: Var, mask: Vec<T> },
    Add(Var, Var),
    Concat(Vec<Var>),
    Reshape(Var),
    RowMean(Var),
    Sum(Var),
    Scale(Var, T),
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of one forward pass. Nodes are appended in execution
/// order, so every operation's inputs precede it and a single reverse
/// sweep visits each node once.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Free variable that receives a gradient but is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Snapshot of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let mut t = store.get(id).clone();
        t.clear_grad();
        self.push(t, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {sa:?} by {sb:?}: inner dimensions disagree"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.data(a), self.data(b), m, k, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("transpose expects a matrix, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|z| z.tanh()).collect();
        let t = Tensor::new(v.shape(), out).expect("shape preserved");
        let ng = self.needs(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&z| z.max(T::zero())).collect();
        let t = Tensor::new(v.shape(), out).expect("shape preserved");
        let ng = self.needs(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Row gather `table[indices[i], :]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("embedding table must be [V, E], got {s:?}"));
        }
        let (v, e) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(dim_err!("embedding lookup with no indices"));
        }
        if let Some((pos, &bad)) = indices.iter().enumerate().find(|(_, &ix)| ix >= v) {
            return Err(Error::Index(format!(
                "index {bad} at feature position {pos} is outside vocabulary of size {v}"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * e);
        for &ix in indices {
            out.extend_from_slice(&src[ix * e..(ix + 1) * e]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(&[indices.len(), e], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// `out[i,j] = table[indices[i], indices[j]]` for a square `[V,V]` table.
    pub fn pair_gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(dim_err!("pair_gather expects a square table, got {s:?}"));
        }
        let v = s[0];
        if let Some((pos, &bad)) = indices.iter().enumerate().find(|(_, &ix)| ix >= v) {
            return Err(Error::Index(format!(
                "index {bad} at feature position {pos} is outside vocabulary of size {v}"
            )));
        }
        let n = indices.len();
        let src = self.data(table);
        let mut out = vec![T::zero(); n * n];
        for (i, &a) in indices.iter().enumerate() {
            let row = &src[a * v..(a + 1) * v];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &b) in dst.iter_mut().zip(indices) {
                *d = row[b];
            }
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(&[n, n], out)?,
            Op::PairGather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Two-sided rearrangement `out[σ(i), σ(j)] = x[i, j]`, i.e. `M x Mᵀ`
    /// with `M[σ(i), i] = 1`. `map` must be a bijection on `0..n`.
    pub fn permute_two_sided(&mut self, x: Var, map: Arc<[usize]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = map.len();
        if s.len() != 2 || s[0] != n || s[1] != n {
            return Err(dim_err!("two-sided permutation of size {n} applied to {s:?}"));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            let row = &src[i * n..(i + 1) * n];
            let base = map[i] * n;
            for (j, &v) in row.iter().enumerate() {
                out[base + map[j]] = v;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&[n, n], out)?, Op::PermuteTwoSided { x, map }, ng))
    }

    /// Same-padded stride-1 cross-correlation of `x [C_in,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[0] {
            return Err(dim_err!("conv2d input {sx:?} incompatible with kernels {sw:?}"));
        }
        if sb != [sw[0]] {
            return Err(dim_err!("conv2d bias {sb:?} does not match {} output channels", sw[0]));
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sw[0],
            h: sx[1],
            w: sx[2],
            k: sw[2],
        };
        if geom.k > geom.h || geom.k > geom.w {
            return Err(dim_err!(
                "kernel {}x{} larger than input {}x{}",
                geom.k,
                geom.k,
                geom.h,
                geom.w
            ));
        }
        let mut out = vec![T::zero(); geom.cout * geom.h * geom.w];
        kernels::conv2d_same(self.data(x), self.data(w), self.data(b), geom, &mut out);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(&[geom.cout, geom.h, geom.w], out)?,
            Op::Conv2d { x, w, b, geom },
            ng,
        ))
    }

    /// 2×2 max pooling, stride 2, floor semantics on odd sizes.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(dim_err!("maxpool2d needs [C,H,W] with H,W >= 2, got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); c * (h / 2) * (w / 2)];
        let argmax = kernels::maxpool2x2(self.data(x), c, h, w, &mut out);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&[c, h / 2, w / 2], out)?, Op::MaxPool { x, argmax }, ng))
    }

    pub fn adaptive_avgpool2d(&mut self, x: Var, s: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || s == 0 || s > sh[1] || s > sh[2] {
            return Err(dim_err!("adaptive pooling of {sh:?} to {s}x{s}"));
        }
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut out = vec![T::zero(); c * s * s];
        kernels::adaptive_avgpool(self.data(x), c, h, w, s, &mut out);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&[c, s, s], out)?, Op::AdaptiveAvgPool { x, s }, ng))
    }

    /// Affine map `W x + b`; `x` is read as a flat vector.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let n = self.value(x).numel();
        if sw.len() != 2 || sw[1] != n || self.shape(b) != [sw[0]] {
            return Err(dim_err!(
                "dense layer {sw:?} with bias {:?} cannot take an input of {n} values",
                self.shape(b)
            ));
        }
        let m = sw[0];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let out: Vec<T> = (0..m)
            .map(|i| kernels::dot(&wd[i * n..(i + 1) * n], xd) + bd[i])
            .collect();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(&[m], out)?, Op::Dense { x, w, b }, ng))
    }

    /// Inverted dropout. `keep` draws return `true` with probability `1 - rate`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, mut keep: impl FnMut() -> bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.numel()).map(|_| if keep() { scale } else { T::zero() }).collect();
        let out: Vec<T> = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape(), out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("add of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Flattens each part and joins them into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat of zero tensors"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let len = out.len();
        Ok(self.push(Tensor::new(&[len], out)?, Op::Concat(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Mean over the last axis of a matrix: `[N,E] -> [N]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("row_mean expects a matrix, got {s:?}"));
        }
        let (n, e) = (s[0], s[1]);
        let inv = T::lit(1.0 / e as f64);
        let src = self.data(x);
        let out: Vec<T> = (0..n)
            .map(|i| src[i * e..(i + 1) * e].iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&[n], out)?, Op::RowMean(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&z| z * c).collect();
        let t = Tensor::new(v.shape(), out).expect("shape preserved");
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// Log-sum-exp cross entropy of a logit vector against a class id.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.data(logits);
        if label >= z.len() {
            return Err(Error::Index(format!("label {label} outside [0, {})", z.len())));
        }
        let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - mx).exp()).collect();
        let denom: T = exps.iter().copied().sum();
        let loss = denom.ln() + mx - z[label];
        let probs: Vec<T> = exps.iter().map(|&e| e / denom).collect();
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, label, probs },
            ng,
        ))
    }

    /// Mean squared error over the elements of `pred`.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != target.len() {
            return Err(dim_err!(
                "mse between {} predictions and {} targets",
                p.len(),
                target.len()
            ));
        }
        let n = T::lit(p.len() as f64);
        let loss = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Input | Op::Leaf | Op::Param(_) => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g_owned: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let g = &g_owned[..];
        let slot = |v: Var, grads: &mut [Option<Vec<T>>]| -> Option<usize> {
            if self.needs(v) {
                if grads[v.0].is_none() {
                    grads[v.0] = Some(vec![T::zero(); self.value(v).numel()]);
                }
                Some(v.0)
            } else {
                None
            }
        };
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ia) = slot(*a, grads) {
                    let ga = grads[ia].as_mut().unwrap();
                    kernels::matmul_grad_a(g, self.data(*b), m, k, n, ga);
                }
                if let Some(ib) = slot(*b, grads) {
                    let gb = grads[ib].as_mut().unwrap();
                    kernels::matmul_grad_b(g, self.data(*a), m, k, n, gb);
                }
            }
            Op::Transpose(x) => {
                if let Some(ix) = slot(*x, grads) {
                    let s = self.shape(*x);
                    let (r, c) = (s[0], s[1]);
                    let gx = grads[ix].as_mut().unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(ix) = slot(*x, grads) {
                    let y = node.value.data();
                    let gx = grads[ix].as_mut().unwrap();
                    for ((d, &gy), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + gy * (T::one() - yv * yv);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(ix) = slot(*x, grads) {
                    let xv = self.data(*x);
                    let gx = grads[ix].as_mut().unwrap();
                    for ((d, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gy;
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if let Some(it) = slot(*table, grads) {
                    let e = self.shape(*table)[1];
                    let gt = grads[it].as_mut().unwrap();
                    for (row, &ix) in indices.iter().enumerate() {
                        let src = &g[row * e..(row + 1) * e];
                        for (d, &s) in gt[ix * e..(ix + 1) * e].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::PairGather { table, indices } => {
                if let Some(it) = slot(*table, grads) {
                    let v = self.shape(*table)[0];
                    let n = indices.len();
                    let gt = grads[it].as_mut().unwrap();
                    for (i, &a) in indices.iter().enumerate() {
                        let gr = &g[i * n..(i + 1) * n];
                        for (&gv, &b) in gr.iter().zip(indices) {
                            gt[a * v + b] = gt[a * v + b] + gv;
                        }
                    }
                }
            }
            Op::PermuteTwoSided { x, map } => {
                if let Some(ix) = slot(*x, grads) {
                    let n = map.len();
                    let gx = grads[ix].as_mut().unwrap();
                    for i in 0..n {
                        let base = map[i] * n;
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[base + map[j]];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.needs(*x) {
                    match grads[x.0].as_mut() {
                        Some(gx) => kernels::conv2d_same_grad_input(g, self.data(*w), *geom, gx),
                        None => {
                            let mut gx = vec![T::zero(); self.value(*x).numel()];
                            kernels::conv2d_same_grad_input_into(g, self.data(*w), *geom, &mut gx);
                            grads[x.0] = Some(gx);
                        }
                    }
                }
                let need_w = self.needs(*w);
                let need_b = self.needs(*b);
                if need_w || need_b {
                    let mut gw = vec![T::zero(); self.value(*w).numel()];
                    let mut gb = vec![T::zero(); geom.cout];
                    kernels::conv2d_same_grad_params(self.data(*x), g, *geom, &mut gw, &mut gb);
                    if let Some(iw) = slot(*w, grads) {
                        add_into(grads[iw].as_mut().unwrap(), &gw);
                    }
                    if let Some(ib) = slot(*b, grads) {
                        add_into(grads[ib].as_mut().unwrap(), &gb);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(ix) = slot(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src as usize] = gx[src as usize] + gv;
                    }
                }
            }
            Op::AdaptiveAvgPool { x, s } => {
                if let Some(ix) = slot(*x, grads) {
                    let sh = self.shape(*x);
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let gx = grads[ix].as_mut().unwrap();
                    kernels::adaptive_avgpool_grad(g, c, h, w, *s, gx);
                }
            }
            Op::Dense { x, w, b } => {
                let n = self.value(*x).numel();
                if let Some(ix) = slot(*x, grads) {
                    let wd = self.data(*w);
                    let gx = grads[ix].as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        kernels::axpy(gv, &wd[i * n..(i + 1) * n], gx);
                    }
                }
                if let Some(iw) = slot(*w, grads) {
                    let xd = self.data(*x);
                    let gw = grads[iw].as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        kernels::axpy(gv, xd, &mut gw[i * n..(i + 1) * n]);
                    }
                }
                if let Some(ib) = slot(*b, grads) {
                    add_into(grads[ib].as_mut().unwrap(), g);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(ix) = slot(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    for ((d, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gv * m;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(iv) = slot(v, grads) {
                        add_into(grads[iv].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(ip) = slot(p, grads) {
                        add_into(grads[ip].as_mut().unwrap(), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    match grads[x.0].as_mut() {
                        Some(gx) => add_into(gx, g),
                        None => grads[x.0] = Some(g_owned),
                    }
                }
            }
            Op::RowMean(x) => {
                if let Some(ix) = slot(*x, grads) {
                    let e = self.shape(*x)[1];
                    let inv = T::lit(1.0 / e as f64);
                    let gx = grads[ix].as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        for d in &mut gx[i * e..(i + 1) * e] {
                            *d = *d + gv * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(ix) = slot(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Scale(x, c) => {
                if let Some(ix) = slot(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d = *d + gv * *c;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                if let Some(il) = slot(*logits, grads) {
                    let gl = grads[il].as_mut().unwrap();
                    for (c, (d, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if c == *label { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - onehot);
                    }
                }
            }
            Op::Mse { pred, target } => {
                if let Some(ip) = slot(*pred, grads) {
                    let p = self.data(*pred);
                    let scale = g[0] * T::lit(2.0 / p.len() as f64);
                    let gp = grads[ip].as_mut().unwrap();
                    for ((d, &pv), &tv) in gp.iter_mut().zip(p).zip(target) {
                        *d = *d + scale * (pv - tv);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients left at the leaves after a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a leaf or parameter; `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }
}

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// Input-to-output index plan for broadcasting binary ops.
#[derive(Debug)]
enum Broadcast {
    Same,
    /// `b` matches a suffix of `a`'s shape.
    Suffix,
    General(Vec<(usize, usize)>),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        batches: Vec<(usize, usize)>,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Scale {
        x: Var,
        c: T,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2x2 {
        x: Var,
        k: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        /// `index[o]` is the input offset read by output element `o`.
        index: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        chunk: usize,
    },
    Sum {
        x: Var,
        scale: T,
    },
    /// Scalar-valued function whose input gradients were computed in forward.
    Custom {
        inputs: Vec<Var>,
        grads: Vec<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded forward computation.
///
/// Every op appends one node; [`Graph::backward`] replays the tape in reverse.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes; returns the output shape and, per
/// output element, the flat offsets into each operand.
fn broadcast_pairs(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, _) => out.push(y),
            (_, 1) => out.push(x),
            _ => return None,
        }
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let eff = |s: &[usize], p: &[usize]| -> Vec<usize> {
        s.iter()
            .zip(p)
            .zip(&out)
            .map(|((&st, &ext), &o)| if ext == 1 && o != 1 { 0 } else { st })
            .collect()
    };
    let (ea, eb) = (eff(&sa, &pa), eff(&sb, &pb));
    let n = numel(&out);
    let mut pairs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        pairs.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += ea[d];
            ob += eb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= ea[d] * out[d];
            ob -= eb[d] * out[d];
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn mm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += dc[m,n] * b[k,n]^T`
fn mm_grad_a<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in drow.iter().zip(brow) {
                acc += x * y;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db[k,n] += a[m,k]^T * dc[m,n]`
fn mm_grad_b<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (g, &d) in dbrow.iter_mut().zip(drow) {
                *g += av * d;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Copy a node out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Record a leaf; it receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            false,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batch_shape, pairs) =
            broadcast_pairs(ba, bb).ok_or_else(|| Error::dim("matmul", &sa, &sb))?;
        let batches: Vec<(usize, usize)> = pairs
            .into_iter()
            .map(|(ia, ib)| (ia * m * k, ib * k * n))
            .collect();
        let mut out = vec![T::zero(); batches.len() * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for (bi, &(oa, ob)) in batches.iter().enumerate() {
                mm_acc(
                    &av[oa..oa + m * k],
                    &bv[ob..ob + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                batches,
            },
            ng,
        ))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (shape, value, plan) = if sa == sb {
            let v = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            (sa, v, Broadcast::Same)
        } else if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            let bv = self.value(b);
            let nb = bv.len();
            let v = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % nb]))
                .collect();
            (sa, v, Broadcast::Suffix)
        } else {
            let (shape, pairs) =
                broadcast_pairs(&sa, &sb).ok_or_else(|| Error::dim("broadcast", &sa, &sb))?;
            let (av, bv) = (self.value(a), self.value(b));
            let v = pairs.iter().map(|&(i, j)| f(av[i], bv[j])).collect();
            (shape, v, Broadcast::General(pairs))
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, value, Op::Binary { kind, a, b, plan }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).iter().map(|&e| e * c).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, v, Op::Scale { x, c }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&e| gelu(e)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, v, Op::Gelu { x }, ng)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xv[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xv[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                let inv = T::one() / s;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / d.max(1);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::one() / T::c(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Stride-1 2x2 convolution over `[H, W, C_in]` with one row of zero
    /// padding at the bottom and one column at the right, so the output is
    /// `[H, W, C_out]`. Kernel layout `[2, 2, C_in, C_out]` (`[dy, dx, ci, co]`).
    pub fn conv2x2(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (sx, sk, sb) = (
            self.shape(x).to_vec(),
            self.shape(k).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sk.len() != 4 || sk[0] != 2 || sk[1] != 2 || sk[2] != sx[2] {
            return Err(Error::dim("conv2x2", &sx, &sk));
        }
        let (h, w, ci, co) = (sx[0], sx[1], sx[2], sk[3]);
        if sb != [co] {
            return Err(Error::dim("conv2x2", &sk, &sb));
        }
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let mut out = vec![T::zero(); h * w * co];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * co..(y * w + xx + 1) * co];
                o.copy_from_slice(bv);
                for dy in 0..2 {
                    let yy = y + dy;
                    if yy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let xs = xx + dx;
                        if xs >= w {
                            continue;
                        }
                        let pix = &xv[(yy * w + xs) * ci..(yy * w + xs + 1) * ci];
                        let tap = &kv[(dy * 2 + dx) * ci * co..(dy * 2 + dx + 1) * ci * co];
                        for (c, &pv) in pix.iter().enumerate() {
                            let krow = &tap[c * co..(c + 1) * co];
                            for (ov, &kw) in o.iter_mut().zip(krow) {
                                *ov += pv * kw;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(k) || self.ng(b);
        Ok(self.push(vec![h, w, co], out, Op::Conv2x2 { x, k, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape { x }, ng))
    }

    /// General axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", &shape, axes));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let st: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = numel(&shape);
        let rank = shape.len();
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            index.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += st[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= st[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let xv = self.value(x);
        let v = index.iter().map(|&i| xv[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(out_shape, v, Op::Permute { x, index }, ng))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if numel(shape) != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::dim("gather", self.shape(x), shape));
        }
        let xv = self.value(x);
        let v = index.iter().map(|&i| xv[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), v, Op::Gather { x, index }, ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let chunks: Vec<usize> = inputs
            .iter()
            .map(|&v| self.shape(v)[axis] * inner)
            .collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            ng,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, end]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src_chunk = shape[axis] * inner;
        let chunk = (end - start) * inner;
        let offset = start * inner;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * src_chunk + offset..o * src_chunk + offset + chunk]);
        }
        let mut s = shape;
        s[axis] = end - start;
        let ng = self.ng(x);
        Ok(self.push(
            s,
            out,
            Op::Slice {
                x,
                outer,
                src_chunk,
                offset,
                chunk,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(Vec::new(), vec![s], Op::Sum { x, scale: T::one() }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let scale = T::one() / T::c(n as f64);
        let s = self.value(x).iter().copied().sum::<T>() * scale;
        let ng = self.ng(x);
        self.push(Vec::new(), vec![s], Op::Sum { x, scale }, ng)
    }

    /// Record a scalar function whose value and input gradients are already
    /// known. `grads[i]` must match the length of `inputs[i]`.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: T, grads: Vec<Vec<T>>) -> Result<Var> {
        if grads.len() != inputs.len()
            || inputs
                .iter()
                .zip(&grads)
                .any(|(&v, g)| g.len() != self.value(v).len())
        {
            return Err(Error::Contract("custom_scalar gradient shapes".into()));
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::Custom {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                batches,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(grads, *a) {
                    for (bi, &(oa, ob)) in batches.iter().enumerate() {
                        mm_grad_a(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[ob..ob + k * n],
                            &mut da[oa..oa + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (bi, &(oa, ob)) in batches.iter().enumerate() {
                        mm_grad_b(
                            &av[oa..oa + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[ob..ob + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Binary { kind, a, b, plan } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len();
                let pair = |o: usize| -> (usize, usize) {
                    match plan {
                        Broadcast::Same => (o, o),
                        Broadcast::Suffix => (o, o % nb),
                        Broadcast::General(p) => p[o],
                    }
                };
                if let Some(da) = self.acc(grads, *a) {
                    for (o, &go) in g.iter().enumerate() {
                        let (i, j) = pair(o);
                        da[i] += match kind {
                            BinKind::Add | BinKind::Sub => go,
                            BinKind::Mul => go * bv[j],
                        };
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (o, &go) in g.iter().enumerate() {
                        let (i, j) = pair(o);
                        db[j] += match kind {
                            BinKind::Add => go,
                            BinKind::Sub => -go,
                            BinKind::Mul => go * av[i],
                        };
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &go)| *d += go * *c);
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &go), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += go * gelu_grad(xi);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..*len {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..*len {
                                let p = base + j * inner;
                                dx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma);
                let rows = rstd.len();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let inv_d = T::one() / T::c(d as f64);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Conv2x2 { x, k, b } => {
                let sx = self.shape(*x);
                let (h, w, ci) = (sx[0], sx[1], sx[2]);
                let co = self.shape(*k)[3];
                let (xv, kv) = (self.value(*x), self.value(*k));
                if let Some(db) = self.acc(grads, *b) {
                    for p in 0..h * w {
                        for o in 0..co {
                            db[o] += g[p * co + o];
                        }
                    }
                }
                if let Some(dk) = self.acc(grads, *k) {
                    for y in 0..h {
                        for xx in 0..w {
                            let go = &g[(y * w + xx) * co..(y * w + xx + 1) * co];
                            for dy in 0..2 {
                                for dx_ in 0..2 {
                                    let (yy, xs) = (y + dy, xx + dx_);
                                    if yy >= h || xs >= w {
                                        continue;
                                    }
                                    let pix = &xv[(yy * w + xs) * ci..(yy * w + xs + 1) * ci];
                                    let tap = (dy * 2 + dx_) * ci * co;
                                    for (c, &pv) in pix.iter().enumerate() {
                                        let row = &mut dk[tap + c * co..tap + (c + 1) * co];
                                        for (d, &gv) in row.iter_mut().zip(go) {
                                            *d += pv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dxv) = self.acc(grads, *x) {
                    for y in 0..h {
                        for xx in 0..w {
                            let go = &g[(y * w + xx) * co..(y * w + xx + 1) * co];
                            for dy in 0..2 {
                                for dx_ in 0..2 {
                                    let (yy, xs) = (y + dy, xx + dx_);
                                    if yy >= h || xs >= w {
                                        continue;
                                    }
                                    let tap = (dy * 2 + dx_) * ci * co;
                                    let base = (yy * w + xs) * ci;
                                    for c in 0..ci {
                                        let krow = &kv[tap + c * co..tap + (c + 1) * co];
                                        let mut acc = T::zero();
                                        for (&kw, &gv) in krow.iter().zip(go) {
                                            acc += kw * gv;
                                        }
                                        dxv[base + c] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &go)| *d += go);
                }
            }
            Op::Permute { x, index } | Op::Gather { x, index } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (&i, &go) in index.iter().zip(g) {
                        dx[i] += go;
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if let Some(dv) = self.acc(grads, v) {
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + c];
                            dv[o * c..(o + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &go)| *d += go);
                        }
                    }
                    start += c;
                }
            }
            Op::Slice {
                x,
                outer,
                src_chunk,
                offset,
                chunk,
            } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        let dst = &mut dx[o * src_chunk + offset..o * src_chunk + offset + chunk];
                        dst.iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(d, &go)| *d += go);
                    }
                }
            }
            Op::Sum { x, scale } => {
                let s = g[0] * *scale;
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Custom {
                inputs,
                grads: local,
            } => {
                for (&v, lg) in inputs.iter().zip(local) {
                    if let Some(dv) = self.acc(grads, v) {
                        dv.iter_mut().zip(lg).for_each(|(d, &l)| *d += g[0] * l);
                    }
                }
            }
        }
    }
}

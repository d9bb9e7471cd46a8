//! Define-by-run tape. Ops execute eagerly when recorded; `backward` walks
//! the tape in reverse and accumulates gradients for every node reachable
//! from a trainable leaf.
//!
//! Multi-head attention is a single primitive with a hand-derived backward
//! pass rather than a composition of matmul/softmax nodes: it is the hot op,
//! and keeping the per-head probability matrices private to the op avoids a
//! pile of intermediate nodes per layer.

use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Where a broadcast operand stands relative to the full-shape one.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// Operand is [1, d], repeated across rows.
    Row,
    /// Operand is [1, 1].
    Scalar,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    c_in: usize,
    c_out: usize,
    in_d: [usize; 3],
    out_d: [usize; 3],
    k: usize,
    stride: [usize; 3],
    pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    MeanRows(NodeId),
    MaxRows(NodeId, Vec<usize>),
    MeanAll(NodeId),
    SumAll(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    BceWithLogits {
        logits: NodeId,
        targets: Vec<T>,
        weights: Vec<T>,
        weight_sum: f64,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        /// Per-head softmax probabilities, each n_q x n_k.
        probs: Vec<Vec<T>>,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: ConvDims,
    },
    ChwToTokens(NodeId),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Reverse-mode tape over tensors of one element type.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node; `None` if the
    /// node does not require grad or backward has not run.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
    }

    fn rc(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        assert_eq!(s.len(), 2, "expected 2D node, got {:?}", s);
        (s[0], s[1])
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Leaf)
    }

    /// Trainable leaf: gradient is accumulated here by `backward`.
    pub fn param(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf)
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId) -> Broadcast {
        let (ar, ac) = self.rc(a);
        let (br, bc) = self.rc(b);
        if (br, bc) == (ar, ac) {
            Broadcast::Same
        } else if (br, bc) == (1, 1) {
            Broadcast::Scalar
        } else if br == 1 && bc == ac {
            Broadcast::Row
        } else {
            panic!("cannot broadcast [{br}, {bc}] over [{ar}, {ac}]");
        }
    }

    /// Elementwise a + b; b may be [1, d] (row broadcast) or [1, 1].
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bc = self.broadcast_kind(a, b);
        let (ar, ac) = self.rc(a);
        let mut out = Vec::with_capacity(ar * ac);
        for r in 0..ar {
            for c in 0..ac {
                let bv = match bc {
                    Broadcast::Same => self.nodes[b.0].value[r * ac + c],
                    Broadcast::Row => self.nodes[b.0].value[c],
                    Broadcast::Scalar => self.nodes[b.0].value[0],
                };
                out.push(self.nodes[a.0].value[r * ac + c] + bv);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![ar, ac], out, ng, Op::Add(a, b, bc))
    }

    /// Elementwise a * b; same broadcast rules as `add`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bc = self.broadcast_kind(a, b);
        let (ar, ac) = self.rc(a);
        let mut out = Vec::with_capacity(ar * ac);
        for r in 0..ar {
            for c in 0..ac {
                let bv = match bc {
                    Broadcast::Same => self.nodes[b.0].value[r * ac + c],
                    Broadcast::Row => self.nodes[b.0].value[c],
                    Broadcast::Scalar => self.nodes[b.0].value[0],
                };
                out.push(self.nodes[a.0].value[r * ac + c] * bv);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![ar, ac], out, ng, Op::Mul(a, b, bc))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::cast(c);
        let out: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * cv).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, ng, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::cast(c);
        let out: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x + cv).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, ng, Op::AddScalar(a))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Matrix product [n, k] x [k, m] -> [n, m], accumulated in f64.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, ka) = self.rc(a);
        let (kb, m) = self.rc(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let out = matmul_f64(&self.nodes[a.0].value, &self.nodes[b.0].value, n, ka, m);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![n, m], out, ng, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (n, m) = self.rc(a);
        let mut out = vec![T::zero(); n * m];
        for r in 0..n {
            for c in 0..m {
                out[c * n + r] = self.nodes[a.0].value[r * m + c];
            }
        }
        let ng = self.needs(a);
        self.push(vec![m, n], out, ng, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, ca) = self.rc(a);
        let (nb, cb) = self.rc(b);
        assert_eq!(n, nb, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&self.nodes[a.0].value[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.nodes[b.0].value[r * cb..(r + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![n, ca + cb], out, ng, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (n, c) = self.rc(a);
        assert!(start + len <= c, "slice {start}..{} out of {c} cols", start + len);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&self.nodes[a.0].value[r * c + start..r * c + start + len]);
        }
        let ng = self.needs(a);
        self.push(vec![n, len], out, ng, Op::SliceCols(a, start))
    }

    /// Rows of `a` at the given indices (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let (n, c) = self.rc(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < n, "gather row {i} out of {n}");
            out.extend_from_slice(&self.nodes[a.0].value[i * c..(i + 1) * c]);
        }
        let ng = self.needs(a);
        self.push(vec![idx.len(), c], out, ng, Op::GatherRows(a, idx.to_vec()))
    }

    /// Column-wise mean over rows: [n, d] -> [1, d].
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.rc(a);
        assert!(n > 0, "mean over zero rows");
        let mut acc = vec![0f64; d];
        for r in 0..n {
            for c in 0..d {
                acc[c] += self.nodes[a.0].value[r * d + c].dbl();
            }
        }
        let out: Vec<T> = acc.iter().map(|&s| T::cast(s / n as f64)).collect();
        let ng = self.needs(a);
        self.push(vec![1, d], out, ng, Op::MeanRows(a))
    }

    /// Column-wise max over rows: [n, d] -> [1, d]. Ties go to the first row.
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.rc(a);
        assert!(n > 0, "max over zero rows");
        let mut arg = vec![0usize; d];
        let mut out = self.nodes[a.0].value[..d].to_vec();
        for r in 1..n {
            for c in 0..d {
                let v = self.nodes[a.0].value[r * d + c];
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        let ng = self.needs(a);
        self.push(vec![1, d], out, ng, Op::MaxRows(a, arg))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        assert!(n > 0, "mean over empty tensor");
        let s: f64 = self.nodes[a.0].value.iter().map(|x| x.dbl()).sum();
        let ng = self.needs(a);
        self.push(vec![1, 1], vec![T::cast(s / n as f64)], ng, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.iter().map(|x| x.dbl()).sum();
        let ng = self.needs(a);
        self.push(vec![1, 1], vec![T::cast(s)], ng, Op::SumAll(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.rc(a);
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            softmax_row(&self.nodes[a.0].value[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        let ng = self.needs(a);
        self.push(vec![n, d], out, ng, Op::Softmax(a))
    }

    /// Layer norm over the last axis: y = gamma * (x - mu) / sqrt(var + eps) + beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (n, d) = self.rc(x);
        assert_eq!(self.rc(gamma), (1, d));
        assert_eq!(self.rc(beta), (1, d));
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for r in 0..n {
            let row = &self.nodes[x.0].value[r * d..(r + 1) * d];
            let mu: f64 = row.iter().map(|v| v.dbl()).sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v.dbl() - mu).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::cast(rs);
            for c in 0..d {
                let xh = T::cast((row[c].dbl() - mu) * rs);
                xhat[r * d + c] = xh;
                out[r * d + c] = self.nodes[gamma.0].value[c] * xh + self.nodes[beta.0].value[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(vec![n, d], out, ng, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| T::cast(gelu_f64(x.dbl())))
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, ng, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| T::cast(sigmoid_f64(x.dbl())))
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, ng, Op::Sigmoid(a))
    }

    /// Numerically stable binary cross-entropy on logits, reduced to a scalar
    /// as a weighted mean (weights normalized by their sum; pass all-ones for
    /// a plain mean).
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor<T>, weights: &Tensor<T>) -> NodeId {
        let n = self.nodes[logits.0].value.len();
        assert_eq!(targets.len(), n, "targets length");
        assert_eq!(weights.len(), n, "weights length");
        let wsum: f64 = weights.data.iter().map(|w| w.dbl()).sum();
        assert!(wsum > 0.0, "weights must not sum to zero");
        let mut acc = 0f64;
        for i in 0..n {
            let x = self.nodes[logits.0].value[i].dbl();
            let y = targets.data[i].dbl();
            // max(x, 0) - x*y + ln(1 + exp(-|x|))
            let l = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            acc += weights.data[i].dbl() * l;
        }
        let ng = self.needs(logits);
        self.push(
            vec![1, 1],
            vec![T::cast(acc / wsum)],
            ng,
            Op::BceWithLogits {
                logits,
                targets: targets.data.clone(),
                weights: weights.data.clone(),
                weight_sum: wsum,
            },
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// q: [n_q, h*dh], k: [n_k, h*dh], v: [n_k, h*dh] -> [n_q, h*dh].
    /// Heads are contiguous column blocks. Scores are scaled by 1/sqrt(dh).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> NodeId {
        let (n_q, dq) = self.rc(q);
        let (n_k, dk) = self.rc(k);
        let (n_v, dv) = self.rc(v);
        assert_eq!(dq, dk, "q/k width");
        assert_eq!(dq, dv, "q/v width");
        assert_eq!(n_k, n_v, "k/v rows");
        assert!(n_heads > 0 && dq % n_heads == 0, "width {dq} not divisible by {n_heads} heads");
        let dh = dq / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = vec![T::zero(); n_q * dq];
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * dh;
            // Scores and softmax in f64 per query row.
            let mut p = vec![T::zero(); n_q * n_k];
            for iq in 0..n_q {
                let qrow = &self.nodes[q.0].value[iq * dq + off..iq * dq + off + dh];
                let mut scores = vec![0f64; n_k];
                for ik in 0..n_k {
                    let krow = &self.nodes[k.0].value[ik * dk + off..ik * dk + off + dh];
                    let mut s = 0f64;
                    for c in 0..dh {
                        s += qrow[c].dbl() * krow[c].dbl();
                    }
                    scores[ik] = s * scale;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0f64;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for ik in 0..n_k {
                    p[iq * n_k + ik] = T::cast(scores[ik] / z);
                }
                // O = P V for this row.
                for c in 0..dh {
                    let mut acc = 0f64;
                    for ik in 0..n_k {
                        acc += p[iq * n_k + ik].dbl() * self.nodes[v.0].value[ik * dv + off + c].dbl();
                    }
                    out[iq * dq + off + c] = T::cast(acc);
                }
            }
            probs.push(p);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(vec![n_q, dq], out, ng, Op::Attention { q, k, v, n_heads, probs })
    }

    /// 3D convolution with cubic kernel, per-axis stride, and zero padding.
    ///
    /// x: [c_in, d, h, w], w: [c_out, c_in * k^3], b: [1, c_out].
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize, stride: [usize; 3], pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "conv3d input must be [c, d, h, w]");
        let (c_in, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wcols) = self.rc(w);
        assert_eq!(wcols, c_in * k * k * k, "weight cols");
        assert_eq!(self.rc(b), (1, c_out));
        assert!(stride.iter().all(|&s| s >= 1));
        let od = (d + 2 * pad).checked_sub(k).expect("kernel larger than padded input") / stride[0] + 1;
        let oh = (h + 2 * pad - k) / stride[1] + 1;
        let ow = (wd + 2 * pad - k) / stride[2] + 1;
        let dims = ConvDims {
            c_in,
            c_out,
            in_d: [d, h, wd],
            out_d: [od, oh, ow],
            k,
            stride,
            pad,
        };

        let xin = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); c_out * od * oh * ow];
        for co in 0..c_out {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bv[co].dbl();
                        for ci in 0..c_in {
                            for kd in 0..k {
                                let id = (zd * stride[0] + kd) as isize - pad as isize;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                for kh in 0..k {
                                    let ih = (zh * stride[1] + kh) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kw in 0..k {
                                        let iw = (zw * stride[2] + kw) as isize - pad as isize;
                                        if iw < 0 || iw >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((ci * d + id as usize) * h + ih as usize) * wd + iw as usize;
                                        let wi = co * wcols + ((ci * k + kd) * k + kh) * k + kw;
                                        acc += xin[xi].dbl() * wv[wi].dbl();
                                    }
                                }
                            }
                        }
                        out[((co * od + zd) * oh + zh) * ow + zw] = T::cast(acc);
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(vec![c_out, od, oh, ow], out, ng, Op::Conv3d { x, w, b, dims })
    }

    /// Flatten a [c, d, h, w] feature volume into [d*h*w, c] tokens, spatial
    /// position slowest-to-fastest as (d, h, w).
    pub fn chw_to_tokens(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "expected [c, d, h, w]");
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let spatial = d * h * w;
        let mut out = vec![T::zero(); spatial * c];
        for ci in 0..c {
            for sp in 0..spatial {
                out[sp * c + ci] = self.nodes[a.0].value[ci * spatial + sp];
            }
        }
        let ng = self.needs(a);
        self.push(vec![spatial, c], out, ng, Op::ChwToTokens(a))
    }

    /// Linear layer: x [n, in] * w [in, out] + b [1, out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    /// Backpropagate from a scalar node. Gradients accumulate on every node
    /// with `needs_grad`, including the trainable leaves.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward target must be scalar");
        assert!(self.needs(loss), "loss does not depend on any trainable leaf");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let go = self.nodes[i].grad.take().unwrap();
            self.step_backward(i, &go);
            self.nodes[i].grad = Some(go);
        }
    }

    fn accum(&mut self, id: NodeId, delta: &[T]) {
        if !self.needs(id) {
            return;
        }
        let node = &mut self.nodes[id.0];
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn step_backward(&mut self, i: usize, go: &[T]) {
        // Borrow dance: clone the cheap bits out of the op, read values
        // immutably, then accumulate.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b, bc) => {
                self.accum(a, go);
                match bc {
                    Broadcast::Same => self.accum(b, go),
                    Broadcast::Row => {
                        let (n, d) = self.rc(a);
                        let mut gb = vec![0f64; d];
                        for r in 0..n {
                            for c in 0..d {
                                gb[c] += go[r * d + c].dbl();
                            }
                        }
                        let gb: Vec<T> = gb.iter().map(|&x| T::cast(x)).collect();
                        self.accum(b, &gb);
                    }
                    Broadcast::Scalar => {
                        let s: f64 = go.iter().map(|x| x.dbl()).sum();
                        self.accum(b, &[T::cast(s)]);
                    }
                }
            }
            &Op::Mul(a, b, bc) => {
                let (n, d) = self.rc(a);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let mut ga = vec![T::zero(); n * d];
                for r in 0..n {
                    for c in 0..d {
                        let bvi = match bc {
                            Broadcast::Same => bv[r * d + c],
                            Broadcast::Row => bv[c],
                            Broadcast::Scalar => bv[0],
                        };
                        ga[r * d + c] = go[r * d + c] * bvi;
                    }
                }
                self.accum(a, &ga);
                match bc {
                    Broadcast::Same => {
                        let gb: Vec<T> = go.iter().zip(&av).map(|(&g, &x)| g * x).collect();
                        self.accum(b, &gb);
                    }
                    Broadcast::Row => {
                        let mut gb = vec![0f64; d];
                        for r in 0..n {
                            for c in 0..d {
                                gb[c] += go[r * d + c].dbl() * av[r * d + c].dbl();
                            }
                        }
                        let gb: Vec<T> = gb.iter().map(|&x| T::cast(x)).collect();
                        self.accum(b, &gb);
                    }
                    Broadcast::Scalar => {
                        let s: f64 = go.iter().zip(&av).map(|(g, x)| g.dbl() * x.dbl()).sum();
                        self.accum(b, &[T::cast(s)]);
                    }
                }
            }
            &Op::Scale(a, c) => {
                let cv = T::cast(c);
                let ga: Vec<T> = go.iter().map(|&g| g * cv).collect();
                self.accum(a, &ga);
            }
            &Op::AddScalar(a) => self.accum(a, go),
            &Op::MatMul(a, b) => {
                let (n, k) = self.rc(a);
                let (_, m) = self.rc(b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    // dA = dC B^T
                    let mut ga = vec![T::zero(); n * k];
                    for r in 0..n {
                        for c in 0..k {
                            let mut acc = 0f64;
                            for j in 0..m {
                                acc += go[r * m + j].dbl() * bv[c * m + j].dbl();
                            }
                            ga[r * k + c] = T::cast(acc);
                        }
                    }
                    self.accum(a, &ga);
                }
                if self.needs(b) {
                    // dB = A^T dC
                    let mut gb = vec![T::zero(); k * m];
                    for r in 0..k {
                        for c in 0..m {
                            let mut acc = 0f64;
                            for j in 0..n {
                                acc += av[j * k + r].dbl() * go[j * m + c].dbl();
                            }
                            gb[r * m + c] = T::cast(acc);
                        }
                    }
                    self.accum(b, &gb);
                }
            }
            &Op::Transpose(a) => {
                let (n, m) = self.rc(a);
                let mut ga = vec![T::zero(); n * m];
                for r in 0..n {
                    for c in 0..m {
                        ga[r * m + c] = go[c * n + r];
                    }
                }
                self.accum(a, &ga);
            }
            &Op::ConcatCols(a, b) => {
                let (n, ca) = self.rc(a);
                let (_, cb) = self.rc(b);
                let mut ga = vec![T::zero(); n * ca];
                let mut gb = vec![T::zero(); n * cb];
                for r in 0..n {
                    ga[r * ca..(r + 1) * ca].copy_from_slice(&go[r * (ca + cb)..r * (ca + cb) + ca]);
                    gb[r * cb..(r + 1) * cb]
                        .copy_from_slice(&go[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            &Op::SliceCols(a, start) => {
                let (n, c) = self.rc(a);
                let len = self.nodes[i].shape[1];
                let mut ga = vec![T::zero(); n * c];
                for r in 0..n {
                    ga[r * c + start..r * c + start + len]
                        .copy_from_slice(&go[r * len..(r + 1) * len]);
                }
                self.accum(a, &ga);
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let idx = idx.clone();
                let (n, c) = self.rc(a);
                let mut ga = vec![T::zero(); n * c];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += go[r * c + j];
                    }
                }
                self.accum(a, &ga);
            }
            &Op::MeanRows(a) => {
                let (n, d) = self.rc(a);
                let inv = T::cast(1.0 / n as f64);
                let mut ga = vec![T::zero(); n * d];
                for r in 0..n {
                    for c in 0..d {
                        ga[r * d + c] = go[c] * inv;
                    }
                }
                self.accum(a, &ga);
            }
            Op::MaxRows(a, arg) => {
                let a = *a;
                let arg = arg.clone();
                let (n, d) = self.rc(a);
                let mut ga = vec![T::zero(); n * d];
                for (c, &r) in arg.iter().enumerate() {
                    ga[r * d + c] = go[c];
                }
                self.accum(a, &ga);
            }
            &Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len();
                let g = go[0] * T::cast(1.0 / n as f64);
                let ga = vec![g; n];
                self.accum(a, &ga);
            }
            &Op::SumAll(a) => {
                let n = self.nodes[a.0].value.len();
                let ga = vec![go[0]; n];
                self.accum(a, &ga);
            }
            &Op::Softmax(a) => {
                let (n, d) = self.rc(a);
                let p = self.nodes[i].value.clone();
                let mut ga = vec![T::zero(); n * d];
                for r in 0..n {
                    let mut dot = 0f64;
                    for c in 0..d {
                        dot += go[r * d + c].dbl() * p[r * d + c].dbl();
                    }
                    for c in 0..d {
                        ga[r * d + c] =
                            T::cast(p[r * d + c].dbl() * (go[r * d + c].dbl() - dot));
                    }
                }
                self.accum(a, &ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xhat = xhat.clone();
                let rstd = rstd.clone();
                let (n, d) = self.rc(x);
                let gv = self.nodes[gamma.0].value.clone();
                let mut gx = vec![T::zero(); n * d];
                let mut gg = vec![0f64; d];
                let mut gb = vec![0f64; d];
                for r in 0..n {
                    let mut mean_g = 0f64;
                    let mut mean_gx = 0f64;
                    for c in 0..d {
                        let gyl = go[r * d + c].dbl() * gv[c].dbl();
                        mean_g += gyl;
                        mean_gx += gyl * xhat[r * d + c].dbl();
                        gg[c] += go[r * d + c].dbl() * xhat[r * d + c].dbl();
                        gb[c] += go[r * d + c].dbl();
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    let rs = rstd[r].dbl();
                    for c in 0..d {
                        let gyl = go[r * d + c].dbl() * gv[c].dbl();
                        gx[r * d + c] =
                            T::cast(rs * (gyl - mean_g - xhat[r * d + c].dbl() * mean_gx));
                    }
                }
                self.accum(x, &gx);
                let gg: Vec<T> = gg.iter().map(|&v| T::cast(v)).collect();
                let gb: Vec<T> = gb.iter().map(|&v| T::cast(v)).collect();
                self.accum(gamma, &gg);
                self.accum(beta, &gb);
            }
            &Op::Gelu(a) => {
                let av = self.nodes[a.0].value.clone();
                let ga: Vec<T> = go
                    .iter()
                    .zip(&av)
                    .map(|(&g, &x)| T::cast(g.dbl() * gelu_grad_f64(x.dbl())))
                    .collect();
                self.accum(a, &ga);
            }
            &Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.clone();
                let ga: Vec<T> = go
                    .iter()
                    .zip(&yv)
                    .map(|(&g, &y)| {
                        let yd = y.dbl();
                        T::cast(g.dbl() * yd * (1.0 - yd))
                    })
                    .collect();
                self.accum(a, &ga);
            }
            Op::BceWithLogits { logits, targets, weights, weight_sum } => {
                let logits = *logits;
                let wsum = *weight_sum;
                let t = targets.clone();
                let w = weights.clone();
                let xv = self.nodes[logits.0].value.clone();
                let g0 = go[0].dbl();
                let ga: Vec<T> = xv
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let s = sigmoid_f64(x.dbl());
                        T::cast(g0 * w[j].dbl() * (s - t[j].dbl()) / wsum)
                    })
                    .collect();
                self.accum(logits, &ga);
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
                let probs = probs.clone();
                let (n_q, dq) = self.rc(q);
                let (n_k, _) = self.rc(k);
                let dh = dq / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.nodes[q.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                let mut gq = vec![T::zero(); n_q * dq];
                let mut gk = vec![T::zero(); n_k * dq];
                let mut gv = vec![T::zero(); n_k * dq];
                for h in 0..n_heads {
                    let off = h * dh;
                    let p = &probs[h];
                    // dV = P^T dO
                    for ik in 0..n_k {
                        for c in 0..dh {
                            let mut acc = 0f64;
                            for iq in 0..n_q {
                                acc += p[iq * n_k + ik].dbl() * go[iq * dq + off + c].dbl();
                            }
                            gv[ik * dq + off + c] = T::cast(acc);
                        }
                    }
                    // dS = P o (dP - rowsum(dP o P)), dP = dO V^T
                    let mut ds = vec![0f64; n_q * n_k];
                    for iq in 0..n_q {
                        let mut dot = 0f64;
                        for ik in 0..n_k {
                            let mut dp = 0f64;
                            for c in 0..dh {
                                dp += go[iq * dq + off + c].dbl() * vv[ik * dq + off + c].dbl();
                            }
                            ds[iq * n_k + ik] = dp;
                            dot += dp * p[iq * n_k + ik].dbl();
                        }
                        for ik in 0..n_k {
                            ds[iq * n_k + ik] =
                                p[iq * n_k + ik].dbl() * (ds[iq * n_k + ik] - dot);
                        }
                    }
                    // dQ = dS K * scale, dK = dS^T Q * scale
                    for iq in 0..n_q {
                        for c in 0..dh {
                            let mut acc = 0f64;
                            for ik in 0..n_k {
                                acc += ds[iq * n_k + ik] * kv[ik * dq + off + c].dbl();
                            }
                            gq[iq * dq + off + c] = T::cast(acc * scale);
                        }
                    }
                    for ik in 0..n_k {
                        for c in 0..dh {
                            let mut acc = 0f64;
                            for iq in 0..n_q {
                                acc += ds[iq * n_k + ik] * qv[iq * dq + off + c].dbl();
                            }
                            gk[ik * dq + off + c] = T::cast(acc * scale);
                        }
                    }
                }
                self.accum(q, &gq);
                self.accum(k, &gk);
                self.accum(v, &gv);
            }
            Op::Conv3d { x, w, b, dims } => {
                let (x, w, b) = (*x, *w, *b);
                let dm = *dims;
                let [d, h, wd] = dm.in_d;
                let [od, oh, ow] = dm.out_d;
                let (k, s, p) = (dm.k, dm.stride, dm.pad);
                let wcols = dm.c_in * k * k * k;
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                let mut gx = vec![0f64; dm.c_in * d * h * wd];
                let mut gw = vec![0f64; dm.c_out * wcols];
                let mut gb = vec![0f64; dm.c_out];
                for co in 0..dm.c_out {
                    for zd in 0..od {
                        for zh in 0..oh {
                            for zw in 0..ow {
                                let g = go[((co * od + zd) * oh + zh) * ow + zw].dbl();
                                gb[co] += g;
                                for ci in 0..dm.c_in {
                                    for kd in 0..k {
                                        let id = (zd * s[0] + kd) as isize - p as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        for kh in 0..k {
                                            let ih = (zh * s[1] + kh) as isize - p as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            for kw in 0..k {
                                                let iw = (zw * s[2] + kw) as isize - p as isize;
                                                if iw < 0 || iw >= wd as isize {
                                                    continue;
                                                }
                                                let xi = ((ci * d + id as usize) * h + ih as usize)
                                                    * wd
                                                    + iw as usize;
                                                let wi = co * wcols
                                                    + ((ci * k + kd) * k + kh) * k
                                                    + kw;
                                                gx[xi] += g * wv[wi].dbl();
                                                gw[wi] += g * xv[xi].dbl();
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let gx: Vec<T> = gx.iter().map(|&v| T::cast(v)).collect();
                let gw: Vec<T> = gw.iter().map(|&v| T::cast(v)).collect();
                let gb: Vec<T> = gb.iter().map(|&v| T::cast(v)).collect();
                self.accum(x, &gx);
                self.accum(w, &gw);
                self.accum(b, &gb);
            }
            &Op::ChwToTokens(a) => {
                let s = self.shape(a).to_vec();
                let (c, spatial) = (s[0], s[1] * s[2] * s[3]);
                let mut ga = vec![T::zero(); c * spatial];
                for ci in 0..c {
                    for sp in 0..spatial {
                        ga[ci * spatial + sp] = go[sp * c + ci];
                    }
                }
                self.accum(a, &ga);
            }
        }
    }
}

fn matmul_f64<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for r in 0..n {
        for c in 0..m {
            let mut acc = 0f64;
            for j in 0..k {
                acc += a[r * k + j].dbl() * b[j * m + c].dbl();
            }
            out[r * m + c] = T::cast(acc);
        }
    }
    out
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let mx = row.iter().map(|x| x.dbl()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0f64;
    let mut tmp = vec![0f64; row.len()];
    for (i, x) in row.iter().enumerate() {
        let e = (x.dbl() - mx).exp();
        tmp[i] = e;
        z += e;
    }
    for (o, e) in out.iter_mut().zip(tmp) {
        *o = T::cast(e / z);
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

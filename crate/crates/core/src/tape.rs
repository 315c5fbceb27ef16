//! Reverse-mode autodiff on a Wengert tape. Nodes are appended in execution
//! order (so node ids are already a topological order); `backward` walks them
//! in reverse, accumulating gradients. Ops record themselves only when some
//! input requires a gradient, so inference tapes carry no backward state.
//!
//! A tape is single-threaded by construction; independent tapes may run
//! concurrently.

use crate::error::Error;
use crate::kernels;
use crate::kernels::ScanSaved;
use crate::tensor::{Element, Tensor};
use crate::Result;

pub type NodeId = usize;

enum Op<E> {
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: E,
    },
    Relu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Silu {
        a: NodeId,
    },
    Exp {
        a: NodeId,
    },
    Log {
        a: NodeId,
    },
    Softplus {
        a: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dilation: usize,
        groups: usize,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<E>,
        istd: Vec<E>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<E>,
        istd: Vec<E>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        means: Vec<E>,
        istds: Vec<E>,
    },
    SoftmaxRows {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<u32>,
    },
    TimeMean {
        x: NodeId,
    },
    TimeMax {
        x: NodeId,
        arg: Vec<u32>,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    SliceChannels {
        x: NodeId,
        offset: usize,
    },
    Reshape {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    SsmScan {
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        dskip: NodeId,
        x: NodeId,
        saved: Box<ScanSaved<E>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Option<Op<E>>,
    requires_grad: bool,
}

pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// (n, c, l) view of a rank-2 or rank-3 shape; rank 2 is treated as l = 1.
fn ncl(shape: &[usize], what: &str) -> (usize, usize, usize) {
    match *shape {
        [n, c] => (n, c, 1),
        [n, c, l] => (n, c, l),
        _ => panic!("{what}: want rank 2/3, got {shape:?}"),
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// New leaf holding `t`. Gradients accumulate here iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(t, None, requires_grad)
    }

    /// Leaf that never receives gradients (inputs, dropout masks, ...).
    pub fn constant(&mut self, t: Tensor<E>) -> NodeId {
        self.push(t, None, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn grad_mut(&mut self, id: NodeId) -> Option<&mut [E]> {
        self.grads.get_mut(id).and_then(|g| g.as_deref_mut())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Option<Op<E>>, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value out of tape op #{}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn data(&self, id: NodeId) -> &[E] {
        self.nodes[id].value.data()
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let y: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &z)| x + z)
            .collect();
        let req = self.req(&[a, b]);
        self.push(
            Tensor::new(self.shape(a).to_vec(), y),
            req.then_some(Op::Add { a, b }),
            req,
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let y: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &z)| x * z)
            .collect();
        let req = self.req(&[a, b]);
        self.push(
            Tensor::new(self.shape(a).to_vec(), y),
            req.then_some(Op::Mul { a, b }),
            req,
        )
    }

    pub fn scale(&mut self, a: NodeId, c: E) -> NodeId {
        let y: Vec<E> = self.data(a).iter().map(|&x| x * c).collect();
        let req = self.req(&[a]);
        self.push(
            Tensor::new(self.shape(a).to_vec(), y),
            req.then_some(Op::Scale { a, c }),
            req,
        )
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(E) -> E, op: impl FnOnce() -> Op<E>) -> NodeId {
        let y: Vec<E> = self.data(a).iter().map(|&x| f(x)).collect();
        let req = self.req(&[a]);
        self.push(Tensor::new(self.shape(a).to_vec(), y), req.then(op), req)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(E::zero()), || Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, kernels::sigmoid, || Op::Sigmoid { a })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, kernels::silu, || Op::Silu { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), || Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), || Op::Log { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, kernels::softplus, || Op::Softplus { a })
    }

    // ── linear algebra ───────────────────────────────────────────────────

    /// y[n,o] = sum_k x[n,k] w[o,k] + b[o]; x: [n, k], w: [o, k].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (n, kx) = match *self.shape(x) {
            [n, k] => (n, k),
            ref s => panic!("linear: x must be rank 2, got {s:?}"),
        };
        let (o, kw) = match *self.shape(w) {
            [o, k] => (o, k),
            ref s => panic!("linear: w must be rank 2, got {s:?}"),
        };
        assert_eq!(kx, kw, "linear: x [{n},{kx}] vs w [{o},{kw}]");
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[o], "linear: bias shape");
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut y = vec![E::zero(); n * o];
        for i in 0..n {
            let xr = &xd[i * kx..][..kx];
            for j in 0..o {
                let wr = &wd[j * kx..][..kx];
                let mut acc = E::zero();
                for (xv, wv) in xr.iter().zip(wr) {
                    acc = acc + *xv * *wv;
                }
                y[i * o + j] = acc;
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for i in 0..n {
                for j in 0..o {
                    y[i * o + j] = y[i * o + j] + bd[j];
                }
            }
        }
        let req = self.req(&[x, w]) || b.is_some_and(|b| self.req(&[b]));
        self.push(
            Tensor::new(vec![n, o], y),
            req.then_some(Op::Linear { x, w, b }),
            req,
        )
    }

    /// Causal dilated conv; x: [n, c_in, l], w: [c_out, c_in/groups, k].
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dilation: usize,
        groups: usize,
    ) -> NodeId {
        let (n, c_in, l) = match *self.shape(x) {
            [n, c, l] => (n, c, l),
            ref s => panic!("conv1d: x must be rank 3, got {s:?}"),
        };
        let (c_out, cin_g, k) = match *self.shape(w) {
            [o, c, k] => (o, c, k),
            ref s => panic!("conv1d: w must be rank 3, got {s:?}"),
        };
        assert_eq!(
            cin_g,
            c_in / groups,
            "conv1d: w expects {cin_g} in-channels per group, x has {c_in} over {groups} groups"
        );
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[c_out], "conv1d: bias shape");
        }
        let y = kernels::conv1d_fwd(
            n,
            c_in,
            c_out,
            l,
            k,
            dilation,
            groups,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
        );
        let req = self.req(&[x, w]) || b.is_some_and(|b| self.req(&[b]));
        self.push(
            Tensor::new(vec![n, c_out, l], y),
            req.then_some(Op::Conv1d {
                x,
                w,
                b,
                dilation,
                groups,
            }),
            req,
        )
    }

    // ── normalization ────────────────────────────────────────────────────

    /// Train-mode batch norm: normalizes with batch statistics (gradient
    /// flows through them). Also returns (mean, biased var) per channel so
    /// the layer can maintain running stats. Needs n*l >= 2 per channel.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
    ) -> (NodeId, Vec<E>, Vec<E>) {
        let (n, c, l) = ncl(self.shape(x), "batch_norm");
        assert!(
            n * l >= 2,
            "batch_norm train: n*l = {} < 2 per channel",
            n * l
        );
        assert_eq!(self.shape(gamma), &[c], "batch_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "batch_norm: beta shape");
        let (mean, var) = kernels::channel_moments(n, c, l, self.data(x));
        let istd: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let y = kernels::bn_normalize(
            n,
            c,
            l,
            self.data(x),
            &mean,
            &istd,
            self.data(gamma),
            self.data(beta),
        );
        let req = self.req(&[x, gamma, beta]);
        let op = req.then(|| Op::BnTrain {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            istd,
        });
        let id = self.push(Tensor::new(self.shape(x).to_vec(), y), op, req);
        (id, mean, var)
    }

    /// Eval-mode batch norm: a per-channel affine map using the given
    /// (running) statistics; they are constants to the gradient.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[E],
        var: &[E],
        eps: E,
    ) -> NodeId {
        let (n, c, l) = ncl(self.shape(x), "batch_norm");
        assert_eq!(mean.len(), c, "batch_norm eval: mean len");
        assert_eq!(var.len(), c, "batch_norm eval: var len");
        let istd: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let y = kernels::bn_normalize(
            n,
            c,
            l,
            self.data(x),
            mean,
            &istd,
            self.data(gamma),
            self.data(beta),
        );
        let req = self.req(&[x, gamma, beta]);
        let op = req.then(|| Op::BnEval {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            istd,
        });
        self.push(Tensor::new(self.shape(x).to_vec(), y), op, req)
    }

    /// Layer norm over the channel axis at each (n, t) position.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: E) -> NodeId {
        let (n, c, l) = ncl(self.shape(x), "layer_norm");
        assert_eq!(self.shape(gamma), &[c], "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "layer_norm: beta shape");
        let (y, means, istds) = kernels::ln_fwd(
            n,
            c,
            l,
            self.data(x),
            self.data(gamma),
            self.data(beta),
            eps,
        );
        let req = self.req(&[x, gamma, beta]);
        let op = req.then_some(Op::LayerNorm {
            x,
            gamma,
            beta,
            means,
            istds,
        });
        self.push(Tensor::new(self.shape(x).to_vec(), y), op, req)
    }

    // ── shape / reduction ────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let k = *self.shape(x).last().expect("softmax: empty shape");
        let y = kernels::softmax_rows(k, self.data(x));
        let req = self.req(&[x]);
        self.push(
            Tensor::new(self.shape(x).to_vec(), y),
            req.then_some(Op::SoftmaxRows { x }),
            req,
        )
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, s: usize) -> NodeId {
        let (n, c, l) = match *self.shape(x) {
            [n, c, l] => (n, c, l),
            ref sh => panic!("maxpool: x must be rank 3, got {sh:?}"),
        };
        let (y, arg) = kernels::maxpool_fwd(n, c, l, k, s, self.data(x));
        let lo = (l - k) / s + 1;
        let req = self.req(&[x]);
        self.push(
            Tensor::new(vec![n, c, lo], y),
            req.then_some(Op::MaxPool { x, arg }),
            req,
        )
    }

    /// Mean over the time axis: [n, c, l] -> [n, c].
    pub fn time_mean(&mut self, x: NodeId) -> NodeId {
        let (n, c, l) = match *self.shape(x) {
            [n, c, l] => (n, c, l),
            ref sh => panic!("time_mean: x must be rank 3, got {sh:?}"),
        };
        let xd = self.data(x);
        let lm = E::from_f64(l as f64);
        let mut y = vec![E::zero(); n * c];
        for row in 0..n * c {
            let mut acc = E::zero();
            for &v in &xd[row * l..][..l] {
                acc = acc + v;
            }
            y[row] = acc / lm;
        }
        let req = self.req(&[x]);
        self.push(
            Tensor::new(vec![n, c], y),
            req.then_some(Op::TimeMean { x }),
            req,
        )
    }

    /// Max over the time axis: [n, c, l] -> [n, c]; first index wins ties.
    pub fn time_max(&mut self, x: NodeId) -> NodeId {
        let (n, c, l) = match *self.shape(x) {
            [n, c, l] => (n, c, l),
            ref sh => panic!("time_max: x must be rank 3, got {sh:?}"),
        };
        let xd = self.data(x);
        let mut y = vec![E::zero(); n * c];
        let mut arg = vec![0u32; n * c];
        for row in 0..n * c {
            let xr = &xd[row * l..][..l];
            let mut best = xr[0];
            let mut bi = 0usize;
            for (t, &v) in xr.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bi = t;
                }
            }
            y[row] = best;
            arg[row] = bi as u32;
        }
        let req = self.req(&[x]);
        self.push(
            Tensor::new(vec![n, c], y),
            req.then_some(Op::TimeMax { x, arg }),
            req,
        )
    }

    /// [n, f1] ++ [n, f2] -> [n, f1+f2].
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, fa) = match *self.shape(a) {
            [n, f] => (n, f),
            ref s => panic!("concat_cols: a must be rank 2, got {s:?}"),
        };
        let (nb, fb) = match *self.shape(b) {
            [n, f] => (n, f),
            ref s => panic!("concat_cols: b must be rank 2, got {s:?}"),
        };
        assert_eq!(na, nb, "concat_cols: row counts {na} vs {nb}");
        let mut y = vec![E::zero(); na * (fa + fb)];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..na {
            y[i * (fa + fb)..][..fa].copy_from_slice(&ad[i * fa..][..fa]);
            y[i * (fa + fb) + fa..][..fb].copy_from_slice(&bd[i * fb..][..fb]);
        }
        let req = self.req(&[a, b]);
        self.push(
            Tensor::new(vec![na, fa + fb], y),
            req.then_some(Op::ConcatCols { a, b }),
            req,
        )
    }

    /// Channel slice of [n, c, l]: channels [offset, offset+len).
    pub fn slice_channels(&mut self, x: NodeId, offset: usize, len: usize) -> NodeId {
        let (n, c, l) = match *self.shape(x) {
            [n, c, l] => (n, c, l),
            ref s => panic!("slice_channels: x must be rank 3, got {s:?}"),
        };
        assert!(
            offset + len <= c,
            "slice_channels: [{offset}, {}) out of {c}",
            offset + len
        );
        let xd = self.data(x);
        let mut y = vec![E::zero(); n * len * l];
        for i in 0..n {
            for ci in 0..len {
                y[(i * len + ci) * l..][..l].copy_from_slice(&xd[(i * c + offset + ci) * l..][..l]);
            }
        }
        let req = self.req(&[x]);
        self.push(
            Tensor::new(vec![n, len, l], y),
            req.then_some(Op::SliceChannels { x, offset }),
            req,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.nodes[x].value.numel(),
            "reshape: {:?} -> {shape:?}",
            self.shape(x)
        );
        let y = Tensor::new(shape, self.data(x).to_vec());
        let req = self.req(&[x]);
        self.push(y, req.then_some(Op::Reshape { x }), req)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = E::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        let req = self.req(&[x]);
        self.push(Tensor::scalar(acc), req.then_some(Op::SumAll { x }), req)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel();
        let mut acc = E::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        let req = self.req(&[x]);
        self.push(
            Tensor::scalar(acc / E::from_f64(n as f64)),
            req.then_some(Op::MeanAll { x }),
            req,
        )
    }

    // ── fused ops ────────────────────────────────────────────────────────

    /// Fused selective scan; see `kernels::ssm_scan_fwd` for semantics.
    /// delta/x: [n, d, l]; b/c: [n, s, l]; a: [d, s]; dskip: [d].
    pub fn ssm_scan(
        &mut self,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        dskip: NodeId,
        x: NodeId,
    ) -> NodeId {
        let (n, d, l) = match *self.shape(delta) {
            [n, d, l] => (n, d, l),
            ref s => panic!("ssm_scan: delta must be rank 3, got {s:?}"),
        };
        let s_state = match *self.shape(a) {
            [ad, s] => {
                assert_eq!(ad, d, "ssm_scan: a rows {ad} != d_inner {d}");
                s
            }
            ref sh => panic!("ssm_scan: a must be rank 2, got {sh:?}"),
        };
        assert_eq!(self.shape(x), &[n, d, l], "ssm_scan: x shape");
        assert_eq!(self.shape(b), &[n, s_state, l], "ssm_scan: b shape");
        assert_eq!(self.shape(c), &[n, s_state, l], "ssm_scan: c shape");
        assert_eq!(self.shape(dskip), &[d], "ssm_scan: dskip shape");
        let req = self.req(&[delta, a, b, c, dskip, x]);
        let (y, saved) = kernels::ssm_scan_fwd(
            n,
            d,
            s_state,
            l,
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(dskip),
            self.data(x),
            req,
        );
        let op = saved.map(|sv| Op::SsmScan {
            delta,
            a,
            b,
            c,
            dskip,
            x,
            saved: Box::new(sv),
        });
        self.push(Tensor::new(vec![n, d, l], y), op, req)
    }

    /// Mean cross-entropy over the batch, fused with log-sum-exp.
    /// logits: [n, k]; targets: n class indices. Output is scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => panic!("cross_entropy: logits must be rank 2, got {s:?}"),
        };
        assert_eq!(
            targets.len(),
            n,
            "cross_entropy: {n} rows vs {} targets",
            targets.len()
        );
        let (loss, probs) = kernels::cross_entropy_fwd(k, self.data(logits), targets);
        let req = self.req(&[logits]);
        let op = req.then(|| Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        });
        self.push(Tensor::scalar(loss), op, req)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Accumulates dloss/dleaf into every grad-requiring leaf. Repeated
    /// calls add up; `zero_grads` resets. Loss must be scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.grads.resize(self.nodes.len(), None);
        add_to(&self.nodes, &mut self.grads, loss, &[E::one()], true);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                None => grads[i] = Some(g), // leaf: keep accumulated grad
                Some(op) => backward_op(nodes, grads, i, op, &g),
            }
        }
        Ok(())
    }
}

/// Accumulate `src` into the grad slot of `id` (no-op for non-grad nodes;
/// `force` is used to seed the loss node itself).
fn add_to<E: Element>(
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
    id: NodeId,
    src: &[E],
    force: bool,
) {
    if !force && !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![E::zero(); nodes[id].value.numel()]);
    debug_assert_eq!(slot.len(), src.len());
    for (a, &b) in slot.iter_mut().zip(src) {
        *a = *a + b;
    }
}

#[allow(clippy::too_many_lines)]
fn backward_op<E: Element>(
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
    out: NodeId,
    op: &Op<E>,
    g: &[E],
) {
    let val = |id: NodeId| nodes[id].value.data();
    let shape = |id: NodeId| nodes[id].value.shape();
    match op {
        Op::Add { a, b } => {
            add_to(nodes, grads, *a, g, false);
            add_to(nodes, grads, *b, g, false);
        }
        Op::Mul { a, b } => {
            let da: Vec<E> = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
            let db: Vec<E> = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
            add_to(nodes, grads, *a, &da, false);
            add_to(nodes, grads, *b, &db, false);
        }
        Op::Scale { a, c } => {
            let da: Vec<E> = g.iter().map(|&gv| gv * *c).collect();
            add_to(nodes, grads, *a, &da, false);
        }
        Op::Relu { a } => {
            let da: Vec<E> = g
                .iter()
                .zip(val(*a))
                .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                .collect();
            add_to(nodes, grads, *a, &da, false);
        }
        Op::Sigmoid { a } => {
            let da: Vec<E> = g
                .iter()
                .zip(val(out))
                .map(|(&gv, &yv)| gv * yv * (E::one() - yv))
                .collect();
            add_to(nodes, grads, *a, &da, false);
        }
        Op::Silu { a } => {
            let da: Vec<E> = g
                .iter()
                .zip(val(*a))
                .map(|(&gv, &xv)| gv * kernels::silu_grad(xv))
                .collect();
            add_to(nodes, grads, *a, &da, false);
        }
        Op::Exp { a } => {
            let da: Vec<E> = g.iter().zip(val(out)).map(|(&gv, &yv)| gv * yv).collect();
            add_to(nodes, grads, *a, &da, false);
        }
        Op::Log { a } => {
            let da: Vec<E> = g.iter().zip(val(*a)).map(|(&gv, &xv)| gv / xv).collect();
            add_to(nodes, grads, *a, &da, false);
        }
        Op::Softplus { a } => {
            let da: Vec<E> = g
                .iter()
                .zip(val(*a))
                .map(|(&gv, &xv)| gv * kernels::sigmoid(xv))
                .collect();
            add_to(nodes, grads, *a, &da, false);
        }
        Op::Linear { x, w, b } => {
            let (n, k) = (shape(*x)[0], shape(*x)[1]);
            let o = shape(*w)[0];
            let (xd, wd) = (val(*x), val(*w));
            let mut dx = vec![E::zero(); n * k];
            let mut dw = vec![E::zero(); o * k];
            for i in 0..n {
                for j in 0..o {
                    let gv = g[i * o + j];
                    let wr = &wd[j * k..][..k];
                    let xr = &xd[i * k..][..k];
                    let dxr = &mut dx[i * k..][..k];
                    for t in 0..k {
                        dxr[t] = dxr[t] + gv * wr[t];
                    }
                    let dwr = &mut dw[j * k..][..k];
                    for t in 0..k {
                        dwr[t] = dwr[t] + gv * xr[t];
                    }
                }
            }
            add_to(nodes, grads, *x, &dx, false);
            add_to(nodes, grads, *w, &dw, false);
            if let Some(b) = b {
                let mut db = vec![E::zero(); o];
                for i in 0..n {
                    for j in 0..o {
                        db[j] = db[j] + g[i * o + j];
                    }
                }
                add_to(nodes, grads, *b, &db, false);
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            dilation,
            groups,
        } => {
            let (n, c_in, l) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
            let (c_out, k) = (shape(*w)[0], shape(*w)[2]);
            let (dx, dw, db) = kernels::conv1d_bwd(
                n,
                c_in,
                c_out,
                l,
                k,
                *dilation,
                *groups,
                val(*x),
                val(*w),
                b.is_some(),
                g,
            );
            add_to(nodes, grads, *x, &dx, false);
            add_to(nodes, grads, *w, &dw, false);
            if let (Some(b), Some(db)) = (b, db) {
                add_to(nodes, grads, *b, &db, false);
            }
        }
        Op::BnTrain {
            x,
            gamma,
            beta,
            mean,
            istd,
        } => {
            let (n, c, l) = ncl(shape(*x), "batch_norm bwd");
            let (dx, dgamma, dbeta) =
                kernels::bn_train_bwd(n, c, l, val(*x), mean, istd, val(*gamma), g);
            add_to(nodes, grads, *x, &dx, false);
            add_to(nodes, grads, *gamma, &dgamma, false);
            add_to(nodes, grads, *beta, &dbeta, false);
        }
        Op::BnEval {
            x,
            gamma,
            beta,
            mean,
            istd,
        } => {
            let (n, c, l) = ncl(shape(*x), "batch_norm bwd");
            let (dx, dgamma, dbeta) =
                kernels::bn_eval_bwd(n, c, l, val(*x), mean, istd, val(*gamma), g);
            add_to(nodes, grads, *x, &dx, false);
            add_to(nodes, grads, *gamma, &dgamma, false);
            add_to(nodes, grads, *beta, &dbeta, false);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            means,
            istds,
        } => {
            let (n, c, l) = ncl(shape(*x), "layer_norm bwd");
            let (dx, dgamma, dbeta) =
                kernels::ln_bwd(n, c, l, val(*x), means, istds, val(*gamma), g);
            add_to(nodes, grads, *x, &dx, false);
            add_to(nodes, grads, *gamma, &dgamma, false);
            add_to(nodes, grads, *beta, &dbeta, false);
        }
        Op::SoftmaxRows { x } => {
            let k = *shape(out).last().unwrap();
            let y = val(out);
            let mut dx = vec![E::zero(); y.len()];
            for r in 0..y.len() / k {
                let yr = &y[r * k..][..k];
                let gr = &g[r * k..][..k];
                let mut s = E::zero();
                for (yv, gv) in yr.iter().zip(gr) {
                    s = s + *yv * *gv;
                }
                for t in 0..k {
                    dx[r * k + t] = yr[t] * (gr[t] - s);
                }
            }
            add_to(nodes, grads, *x, &dx, false);
        }
        Op::MaxPool { x, arg } => {
            let (n, c, l) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
            let lo = shape(out)[2];
            let dx = kernels::maxpool_bwd(n, c, l, lo, arg, g);
            add_to(nodes, grads, *x, &dx, false);
        }
        Op::TimeMean { x } => {
            let (n, c, l) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
            let lm = E::from_f64(l as f64);
            let mut dx = vec![E::zero(); n * c * l];
            for row in 0..n * c {
                let gv = g[row] / lm;
                for t in 0..l {
                    dx[row * l + t] = gv;
                }
            }
            add_to(nodes, grads, *x, &dx, false);
        }
        Op::TimeMax { x, arg } => {
            let (n, c, l) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
            let mut dx = vec![E::zero(); n * c * l];
            for row in 0..n * c {
                dx[row * l + arg[row] as usize] = g[row];
            }
            add_to(nodes, grads, *x, &dx, false);
        }
        Op::ConcatCols { a, b } => {
            let (n, fa) = (shape(*a)[0], shape(*a)[1]);
            let fb = shape(*b)[1];
            let mut da = vec![E::zero(); n * fa];
            let mut db = vec![E::zero(); n * fb];
            for i in 0..n {
                da[i * fa..][..fa].copy_from_slice(&g[i * (fa + fb)..][..fa]);
                db[i * fb..][..fb].copy_from_slice(&g[i * (fa + fb) + fa..][..fb]);
            }
            add_to(nodes, grads, *a, &da, false);
            add_to(nodes, grads, *b, &db, false);
        }
        Op::SliceChannels { x, offset } => {
            let (n, c, l) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
            let len = shape(out)[1];
            let mut dx = vec![E::zero(); n * c * l];
            for i in 0..n {
                for ci in 0..len {
                    dx[(i * c + offset + ci) * l..][..l]
                        .copy_from_slice(&g[(i * len + ci) * l..][..l]);
                }
            }
            add_to(nodes, grads, *x, &dx, false);
        }
        Op::Reshape { x } => {
            add_to(nodes, grads, *x, g, false);
        }
        Op::SumAll { x } => {
            let dx = vec![g[0]; nodes[*x].value.numel()];
            add_to(nodes, grads, *x, &dx, false);
        }
        Op::MeanAll { x } => {
            let n = nodes[*x].value.numel();
            let dx = vec![g[0] / E::from_f64(n as f64); n];
            add_to(nodes, grads, *x, &dx, false);
        }
        Op::SsmScan {
            delta,
            a,
            b,
            c,
            dskip,
            x,
            saved,
        } => {
            let (n, d, l) = (shape(*delta)[0], shape(*delta)[1], shape(*delta)[2]);
            let s = shape(*a)[1];
            let gr = kernels::ssm_scan_bwd(
                n,
                d,
                s,
                l,
                val(*delta),
                val(*a),
                val(*b),
                val(*c),
                val(*dskip),
                val(*x),
                saved,
                g,
            );
            add_to(nodes, grads, *delta, &gr.ddelta, false);
            add_to(nodes, grads, *a, &gr.da, false);
            add_to(nodes, grads, *b, &gr.db, false);
            add_to(nodes, grads, *c, &gr.dc, false);
            add_to(nodes, grads, *dskip, &gr.ddskip, false);
            add_to(nodes, grads, *x, &gr.dx, false);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let k = shape(*logits)[1];
            let n = targets.len();
            let nm = E::from_f64(n as f64);
            let mut dl = vec![E::zero(); probs.len()];
            for (i, &t) in targets.iter().enumerate() {
                for j in 0..k {
                    let ind = if j == t { E::one() } else { E::zero() };
                    dl[i * k + j] = g[0] * (probs[i * k + j] - ind) / nm;
                }
            }
            add_to(nodes, grads, *logits, &dl, false);
        }
    }
}

// ── gradient checking ────────────────────────────────────────────────────

/// Central-difference gradient check of a scalar-valued tape function
/// against the analytic backward. Returns the worst relative error
/// |analytic - numeric| / max(1, |analytic|, |numeric|) over all coordinates.
/// Double precision only.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, h: f64) -> f64
where
    F: FnMut(&mut Tape<f64>, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xid);
    assert_eq!(
        tape.value(loss).numel(),
        1,
        "grad_check: f must be scalar-valued"
    );
    tape.backward(loss).expect("grad_check backward");
    let analytic = tape
        .grad(xid)
        .expect("grad_check: loss does not depend on x")
        .to_vec();
    drop(tape);

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval_scalar(&mut f, &probe);
        probe.data_mut()[i] = orig - h;
        let fm = eval_scalar(&mut f, &probe);
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

fn eval_scalar<F>(f: &mut F, x: &Tensor<f64>) -> f64
where
    F: FnMut(&mut Tape<f64>, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), false);
    let loss = f(&mut tape, xid);
    tape.value(loss).data()[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0]), true);
        let y = tape.sigmoid(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shared_node_grads_accumulate_in_dag() {
        // y = x*x + x at x=3 -> dy/dx = 2x + 1 = 7
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[3.0]), true);
        let xx = tape.mul(x, x);
        let y = tape.add(xx, x);
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 7.0).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_doubles_then_zero_grads_resets() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[2.0]), true);
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        let g1 = tape.grad(x).unwrap()[0];
        tape.backward(y).unwrap();
        let g2 = tape.grad(x).unwrap()[0];
        assert!((g2 - 2.0 * g1).abs() < 1e-15);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(y).unwrap();
        assert!(
            (tape.grad(x).unwrap()[0] - g1).abs() < 1e-15,
            "replay after zero matches"
        );
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), true);
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(crate::Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        // sum(softmax(x)) == 1 identically, so the gradient vanishes.
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.3, -1.2, 2.0, 0.0]), true);
        let x2 = tape.reshape(x, vec![1, 4]);
        let y = tape.softmax_rows(x2);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        for &gv in tape.grad(x).unwrap() {
            assert!(gv.abs() < 1e-12, "grad {gv}");
        }
    }

    #[test]
    fn reshape_slice_concat_round_trip_bit_exact() {
        let data = [0.5f64, -1.5, 2.25, 3.125, -0.875, 9.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 3], data.to_vec()));
        let lo = tape.slice_channels(x, 0, 1);
        let hi = tape.slice_channels(x, 1, 1);
        let lo2 = tape.reshape(lo, vec![1, 3]);
        let hi2 = tape.reshape(hi, vec![1, 3]);
        let back = tape.concat_cols(lo2, hi2);
        assert_eq!(tape.value(back).data(), &data);
    }

    #[test]
    #[should_panic(expected = "mul: shape mismatch")]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t1(&[1.0, 2.0]));
        let b = tape.constant(t1(&[1.0, 2.0, 3.0]));
        tape.mul(a, b);
    }

    #[test]
    fn grad_check_relu_affine_chain() {
        // relu(w x + b) summed; random-ish 8-dim input, fixed weights.
        let w = Tensor::new(
            vec![3, 8],
            (0..24)
                .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
                .collect(),
        );
        let b = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        let x = Tensor::new(
            vec![1, 8],
            vec![0.5, -0.3, 1.2, 0.8, -1.1, 0.05, 0.33, -0.7],
        );
        let err = grad_check(
            |tape, xid| {
                let wid = tape.leaf(w.clone(), true);
                let bid = tape.leaf(b.clone(), true);
                let y = tape.linear(xid, wid, Some(bid));
                let r = tape.relu(y);
                tape.sum_all(r)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn grad_check_elementwise_ops() {
        let x = Tensor::from_vec(vec![0.7, -0.4, 1.9, -2.2, 0.01]);
        for (name, f) in [
            ("sigmoid", 0usize),
            ("silu", 1),
            ("exp", 2),
            ("softplus", 3),
            ("mul_self", 4),
        ] {
            let err = grad_check(
                move |tape: &mut Tape<f64>, xid: NodeId| {
                    let y = match f {
                        0 => tape.sigmoid(xid),
                        1 => tape.silu(xid),
                        2 => tape.exp(xid),
                        3 => tape.softplus(xid),
                        _ => tape.mul(xid, xid),
                    };
                    tape.sum_all(y)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-8, "{name}: rel err {err}");
        }
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let x = Tensor::new(vec![2, 3], vec![0.2, -0.6, 1.1, 2.0, 0.0, -1.0]);
        let err = grad_check(|tape, xid| tape.cross_entropy(xid, &[2, 0]), &x, 1e-5);
        assert!(err < 1e-9, "cross_entropy rel err {err}");

        let err = grad_check(
            |tape, xid| {
                let y = tape.softmax_rows(xid);
                let w = tape.constant(Tensor::new(
                    vec![2, 3],
                    vec![0.3, -1.0, 0.5, 0.9, 0.2, -0.4],
                ));
                let p = tape.mul(y, w);
                tape.sum_all(p)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-9, "softmax rel err {err}");
    }
}

//! Selective state-space machinery: zero-order-hold discretization, the
//! diagonal selective scan (sequential and blocked forms), and the gated
//! state-space block with its residual wrapper.
//!
//! Standalone functions use time-major layouts (`delta[l, d]`, `b/c[l, s]`,
//! `x/y[l, d]`, `abar/bbar[l, d, s]`) and exist as reference semantics; the
//! training path goes through the fused `Tape::ssm_scan` op, which is
//! channel-major. Tests pin the two against each other.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv1d, Dropout, LayerNorm, ParamId, ParamStore, RunCtx};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};

/// Chunk length for the blocked scan. Chosen so per-chunk state fits in
/// cache; the result is independent of the value up to rounding.
pub const SCAN_BLOCK: usize = 64;

/// Softplus-domain step-size init draws `dt ~ LogUniform(1e-3, 0.1)`.
pub const DT_INIT_MIN: f64 = 1e-3;
pub const DT_INIT_MAX: f64 = 0.1;

/// Zero-order hold: `abar = exp(delta * a)`, `bbar = delta * b`.
/// delta is `[l, d]`, a is `[d, s]`, b is `[l, s]`; both outputs are
/// `[l, d, s]`.
pub fn discretize<E: Element>(
    l: usize,
    d_inner: usize,
    n_state: usize,
    delta: &[E],
    a: &[E],
    b: &[E],
) -> (Vec<E>, Vec<E>) {
    assert_eq!(delta.len(), l * d_inner, "discretize: delta length");
    assert_eq!(a.len(), d_inner * n_state, "discretize: a length");
    assert_eq!(b.len(), l * n_state, "discretize: b length");
    let mut abar = vec![E::zero(); l * d_inner * n_state];
    let mut bbar = vec![E::zero(); l * d_inner * n_state];
    for t in 0..l {
        for d in 0..d_inner {
            let dt = delta[t * d_inner + d];
            let base = (t * d_inner + d) * n_state;
            for s in 0..n_state {
                abar[base + s] = (dt * a[d * n_state + s]).exp();
                bbar[base + s] = dt * b[t * n_state + s];
            }
        }
    }
    (abar, bbar)
}

/// Reference recurrence: per (d, s), `h_t = abar_t * h_{t-1} + bbar_t * x_t`,
/// `y[t, d] = dskip[d] * x[t, d] + sum_s c[t, s] * h_t`. States start at 0.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_sequential<E: Element>(
    l: usize,
    d_inner: usize,
    n_state: usize,
    abar: &[E],
    bbar: &[E],
    c: &[E],
    dskip: &[E],
    x: &[E],
) -> Vec<E> {
    assert_eq!(abar.len(), l * d_inner * n_state, "scan: abar length");
    assert_eq!(bbar.len(), l * d_inner * n_state, "scan: bbar length");
    assert_eq!(c.len(), l * n_state, "scan: c length");
    assert_eq!(dskip.len(), d_inner, "scan: dskip length");
    assert_eq!(x.len(), l * d_inner, "scan: x length");
    let mut y = vec![E::zero(); l * d_inner];
    for t in 0..l {
        for d in 0..d_inner {
            y[t * d_inner + d] = dskip[d] * x[t * d_inner + d];
        }
    }
    for d in 0..d_inner {
        for s in 0..n_state {
            let mut h = E::zero();
            for t in 0..l {
                let i = (t * d_inner + d) * n_state + s;
                h = abar[i] * h + bbar[i] * x[t * d_inner + d];
                y[t * d_inner + d] = y[t * d_inner + d] + c[t * n_state + s] * h;
            }
        }
    }
    y
}

/// Blocked evaluation of the same recurrence. The state update
/// `h -> a*h + b` forms a semigroup under `(a2, b2) ∘ (a1, b1) =
/// (a1*a2, a2*b1 + b2)`, so chunks of [`SCAN_BLOCK`] steps are first reduced
/// to one composite element each, chunk-boundary states come from a short
/// prefix pass over those composites, and chunk interiors expand
/// independently. Chunks could be reduced in parallel; the combination
/// order is fixed, so results match the sequential form up to rounding.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn selective_scan_parallel<E: Element>(
    l: usize,
    d_inner: usize,
    n_state: usize,
    abar: &[E],
    bbar: &[E],
    c: &[E],
    dskip: &[E],
    x: &[E],
) -> Vec<E> {
    assert_eq!(abar.len(), l * d_inner * n_state, "scan: abar length");
    assert_eq!(bbar.len(), l * d_inner * n_state, "scan: bbar length");
    assert_eq!(c.len(), l * n_state, "scan: c length");
    assert_eq!(dskip.len(), d_inner, "scan: dskip length");
    assert_eq!(x.len(), l * d_inner, "scan: x length");
    let mut y = vec![E::zero(); l * d_inner];
    for t in 0..l {
        for d in 0..d_inner {
            y[t * d_inner + d] = dskip[d] * x[t * d_inner + d];
        }
    }
    let nblk = l.div_ceil(SCAN_BLOCK).max(1);
    let mut entry = vec![E::zero(); nblk];
    for d in 0..d_inner {
        for s in 0..n_state {
            // pass 1: reduce each chunk to a composite (a, b) element
            let mut composite = Vec::with_capacity(nblk);
            for blk in 0..nblk {
                let (mut pa, mut pb) = (E::one(), E::zero());
                for t in blk * SCAN_BLOCK..((blk + 1) * SCAN_BLOCK).min(l) {
                    let i = (t * d_inner + d) * n_state + s;
                    let at = abar[i];
                    let bt = bbar[i] * x[t * d_inner + d];
                    pa = pa * at;
                    pb = at * pb + bt;
                }
                composite.push((pa, pb));
            }
            // pass 2: exclusive prefix gives the state entering each chunk
            let mut hb = E::zero();
            for blk in 0..nblk {
                entry[blk] = hb;
                hb = composite[blk].0 * hb + composite[blk].1;
            }
            // pass 3: expand chunk interiors from their entry states
            for blk in 0..nblk {
                let mut h = entry[blk];
                for t in blk * SCAN_BLOCK..((blk + 1) * SCAN_BLOCK).min(l) {
                    let i = (t * d_inner + d) * n_state + s;
                    h = abar[i] * h + bbar[i] * x[t * d_inner + d];
                    y[t * d_inner + d] = y[t * d_inner + d] + c[t * n_state + s] * h;
                }
            }
        }
    }
    y
}

/// Dimensions of one gated state-space block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
}

impl MambaDims {
    pub fn new(d_model: usize, d_state: usize, d_conv: usize, expand: usize) -> Self {
        MambaDims {
            d_model,
            d_inner: expand * d_model,
            d_state,
            d_conv,
            dt_rank: d_model.div_ceil(16),
        }
    }
}

/// Gated selective state-space block. Input and output are `[n, d_model, l]`;
/// everything inside is causal, so output at time t only sees inputs `..=t`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub dims: MambaDims,
    in_proj: Conv1d,
    conv: Conv1d,
    x_proj: Conv1d,
    dt_proj: Conv1d,
    out_proj: Conv1d,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl MambaBlock {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dims: MambaDims,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let MambaDims {
            d_model,
            d_inner,
            d_state,
            d_conv,
            dt_rank,
        } = dims;
        let in_proj = Conv1d::init(
            store,
            &format!("{name}.in_proj"),
            d_model,
            2 * d_inner,
            1,
            1,
            1,
            false,
            rng,
        );
        let conv = Conv1d::init(
            store,
            &format!("{name}.conv"),
            d_inner,
            d_inner,
            d_conv,
            1,
            d_inner,
            true,
            rng,
        );
        let x_proj = Conv1d::init(
            store,
            &format!("{name}.x_proj"),
            d_inner,
            dt_rank + 2 * d_state,
            1,
            1,
            1,
            false,
            rng,
        );
        let dt_proj = Conv1d::init(
            store,
            &format!("{name}.dt_proj"),
            dt_rank,
            d_inner,
            1,
            1,
            1,
            true,
            rng,
        );
        // Step sizes start log-uniform in [DT_INIT_MIN, DT_INIT_MAX]; the
        // bias is the softplus preimage so softplus(bias) lands on dt.
        {
            let bias = store
                .get_mut(dt_proj.b.expect("dt_proj has bias"))
                .tensor
                .data_mut();
            for v in bias.iter_mut() {
                let span = (DT_INIT_MAX / DT_INIT_MIN).ln();
                let dt = DT_INIT_MIN * (rng.random::<f64>() * span).exp();
                *v = E::from_f64(dt.exp_m1().ln());
            }
        }
        let out_proj = Conv1d::init(
            store,
            &format!("{name}.out_proj"),
            d_inner,
            d_model,
            1,
            1,
            1,
            false,
            rng,
        );
        // state matrix starts at A = -(s+1): stable, scale-graded per state
        let a_init: Vec<E> = (0..d_inner)
            .flat_map(|_| (0..d_state).map(|s| E::from_f64(((s + 1) as f64).ln())))
            .collect();
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::new(vec![d_inner, d_state], a_init),
            true,
        );
        let d_skip = store.add(
            format!("{name}.d"),
            Tensor::full(vec![d_inner], E::one()),
            true,
        );
        MambaBlock {
            dims,
            in_proj,
            conv,
            x_proj,
            dt_proj,
            out_proj,
            a_log,
            d_skip,
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, u: NodeId) -> NodeId {
        let MambaDims {
            d_inner,
            d_state,
            dt_rank,
            ..
        } = self.dims;
        let xz = self.in_proj.forward(tape, u);
        let x_part = tape.slice_channels(xz, 0, d_inner);
        let z = tape.slice_channels(xz, d_inner, d_inner);
        let xc = self.conv.forward(tape, x_part);
        let xs = tape.silu(xc);
        let proj = self.x_proj.forward(tape, xs);
        let dt_in = tape.slice_channels(proj, 0, dt_rank);
        let b = tape.slice_channels(proj, dt_rank, d_state);
        let c = tape.slice_channels(proj, dt_rank + d_state, d_state);
        let dt = self.dt_proj.forward(tape, dt_in);
        let delta = tape.softplus(dt);
        let a_pos = tape.exp(self.a_log);
        let a = tape.scale(a_pos, -E::one());
        let y = tape.ssm_scan(delta, a, b, c, self.d_skip, xs);
        let gate = tape.silu(z);
        let gated = tape.mul(y, gate);
        self.out_proj.forward(tape, gated)
    }
}

/// State-space block wrapped as a residual unit:
/// `t1 = LN(block(u) + u)`, `t2 = LN(FFN(t1) + t1)`, output `Dropout(t2)`.
/// The FFN is two causal width-3 convs with a 4x hidden expansion.
#[derive(Clone, Debug)]
pub struct MambaWrapper {
    pub block: MambaBlock,
    ln1: LayerNorm,
    ffn1: Conv1d,
    ffn2: Conv1d,
    ln2: LayerNorm,
    dropout: Dropout,
}

impl MambaWrapper {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dims: MambaDims,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = dims.d_model;
        let block = MambaBlock::init(store, &format!("{name}.ssm"), dims, rng);
        let ln1 = LayerNorm::init(store, &format!("{name}.ln1"), d);
        let ffn1 = Conv1d::init(store, &format!("{name}.ffn1"), d, 4 * d, 3, 1, 1, true, rng);
        let ffn2 = Conv1d::init(store, &format!("{name}.ffn2"), 4 * d, d, 3, 1, 1, true, rng);
        let ln2 = LayerNorm::init(store, &format!("{name}.ln2"), d);
        MambaWrapper {
            block,
            ln1,
            ffn1,
            ffn2,
            ln2,
            dropout: Dropout { rate: dropout },
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, u: NodeId, ctx: &mut RunCtx) -> NodeId {
        let b = self.block.forward(tape, u);
        let r1 = tape.add(b, u);
        let t1 = self.ln1.forward(tape, r1);
        let f = self.ffn1.forward(tape, t1);
        let f = tape.relu(f);
        let f = self.ffn2.forward(tape, f);
        let r2 = tape.add(f, t1);
        let t2 = self.ln2.forward(tape, r2);
        self.dropout.forward(tape, t2, ctx)
    }
}

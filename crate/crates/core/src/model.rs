//! The full network: a stack of dilated causal residual conv blocks, a halving
//! max pool, gated state-space layers, and a pooled classification head.
//! Input is a batch of RR tachograms `[n, 1, input_len]`; output is a pair of
//! class scores per segment (index 1 = event class).

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::nn::{BatchNorm1d, Conv1d, Dropout, Linear, ParamStore, RunCtx};
use crate::rng::{stream, DOMAIN_INIT};
use crate::ssm::{MambaDims, MambaWrapper};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};
use crate::Result;

pub const CKPT_FORMAT: &str = "rri-seqnet/ckpt/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Samples per input window (resampled RR values).
    pub input_len: usize,
    pub tcn_channels: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    pub tcn_dropout: f64,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Channel width entering the state-space layers; must equal
    /// `tcn_channels` since the pool keeps channels.
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Step-size projection rank; `None` means `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    pub n_mamba_layers: usize,
    pub mamba_dropout: f64,
    /// Head widths from the pooled features to the class scores, e.g.
    /// `[64, 32, 2]`: first entry must be `2 * tcn_channels`, last must be 2.
    pub head_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 1800,
            tcn_channels: 32,
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2, 4],
            tcn_dropout: 0.2,
            pool_kernel: 2,
            pool_stride: 2,
            d_model: 32,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            dt_rank: None,
            n_mamba_layers: 1,
            mamba_dropout: 0.2,
            head_dims: vec![64, 32, 2],
        }
    }
}

impl ModelConfig {
    pub fn effective_dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.d_model.div_ceil(16))
    }

    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims {
            d_model: self.d_model,
            d_inner: self.expand * self.d_model,
            d_state: self.d_state,
            d_conv: self.d_conv,
            dt_rank: self.effective_dt_rank(),
        }
    }

    pub fn pooled_len(&self) -> usize {
        (self.input_len - self.pool_kernel) / self.pool_stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_len == 0 {
            return fail("input_len must be positive".into());
        }
        if self.tcn_kernel == 0 || self.tcn_channels == 0 {
            return fail("tcn kernel and channels must be positive".into());
        }
        if self.tcn_dilations.is_empty() || self.tcn_dilations.contains(&0) {
            return fail(format!(
                "tcn_dilations {:?} must be nonempty and positive",
                self.tcn_dilations
            ));
        }
        if self.pool_kernel == 0
            || self.pool_stride == 0
            || self.input_len < self.pool_kernel
            || !(self.input_len - self.pool_kernel).is_multiple_of(self.pool_stride)
        {
            return fail(format!(
                "pool {}x{} does not tile input_len {}",
                self.pool_kernel, self.pool_stride, self.input_len
            ));
        }
        if self.d_model != self.tcn_channels {
            return fail(format!(
                "d_model {} must equal tcn_channels {}: the pool keeps channel width",
                self.d_model, self.tcn_channels
            ));
        }
        if self.d_state == 0 || self.d_conv == 0 || self.expand == 0 {
            return fail("d_state, d_conv, expand must be positive".into());
        }
        if self.dt_rank == Some(0) {
            return fail("dt_rank must be positive when given".into());
        }
        if self.n_mamba_layers == 0 {
            return fail("n_mamba_layers must be at least 1".into());
        }
        if self.head_dims.len() < 2 {
            return fail(format!(
                "head_dims {:?} needs input and output widths",
                self.head_dims
            ));
        }
        if self.head_dims[0] != 2 * self.tcn_channels {
            return fail(format!(
                "head input width {} must be 2 * tcn_channels (mean and max pooled branches)",
                self.head_dims[0]
            ));
        }
        if *self.head_dims.last().unwrap() != 2 {
            return fail(format!(
                "head output width {} must be 2 classes",
                self.head_dims.last().unwrap()
            ));
        }
        for &r in &[self.tcn_dropout, self.mamba_dropout] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("dropout rate {r} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Residual conv unit: conv-norm-relu-dropout-conv-norm plus a normalized
/// 1x1 projection on the skip path, joined by relu. Both convs share the
/// block's dilation.
#[derive(Clone, Debug)]
struct TcnBlock {
    conv1: Conv1d,
    bn1: BatchNorm1d,
    dropout: Dropout,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    skip: Conv1d,
    bn_skip: BatchNorm1d,
}

impl TcnBlock {
    #[allow(clippy::too_many_arguments)]
    fn init<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TcnBlock {
            conv1: Conv1d::init(
                store,
                &format!("{name}.conv1"),
                c_in,
                c_out,
                k,
                dilation,
                1,
                true,
                rng,
            ),
            bn1: BatchNorm1d::init(store, &format!("{name}.bn1"), c_out),
            dropout: Dropout { rate: dropout },
            conv2: Conv1d::init(
                store,
                &format!("{name}.conv2"),
                c_out,
                c_out,
                k,
                dilation,
                1,
                true,
                rng,
            ),
            bn2: BatchNorm1d::init(store, &format!("{name}.bn2"), c_out),
            skip: Conv1d::init(
                store,
                &format!("{name}.skip"),
                c_in,
                c_out,
                1,
                1,
                1,
                true,
                rng,
            ),
            bn_skip: BatchNorm1d::init(store, &format!("{name}.bn_skip"), c_out),
        }
    }

    fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &mut ParamStore<E>,
        x: NodeId,
        ctx: &mut RunCtx,
    ) -> NodeId {
        let a = self.conv1.forward(tape, x);
        let a = self.bn1.forward(tape, store, a, ctx.mode);
        let a = tape.relu(a);
        let a = self.dropout.forward(tape, a, ctx);
        let a = self.conv2.forward(tape, a);
        let a = self.bn2.forward(tape, store, a, ctx.mode);
        let s = self.skip.forward(tape, x);
        let s = self.bn_skip.forward(tape, store, s, ctx.mode);
        let sum = tape.add(a, s);
        tape.relu(sum)
    }
}

/// One fully connected head stage: linear, batch norm, relu.
#[derive(Clone, Debug)]
struct HeadBlock {
    fc: Linear,
    bn: BatchNorm1d,
}

#[derive(Clone, Debug)]
pub struct Model<E> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    tcn: Vec<TcnBlock>,
    mamba: Vec<MambaWrapper>,
    head: Vec<HeadBlock>,
}

/// Bookkeeping carried inside a checkpoint next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CkptMeta {
    pub epoch: u64,
    pub best_val_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format: String,
    dtype: String,
    config: ModelConfig,
    meta: CkptMeta,
    params: Vec<CkptParam>,
}

impl<E: Element> Model<E> {
    /// Builds a freshly initialized model. All weight draws come from one
    /// stream derived from `seed`, so equal (config, seed) means equal
    /// parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[DOMAIN_INIT]);
        let mut store = ParamStore::new();
        let mut tcn = Vec::new();
        let mut c_in = 1;
        for (i, &dil) in config.tcn_dilations.iter().enumerate() {
            tcn.push(TcnBlock::init(
                &mut store,
                &format!("tcn{i}"),
                c_in,
                config.tcn_channels,
                config.tcn_kernel,
                dil,
                config.tcn_dropout,
                &mut rng,
            ));
            c_in = config.tcn_channels;
        }
        let dims = config.mamba_dims();
        let mamba = (0..config.n_mamba_layers)
            .map(|i| {
                MambaWrapper::init(
                    &mut store,
                    &format!("mamba{i}"),
                    dims,
                    config.mamba_dropout,
                    &mut rng,
                )
            })
            .collect();
        let mut head = Vec::new();
        for i in 0..config.head_dims.len() - 1 {
            head.push(HeadBlock {
                fc: Linear::init(
                    &mut store,
                    &format!("head.fc{}", i + 1),
                    config.head_dims[i],
                    config.head_dims[i + 1],
                    true,
                    &mut rng,
                ),
                bn: BatchNorm1d::init(
                    &mut store,
                    &format!("head.bn{}", i + 1),
                    config.head_dims[i + 1],
                ),
            });
        }
        Ok(Model {
            config,
            store,
            tcn,
            mamba,
            head,
        })
    }

    pub fn num_trainable_params(&self) -> u64 {
        self.store.num_trainable_values()
    }

    fn check_input(&self, tape: &Tape<E>, x: NodeId) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.config.input_len {
            return Err(Error::InputLen {
                expected: self.config.input_len,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// TCN stack output before temporal pooling: `[n, d_model, input_len]`.
    /// Length preserving and causal, so row `t` depends only on inputs
    /// `..=t`.
    pub fn forward_prepool(
        &mut self,
        tape: &mut Tape<E>,
        x: NodeId,
        ctx: &mut RunCtx,
    ) -> Result<NodeId> {
        self.check_input(tape, x)?;
        let mut h = x;
        for block in &self.tcn {
            h = block.forward(tape, &mut self.store, h, ctx);
        }
        Ok(h)
    }

    /// Feature map entering the head: `[n, d_model, pooled_len]`.
    pub fn forward_features(
        &mut self,
        tape: &mut Tape<E>,
        x: NodeId,
        ctx: &mut RunCtx,
    ) -> Result<NodeId> {
        let pre = self.forward_prepool(tape, x, ctx)?;
        let mut h = tape.maxpool(pre, self.config.pool_kernel, self.config.pool_stride);
        for layer in &self.mamba {
            h = layer.forward(tape, h, ctx);
        }
        Ok(h)
    }

    /// Class scores `[n, 2]` before softmax. Cross entropy consumes these
    /// directly; the predicted probabilities are their softmax.
    pub fn forward_scores(
        &mut self,
        tape: &mut Tape<E>,
        x: NodeId,
        ctx: &mut RunCtx,
    ) -> Result<NodeId> {
        let feat = self.forward_features(tape, x, ctx)?;
        let mean = tape.time_mean(feat);
        let max = tape.time_max(feat);
        let mut h = tape.concat_cols(mean, max);
        for stage in &self.head {
            h = stage.fc.forward(tape, h);
            h = stage.bn.forward(tape, &mut self.store, h, ctx.mode);
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Eval-mode class probabilities for a batch, 2 per row.
    pub fn predict_proba(&mut self, x: &Tensor<E>) -> Result<Vec<[f64; 2]>> {
        let mut tape = self.store.tape(false);
        let xid = tape.constant(x.clone());
        let mut ctx = RunCtx::eval();
        let scores = self.forward_scores(&mut tape, xid, &mut ctx)?;
        let probs = tape.softmax_rows(scores);
        let data = tape.value(probs).data();
        Ok(data
            .chunks(2)
            .map(|row| [row[0].into_f64(), row[1].into_f64()])
            .collect())
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CkptMeta) -> Result<()> {
        let header = CkptHeader {
            format: CKPT_FORMAT.into(),
            dtype: E::DTYPE.into(),
            config: self.config.clone(),
            meta: meta.clone(),
            params: self
                .store
                .entries()
                .iter()
                .map(|e| CkptParam {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Other(format!("checkpoint header: {e}")))?;
        let mut payload = Vec::new();
        for e in self.store.entries() {
            for &v in e.tensor.data() {
                v.write_le(&mut payload);
            }
        }
        let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Restores a model saved by [`Model::save_checkpoint`]. The stored dtype
    /// must match `E`; parameter names, shapes, and order must match what the
    /// stored config builds.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, CkptMeta)> {
        let ck = |msg: String| Error::Checkpoint {
            path: path.display().to_string(),
            msg,
        };
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let header = read_header(path, &bytes)?;
        if header.dtype != E::DTYPE {
            return Err(ck(format!(
                "stored dtype {} but loading as {}",
                header.dtype,
                E::DTYPE
            )));
        }
        let header_len = 8 + u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut model = Model::<E>::build(header.config.clone(), 0)?;
        if header.params.len() != model.store.len() {
            return Err(ck(format!(
                "stored {} tensors but config builds {}",
                header.params.len(),
                model.store.len()
            )));
        }
        let mut off = header_len;
        for (i, p) in header.params.iter().enumerate() {
            let entry = model.store.get_mut(i);
            if entry.name != p.name || entry.tensor.shape() != &p.shape[..] {
                return Err(ck(format!(
                    "tensor {i} is {} {:?} in file but {} {:?} in config",
                    p.name,
                    p.shape,
                    entry.name,
                    entry.tensor.shape()
                )));
            }
            let n = entry.tensor.numel();
            let end = off + n * E::BYTES;
            if end > bytes.len() {
                return Err(ck(format!(
                    "payload truncated at tensor {} ({})",
                    i, p.name
                )));
            }
            for (j, chunk) in bytes[off..end].chunks_exact(E::BYTES).enumerate() {
                entry.tensor.data_mut()[j] = E::read_le(chunk);
            }
            off = end;
        }
        if off != bytes.len() {
            return Err(ck(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - off
            )));
        }
        Ok((model, header.meta))
    }
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<CkptHeader> {
    let ck = |msg: String| Error::Checkpoint {
        path: path.display().to_string(),
        msg,
    };
    if bytes.len() < 8 {
        return Err(ck("file shorter than the length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(ck("header truncated".into()));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| ck(format!("header is not valid JSON: {e}")))?;
    if header.format != CKPT_FORMAT {
        return Err(ck(format!("format {} is not {CKPT_FORMAT}", header.format)));
    }
    Ok(header)
}

/// Reads only the header of a checkpoint: enough to learn dtype and config
/// before deciding which element type to load with.
pub fn checkpoint_header(path: &Path) -> Result<(String, ModelConfig, CkptMeta)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let header = read_header(path, &bytes)?;
    Ok((header.dtype, header.config, header.meta))
}

impl<E: Element> Model<E> {
    /// Forward pass on an externally built tape (one whose first leaves are
    /// this model's parameters, as gradient checking sets up) without
    /// touching the model's own store; BN running updates are discarded.
    pub fn forward_scores_on(&self, tape: &mut Tape<E>, x: NodeId, ctx: &mut RunCtx) -> NodeId {
        let mut scratch = self.clone();
        scratch
            .forward_scores(tape, x, ctx)
            .expect("input shape checked by caller")
    }
}

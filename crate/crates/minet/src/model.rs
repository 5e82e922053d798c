//! Full dehazing network: encoder, three cascaded fixed-point blocks with
//! coprime dilation rates, per-pixel fusion of the three block outputs,
//! channel attention, and a decoder back to RGB.
//!
//! Binding order invariant: `bind` pushes parameter leaves in exactly the
//! order `named_params` lists them. The optimizer, the checkpoint format,
//! and the gradient plumbing all rely on this alignment; a test pins it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::im_block::{im_block_forward, BoundMle, IMBlockTrace, MleParams};
use crate::kernels::ConvMeta;
use crate::layers::{
    BoundConv2d, BoundConvTranspose2d, BoundInstanceNorm, BoundLinear, Conv2d, ConvTranspose2d,
    InstanceNorm, Linear,
};
use crate::tape::{Tape, ValueId};
use crate::tensor::{shape_string, Scalar, Tensor};

/// How the three trunk blocks advance features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Weight-shared fixed-point recursion, T iterations per block.
    Implicit,
    /// Single explicit residual step per block (ignores T).
    ResblockOne,
    /// T stacked explicit residual steps with independent weights per step.
    ResblockT,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Implicit => "implicit",
            BlockKind::ResblockOne => "resblock1",
            BlockKind::ResblockT => "resblockT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(BlockKind::Implicit),
            "resblock1" => Ok(BlockKind::ResblockOne),
            "resblockT" | "resblockt" => Ok(BlockKind::ResblockT),
            other => Err(Error::InvalidConfig(format!(
                "unknown block kind {other:?} (expected implicit, resblock1, or resblockT)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MINetConfig {
    pub trunk_channels: usize,
    /// Dilation rate per block; pairwise coprime to avoid gridding artifacts.
    pub dilations: [usize; 3],
    /// Fixed-point iteration count per block.
    pub recursions: [usize; 3],
    pub eta: f64,
    /// Channel-attention bottleneck ratio (c -> c/r -> c).
    pub rca_reduction: usize,
    /// One stride-2 stage in the encoder, mirrored in the decoder.
    pub downsample: bool,
    pub block_kind: BlockKind,
    pub use_mlf: bool,
    pub use_rca: bool,
    /// Normalize fusion weights per pixel. The raw-linear mode (`false`)
    /// skips the softmax and uses the group-conv outputs directly.
    pub mlf_softmax: bool,
}

impl Default for MINetConfig {
    fn default() -> Self {
        MINetConfig {
            trunk_channels: 64,
            dilations: [1, 2, 5],
            recursions: [12, 12, 12],
            eta: 1.0,
            rca_reduction: 16,
            downsample: true,
            block_kind: BlockKind::Implicit,
            use_mlf: true,
            use_rca: true,
            mlf_softmax: true,
        }
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn parse_triple(v: &str, key: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!(
            "{key} wants three comma-separated values, got {v:?}"
        )));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad {key} entry {p:?}")))?;
    }
    Ok(out)
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::InvalidConfig(format!(
            "{key} must be true or false, got {other:?}"
        ))),
    }
}

impl MINetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_channels == 0 {
            return Err(Error::InvalidConfig("trunk_channels must be positive".into()));
        }
        for (i, &d) in self.dilations.iter().enumerate() {
            if d == 0 {
                return Err(Error::InvalidConfig(format!("dilation {} is zero", i + 1)));
            }
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                if gcd(self.dilations[i], self.dilations[j]) != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "dilations must be pairwise coprime, got {:?}",
                        self.dilations
                    )));
                }
            }
        }
        if self.recursions.iter().any(|&t| t < 1) {
            return Err(Error::InvalidConfig(format!(
                "every recursion count must be at least 1, got {:?}",
                self.recursions
            )));
        }
        if self.eta <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.use_rca {
            if self.rca_reduction == 0 || self.trunk_channels % self.rca_reduction != 0 {
                return Err(Error::InvalidConfig(format!(
                    "trunk_channels {} must be divisible by rca_reduction {}",
                    self.trunk_channels, self.rca_reduction
                )));
            }
        }
        Ok(())
    }

    /// `key=value` snapshot, one per line; [`MINetConfig::from_text`]
    /// inverts it exactly.
    pub fn to_text(&self) -> String {
        format!(
            "trunk_channels={}\ndilations={},{},{}\nrecursions={},{},{}\neta={}\n\
             rca_reduction={}\ndownsample={}\nblock_kind={}\nuse_mlf={}\nuse_rca={}\n\
             mlf_softmax={}\n",
            self.trunk_channels,
            self.dilations[0],
            self.dilations[1],
            self.dilations[2],
            self.recursions[0],
            self.recursions[1],
            self.recursions[2],
            self.eta,
            self.rca_reduction,
            self.downsample,
            self.block_kind.as_str(),
            self.use_mlf,
            self.use_rca,
            self.mlf_softmax,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = MINetConfig::default();
        let mut seen = [false; 10];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("expected key=value, got {line:?}"))
            })?;
            let bad_num = || Error::InvalidConfig(format!("bad {key} value {value:?}"));
            match key {
                "trunk_channels" => {
                    cfg.trunk_channels = value.parse().map_err(|_| bad_num())?;
                    seen[0] = true;
                }
                "dilations" => {
                    cfg.dilations = parse_triple(value, key)?;
                    seen[1] = true;
                }
                "recursions" => {
                    cfg.recursions = parse_triple(value, key)?;
                    seen[2] = true;
                }
                "eta" => {
                    cfg.eta = value.parse().map_err(|_| bad_num())?;
                    seen[3] = true;
                }
                "rca_reduction" => {
                    cfg.rca_reduction = value.parse().map_err(|_| bad_num())?;
                    seen[4] = true;
                }
                "downsample" => {
                    cfg.downsample = parse_bool(value, key)?;
                    seen[5] = true;
                }
                "block_kind" => {
                    cfg.block_kind = BlockKind::parse(value)?;
                    seen[6] = true;
                }
                "use_mlf" => {
                    cfg.use_mlf = parse_bool(value, key)?;
                    seen[7] = true;
                }
                "use_rca" => {
                    cfg.use_rca = parse_bool(value, key)?;
                    seen[8] = true;
                }
                "mlf_softmax" => {
                    cfg.mlf_softmax = parse_bool(value, key)?;
                    seen[9] = true;
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown model config key {other:?}"
                    )))
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig(
                "model config snapshot is missing keys".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trunk block parameters: one shared field, or T independent copies for
/// the stacked-residual variant.
pub enum BlockParams<T: Scalar> {
    Shared(MleParams<T>),
    Unshared(Vec<MleParams<T>>),
}

/// Per-pixel fusion: a group convolution (one group per block output)
/// producing three weight maps.
pub struct MlfParams<T: Scalar> {
    pub conv: Conv2d<T>,
}

/// Channel attention: 1x1 conv, pooled descriptor, bottleneck MLP, sigmoid
/// gate applied as `x_r = psi ∘ x + x`.
pub struct RcaParams<T: Scalar> {
    pub conv: Conv2d<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Full parameter set plus the configuration that shaped it.
pub struct MINetParams<T: Scalar> {
    pub config: MINetConfig,
    pub enc_conv: Conv2d<T>,
    pub enc_norm: InstanceNorm<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub mlf: Option<MlfParams<T>>,
    pub rca: Option<RcaParams<T>>,
    pub dec_tconv: ConvTranspose2d<T>,
    pub dec_conv: Conv2d<T>,
}

impl<T: Scalar> MINetParams<T> {
    pub fn new<R: Rng>(rng: &mut R, config: MINetConfig) -> Result<Self> {
        config.validate()?;
        let c = config.trunk_channels;

        let enc_meta = if config.downsample {
            ConvMeta::new(2, 1, 1)
        } else {
            ConvMeta::new(1, 1, 1)
        };
        let enc_conv = Conv2d::new(rng, 3, c, 3, enc_meta);
        let enc_norm = InstanceNorm::new(c);

        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            let dilation = config.dilations[i];
            let block = match config.block_kind {
                BlockKind::Implicit | BlockKind::ResblockOne => {
                    BlockParams::Shared(MleParams::new(rng, c, dilation))
                }
                BlockKind::ResblockT => BlockParams::Unshared(
                    (0..config.recursions[i])
                        .map(|_| MleParams::new(rng, c, dilation))
                        .collect(),
                ),
            };
            blocks.push(block);
        }

        let mlf = config.use_mlf.then(|| MlfParams {
            conv: Conv2d::new(rng, 3 * c, 3, 3, ConvMeta::new(1, 1, 1).with_groups(3)),
        });
        let rca = config.use_rca.then(|| RcaParams {
            conv: Conv2d::new(rng, c, c, 1, ConvMeta::new(1, 0, 1)),
            fc1: Linear::new(rng, c, c / config.rca_reduction),
            fc2: Linear::new(rng, c / config.rca_reduction, c),
        });

        let dec_meta = if config.downsample {
            ConvMeta::new(2, 1, 1).with_output_padding(1)
        } else {
            ConvMeta::new(1, 1, 1)
        };
        let dec_tconv = ConvTranspose2d::new(rng, c, c, 3, dec_meta);
        let dec_conv = Conv2d::new(rng, c, 3, 3, ConvMeta::new(1, 1, 1));

        Ok(MINetParams {
            config,
            enc_conv,
            enc_norm,
            blocks,
            mlf,
            rca,
            dec_tconv,
            dec_conv,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(prefixed("encoder.conv", self.enc_conv.params()));
        out.extend(prefixed("encoder.norm", self.enc_norm.params()));
        for (i, block) in self.blocks.iter().enumerate() {
            let base = format!("block{}", i + 1);
            match block {
                BlockParams::Shared(mle) => {
                    for (name, t) in mle.named_params() {
                        out.push((format!("{base}.{name}"), t));
                    }
                }
                BlockParams::Unshared(copies) => {
                    for (j, mle) in copies.iter().enumerate() {
                        for (name, t) in mle.named_params() {
                            out.push((format!("{base}.rep{j}.{name}"), t));
                        }
                    }
                }
            }
        }
        if let Some(mlf) = &self.mlf {
            out.extend(prefixed("mlf.conv", mlf.conv.params()));
        }
        if let Some(rca) = &self.rca {
            out.extend(prefixed("rca.conv", rca.conv.params()));
            out.extend(prefixed("rca.fc1", rca.fc1.params()));
            out.extend(prefixed("rca.fc2", rca.fc2.params()));
        }
        out.extend(prefixed("decoder.tconv", self.dec_tconv.params()));
        out.extend(prefixed("decoder.conv", self.dec_conv.params()));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.extend(prefixed_mut("encoder.conv", self.enc_conv.params_mut()));
        out.extend(prefixed_mut("encoder.norm", self.enc_norm.params_mut()));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let base = format!("block{}", i + 1);
            match block {
                BlockParams::Shared(mle) => {
                    for (name, t) in mle.named_params_mut() {
                        out.push((format!("{base}.{name}"), t));
                    }
                }
                BlockParams::Unshared(copies) => {
                    for (j, mle) in copies.iter_mut().enumerate() {
                        for (name, t) in mle.named_params_mut() {
                            out.push((format!("{base}.rep{j}.{name}"), t));
                        }
                    }
                }
            }
        }
        if let Some(mlf) = &mut self.mlf {
            out.extend(prefixed_mut("mlf.conv", mlf.conv.params_mut()));
        }
        if let Some(rca) = &mut self.rca {
            out.extend(prefixed_mut("rca.conv", rca.conv.params_mut()));
            out.extend(prefixed_mut("rca.fc1", rca.fc1.params_mut()));
            out.extend(prefixed_mut("rca.fc2", rca.fc2.params_mut()));
        }
        out.extend(prefixed_mut("decoder.tconv", self.dec_tconv.params_mut()));
        out.extend(prefixed_mut("decoder.conv", self.dec_conv.params_mut()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Pushes every parameter onto the tape in `named_params` order. When
    /// `substitute = Some((k, id))`, the k-th parameter uses the provided
    /// node instead of a fresh leaf; gradient probes use this to splice a
    /// tracked tensor into an otherwise constant parameter set.
    pub fn bind_substituting(
        &self,
        tape: &mut Tape<T>,
        substitute: Option<(usize, ValueId)>,
    ) -> (BoundMINet<T>, Vec<ValueId>) {
        let mut binder = Binder {
            tape,
            ids: Vec::new(),
            substitute,
        };
        let enc_conv = binder.conv(&self.enc_conv);
        let enc_norm = binder.norm(&self.enc_norm);
        let mut blocks = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            let bound = match block {
                BlockParams::Shared(mle) => BoundBlock::Shared {
                    field: binder.mle(mle),
                    t: self.config.recursions[i],
                    explicit: self.config.block_kind == BlockKind::ResblockOne,
                },
                BlockParams::Unshared(copies) => BoundBlock::Unshared {
                    fields: copies.iter().map(|m| binder.mle(m)).collect(),
                },
            };
            blocks.push(bound);
        }
        let mlf = self.mlf.as_ref().map(|m| binder.conv(&m.conv));
        let rca = self.rca.as_ref().map(|r| BoundRca {
            conv: binder.conv(&r.conv),
            fc1: binder.linear(&r.fc1),
            fc2: binder.linear(&r.fc2),
        });
        let dec_tconv = binder.tconv(&self.dec_tconv);
        let dec_conv = binder.conv(&self.dec_conv);
        let ids = binder.ids;

        let bound = BoundMINet {
            trunk_channels: self.config.trunk_channels,
            eta: T::from_f64(self.config.eta),
            downsample: self.config.downsample,
            mlf_softmax: self.config.mlf_softmax,
            enc_conv,
            enc_norm,
            blocks,
            mlf,
            rca,
            dec_tconv,
            dec_conv,
        };
        (bound, ids)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> (BoundMINet<T>, Vec<ValueId>) {
        self.bind_substituting(tape, None)
    }

    /// Records the whole network from the node `input` on `tape`. Returns
    /// the output node, the per-block convergence traces, and the parameter
    /// bindings in `named_params` order.
    pub fn forward_from(
        &self,
        tape: &mut Tape<T>,
        input: ValueId,
    ) -> Result<(ValueId, Vec<IMBlockTrace>, Vec<ValueId>)> {
        let (bound, binds) = self.bind(tape);
        let (y, traces) = bound.forward(tape, input)?;
        Ok((y, traces, binds))
    }

    /// Standalone inference: runs a forward pass on a private tape and
    /// returns plain tensors.
    pub fn infer(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<IMBlockTrace>)> {
        let mut tape = Tape::new();
        let x = tape.constant(input.shape, input.data.clone());
        let (bound, _) = self.bind(&mut tape);
        let (y, traces) = bound.forward(&mut tape, x)?;
        Ok((tape.to_tensor(y), traces))
    }

    /// Trunk feature tensors for stability probes: index 0 is the encoder
    /// output (the first block's input), index i+1 the output of block i+1.
    pub fn feature_taps(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.shape, input.data.clone());
        let (bound, _) = self.bind(&mut tape);
        let enc = bound.encode(&mut tape, x)?;
        let mut taps = vec![tape.to_tensor(enc)];
        let mut cur = enc;
        for block in &bound.blocks {
            let (next, _) = bound.block_forward(&mut tape, block, cur)?;
            taps.push(tape.to_tensor(next));
            cur = next;
        }
        Ok(taps)
    }

    /// Evaluates block `i`'s vector field at the point `v` on a private
    /// tape. For the unshared stacked variant this is the first step's
    /// field, the only one whose input point the recursion visits.
    pub fn eval_block_field(&self, i: usize, v: &Tensor<T>) -> Result<Tensor<T>> {
        use crate::im_block::VectorField;
        let mle = match &self.blocks[i] {
            BlockParams::Shared(mle) => mle,
            BlockParams::Unshared(copies) => &copies[0],
        };
        let mut tape = Tape::new();
        let x = tape.constant(v.shape, v.data.clone());
        let bound = mle.bind(&mut tape, &mut Vec::new());
        let y = bound.apply(&mut tape, x)?;
        Ok(tape.to_tensor(y))
    }
}

fn prefixed<'a, T: Scalar>(
    prefix: &str,
    items: Vec<(&'static str, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    items
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t))
        .collect()
}

fn prefixed_mut<'a, T: Scalar>(
    prefix: &str,
    items: Vec<(&'static str, &'a mut Tensor<T>)>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    items
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t))
        .collect()
}

struct Binder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    ids: Vec<ValueId>,
    substitute: Option<(usize, ValueId)>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    fn push(&mut self, t: &Tensor<T>) -> ValueId {
        let idx = self.ids.len();
        let id = match self.substitute {
            Some((k, sub)) if k == idx => sub,
            _ => self.tape.leaf(t),
        };
        self.ids.push(id);
        id
    }

    fn conv(&mut self, layer: &Conv2d<T>) -> BoundConv2d {
        let w = self.push(&layer.weight);
        let b = self.push(&layer.bias);
        BoundConv2d::from_ids(w, b, layer.meta)
    }

    fn tconv(&mut self, layer: &ConvTranspose2d<T>) -> BoundConvTranspose2d {
        let w = self.push(&layer.weight);
        let b = self.push(&layer.bias);
        BoundConvTranspose2d::from_ids(w, b, layer.meta)
    }

    fn norm(&mut self, layer: &InstanceNorm<T>) -> BoundInstanceNorm<T> {
        let gamma = self.push(&layer.gamma);
        let beta = self.push(&layer.beta);
        BoundInstanceNorm::from_ids(gamma, beta, layer.eps)
    }

    fn linear(&mut self, layer: &Linear<T>) -> BoundLinear {
        let w = self.push(&layer.weight);
        let b = self.push(&layer.bias);
        BoundLinear::from_ids(w, b)
    }

    fn mle(&mut self, mle: &MleParams<T>) -> BoundMle<T> {
        BoundMle::from_parts(
            self.conv(&mle.conv1),
            self.norm(&mle.norm1),
            self.conv(&mle.conv2),
            self.norm(&mle.norm2),
        )
    }
}

enum BoundBlock<T: Scalar> {
    Shared {
        field: BoundMle<T>,
        t: usize,
        explicit: bool,
    },
    Unshared {
        fields: Vec<BoundMle<T>>,
    },
}

struct BoundRca {
    conv: BoundConv2d,
    fc1: BoundLinear,
    fc2: BoundLinear,
}

/// The network bound to a tape: parameters pushed once, forward may be
/// recorded from any input node.
pub struct BoundMINet<T: Scalar> {
    trunk_channels: usize,
    eta: T,
    downsample: bool,
    mlf_softmax: bool,
    enc_conv: BoundConv2d,
    enc_norm: BoundInstanceNorm<T>,
    blocks: Vec<BoundBlock<T>>,
    mlf: Option<BoundConv2d>,
    rca: Option<BoundRca>,
    dec_tconv: BoundConvTranspose2d,
    dec_conv: BoundConv2d,
}

impl<T: Scalar> BoundMINet<T> {
    /// conv -> instance norm -> relu, with one stride-2 stage when
    /// downsampling. Rejects odd spatial dims in downsample mode since the
    /// decoder could not restore them exactly.
    pub fn encode(&self, tape: &mut Tape<T>, input: ValueId) -> Result<ValueId> {
        let shape = *tape.shape(input);
        if shape[1] != 3 {
            return Err(Error::ChannelMismatch {
                op: "encode",
                expected: 3,
                got: shape[1],
            });
        }
        if self.downsample && (shape[2] % 2 != 0 || shape[3] % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "encode: downsampling needs even spatial dims, got {}",
                shape_string(&shape)
            )));
        }
        let y = self.enc_conv.apply(tape, input)?;
        let y = self.enc_norm.apply(tape, y)?;
        Ok(tape.relu(y))
    }

    fn block_forward(
        &self,
        tape: &mut Tape<T>,
        block: &BoundBlock<T>,
        x: ValueId,
    ) -> Result<(ValueId, IMBlockTrace)> {
        match block {
            BoundBlock::Shared { field, t, explicit } => {
                let steps = if *explicit { 1 } else { *t };
                im_block_forward(tape, x, field, steps, self.eta)
            }
            BoundBlock::Unshared { fields } => {
                let mut cur = x;
                let mut residuals = Vec::with_capacity(fields.len());
                for field in fields {
                    let (next, trace) = im_block_forward(tape, cur, field, 1, self.eta)?;
                    residuals.extend(trace.residuals);
                    cur = next;
                }
                Ok((cur, IMBlockTrace { residuals }))
            }
        }
    }

    /// Per-pixel weighted sum of the three block outputs. The group conv
    /// yields one logit map per level; softmax across the three maps makes
    /// the fusion a convex combination at every pixel.
    pub fn mlf_fuse(
        &self,
        tape: &mut Tape<T>,
        x1: ValueId,
        x2: ValueId,
        x3: ValueId,
    ) -> Result<ValueId> {
        let mlf = self.mlf.as_ref().expect("mlf_fuse requires fusion params");
        let cat = tape.concat_channels(&[x1, x2, x3])?;
        let logits = mlf.apply(tape, cat)?;
        let weights = if self.mlf_softmax {
            tape.softmax_channels(logits)
        } else {
            logits
        };
        let mut fused: Option<ValueId> = None;
        for (i, &xi) in [x1, x2, x3].iter().enumerate() {
            let wi = tape.slice_channels(weights, i, i + 1)?;
            let term = tape.mul_chan(xi, wi)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(fused.expect("three terms"))
    }

    /// Channel attention `x_r = psi ∘ x + x` with
    /// `psi = sigmoid(fc2(relu(fc1(gap(conv1x1(x))))))`.
    pub fn rca_forward(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        let rca = self.rca.as_ref().expect("rca_forward requires rca params");
        if tape.shape(x)[1] != self.trunk_channels {
            return Err(Error::ChannelMismatch {
                op: "rca_forward",
                expected: self.trunk_channels,
                got: tape.shape(x)[1],
            });
        }
        let y = rca.conv.apply(tape, x)?;
        let d = tape.global_avg_pool(y);
        let h = rca.fc1.apply(tape, d)?;
        let h = tape.relu(h);
        let logits = rca.fc2.apply(tape, h)?;
        let psi = tape.sigmoid(logits);
        let gated = tape.mul_gate(x, psi)?;
        tape.add(gated, x)
    }

    /// tconv -> relu -> conv -> sigmoid, restoring the RGB resolution.
    pub fn decode(&self, tape: &mut Tape<T>, features: ValueId) -> Result<ValueId> {
        let y = self.dec_tconv.apply(tape, features)?;
        let y = tape.relu(y);
        let y = self.dec_conv.apply(tape, y)?;
        Ok(tape.sigmoid(y))
    }

    /// Whole pipeline. Blocks are cascaded: each consumes the previous
    /// block's output, and the fusion sees all three taps.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: ValueId,
    ) -> Result<(ValueId, Vec<IMBlockTrace>)> {
        let enc = self.encode(tape, input)?;
        let mut taps = Vec::with_capacity(3);
        let mut traces = Vec::with_capacity(3);
        let mut cur = enc;
        for block in &self.blocks {
            let (next, trace) = self.block_forward(tape, block, cur)?;
            taps.push(next);
            traces.push(trace);
            cur = next;
        }
        let fused = if self.mlf.is_some() {
            self.mlf_fuse(tape, taps[0], taps[1], taps[2])?
        } else {
            taps[2]
        };
        let refined = if self.rca.is_some() {
            self.rca_forward(tape, fused)?
        } else {
            fused
        };
        let out = self.decode(tape, refined)?;
        Ok((out, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, random_tensor};
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> MINetConfig {
        MINetConfig {
            trunk_channels: 8,
            recursions: [2, 2, 2],
            rca_reduction: 4,
            ..MINetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(MINetConfig::default().validate().is_ok());
        let bad = MINetConfig {
            dilations: [1, 2, 4],
            ..MINetConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = MINetConfig {
            recursions: [0, 1, 1],
            ..MINetConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MINetConfig {
            trunk_channels: 10,
            rca_reduction: 4,
            ..MINetConfig::default()
        };
        assert!(bad.validate().is_err());
        // without attention the divisibility constraint is moot
        let ok = MINetConfig {
            trunk_channels: 10,
            rca_reduction: 4,
            use_rca: false,
            ..MINetConfig::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn shape_preservation_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model: MINetParams<f64> = MINetParams::new(&mut rng, tiny_config()).unwrap();
        for hw in [16usize, 24] {
            let x: Tensor<f64> = random_tensor(&mut rng, [1, 3, hw, hw], 0.0, 1.0);
            let (y, traces) = model.infer(&x).unwrap();
            assert_eq!(y.shape, x.shape);
            assert_eq!(traces.len(), 3);
            assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn odd_dims_rejected_only_when_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model: MINetParams<f64> = MINetParams::new(&mut rng, tiny_config()).unwrap();
        let x: Tensor<f64> = random_tensor(&mut rng, [1, 3, 9, 9], 0.0, 1.0);
        assert!(model.infer(&x).is_err());

        let cfg = MINetConfig {
            downsample: false,
            ..tiny_config()
        };
        let model: MINetParams<f64> = MINetParams::new(&mut rng, cfg).unwrap();
        let (y, _) = model.infer(&x).unwrap();
        assert_eq!(y.shape, x.shape);
    }

    #[test]
    fn param_count_is_invariant_in_t_for_shared_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let deep: MINetParams<f64> = MINetParams::new(
            &mut rng,
            MINetConfig {
                recursions: [12, 12, 12],
                ..tiny_config()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shallow: MINetParams<f64> = MINetParams::new(
            &mut rng,
            MINetConfig {
                recursions: [1, 1, 1],
                ..tiny_config()
            },
        )
        .unwrap();
        assert_eq!(deep.param_count(), shallow.param_count());

        // the unshared variant pays per step
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let stacked: MINetParams<f64> = MINetParams::new(
            &mut rng,
            MINetConfig {
                block_kind: BlockKind::ResblockT,
                ..tiny_config()
            },
        )
        .unwrap();
        assert!(stacked.param_count() > deep.param_count());
    }

    #[test]
    fn bind_order_matches_named_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in [BlockKind::Implicit, BlockKind::ResblockT] {
            let cfg = MINetConfig {
                block_kind: kind,
                ..tiny_config()
            };
            let model: MINetParams<f64> = MINetParams::new(&mut rng, cfg).unwrap();
            let mut tape = Tape::new();
            let (_, ids) = model.bind(&mut tape);
            let named = model.named_params();
            assert_eq!(ids.len(), named.len());
            for (id, (name, tensor)) in ids.iter().zip(&named) {
                assert_eq!(
                    tape.value(*id),
                    tensor.data.as_slice(),
                    "bind order diverged at {name}"
                );
            }
        }
    }

    #[test]
    fn mlf_is_a_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model: MINetParams<f64> = MINetParams::new(&mut rng, tiny_config()).unwrap();
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        let c = 8;
        let shape: Shape = [2, c, 5, 4];
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|_| random_tensor(&mut rng, shape, -2.0, 2.0))
            .collect();
        let ids: Vec<ValueId> = xs
            .iter()
            .map(|x| tape.constant(x.shape, x.data.clone()))
            .collect();
        let fused = bound.mlf_fuse(&mut tape, ids[0], ids[1], ids[2]).unwrap();
        let f = tape.value(fused);
        for i in 0..f.len() {
            let lo = xs[0].data[i].min(xs[1].data[i]).min(xs[2].data[i]);
            let hi = xs[0].data[i].max(xs[1].data[i]).max(xs[2].data[i]);
            assert!(
                f[i] >= lo - 1e-12 && f[i] <= hi + 1e-12,
                "fused {} outside [{lo}, {hi}]",
                f[i]
            );
        }

        // identical inputs pass through untouched regardless of weights
        let same = ids[0];
        let fused = bound.mlf_fuse(&mut tape, same, same, same).unwrap();
        for (a, b) in tape.value(fused).iter().zip(&xs[0].data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn mlf_uniform_and_forced_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut model: MINetParams<f64> = MINetParams::new(&mut rng, tiny_config()).unwrap();
        // zero logits -> uniform softmax -> plain average
        {
            let m = model.mlf.as_mut().unwrap();
            for v in m.conv.weight.data.iter_mut() {
                *v = 0.0;
            }
            for v in m.conv.bias.data.iter_mut() {
                *v = 0.0;
            }
        }
        let shape: Shape = [1, 8, 3, 3];
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|_| random_tensor(&mut rng, shape, -1.0, 1.0))
            .collect();
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        let ids: Vec<ValueId> = xs
            .iter()
            .map(|x| tape.constant(x.shape, x.data.clone()))
            .collect();
        let fused = bound.mlf_fuse(&mut tape, ids[0], ids[1], ids[2]).unwrap();
        for (i, v) in tape.value(fused).iter().enumerate() {
            let avg = (xs[0].data[i] + xs[1].data[i] + xs[2].data[i]) / 3.0;
            assert!((v - avg).abs() <= 1e-15);
        }

        // biased logits (10, 0, 0) concentrate on the first level
        {
            let m = model.mlf.as_mut().unwrap();
            m.conv.bias.data = vec![10.0, 0.0, 0.0];
        }
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        let ids: Vec<ValueId> = xs
            .iter()
            .map(|x| tape.constant(x.shape, x.data.clone()))
            .collect();
        let fused = bound.mlf_fuse(&mut tape, ids[0], ids[1], ids[2]).unwrap();
        // softmax weights deviate from (1, 0, 0) by at most 2 e^-10 per
        // level, and every |x| <= 1, so the gap is bounded by 4 e^-10
        for (v, a) in tape.value(fused).iter().zip(&xs[0].data) {
            assert!((v - a).abs() <= 5.0 * (-10.0f64).exp());
        }
    }

    #[test]
    fn rca_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut model: MINetParams<f64> = MINetParams::new(&mut rng, tiny_config()).unwrap();
        // zero attention params: psi = sigmoid(0) = 0.5, x_r = 1.5 x
        {
            let r = model.rca.as_mut().unwrap();
            for t in [
                &mut r.conv.weight,
                &mut r.conv.bias,
                &mut r.fc1.weight,
                &mut r.fc1.bias,
                &mut r.fc2.weight,
                &mut r.fc2.bias,
            ] {
                for v in t.data.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let x: Tensor<f64> = random_tensor(&mut rng, [1, 8, 4, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        let id = tape.constant(x.shape, x.data.clone());
        let y = bound.rca_forward(&mut tape, id).unwrap();
        for (a, b) in tape.value(y).iter().zip(&x.data) {
            assert!((a - 1.5 * b).abs() <= 1e-15 * b.abs().max(1.0));
        }

        // saturated-off gate: psi ~ sigmoid(-30), x_r ~ x
        {
            let r = model.rca.as_mut().unwrap();
            r.fc2.bias.data = vec![-30.0; 8];
        }
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        let id = tape.constant(x.shape, x.data.clone());
        let y = bound.rca_forward(&mut tape, id).unwrap();
        for (a, b) in tape.value(y).iter().zip(&x.data) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        // zero input passes through (0 stays 0)
        let zero = Tensor::zeros([1, 8, 4, 4]);
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        let id = tape.constant(zero.shape, zero.data.clone());
        let y = bound.rca_forward(&mut tape, id).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model: MINetParams<f64> = MINetParams::new(&mut rng, tiny_config()).unwrap();
        let x: Tensor<f64> = random_tensor(&mut rng, [1, 3, 12, 12], 0.0, 1.0);
        let (a, _) = model.infer(&x).unwrap();
        let (b, _) = model.infer(&x).unwrap();
        for (av, bv) in a.data.iter().zip(&b.data) {
            assert_eq!(av.to_bits(), bv.to_bits());
        }
    }

    #[test]
    fn full_net_gradient_check() {
        // smaller than the acceptance battery but same structure
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cfg = MINetConfig {
            trunk_channels: 4,
            recursions: [2, 2, 2],
            rca_reduction: 2,
            ..MINetConfig::default()
        };
        let model: MINetParams<f64> = MINetParams::new(&mut rng, cfg).unwrap();
        let x: Tensor<f64> = random_tensor(&mut rng, [1, 3, 6, 6], 0.05, 0.95);
        // eps must sit below the distance to the nearest relu kink along
        // each probed coordinate; at 1e-3 some probes straddle a kink and
        // the finite difference is invalid (error ~1e-1), at 1e-4 and below
        // it is smooth and the mismatch drops to roundoff
        let err = grad_check(
            |tape, id| {
                let (y, _, _) = model.forward_from(tape, id)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "full net grad err {err}");
    }

    #[test]
    fn parameter_gradient_through_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cfg = MINetConfig {
            trunk_channels: 4,
            recursions: [2, 2, 2],
            rca_reduction: 2,
            ..MINetConfig::default()
        };
        let mut model: MINetParams<f64> = MINetParams::new(&mut rng, cfg).unwrap();
        // keep the attention bottleneck relu alive so the fc2 probe is not
        // vacuously zero on both sides
        for v in model.rca.as_mut().unwrap().fc1.bias.data.iter_mut() {
            *v = 0.5;
        }
        let x: Tensor<f64> = random_tensor(&mut rng, [1, 3, 6, 6], 0.05, 0.95);
        let named = model.named_params();
        for probe_name in ["block2.conv1.weight", "mlf.conv.weight", "rca.fc2.weight"] {
            let k = named.iter().position(|(n, _)| n == probe_name).unwrap();
            let param = named[k].1.clone();
            let err = grad_check(
                |tape, id| {
                    let input = tape.constant(x.shape, x.data.clone());
                    let (bound, _) = model.bind_substituting(tape, Some((k, id)));
                    let (y, _) = bound.forward(tape, input)?;
                    let sq = tape.mul(y, y)?;
                    Ok(tape.mean_all(sq))
                },
                &param,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-5, "{probe_name} grad err {err}");
        }
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = MINetConfig {
            trunk_channels: 48,
            recursions: [3, 5, 7],
            eta: 0.75,
            rca_reduction: 8,
            downsample: false,
            block_kind: BlockKind::ResblockT,
            use_mlf: false,
            ..MINetConfig::default()
        };
        assert_eq!(MINetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(MINetConfig::from_text("trunk_channels=8\n").is_err());
        assert!(MINetConfig::from_text(&format!("{}bogus=1\n", cfg.to_text())).is_err());
    }

    #[test]
    fn ablation_variants_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for kind in [BlockKind::Implicit, BlockKind::ResblockOne, BlockKind::ResblockT] {
            for (use_mlf, use_rca) in [(true, true), (false, true), (true, false), (false, false)] {
                let cfg = MINetConfig {
                    block_kind: kind,
                    use_mlf,
                    use_rca,
                    ..tiny_config()
                };
                let model: MINetParams<f64> = MINetParams::new(&mut rng, cfg).unwrap();
                let x: Tensor<f64> = random_tensor(&mut rng, [1, 3, 8, 8], 0.0, 1.0);
                let (y, traces) = model.infer(&x).unwrap();
                assert_eq!(y.shape, x.shape);
                let expected_len = match kind {
                    BlockKind::Implicit | BlockKind::ResblockT => 2,
                    BlockKind::ResblockOne => 1,
                };
                assert!(traces.iter().all(|t| t.residuals.len() == expected_len));
            }
        }
    }
}

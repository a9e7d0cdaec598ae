//! Transformer autoencoder over snapshot segments.
//!
//! The encoder maps a normalized `tau x 40` segment to a latent vector:
//! a per-step affine lifts the 40 features to `d_model`, a stack of
//! pre-norm Transformer blocks mixes the time axis, a per-step affine
//! drops back to 40 features, and three fully connected layers reduce
//! the flattened `40 * tau` vector to the latent length. The decoder
//! mirrors the encoder with independent weights. Training minimizes the
//! batch-mean reconstruction error with Adam.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, NormStats, Segment, Split, SEGMENT_FEATURES};
use crate::nn::{
    multi_head_self_attention, Adam, AttentionVars, NnError, Real, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    Config(String),
    #[error("segment has {got} steps, model expects {expected}")]
    SegmentLength { expected: usize, got: usize },
    #[error("latent vector has {got} entries, model expects {expected}")]
    LatentLength { expected: usize, got: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Segment length in steps.
    pub tau: usize,
    /// Width of the Transformer stream.
    pub d_model: usize,
    /// Number of Transformer blocks per coder.
    pub n_blocks: usize,
    /// Latent vector length.
    pub latent_len: usize,
    pub heads: usize,
    /// Feed-forward expansion factor inside each block.
    pub ffn_mult: usize,
    /// Hidden widths of the flattened reduction stack.
    pub fcn2_hidden: Vec<usize>,
    /// Optional sinusoidal position signal added after the lift; off by
    /// default (the architecture relies on feature mixing alone).
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tau: 100,
            d_model: 256,
            n_blocks: 2,
            latent_len: 128,
            heads: 8,
            ffn_mult: 4,
            fcn2_hidden: vec![1024, 256],
            positional_encoding: false,
        }
    }
}

impl ModelConfig {
    /// Desk-size variant for CPU experiments.
    pub fn desk(latent_len: usize) -> Self {
        ModelConfig {
            d_model: 64,
            latent_len,
            fcn2_hidden: vec![512, 128],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tau == 0 || self.d_model == 0 || self.latent_len == 0 {
            return Err(ModelError::Config("zero-size dimension".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.latent_len > SEGMENT_FEATURES * self.tau {
            return Err(ModelError::Config(format!(
                "latent length {} exceeds input size {}",
                self.latent_len,
                SEGMENT_FEATURES * self.tau
            )));
        }
        if self.ffn_mult == 0 {
            return Err(ModelError::Config("zero ffn multiplier".into()));
        }
        Ok(())
    }

    fn flat_len(&self) -> usize {
        SEGMENT_FEATURES * self.tau
    }

    /// Encoder reduction widths `40*tau -> hidden... -> latent`.
    fn reduce_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.flat_len()];
        widths.extend(&self.fcn2_hidden);
        widths.push(self.latent_len);
        widths
    }

    /// Decoder expansion widths `latent -> hidden reversed -> 40*tau`.
    fn expand_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.latent_len];
        widths.extend(self.fcn2_hidden.iter().rev());
        widths.push(self.flat_len());
        widths
    }
}

/// Latent representation of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineWeights {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormWeights,
    pub attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub ffn1: AffineWeights,
    pub ffn2: AffineWeights,
}

/// All trainable tensors plus the normalizer the model was trained with.
/// Shapes derive solely from the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub enc_lift: AffineWeights,
    pub enc_blocks: Vec<BlockWeights>,
    pub enc_head: AffineWeights,
    pub enc_reduce: Vec<AffineWeights>,
    pub dec_expand: Vec<AffineWeights>,
    pub dec_lift: AffineWeights,
    pub dec_blocks: Vec<BlockWeights>,
    pub dec_out: AffineWeights,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound) as Real)
}

fn affine_init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> AffineWeights {
    AffineWeights {
        w: xavier(rng, d_in, d_out),
        b: Tensor::zeros(1, d_out),
    }
}

fn block_init(rng: &mut ChaCha8Rng, d: usize, ffn_mult: usize) -> BlockWeights {
    BlockWeights {
        ln1: LayerNormWeights {
            gain: Tensor::from_fn(1, d, |_, _| 1.0),
            bias: Tensor::zeros(1, d),
        },
        attn: AttentionWeights {
            wq: xavier(rng, d, d),
            wk: xavier(rng, d, d),
            wv: xavier(rng, d, d),
            wo: xavier(rng, d, d),
        },
        ln2: LayerNormWeights {
            gain: Tensor::from_fn(1, d, |_, _| 1.0),
            bias: Tensor::zeros(1, d),
        },
        ffn1: affine_init(rng, d, d * ffn_mult),
        ffn2: affine_init(rng, d * ffn_mult, d),
    }
}

impl ModelWeights {
    /// Fresh weights from a seed. Values are rounded through checkpoint
    /// precision so a save/load cycle reproduces them bit-exactly.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let reduce_widths = config.reduce_widths();
        let expand_widths = config.expand_widths();
        let mut weights = ModelWeights {
            config: config.clone(),
            norm: NormStats::default(),
            enc_lift: affine_init(&mut rng, SEGMENT_FEATURES, d),
            enc_blocks: (0..config.n_blocks)
                .map(|_| block_init(&mut rng, d, config.ffn_mult))
                .collect(),
            enc_head: affine_init(&mut rng, d, SEGMENT_FEATURES),
            enc_reduce: reduce_widths
                .windows(2)
                .map(|w| affine_init(&mut rng, w[0], w[1]))
                .collect(),
            dec_expand: expand_widths
                .windows(2)
                .map(|w| affine_init(&mut rng, w[0], w[1]))
                .collect(),
            dec_lift: affine_init(&mut rng, SEGMENT_FEATURES, d),
            dec_blocks: (0..config.n_blocks)
                .map(|_| block_init(&mut rng, d, config.ffn_mult))
                .collect(),
            dec_out: affine_init(&mut rng, d, SEGMENT_FEATURES),
        };
        weights.round_to_storage();
        Ok(weights)
    }

    pub fn round_to_storage(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.round_to_storage();
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named tensors in canonical order. The same order is used for
    /// optimizer state, gradients, and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        fn push_affine<'m>(out: &mut Vec<(String, &'m Tensor)>, name: &str, a: &'m AffineWeights) {
            out.push((format!("{name}.w"), &a.w));
            out.push((format!("{name}.b"), &a.b));
        }
        fn push_block<'m>(out: &mut Vec<(String, &'m Tensor)>, name: &str, b: &'m BlockWeights) {
            out.push((format!("{name}.ln1.gain"), &b.ln1.gain));
            out.push((format!("{name}.ln1.bias"), &b.ln1.bias));
            out.push((format!("{name}.attn.wq"), &b.attn.wq));
            out.push((format!("{name}.attn.wk"), &b.attn.wk));
            out.push((format!("{name}.attn.wv"), &b.attn.wv));
            out.push((format!("{name}.attn.wo"), &b.attn.wo));
            out.push((format!("{name}.ln2.gain"), &b.ln2.gain));
            out.push((format!("{name}.ln2.bias"), &b.ln2.bias));
            out.push((format!("{name}.ffn1.w"), &b.ffn1.w));
            out.push((format!("{name}.ffn1.b"), &b.ffn1.b));
            out.push((format!("{name}.ffn2.w"), &b.ffn2.w));
            out.push((format!("{name}.ffn2.b"), &b.ffn2.b));
        }
        push_affine(&mut out, "enc.lift", &self.enc_lift);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            push_block(&mut out, &format!("enc.block{i}"), b);
        }
        push_affine(&mut out, "enc.head", &self.enc_head);
        for (i, a) in self.enc_reduce.iter().enumerate() {
            push_affine(&mut out, &format!("enc.reduce{i}"), a);
        }
        for (i, a) in self.dec_expand.iter().enumerate() {
            push_affine(&mut out, &format!("dec.expand{i}"), a);
        }
        push_affine(&mut out, "dec.lift", &self.dec_lift);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            push_block(&mut out, &format!("dec.block{i}"), b);
        }
        push_affine(&mut out, "dec.out", &self.dec_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        fn push_affine<'m>(
            out: &mut Vec<(String, &'m mut Tensor)>,
            name: &str,
            a: &'m mut AffineWeights,
        ) {
            out.push((format!("{name}.w"), &mut a.w));
            out.push((format!("{name}.b"), &mut a.b));
        }
        fn push_block<'m>(
            out: &mut Vec<(String, &'m mut Tensor)>,
            name: &str,
            b: &'m mut BlockWeights,
        ) {
            out.push((format!("{name}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("{name}.ln1.bias"), &mut b.ln1.bias));
            out.push((format!("{name}.attn.wq"), &mut b.attn.wq));
            out.push((format!("{name}.attn.wk"), &mut b.attn.wk));
            out.push((format!("{name}.attn.wv"), &mut b.attn.wv));
            out.push((format!("{name}.attn.wo"), &mut b.attn.wo));
            out.push((format!("{name}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("{name}.ln2.bias"), &mut b.ln2.bias));
            out.push((format!("{name}.ffn1.w"), &mut b.ffn1.w));
            out.push((format!("{name}.ffn1.b"), &mut b.ffn1.b));
            out.push((format!("{name}.ffn2.w"), &mut b.ffn2.w));
            out.push((format!("{name}.ffn2.b"), &mut b.ffn2.b));
        }
        push_affine(&mut out, "enc.lift", &mut self.enc_lift);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            push_block(&mut out, &format!("enc.block{i}"), b);
        }
        push_affine(&mut out, "enc.head", &mut self.enc_head);
        for (i, a) in self.enc_reduce.iter_mut().enumerate() {
            push_affine(&mut out, &format!("enc.reduce{i}"), a);
        }
        for (i, a) in self.dec_expand.iter_mut().enumerate() {
            push_affine(&mut out, &format!("dec.expand{i}"), a);
        }
        push_affine(&mut out, "dec.lift", &mut self.dec_lift);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            push_block(&mut out, &format!("dec.block{i}"), b);
        }
        push_affine(&mut out, "dec.out", &mut self.dec_out);
        out
    }
}

struct TapedAffine {
    w: Var,
    b: Var,
}

struct TapedBlock {
    ln1: (Var, Var),
    attn: AttentionVars,
    ln2: (Var, Var),
    ffn1: TapedAffine,
    ffn2: TapedAffine,
}

struct TapedWeights {
    enc_lift: TapedAffine,
    enc_blocks: Vec<TapedBlock>,
    enc_head: TapedAffine,
    enc_reduce: Vec<TapedAffine>,
    dec_expand: Vec<TapedAffine>,
    dec_lift: TapedAffine,
    dec_blocks: Vec<TapedBlock>,
    dec_out: TapedAffine,
    /// Vars in the canonical tensor order, for gradient extraction.
    ordered: Vec<Var>,
}

/// Rebuilds the taped view from vars laid out in canonical tensor
/// order.
fn taped_from_ordered(vars: &[Var], config: &ModelConfig) -> TapedWeights {
    struct Cursor<'v> {
        vars: &'v [Var],
        at: usize,
    }
    impl Cursor<'_> {
        fn next(&mut self) -> Var {
            let v = self.vars[self.at];
            self.at += 1;
            v
        }
        fn affine(&mut self) -> TapedAffine {
            TapedAffine {
                w: self.next(),
                b: self.next(),
            }
        }
        fn block(&mut self) -> TapedBlock {
            TapedBlock {
                ln1: (self.next(), self.next()),
                attn: AttentionVars {
                    wq: self.next(),
                    wk: self.next(),
                    wv: self.next(),
                    wo: self.next(),
                },
                ln2: (self.next(), self.next()),
                ffn1: self.affine(),
                ffn2: self.affine(),
            }
        }
    }
    let mut c = Cursor { vars, at: 0 };
    let n_reduce = config.fcn2_hidden.len() + 1;
    let tw = TapedWeights {
        enc_lift: c.affine(),
        enc_blocks: (0..config.n_blocks).map(|_| c.block()).collect(),
        enc_head: c.affine(),
        enc_reduce: (0..n_reduce).map(|_| c.affine()).collect(),
        dec_expand: (0..n_reduce).map(|_| c.affine()).collect(),
        dec_lift: c.affine(),
        dec_blocks: (0..config.n_blocks).map(|_| c.block()).collect(),
        dec_out: c.affine(),
        ordered: vars.to_vec(),
    };
    assert_eq!(c.at, vars.len(), "canonical order mismatch");
    tw
}

fn leaf_weights<'w>(tape: &mut Tape<'w>, w: &'w ModelWeights) -> Result<TapedWeights, NnError> {
    let tensors = w.tensors();
    let mut ordered = Vec::with_capacity(tensors.len());
    for (_, t) in tensors {
        ordered.push(tape.leaf_ref(t)?);
    }
    Ok(taped_from_ordered(&ordered, &w.config))
}

fn block_forward(
    tape: &mut Tape<'_>,
    block: &TapedBlock,
    h: Var,
    heads: usize,
    capture: Option<&mut Vec<Tensor>>,
) -> Result<Var, NnError> {
    let normed = tape.layer_norm(h, block.ln1.0, block.ln1.1)?;
    let attended = multi_head_self_attention(tape, normed, heads, &block.attn, capture)?;
    let mid = tape.residual_add(attended, h)?;
    let normed2 = tape.layer_norm(mid, block.ln2.0, block.ln2.1)?;
    let f1 = tape.affine(normed2, block.ffn1.w, block.ffn1.b)?;
    let act = tape.gelu(f1)?;
    let f2 = tape.affine(act, block.ffn2.w, block.ffn2.b)?;
    tape.residual_add(f2, mid)
}

/// Sinusoidal position signal, `[tau, d]`.
fn positional_tensor(tau: usize, d: usize) -> Tensor {
    Tensor::from_fn(tau, d, |t, i| {
        let rate = 10_000.0f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = t as f64 / rate;
        (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as Real
    })
}

fn encoder_forward(
    tape: &mut Tape<'_>,
    tw: &TapedWeights,
    config: &ModelConfig,
    x: Var,
    mut capture_block0: Option<&mut Vec<Tensor>>,
) -> Result<Var, NnError> {
    let mut h = tape.affine(x, tw.enc_lift.w, tw.enc_lift.b)?;
    if config.positional_encoding {
        let pos = tape.leaf(positional_tensor(config.tau, config.d_model))?;
        h = tape.add(h, pos)?;
    }
    for (i, block) in tw.enc_blocks.iter().enumerate() {
        let capture = if i == 0 {
            capture_block0.as_deref_mut()
        } else {
            None
        };
        h = block_forward(tape, block, h, config.heads, capture)?;
    }
    let head = tape.affine(h, tw.enc_head.w, tw.enc_head.b)?;
    let mut z = tape.reshape(head, 1, config.flat_len())?;
    let last = tw.enc_reduce.len() - 1;
    for (i, a) in tw.enc_reduce.iter().enumerate() {
        z = tape.affine(z, a.w, a.b)?;
        if i < last {
            z = tape.gelu(z)?;
        }
    }
    Ok(z)
}

fn decoder_forward(
    tape: &mut Tape<'_>,
    tw: &TapedWeights,
    config: &ModelConfig,
    z: Var,
) -> Result<Var, NnError> {
    let mut h = z;
    let last = tw.dec_expand.len() - 1;
    for (i, a) in tw.dec_expand.iter().enumerate() {
        h = tape.affine(h, a.w, a.b)?;
        if i < last {
            h = tape.gelu(h)?;
        }
    }
    let grid = tape.reshape(h, config.tau, SEGMENT_FEATURES)?;
    let mut hh = tape.affine(grid, tw.dec_lift.w, tw.dec_lift.b)?;
    if config.positional_encoding {
        let pos = tape.leaf(positional_tensor(config.tau, config.d_model))?;
        hh = tape.add(hh, pos)?;
    }
    for block in &tw.dec_blocks {
        hh = block_forward(tape, block, hh, config.heads, None)?;
    }
    tape.affine(hh, tw.dec_out.w, tw.dec_out.b)
}

fn segment_tensor(weights: &ModelWeights, segment: &Segment) -> Result<Tensor, ModelError> {
    if segment.tau() != weights.config.tau {
        return Err(ModelError::SegmentLength {
            expected: weights.config.tau,
            got: segment.tau(),
        });
    }
    let data: Vec<Real> = segment.as_slice().iter().map(|&v| v as Real).collect();
    Ok(Tensor::from_vec(weights.config.tau, SEGMENT_FEATURES, data).map_err(NnError::from)?)
}

impl From<Tensor> for LatentVector {
    fn from(t: Tensor) -> Self {
        LatentVector {
            z: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Encodes a normalized segment into its latent vector.
pub fn encode(weights: &ModelWeights, segment: &Segment) -> Result<LatentVector, ModelError> {
    let x = segment_tensor(weights, segment)?;
    let mut tape = Tape::new();
    let tw = leaf_weights(&mut tape, weights)?;
    let xv = tape.leaf(x)?;
    let z = encoder_forward(&mut tape, &tw, &weights.config, xv, None)?;
    Ok(tape.value(z).clone().into())
}

/// Encodes and additionally returns the first encoder block's per-head
/// attention matrices.
pub fn encode_with_attention(
    weights: &ModelWeights,
    segment: &Segment,
) -> Result<(LatentVector, Vec<Tensor>), ModelError> {
    let x = segment_tensor(weights, segment)?;
    let mut tape = Tape::new();
    let tw = leaf_weights(&mut tape, weights)?;
    let xv = tape.leaf(x)?;
    let mut captured = Vec::new();
    let z = encoder_forward(&mut tape, &tw, &weights.config, xv, Some(&mut captured))?;
    Ok((tape.value(z).clone().into(), captured))
}

/// Decodes a latent vector into a normalized-units segment.
pub fn decode(weights: &ModelWeights, latent: &LatentVector) -> Result<Segment, ModelError> {
    if latent.z.len() != weights.config.latent_len {
        return Err(ModelError::LatentLength {
            expected: weights.config.latent_len,
            got: latent.z.len(),
        });
    }
    let data: Vec<Real> = latent.z.iter().map(|&v| v as Real).collect();
    let z = Tensor::from_vec(1, latent.z.len(), data).map_err(NnError::from)?;
    let mut tape = Tape::new();
    let tw = leaf_weights(&mut tape, weights)?;
    let zv = tape.leaf(z)?;
    let out = decoder_forward(&mut tape, &tw, &weights.config, zv)?;
    let values: Vec<f64> = tape.value(out).data().iter().map(|&v| v as f64).collect();
    Ok(Segment::from_values(weights.config.tau, values)?)
}

/// Encode-decode round trip on a normalized segment.
pub fn reconstruct(weights: &ModelWeights, segment: &Segment) -> Result<Segment, ModelError> {
    let x = segment_tensor(weights, segment)?;
    let mut tape = Tape::new();
    let tw = leaf_weights(&mut tape, weights)?;
    let xv = tape.leaf(x)?;
    let z = encoder_forward(&mut tape, &tw, &weights.config, xv, None)?;
    let out = decoder_forward(&mut tape, &tw, &weights.config, z)?;
    let values: Vec<f64> = tape.value(out).data().iter().map(|&v| v as f64).collect();
    Ok(Segment::from_values(weights.config.tau, values)?)
}

/// Mean squared entrywise difference over all `tau * 40` entries.
pub fn reconstruction_error(a: &Segment, b: &Segment) -> Result<f64, ModelError> {
    if a.tau() != b.tau() {
        return Err(ModelError::SegmentLength {
            expected: a.tau(),
            got: b.tau(),
        });
    }
    let mut acc = 0.0f64;
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.as_slice().len() as f64)
}

/// Training options; epochs/batch/learning rate per the training
/// protocol, seed fixes initialization and batch order.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            batch: 128,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Per-epoch loss curves; `test_err` drives best-checkpoint selection.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub train_err: Vec<f64>,
    pub test_err: Vec<f64>,
    pub best_epoch: usize,
    pub best_test_err: f64,
}

/// One sample's loss and parameter gradients (canonical order).
fn sample_gradients(
    weights: &ModelWeights,
    x: &Tensor,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let tw = leaf_weights(&mut tape, weights)?;
    let xv = tape.leaf(x.clone())?;
    let z = encoder_forward(&mut tape, &tw, &weights.config, xv, None)?;
    let out = decoder_forward(&mut tape, &tw, &weights.config, z)?;
    let loss = tape.mse(out, xv)?;
    let loss_value = tape.value(loss).get(0, 0) as f64;
    let grads = tape.backward(loss)?;
    let collected = tw
        .ordered
        .iter()
        .map(|&v| {
            let shape = tape.value(v).shape();
            grads.get_or_zeros(v, shape.0, shape.1)
        })
        .collect();
    Ok((loss_value, collected))
}

fn mean_test_error(weights: &ModelWeights, test: &[Tensor]) -> Result<f64, ModelError> {
    if test.is_empty() {
        return Ok(f64::NAN);
    }
    let errs: Vec<Result<f64, ModelError>> = test
        .par_iter()
        .map(|x| {
            let mut tape = Tape::new();
            let tw = leaf_weights(&mut tape, weights)?;
            let xv = tape.leaf(x.clone())?;
            let z = encoder_forward(&mut tape, &tw, &weights.config, xv, None)?;
            let out = decoder_forward(&mut tape, &tw, &weights.config, z)?;
            let loss = tape.mse(out, xv)?;
            Ok(tape.value(loss).get(0, 0) as f64)
        })
        .collect();
    let mut acc = 0.0;
    for e in &errs {
        match e {
            Ok(v) => acc += v,
            Err(_) => {
                return Err(ModelError::Config("test evaluation failed".into()));
            }
        }
    }
    Ok(acc / errs.len() as f64)
}

/// Trains on already-normalized segments, checkpointing the weights with
/// the best test error. Deterministic under the seed.
pub fn train_on_segments(
    config: &ModelConfig,
    train: &[Segment],
    test: &[Segment],
    norm: &NormStats,
    opts: &TrainOptions,
) -> Result<(ModelWeights, TrainReport), ModelError> {
    if train.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    if opts.batch == 0 {
        return Err(ModelError::Config("zero batch size".into()));
    }
    let mut weights = ModelWeights::init(config, opts.seed)?;
    weights.norm = *norm;

    let train_x: Vec<Tensor> = train
        .iter()
        .map(|s| segment_tensor(&weights, s))
        .collect::<Result<_, _>>()?;
    let test_x: Vec<Tensor> = test
        .iter()
        .map(|s| segment_tensor(&weights, s))
        .collect::<Result<_, _>>()?;

    let shapes: Vec<(usize, usize)> = weights.tensors().iter().map(|(_, t)| t.shape()).collect();
    let mut adam = Adam::new(opts.lr, &shapes);
    let mut report = TrainReport {
        best_test_err: f64::INFINITY,
        ..TrainReport::default()
    };
    let mut best = weights.clone();
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7_3A1);

    for epoch in 0..opts.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(opts.batch).enumerate() {
            let results: Vec<Result<(f64, Vec<Tensor>), ModelError>> = chunk
                .par_iter()
                .map(|&i| sample_gradients(&weights, &train_x[i]))
                .collect();
            let mut batch_loss = 0.0f64;
            let mut averaged: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                match &mut averaged {
                    None => averaged = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.scaled_add(1.0, g);
                        }
                    }
                }
            }
            let count = chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let mut averaged = averaged.expect("non-empty batch");
            let inv = (1.0 / count) as Real;
            for g in &mut averaged {
                *g = g.map(|v| v * inv);
            }
            let mut params = weights.tensors_mut();
            let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.step(&mut refs, &averaged)?;
            epoch_loss += batch_loss;
            seen += chunk.len();
        }
        let train_err = epoch_loss / seen as f64;
        let test_err = mean_test_error(&weights, &test_x)?;
        let tracked = if test_err.is_nan() { train_err } else { test_err };
        report.train_err.push(train_err);
        report.test_err.push(test_err);
        if tracked < report.best_test_err {
            report.best_test_err = tracked;
            report.best_epoch = epoch;
            best = weights.clone();
            best.round_to_storage();
        }
        log::info!("epoch {epoch}: train {train_err:.6} test {test_err:.6}");
    }
    if opts.epochs == 0 {
        best = weights;
        report.best_test_err = f64::NAN;
    }
    Ok((best, report))
}

/// Loads a dataset directory (manifest plus shards), normalizes with the
/// stored stats, and trains.
pub fn train_from_manifest(
    dir: &std::path::Path,
    config: &ModelConfig,
    opts: &TrainOptions,
) -> Result<(ModelWeights, TrainReport), ModelError> {
    let manifest = DatasetManifest::load(dir)?;
    let norm = manifest.norm;
    let train: Vec<Segment> = manifest
        .load_split(dir, Split::Train)?
        .iter()
        .map(|s| norm.apply(s))
        .collect();
    let test: Vec<Segment> = manifest
        .load_split(dir, Split::Test)?
        .iter()
        .map(|s| norm.apply(s))
        .collect();
    train_on_segments(config, &train, &test, &norm, opts)
}

/// First-encoder-block attention matrices with the segment's mid-price
/// series for joint plotting.
#[derive(Clone, Debug)]
pub struct AttentionExport {
    /// One row-stochastic `tau x tau` matrix per head.
    pub heads: Vec<Tensor>,
    /// Mid-prices of the segment, in the segment's units.
    pub mid_prices: Vec<f64>,
}

pub fn export_attention(
    weights: &ModelWeights,
    segment: &Segment,
) -> Result<AttentionExport, ModelError> {
    let (_, heads) = encode_with_attention(weights, segment)?;
    Ok(AttentionExport {
        heads,
        mid_prices: segment.mid_prices(),
    })
}

/// Mean absolute weight of the encoder lift, along each axis.
#[derive(Clone, Debug)]
pub struct FeatureImportance {
    /// Per original feature (40 entries), averaged over model columns.
    pub per_input: Vec<f64>,
    /// Labels for the 40 input features.
    pub input_labels: Vec<String>,
    /// Per lifted feature (`d_model` entries), averaged over the 40
    /// inputs.
    pub per_lifted: Vec<f64>,
}

pub fn export_feature_importance(weights: &ModelWeights) -> FeatureImportance {
    let w = &weights.enc_lift.w;
    let (rows, cols) = w.shape(); // 40 x d_model
    let mut per_input = vec![0.0f64; rows];
    let mut per_lifted = vec![0.0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = (w.get(r, c) as f64).abs();
            per_input[r] += v;
            per_lifted[c] += v;
        }
    }
    for v in &mut per_input {
        *v /= cols as f64;
    }
    for v in &mut per_lifted {
        *v /= rows as f64;
    }
    let sides = ["bid_price", "bid_volume", "ask_price", "ask_volume"];
    let input_labels = (0..rows)
        .map(|i| format!("{}_{}", sides[i % 4], i / 4 + 1))
        .collect();
    FeatureImportance {
        per_input,
        input_labels,
        per_lifted,
    }
}

/// Writes attention matrices as CSV rows `head,query_step,key_step,weight`.
pub fn write_attention_csv(
    path: &std::path::Path,
    export: &AttentionExport,
) -> Result<(), ModelError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "head,query_step,key_step,weight")?;
    for (h, m) in export.heads.iter().enumerate() {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                writeln!(w, "{h},{r},{c},{}", m.get(r, c))?;
            }
        }
    }
    Ok(())
}

/// Writes mid-prices alongside attention export, one row per step.
pub fn write_midprice_csv(
    path: &std::path::Path,
    mids: &[f64],
) -> Result<(), ModelError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,mid_price")?;
    for (t, m) in mids.iter().enumerate() {
        writeln!(w, "{t},{m}")?;
    }
    Ok(())
}

/// Central finite-difference check of the full encoder-decoder gradient
/// at the given config. Perturbs every weight entry and the input;
/// returns the worst relative error. Intended for small (toy) configs
/// in 64-bit builds.
pub fn gradient_check(config: &ModelConfig, seed: u64, h: f64) -> Result<f64, ModelError> {
    let weights = ModelWeights::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let x = Tensor::from_fn(config.tau, SEGMENT_FEATURES, |_, _| {
        rng.gen_range(-1.0..1.0) as Real
    });
    let mut inputs: Vec<Tensor> = weights.tensors().iter().map(|(_, t)| (*t).clone()).collect();
    inputs.push(x);
    let cfg = config.clone();
    let err = crate::nn::check::finite_difference_max_rel_err(&inputs, h, move |tape, vars| {
        let (param_vars, rest) = vars.split_at(vars.len() - 1);
        let tw = taped_from_ordered(param_vars, &cfg);
        let xv = rest[0];
        let z = encoder_forward(tape, &tw, &cfg, xv, None)?;
        let out = decoder_forward(tape, &tw, &cfg, z)?;
        tape.mse(out, xv)
    })?;
    Ok(err)
}

/// Writes feature importances: the 40-input table then the lifted table.
pub fn write_importance_csv(
    path: &std::path::Path,
    importance: &FeatureImportance,
) -> Result<(), ModelError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "kind,index,label,mean_abs_weight")?;
    for (i, (label, v)) in importance
        .input_labels
        .iter()
        .zip(&importance.per_input)
        .enumerate()
    {
        writeln!(w, "input,{i},{label},{v}")?;
    }
    for (i, v) in importance.per_lifted.iter().enumerate() {
        writeln!(w, "lifted,{i},f{i},{v}")?;
    }
    Ok(())
}

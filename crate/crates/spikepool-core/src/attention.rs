//! The two interchangeable token mixers behind one interface: spiking
//! self attention (the baseline) and pooling attention, plus the pooling
//! ablation variants.
//!
//! SSA works on the token-flattened layout `[T, B, N, D]`; pooling
//! attention works on the spatial layout `[T, B, D, H, W]`. The uniform
//! block entry point [`attention_forward`] takes the spatial layout and
//! reshapes for SSA internally. Both paths add the block residual, so
//! swapping variants changes no shapes anywhere in the model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    avgpool2d, batchnorm_axis, maxpool2d, maxpool3d, BatchNormParams, ConvBn,
};
use crate::snn::{lif_seq, LifConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Ssa,
    PoolMax2d,
    PoolAvg2d,
    PoolMax3d,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionKind::Ssa => "ssa",
            AttentionKind::PoolMax2d => "pool-max2d",
            AttentionKind::PoolAvg2d => "pool-avg2d",
            AttentionKind::PoolMax3d => "pool-max3d",
        }
    }

    pub fn parse(s: &str) -> Result<AttentionKind> {
        match s {
            "ssa" => Ok(AttentionKind::Ssa),
            "pool-max2d" => Ok(AttentionKind::PoolMax2d),
            "pool-avg2d" => Ok(AttentionKind::PoolAvg2d),
            "pool-max3d" => Ok(AttentionKind::PoolMax3d),
            other => Err(Error::Config(format!(
                "unknown attention kind '{other}' (ssa, pool-max2d, pool-avg2d, pool-max3d)"
            ))),
        }
    }
}

/// Which mixer a block uses, with its hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVariant {
    pub kind: AttentionKind,
    /// SSA scaling factor alpha.
    pub ssa_scale: f64,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub pool_padding: usize,
    /// Temporal window of the 3D max-pooling variant.
    pub pool_kt: usize,
}

impl AttentionVariant {
    pub fn ssa() -> AttentionVariant {
        AttentionVariant {
            kind: AttentionKind::Ssa,
            ssa_scale: 0.125,
            pool_kernel: 3,
            pool_stride: 1,
            pool_padding: 1,
            pool_kt: 2,
        }
    }

    pub fn pool_max2d() -> AttentionVariant {
        AttentionVariant {
            kind: AttentionKind::PoolMax2d,
            ..Self::ssa()
        }
    }

    pub fn pool_avg2d() -> AttentionVariant {
        AttentionVariant {
            kind: AttentionKind::PoolAvg2d,
            ..Self::ssa()
        }
    }

    pub fn pool_max3d() -> AttentionVariant {
        AttentionVariant {
            kind: AttentionKind::PoolMax3d,
            ..Self::ssa()
        }
    }

    pub fn of_kind(kind: AttentionKind) -> AttentionVariant {
        AttentionVariant {
            kind,
            ..Self::ssa()
        }
    }

    /// Pool geometry must preserve spatial shape because of the residual.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttentionKind::Ssa => Ok(()),
            _ => {
                if self.pool_stride != 1
                    || self.pool_kernel != 2 * self.pool_padding + 1
                {
                    return Err(Error::Config(format!(
                        "pool geometry k={} s={} p={} is not shape-preserving",
                        self.pool_kernel, self.pool_stride, self.pool_padding
                    )));
                }
                if self.kind == AttentionKind::PoolMax3d && self.pool_kt == 0 {
                    return Err(Error::Config("pool_kt must be >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// One 1x1 projection (stored as a D x D matrix) with its batch norm.
#[derive(Clone)]
pub struct ProjBn {
    /// `[D_in, D_out]`; equivalent to a 1x1 conv weight.
    pub weight: Tensor,
    pub bn: BatchNormParams,
}

impl ProjBn {
    fn init<R: Rng>(dim: usize, rng: &mut R) -> ProjBn {
        let std = (2.0 / dim as f64).sqrt();
        ProjBn {
            weight: Tensor::randn(&[dim, dim], std, rng).with_grad(),
            bn: BatchNormParams::new(dim),
        }
    }
}

/// Q/K/V projections plus the output projection, each Conv1x1 + BN.
#[derive(Clone)]
pub struct SsaParams {
    pub w_q: ProjBn,
    pub w_k: ProjBn,
    pub w_v: ProjBn,
    pub proj_out: ProjBn,
}

impl SsaParams {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> SsaParams {
        SsaParams {
            w_q: ProjBn::init(dim, rng),
            w_k: ProjBn::init(dim, rng),
            w_v: ProjBn::init(dim, rng),
            proj_out: ProjBn::init(dim, rng),
        }
    }
}

/// The pooling-attention branch: one 1x1 Conv + BN after the pool.
#[derive(Clone)]
pub struct PoolAttnParams {
    pub conv_bn: ConvBn,
}

impl PoolAttnParams {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> PoolAttnParams {
        PoolAttnParams {
            conv_bn: ConvBn::init(dim, dim, 1, 1, 0, rng),
        }
    }
}

#[derive(Clone)]
pub enum AttentionParams {
    Ssa(SsaParams),
    Pool(PoolAttnParams),
}

impl AttentionParams {
    pub fn init<R: Rng>(variant: &AttentionVariant, dim: usize, rng: &mut R) -> AttentionParams {
        match variant.kind {
            AttentionKind::Ssa => AttentionParams::Ssa(SsaParams::init(dim, rng)),
            _ => AttentionParams::Pool(PoolAttnParams::init(dim, rng)),
        }
    }
}

fn proj_tokens(
    tape: &Tape,
    x: &Tensor,
    p: &ProjBn,
    training: bool,
) -> Result<Tensor> {
    let y = tape.matmul(x, &p.weight)?;
    batchnorm_axis(tape, &y, &p.bn, y.ndim() - 1, training)
}

/// Spiking self attention on token layout `[T, B, N, D]`:
/// `Q,K,V = LIF(BN(W x))`, then `LIF(Q K^T V * alpha)`, then the output
/// projection. No softmax anywhere; complexity O(N^2 D) per timestep.
/// The block residual is added by the caller.
pub fn ssa_forward(
    tape: &Tape,
    x: &Tensor,
    p: &SsaParams,
    lif: &LifConfig,
    alpha: f64,
    training: bool,
) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::Dim(format!(
            "ssa_forward expects [T,B,N,D], got {:?}",
            x.shape()
        )));
    }
    let d = x.shape()[3];
    if p.w_q.weight.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            left: p.w_q.weight.shape().to_vec(),
            right: vec![d, d],
            context: "ssa projection vs input dim".into(),
        });
    }
    let q = lif_seq(tape, &proj_tokens(tape, x, &p.w_q, training)?, lif)?;
    let k = lif_seq(tape, &proj_tokens(tape, x, &p.w_k, training)?, lif)?;
    let v = lif_seq(tape, &proj_tokens(tape, x, &p.w_v, training)?, lif)?;
    let mixed = ssa_mix(tape, &q, &k, &v, lif, alpha)?;
    proj_tokens(tape, &mixed, &p.proj_out, training)
}

/// The SSA core: `LIF(Q K^T V * alpha)` on already-spiking Q, K, V.
pub fn ssa_mix(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    lif: &LifConfig,
    alpha: f64,
) -> Result<Tensor> {
    let scores = tape.matmul(q, &tape.transpose_last2(k)?)?;
    let attn = tape.matmul(&scores, v)?;
    lif_seq(tape, &tape.mul_scalar(&attn, alpha), lif)
}

/// Pooling attention on spatial layout `[T, B, D, H, W]`:
/// `Z_out = Conv-BN(MP(LIF(y))) + y`. The residual is part of the op.
pub fn pooling_attention_forward(
    tape: &Tape,
    y: &Tensor,
    variant: &AttentionVariant,
    p: &PoolAttnParams,
    lif: &LifConfig,
    training: bool,
) -> Result<Tensor> {
    if y.ndim() != 5 {
        return Err(Error::Dim(format!(
            "pooling attention expects [T,B,D,H,W], got {:?}",
            y.shape()
        )));
    }
    let z_lif = lif_seq(tape, y, lif)?;
    let z_pool = pool_spikes(tape, &z_lif, variant)?;
    if z_pool.shape() != z_lif.shape() {
        return Err(Error::Dim(format!(
            "pool geometry k={} s={} p={} changed shape {:?} -> {:?}; residual needs shape preservation",
            variant.pool_kernel,
            variant.pool_stride,
            variant.pool_padding,
            z_lif.shape(),
            z_pool.shape()
        )));
    }
    let z_out = p.conv_bn.forward(tape, &z_pool, training)?;
    tape.add(&z_out, y)
}

fn pool_spikes(tape: &Tape, z: &Tensor, variant: &AttentionVariant) -> Result<Tensor> {
    match variant.kind {
        AttentionKind::PoolMax2d => maxpool2d(
            tape,
            z,
            variant.pool_kernel,
            variant.pool_stride,
            variant.pool_padding,
        ),
        AttentionKind::PoolAvg2d => avgpool2d(
            tape,
            z,
            variant.pool_kernel,
            variant.pool_stride,
            variant.pool_padding,
        ),
        AttentionKind::PoolMax3d => maxpool3d(
            tape,
            z,
            (variant.pool_kt, variant.pool_kernel, variant.pool_kernel),
            (1, variant.pool_stride, variant.pool_stride),
            (0, variant.pool_kt - 1), // trailing pad keeps T
            variant.pool_padding,
        ),
        AttentionKind::Ssa => Err(Error::Config("pool_spikes called with SSA".into())),
    }
}

/// Uniform block entry point on the spatial layout, residual included.
pub fn attention_forward(
    tape: &Tape,
    y: &Tensor,
    variant: &AttentionVariant,
    params: &AttentionParams,
    lif: &LifConfig,
    training: bool,
) -> Result<Tensor> {
    match (variant.kind, params) {
        (AttentionKind::Ssa, AttentionParams::Ssa(p)) => {
            if y.ndim() != 5 {
                return Err(Error::Dim(format!(
                    "attention expects [T,B,D,H,W], got {:?}",
                    y.shape()
                )));
            }
            let (t, b, d, h, w) = (
                y.shape()[0],
                y.shape()[1],
                y.shape()[2],
                y.shape()[3],
                y.shape()[4],
            );
            // [T,B,D,H,W] -> [T,B,D,N] -> [T,B,N,D]
            let flat = tape.reshape(y, &[t, b, d, h * w])?;
            let tokens = tape.transpose_last2(&flat)?;
            let mixed = ssa_forward(tape, &tokens, p, lif, variant.ssa_scale, training)?;
            let back = tape.transpose_last2(&mixed)?;
            let spatial = tape.reshape(&back, &[t, b, d, h, w])?;
            tape.add(&spatial, y)
        }
        (AttentionKind::Ssa, _) => Err(Error::Config(
            "SSA variant paired with pooling parameters".into(),
        )),
        (_, AttentionParams::Pool(p)) => {
            pooling_attention_forward(tape, y, variant, p, lif, training)
        }
        (_, AttentionParams::Ssa(_)) => Err(Error::Config(
            "pooling variant paired with SSA parameters".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Timing benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct BenchShape {
    /// Token count (must factor into a 2^a x 2^b grid).
    pub n: usize,
    pub d: usize,
    pub t: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchTiming {
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall-clock timings for one variant at one shape.
#[derive(Clone, Debug)]
pub struct VariantTiming {
    pub variant: String,
    /// Full attention block, forward only.
    pub forward: BenchTiming,
    /// Full attention block, forward + backward.
    pub forward_backward: BenchTiming,
    /// Token-mixing core only (SSA: LIF(QK^TV*alpha); pooling: the pool).
    pub mixer_forward: BenchTiming,
    pub mixer_forward_backward: BenchTiming,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub n: usize,
    pub d: usize,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub trials: usize,
    pub variants: Vec<VariantTiming>,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "attention benchmark: N={} (grid {}x{}), D={}, T={}, {} trials",
            self.n, self.height, self.width, self.d, self.t, self.trials
        )?;
        writeln!(
            f,
            "{:<12} {:>14} {:>14} {:>14} {:>14}",
            "variant", "fwd ms", "fwd+bwd ms", "mixer fwd ms", "mixer f+b ms"
        )?;
        for v in &self.variants {
            writeln!(
                f,
                "{:<12} {:>8.3} ±{:>4.3} {:>8.3} ±{:>4.3} {:>8.3} ±{:>4.3} {:>8.3} ±{:>4.3}",
                v.variant,
                v.forward.mean_ms,
                v.forward.std_ms,
                v.forward_backward.mean_ms,
                v.forward_backward.std_ms,
                v.mixer_forward.mean_ms,
                v.mixer_forward.std_ms,
                v.mixer_forward_backward.mean_ms,
                v.mixer_forward_backward.std_ms,
            )?;
        }
        Ok(())
    }
}

/// Splits a power-of-two token count into a near-square (H, W) grid.
pub fn token_grid(n: usize) -> Result<(usize, usize)> {
    if n < 4 || !n.is_power_of_two() {
        return Err(Error::Config(format!(
            "token count must be a power of two >= 4, got {n}"
        )));
    }
    let log = n.trailing_zeros();
    let h = 1usize << log.div_ceil(2);
    Ok((h, n / h))
}

fn time_trials(trials: usize, mut f: impl FnMut()) -> BenchTiming {
    // warmup
    for _ in 0..2 {
        f();
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        f();
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    BenchTiming {
        mean_ms: mean,
        std_ms: var.sqrt(),
    }
}

fn random_binary<R: Rng>(shape: &[usize], density: f64, rng: &mut R) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 })
        .collect();
    Tensor::new_raw(shape.to_vec(), data)
}

fn bench_variant(
    variant: &AttentionVariant,
    shape: BenchShape,
    trials: usize,
    seed: u64,
) -> Result<VariantTiming> {
    let (h, w) = token_grid(shape.n)?;
    let lif = LifConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::init(variant, shape.d, &mut rng);
    let y = Tensor::randn(&[shape.t, 1, shape.d, h, w], 1.0, &mut rng);

    let forward = time_trials(trials, || {
        let tape = Tape::inference();
        attention_forward(&tape, &y, variant, &params, &lif, false).unwrap();
    });
    let y_grad = y.deep_clone().with_grad();
    let forward_backward = time_trials(trials, || {
        let tape = Tape::new();
        let out = attention_forward(&tape, &y_grad, variant, &params, &lif, true).unwrap();
        let loss = tape.sum(&out, None).unwrap();
        tape.backward(&loss).unwrap();
        y_grad.zero_grad();
    });

    // Mixer core: spikes prepared outside the timer.
    let (mixer_forward, mixer_forward_backward) = match variant.kind {
        AttentionKind::Ssa => {
            let q = random_binary(&[shape.t, 1, shape.n, shape.d], 0.2, &mut rng).with_grad();
            let k = random_binary(&[shape.t, 1, shape.n, shape.d], 0.2, &mut rng).with_grad();
            let v = random_binary(&[shape.t, 1, shape.n, shape.d], 0.2, &mut rng).with_grad();
            let fwd = time_trials(trials, || {
                let tape = Tape::inference();
                ssa_mix(&tape, &q, &k, &v, &lif, variant.ssa_scale).unwrap();
            });
            let fb = time_trials(trials, || {
                let tape = Tape::new();
                let out = ssa_mix(&tape, &q, &k, &v, &lif, variant.ssa_scale).unwrap();
                let loss = tape.sum(&out, None).unwrap();
                tape.backward(&loss).unwrap();
                q.zero_grad();
                k.zero_grad();
                v.zero_grad();
            });
            (fwd, fb)
        }
        _ => {
            let z = random_binary(&[shape.t, 1, shape.d, h, w], 0.2, &mut rng).with_grad();
            let fwd = time_trials(trials, || {
                let tape = Tape::inference();
                pool_spikes(&tape, &z, variant).unwrap();
            });
            let fb = time_trials(trials, || {
                let tape = Tape::new();
                let out = pool_spikes(&tape, &z, variant).unwrap();
                let loss = tape.sum(&out, None).unwrap();
                tape.backward(&loss).unwrap();
                z.zero_grad();
            });
            (fwd, fb)
        }
    };

    Ok(VariantTiming {
        variant: variant.kind.as_str().to_string(),
        forward,
        forward_backward,
        mixer_forward,
        mixer_forward_backward,
    })
}

/// Times two attention variants on identical shapes and seeds.
pub fn bench_attention(
    variant_a: &AttentionVariant,
    variant_b: &AttentionVariant,
    shape: BenchShape,
    trials: usize,
    seed: u64,
) -> Result<BenchReport> {
    if trials == 0 {
        return Err(Error::Config("bench needs at least one trial".into()));
    }
    let (h, w) = token_grid(shape.n)?;
    let a = bench_variant(variant_a, shape, trials, seed)?;
    let b = bench_variant(variant_b, shape, trials, seed)?;
    Ok(BenchReport {
        n: shape.n,
        d: shape.d,
        t: shape.t,
        height: h,
        width: w,
        trials,
        variants: vec![a, b],
    })
}

//! Layer plumbing shared by the network blocks: forward context, BatchNorm
//! with running statistics, and weight initialization.

use rand::Rng;

use crate::autograd::{BatchMoments, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are collected as updates.
    Train,
    /// Running statistics; the model must have seen at least one training batch.
    Eval,
}

/// A pending running-statistics update produced by a training forward.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub norm: BatchNorm,
    pub moments: BatchMoments,
}

/// Everything a block needs during one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    updates: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn into_updates(self) -> Vec<StatUpdate> {
        self.updates
    }
}

/// Applies collected updates in order. Running variance uses the unbiased
/// batch estimate.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let n = u.moments.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = BN_MOMENTUM;
        let mean = store.get_mut(u.norm.running_mean).value.data_mut();
        for (r, &b) in mean.iter_mut().zip(&u.moments.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let var = store.get_mut(u.norm.running_var).value.data_mut();
        for (r, &b) in var.iter_mut().zip(&u.moments.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
        store.get_mut(u.norm.tracked).value.data_mut()[0] += 1.0;
    }
}

/// BatchNorm over axis 1 with affine parameters and running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub tracked: ParamId,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.register(format!("{prefix}.gamma"), ParamKind::NormAffine, false, Tensor::ones(&[channels])),
            beta: store.register(format!("{prefix}.beta"), ParamKind::NormAffine, false, Tensor::zeros(&[channels])),
            running_mean: store.register(format!("{prefix}.running_mean"), ParamKind::Buffer, false, Tensor::zeros(&[channels])),
            running_var: store.register(format!("{prefix}.running_var"), ParamKind::Buffer, false, Tensor::ones(&[channels])),
            tracked: store.register(format!("{prefix}.batches_tracked"), ParamKind::Buffer, false, Tensor::zeros(&[1])),
        }
    }

    /// Like [`BatchNorm::register`] but with affine parameters of the given kind.
    pub fn register_as(store: &mut ParamStore, prefix: &str, channels: usize, kind: ParamKind) -> Self {
        let bn = Self::register(store, prefix, channels);
        store.entries_mut()[bn.gamma.index()].kind = kind;
        store.entries_mut()[bn.beta.index()].kind = kind;
        bn
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, moments) = ctx.tape.batchnorm(x, gamma, beta, NormStats::Batch)?;
                ctx.updates.push(StatUpdate {
                    norm: *self,
                    moments: moments.expect("batch mode returns moments"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                if store.get(self.tracked).value.data()[0] == 0.0 {
                    return Err(Error::State(format!(
                        "{} has no running statistics; train before evaluating",
                        store.entry(self.gamma).name.trim_end_matches(".gamma")
                    )));
                }
                let stats = NormStats::Fixed {
                    mean: store.get(self.running_mean).value.data(),
                    var: store.get(self.running_var).value.data(),
                };
                Ok(ctx.tape.batchnorm(x, gamma, beta, stats)?.0)
            }
        }
    }
}

/// Normal weights with `std = sqrt(2 / fan_out)`, where `fan_out` is the
/// product of every axis but 1.
pub fn fan_out_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_out: usize = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 1)
        .map(|(_, &d)| d)
        .product();
    Tensor::randn(shape, (2.0 / fan_out.max(1) as f64).sqrt(), rng)
}

/// Registers a `[C_out, C_in, K, 1]` convolution kernel.
pub fn register_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> ParamId {
    store.register(name, ParamKind::Conv, true, fan_out_normal(&[c_out, c_in, k, 1], rng))
}

/// Kernel, stride and padding of one temporal (or 1×1) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.tape.conv2d(x, w, self.stride, self.pad)
    }
}

/// Convolution followed by BatchNorm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv {
                weight: register_conv(store, format!("{prefix}.weight"), c_out, c_in, k, rng),
                stride,
                pad: (k - 1) / 2,
            },
            bn: BatchNorm::register(store, &format!("{prefix}.bn"), c_out),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

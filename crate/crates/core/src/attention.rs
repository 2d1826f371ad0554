//! Part-wise attention: one softmax-normalized per-channel weight vector per
//! body part, computed from features pooled over the whole sequence.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{fan_out_normal, BatchNorm, Ctx};
use crate::param::{ParamId, ParamKind, ParamStore};

pub const DEFAULT_ATTENTION_REDUCTION: usize = 4;

/// Trainable scalars of one attention block with `parts` part projections.
pub fn part_att_param_count(channels: usize, reduction: usize, parts: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Spec(format!("reduction {reduction} does not divide {channels} channels")));
    }
    let hidden = channels / reduction;
    Ok(channels * hidden + parts * hidden * channels + 2 * hidden)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartAtt {
    pub channels: usize,
    pub hidden: usize,
    /// Shared reduction `[C, C/r]`.
    pub shared: ParamId,
    /// Per-part expansions `[C/r, C]`.
    pub parts: Vec<ParamId>,
    pub bn: BatchNorm,
    /// Part index of every joint.
    pub part_of: Vec<usize>,
}

impl PartAtt {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        part_of: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        part_att_param_count(channels, reduction, 1)?;
        let num_parts = part_of.iter().max().map_or(0, |&p| p + 1);
        if num_parts == 0 || (0..num_parts).any(|p| !part_of.contains(&p)) {
            return Err(Error::Spec("part assignment must cover every part index".into()));
        }
        let hidden = channels / reduction;
        // fan-out of a [C, C/r] linear map taken as C/r
        let shared = store.register(
            format!("{prefix}.shared"),
            ParamKind::Attention,
            true,
            fan_out_normal(&[hidden, channels], rng).permute(&[1, 0])?,
        );
        let parts = (0..num_parts)
            .map(|p| {
                let w = fan_out_normal(&[channels, hidden], rng).permute(&[1, 0])?;
                Ok(store.register(format!("{prefix}.part{p}"), ParamKind::Attention, true, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let bn = BatchNorm::register_as(store, &format!("{prefix}.bn"), hidden, ParamKind::Attention);
        Ok(PartAtt {
            channels,
            hidden,
            shared,
            parts,
            bn,
            part_of: part_of.to_vec(),
        })
    }

    /// Attention weights `[N, C, P]`; they sum to one over the last axis.
    pub fn weights(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[3] != self.part_of.len() {
            return Err(Error::dim(
                "part_att",
                format!("input {s:?} for {} channels and {} joints", self.channels, self.part_of.len()),
            ));
        }
        let n = s[0];
        let pooled = ctx.tape.mean_pool(x, &[2, 3])?;
        let g = ctx.tape.reshape(pooled, &[n, self.channels])?;
        let w = ctx.param(self.shared);
        let h = ctx.tape.matmul(g, w)?;
        let h = self.bn.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let mut logits = Vec::with_capacity(self.parts.len());
        for &p in &self.parts {
            let wp = ctx.param(p);
            let l = ctx.tape.matmul(h, wp)?;
            logits.push(ctx.tape.reshape(l, &[n, self.channels, 1])?);
        }
        let stacked = ctx.tape.concat(&logits, 2)?;
        ctx.tape.softmax(stacked, 2)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let att = self.weights(ctx, x)?;
        let per_joint = ctx.tape.index_select(att, 2, &self.part_of)?;
        let n = ctx.tape.shape(x)[0];
        let per_joint = ctx.tape.reshape(per_joint, &[n, self.channels, 1, self.part_of.len()])?;
        ctx.tape.mul(x, per_joint)
    }
}

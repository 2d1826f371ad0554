//! Spatial graph convolution, temporal convolution, their basic and
//! bottleneck block variants, residual links and the ResGCN module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{masked_adjacency, AdjacencySet, EdgeImportance};
use crate::nn::{BatchNorm, ConvBn, Ctx};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPORAL_WINDOW: usize = 9;
pub const DEFAULT_MAX_DISTANCE: usize = 2;
pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::Basic => 'B',
            BlockKind::Bottleneck => 'N',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Bottleneck reduction rate `r`; ignored by basic blocks.
    pub reduction: usize,
    /// Temporal kernel length `L` (odd).
    pub temporal_window: usize,
    /// Largest hop distance `D` of the spatial graph convolution.
    pub max_distance: usize,
}

impl BlockSpec {
    pub fn basic() -> Self {
        BlockSpec {
            kind: BlockKind::Basic,
            reduction: 1,
            temporal_window: DEFAULT_TEMPORAL_WINDOW,
            max_distance: DEFAULT_MAX_DISTANCE,
        }
    }

    pub fn bottleneck(reduction: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Bottleneck,
            reduction,
            ..Self::basic()
        }
    }

    /// Width of the bottleneck core for `out_channels`.
    pub fn mid_channels(&self, out_channels: usize) -> Result<usize> {
        match self.kind {
            BlockKind::Basic => Ok(out_channels),
            BlockKind::Bottleneck => {
                if self.reduction == 0 || out_channels % self.reduction != 0 || out_channels < self.reduction {
                    Err(Error::Spec(format!(
                        "reduction {} does not divide {out_channels} output channels",
                        self.reduction
                    )))
                } else {
                    Ok(out_channels / self.reduction)
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_window == 0 || self.temporal_window % 2 == 0 {
            return Err(Error::Spec(format!("temporal window must be odd, got {}", self.temporal_window)));
        }
        if self.kind == BlockKind::Bottleneck && self.reduction == 0 {
            return Err(Error::Spec("bottleneck reduction must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    None,
    Block,
    Module,
    Dense,
}

impl ResidualKind {
    pub fn block_links(self) -> bool {
        matches!(self, ResidualKind::Block | ResidualKind::Dense)
    }

    pub fn module_links(self) -> bool {
        matches!(self, ResidualKind::Module | ResidualKind::Dense)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    pub block: BlockSpec,
    pub residual: ResidualKind,
    pub attention: bool,
}

impl ModuleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Spec("module channels must be positive".into()));
        }
        if !matches!(self.temporal_stride, 1 | 2) {
            return Err(Error::Spec(format!("temporal stride must be 1 or 2, got {}", self.temporal_stride)));
        }
        self.block.validate()?;
        self.block.mid_channels(self.out_channels).map(|_| ())
    }
}

/// `Σ_d W_d f_in (Ā_d ⊗ M_d)` for `x: [N, C_in, T, V]`, `weights[d]: [C_out, C_in]`
/// and `adjacency[d]: [V, V]`.
pub fn spatial_gcn(tape: &mut Tape, x: Var, weights: &[Var], adjacency: &[Var]) -> Result<Var> {
    if weights.is_empty() || weights.len() != adjacency.len() {
        return Err(Error::dim(
            "spatial_gcn",
            format!("{} weights for {} adjacency matrices", weights.len(), adjacency.len()),
        ));
    }
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("spatial_gcn", format!("expected [N, C, T, V], got {s:?}")));
    }
    let (n, c, t, v) = (s[0], s[1], s[2], s[3]);
    for (&w, &a) in weights.iter().zip(adjacency) {
        let (sw, sa) = (tape.shape(w), tape.shape(a));
        if sw.len() != 2 || sw[1] != c || sw[0] != tape.shape(weights[0])[0] {
            return Err(Error::dim("spatial_gcn", format!("weight {sw:?} for {c} input channels")));
        }
        if sa != [v, v] {
            return Err(Error::dim("spatial_gcn", format!("adjacency {sa:?} for {v} joints")));
        }
    }
    let c_out = tape.shape(weights[0])[0];
    let rows = tape.reshape(x, &[n * c * t, v])?;
    let mut mixed = Vec::with_capacity(adjacency.len());
    for &a in adjacency {
        let m = tape.matmul(rows, a)?;
        mixed.push(tape.reshape(m, &[n, c, t, v])?);
    }
    let stacked = tape.concat(&mixed, 1)?;
    let w = tape.concat(weights, 1)?;
    let w = tape.reshape(w, &[c_out, c * weights.len(), 1, 1])?;
    tape.conv2d(stacked, w, 1, 0)
}

/// The `D+1` feature transforms and edge masks of one graph convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphConv {
    pub weights: Vec<ParamId>,
    pub importance: EdgeImportance,
    pub bn: BatchNorm,
}

impl GraphConv {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        adj: &AdjacencySet,
        rng: &mut R,
    ) -> Self {
        let d = adj.normalized.len();
        let weights = (0..d)
            .map(|i| {
                let std = (2.0 / c_out as f64).sqrt();
                store.register(
                    format!("{prefix}.weight{i}"),
                    ParamKind::Conv,
                    true,
                    Tensor::randn(&[c_out, c_in], std, rng),
                )
            })
            .collect();
        GraphConv {
            weights,
            importance: EdgeImportance::register(store, prefix, adj),
            bn: BatchNorm::register(store, &format!("{prefix}.bn"), c_out),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, adj: &AdjacencySet, x: Var) -> Result<Var> {
        let a = masked_adjacency(ctx.tape, ctx.store, adj, &self.importance)?;
        let w: Vec<Var> = self.weights.iter().map(|&id| ctx.param(id)).collect();
        let y = spatial_gcn(ctx.tape, x, &w, &a)?;
        self.bn.forward(ctx, y)
    }
}

/// The core operation of a block: graph convolution or `L×1` temporal convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Core {
    Spatial(GraphConv),
    Temporal(ConvBn),
}

impl Core {
    fn forward(&self, ctx: &mut Ctx<'_>, adj: &AdjacencySet, x: Var) -> Result<Var> {
        match self {
            Core::Spatial(g) => g.forward(ctx, adj, x),
            Core::Temporal(c) => c.forward(ctx, x),
        }
    }
}

/// Shortcut path of a residual link.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// 1×1 convolution with the unit's stride, then BatchNorm.
    Projection(ConvBn),
}

impl Shortcut {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        if c_in == c_out && stride == 1 {
            Shortcut::Identity
        } else {
            Shortcut::Projection(ConvBn::register(store, prefix, c_in, c_out, 1, stride, rng))
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Shortcut::Identity => Ok(x),
            Shortcut::Projection(p) => p.forward(ctx, x),
        }
    }
}

/// A spatial or temporal block, basic or bottleneck:
/// `[reduce →] core [→ expand] (+ shortcut) → ReLU`, BatchNorm after every
/// convolution and ReLU after every BatchNorm except the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub reduce: Option<ConvBn>,
    pub core: Core,
    pub expand: Option<ConvBn>,
    pub shortcut: Option<Shortcut>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spatial: Option<&AdjacencySet>,
        c_in: usize,
        c_out: usize,
        stride: usize,
        spec: &BlockSpec,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if spatial.is_some() && stride != 1 {
            return Err(Error::Spec("spatial blocks do not stride".into()));
        }
        let core = |store: &mut ParamStore, rng: &mut R, name: &str, i: usize, o: usize| match spatial {
            Some(adj) => Core::Spatial(GraphConv::register(store, name, i, o, adj, rng)),
            None => Core::Temporal(ConvBn::register(store, name, i, o, spec.temporal_window, stride, rng)),
        };
        let (reduce, core, expand) = match spec.kind {
            BlockKind::Basic => (None, core(store, rng, &format!("{prefix}.core"), c_in, c_out), None),
            BlockKind::Bottleneck => {
                let mid = spec.mid_channels(c_out)?;
                let reduce = ConvBn::register(store, &format!("{prefix}.reduce"), c_in, mid, 1, 1, rng);
                let body = core(store, rng, &format!("{prefix}.core"), mid, mid);
                let expand = ConvBn::register(store, &format!("{prefix}.expand"), mid, c_out, 1, 1, rng);
                (Some(reduce), body, Some(expand))
            }
        };
        let shortcut =
            residual.then(|| Shortcut::register(store, &format!("{prefix}.shortcut"), c_in, c_out, stride, rng));
        Ok(Block {
            reduce,
            core,
            expand,
            shortcut,
        })
    }

    /// Forward with an optional extra term added before the final ReLU.
    pub fn forward(&self, ctx: &mut Ctx<'_>, adj: &AdjacencySet, x: Var, extra: Option<Var>) -> Result<Var> {
        let mut y = x;
        if let Some(r) = &self.reduce {
            y = r.forward(ctx, y)?;
            y = ctx.tape.relu(y);
        }
        y = self.core.forward(ctx, adj, y)?;
        if let Some(e) = &self.expand {
            y = ctx.tape.relu(y);
            y = e.forward(ctx, y)?;
        }
        if let Some(s) = &self.shortcut {
            let r = s.forward(ctx, x)?;
            y = ctx.tape.add(y, r)?;
        }
        if let Some(e) = extra {
            y = ctx.tape.add(y, e)?;
        }
        Ok(ctx.tape.relu(y))
    }
}

/// Spatial block then temporal block, with residual links per [`ResidualKind`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResGcnModule {
    pub spec: ModuleSpec,
    pub spatial: Block,
    pub temporal: Block,
    pub module_shortcut: Option<Shortcut>,
}

impl ResGcnModule {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: &ModuleSpec,
        adj: &AdjacencySet,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (i, o, s) = (spec.in_channels, spec.out_channels, spec.temporal_stride);
        let blk = spec.residual.block_links();
        let spatial = Block::register(store, &format!("{prefix}.spatial"), Some(adj), i, o, 1, &spec.block, blk, rng)?;
        let temporal = Block::register(store, &format!("{prefix}.temporal"), None, o, o, s, &spec.block, blk, rng)?;
        let module_shortcut = spec
            .residual
            .module_links()
            .then(|| Shortcut::register(store, &format!("{prefix}.shortcut"), i, o, s, rng));
        Ok(ResGcnModule {
            spec: *spec,
            spatial,
            temporal,
            module_shortcut,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, adj: &AdjacencySet, x: Var) -> Result<Var> {
        let extra = match &self.module_shortcut {
            Some(s) => Some(s.forward(ctx, x)?),
            None => None,
        };
        let y = self.spatial.forward(ctx, adj, x, None)?;
        self.temporal.forward(ctx, adj, y, extra)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_adjacency;
    use crate::model::ParamCount;
    use crate::nn::{apply_stat_updates, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn path_adjacency(v: usize, d: usize) -> AdjacencySet {
        let edges: Vec<(usize, usize)> = (1..v).map(|i| (i - 1, i)).collect();
        build_adjacency(&edges, v, d).unwrap()
    }

    fn isolated_count(spatial: bool, c: usize, spec: &BlockSpec) -> ParamCount {
        let mut store = ParamStore::new();
        let adj = path_adjacency(25, 2);
        let adj = spatial.then_some(&adj);
        Block::register(&mut store, "b", adj, c, c, 1, spec, false, &mut rng()).unwrap();
        ParamCount::of(&store, &[])
    }

    #[test]
    fn identity_configuration() {
        let mut tape = Tape::new();
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng());
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::eye(3));
        let a = tape.constant(Tensor::eye(5));
        let y = spatial_gcn(&mut tape, xv, &[w], &[a]).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn single_joint_is_pointwise_convolution() {
        let mut r = rng();
        let mut tape = Tape::new();
        let x = Tensor::randn(&[1, 2, 3, 1], 1.0, &mut r);
        let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 2], 1.0, &mut r)).collect();
        let xv = tape.constant(x.clone());
        let wv: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        let av: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::ones(&[1, 1]))).collect();
        let y = spatial_gcn(&mut tape, xv, &wv, &av).unwrap();
        let want = Tensor::from_fn(&[1, 4, 3, 1], |i| {
            (0..3)
                .map(|d| (0..2).map(|c| ws[d].at(&[i[1], c]) * x.at(&[0, c, i[2], 0])).sum::<f64>())
                .sum()
        });
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let mut r = rng();
        let adj = path_adjacency(3, 2);
        let x = Tensor::randn(&[1, 2, 1, 3], 1.0, &mut r);
        let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 2], 1.0, &mut r)).collect();
        let ms: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3, 3], 0.5, 1.5, &mut r)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        let av: Vec<Var> = (0..3)
            .map(|d| {
                let a = tape.constant(adj.normalized[d].clone());
                let m = tape.constant(ms[d].clone());
                tape.mul(a, m).unwrap()
            })
            .collect();
        let y = spatial_gcn(&mut tape, xv, &wv, &av).unwrap();
        for o in 0..2 {
            for w in 0..3 {
                let mut acc = 0.0;
                for d in 0..3 {
                    for c in 0..2 {
                        for v in 0..3 {
                            acc += ws[d].at(&[o, c])
                                * x.at(&[0, c, 0, v])
                                * adj.normalized[d].at(&[v, w])
                                * ms[d].at(&[v, w]);
                        }
                    }
                }
                assert!((tape.value(y).at(&[0, o, 0, w]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let a = tape.constant(Tensor::eye(3));
        assert!(spatial_gcn(&mut tape, x, &[w, w], &[a]).is_err());
        let bad = tape.constant(Tensor::eye(4));
        assert!(spatial_gcn(&mut tape, x, &[w], &[bad]).is_err());
    }

    #[test]
    fn temporal_block_counts() {
        let basic = isolated_count(false, 256, &BlockSpec::basic());
        assert_eq!(basic.kind(ParamKind::Conv), 589_824);
        assert_eq!(basic.kind(ParamKind::NormAffine), 512);
        let neck = isolated_count(false, 256, &BlockSpec::bottleneck(4));
        assert_eq!(neck.kind(ParamKind::Conv), 69_632);
        let ratio = basic.kind(ParamKind::Conv) as f64 / neck.kind(ParamKind::Conv) as f64;
        assert!((ratio - 8.47).abs() < 0.005);
    }

    #[test]
    fn spatial_bottleneck_count() {
        let c = isolated_count(true, 256, &BlockSpec::bottleneck(4));
        assert_eq!(c.kind(ParamKind::Conv), 45_056);
        assert_eq!(c.kind(ParamKind::EdgeMask), 3 * 625);
    }

    #[test]
    fn bottleneck_requires_divisible_width() {
        let mut store = ParamStore::new();
        let r = Block::register(&mut store, "b", None, 6, 6, 1, &BlockSpec::bottleneck(4), false, &mut rng());
        assert!(matches!(r, Err(Error::Spec(_))));
    }

    fn run_module(spec: &ModuleSpec, x: &Tensor, zero_convs: bool) -> Tensor {
        let adj = path_adjacency(x.shape()[3], 2);
        let mut store = ParamStore::new();
        let m = ResGcnModule::register(&mut store, "m", spec, &adj, &mut rng()).unwrap();
        if zero_convs {
            for e in store.entries_mut().iter_mut().filter(|e| e.kind == ParamKind::Conv) {
                e.param.value = Tensor::zeros(e.param.value.shape());
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let y = m.forward(&mut ctx, &adj, xv).unwrap();
        let updates = ctx.into_updates();
        let out = tape.value(y).clone();
        apply_stat_updates(&mut store, &updates);
        out
    }

    fn module_spec(i: usize, o: usize, stride: usize, residual: ResidualKind) -> ModuleSpec {
        ModuleSpec {
            in_channels: i,
            out_channels: o,
            temporal_stride: stride,
            block: BlockSpec::bottleneck(2),
            residual,
            attention: false,
        }
    }

    #[test]
    fn block_residual_keeps_input_through_zero_weights() {
        let x = Tensor::uniform(&[2, 4, 6, 5], 0.0, 1.0, &mut rng());
        let y = run_module(&module_spec(4, 4, 1, ResidualKind::Block), &x, true);
        assert!(y.max_abs_diff(&x) < 1e-12);
        let none = run_module(&module_spec(4, 4, 1, ResidualKind::None), &x, true);
        assert!(none.is_all_zero());
    }

    #[test]
    fn stride_halves_frames_and_output_is_rectified() {
        let x = Tensor::randn(&[1, 4, 300, 3], 1.0, &mut rng());
        let y = run_module(&module_spec(4, 8, 2, ResidualKind::Dense), &x, false);
        assert_eq!(y.shape(), &[1, 8, 150, 3]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
        let y = run_module(&module_spec(4, 4, 1, ResidualKind::Module), &x, false);
        assert_eq!(y.shape(), &[1, 4, 300, 3]);
    }

    #[test]
    fn residual_kinds_add_projections() {
        let count = |res| {
            let mut store = ParamStore::new();
            let adj = path_adjacency(25, 2);
            ResGcnModule::register(&mut store, "m", &module_spec(8, 16, 2, res), &adj, &mut rng()).unwrap();
            store.trainable_count()
        };
        let (none, block, module, dense) = (
            count(ResidualKind::None),
            count(ResidualKind::Block),
            count(ResidualKind::Module),
            count(ResidualKind::Dense),
        );
        // block: 8->16 spatial projection + strided 16->16 temporal projection
        assert_eq!(block - none, (8 * 16 + 32) + (16 * 16 + 32));
        assert_eq!(module - none, 8 * 16 + 32);
        assert_eq!(dense - none, (block - none) + (module - none));
    }
}

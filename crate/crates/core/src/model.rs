//! Full model assembly: three input branches fused by channel concatenation,
//! a strided mainstream with optional part attention, global mean pooling and
//! a linear classifier.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{PartAtt, DEFAULT_ATTENTION_REDUCTION};
use crate::autograd::{Tape, Var};
use crate::blocks::{
    BlockKind, BlockSpec, ModuleSpec, ResGcnModule, ResidualKind, DEFAULT_MAX_DISTANCE, DEFAULT_REDUCTION,
    DEFAULT_TEMPORAL_WINDOW,
};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, AdjacencySet, GraphFile, SkeletonGraph};
use crate::nn::{apply_stat_updates, fan_out_normal, Ctx, Mode, StatUpdate};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::preprocess::{Branches, BRANCH_CHANNELS};
use crate::tensor::Tensor;

pub const NUM_PARTS: usize = 4;
pub const BRANCH_NAMES: [&str; 3] = ["joint", "velocity", "bone"];

/// One `(kind, count)` entry of a structure string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructurePart {
    pub kind: BlockKind,
    pub count: usize,
}

/// Parsed structure string such as `[B1,N2,N3,N3]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Structure(pub Vec<StructurePart>);

impl Structure {
    pub fn parts(&self) -> &[StructurePart] {
        &self.0
    }

    /// Same counts with every part after the first switched to `kind`.
    pub fn with_trunk_kind(&self, kind: BlockKind) -> Structure {
        let mut parts = self.0.clone();
        for p in parts.iter_mut().skip(1) {
            p.kind = kind;
        }
        Structure(parts)
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self.0.iter().map(|p| format!("{}{}", p.kind.letter(), p.count)).collect();
        write!(f, "[{}]", items.join(","))
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_structure(s)
    }
}

impl TryFrom<String> for Structure {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        parse_structure(&s)
    }
}

impl From<Structure> for String {
    fn from(s: Structure) -> String {
        s.to_string()
    }
}

/// Parses `[<K><count>,...]` with `K` in `{B, N}` and exactly four entries.
/// Error positions are 0-based character offsets.
pub fn parse_structure(s: &str) -> Result<Structure> {
    let chars: Vec<char> = s.chars().collect();
    let err = |pos: usize, msg: &str| Error::Structure { pos, msg: msg.into() };
    if chars.first() != Some(&'[') {
        return Err(err(0, "expected '['"));
    }
    let mut pos = 1;
    let mut parts = Vec::new();
    loop {
        let kind = match chars.get(pos) {
            Some('B') => BlockKind::Basic,
            Some('N') => BlockKind::Bottleneck,
            Some(_) => return Err(err(pos, "block kind must be 'B' or 'N'")),
            None => return Err(err(pos, "unexpected end of input")),
        };
        pos += 1;
        let start = pos;
        while chars.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(err(pos, "expected a module count"));
        }
        let digits: String = chars[start..pos].iter().collect();
        let count: usize = digits.parse().map_err(|_| err(start, "module count out of range"))?;
        if count == 0 {
            return Err(err(start, "module count must be at least 1"));
        }
        parts.push(StructurePart { kind, count });
        match chars.get(pos) {
            Some(',') => pos += 1,
            Some(']') => {
                pos += 1;
                break;
            }
            Some(_) => return Err(err(pos, "expected ',' or ']'")),
            None => return Err(err(pos, "unexpected end of input")),
        }
    }
    if pos != chars.len() {
        return Err(err(pos, "trailing characters after ']'"));
    }
    if parts.len() != NUM_PARTS {
        return Err(err(
            pos - 1,
            &format!("expected {NUM_PARTS} parts, found {}", parts.len()),
        ));
    }
    Ok(Structure(parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub structure: Structure,
    /// Widths `[part 1, part 2 exit, part 3, part 4]`. Part 2 runs at the
    /// part-1 width and narrows in its last module.
    pub channel_plan: Vec<usize>,
    pub num_classes: usize,
    pub with_part_attention: bool,
    pub residual: ResidualKind,
    /// Bottleneck reduction rate.
    pub reduction: usize,
    pub temporal_window: usize,
    pub max_distance: usize,
    pub attention_reduction: usize,
}

pub const DEFAULT_CHANNEL_PLAN: [usize; 4] = [64, 32, 128, 256];

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            structure: parse_structure("[B1,N2,N3,N3]").expect("valid default"),
            channel_plan: DEFAULT_CHANNEL_PLAN.to_vec(),
            num_classes: 60,
            with_part_attention: false,
            residual: ResidualKind::Block,
            reduction: DEFAULT_REDUCTION,
            temporal_window: DEFAULT_TEMPORAL_WINDOW,
            max_distance: DEFAULT_MAX_DISTANCE,
            attention_reduction: DEFAULT_ATTENTION_REDUCTION,
        }
    }
}

/// Placement of one module within the network.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedModule {
    pub name: String,
    pub spec: ModuleSpec,
}

impl ModelSpec {
    pub fn new(structure: &str, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            structure: parse_structure(structure)?,
            num_classes,
            ..Default::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    fn block(&self, kind: BlockKind) -> BlockSpec {
        BlockSpec {
            kind,
            reduction: self.reduction,
            temporal_window: self.temporal_window,
            max_distance: self.max_distance,
        }
    }

    /// Modules of one input branch, in order. Names are relative.
    pub fn branch_modules(&self) -> Vec<ModuleSpec> {
        let p = self.structure.parts();
        let (c1, c2) = (self.channel_plan[0], self.channel_plan[1]);
        let mut out = Vec::new();
        let module = |i, o, kind| ModuleSpec {
            in_channels: i,
            out_channels: o,
            temporal_stride: 1,
            block: self.block(kind),
            residual: self.residual,
            attention: false,
        };
        for k in 0..p[0].count {
            out.push(module(if k == 0 { BRANCH_CHANNELS } else { c1 }, c1, p[0].kind));
        }
        for k in 0..p[1].count {
            let o = if k + 1 == p[1].count { c2 } else { c1 };
            out.push(module(c1, o, p[1].kind));
        }
        out
    }

    /// Mainstream modules, in order; the first module of each part strides.
    pub fn mainstream_modules(&self) -> Vec<ModuleSpec> {
        let p = self.structure.parts();
        let mut out = Vec::new();
        let mut width = 3 * self.channel_plan[1];
        for part in 2..NUM_PARTS {
            let c = self.channel_plan[part];
            for k in 0..p[part].count {
                out.push(ModuleSpec {
                    in_channels: width,
                    out_channels: c,
                    temporal_stride: if k == 0 { 2 } else { 1 },
                    block: self.block(p[part].kind),
                    residual: self.residual,
                    attention: self.with_part_attention,
                });
                width = c;
            }
        }
        out
    }

    /// Every module with its parameter-name prefix.
    pub fn planned_modules(&self) -> Vec<PlannedModule> {
        let mut out = Vec::new();
        for b in BRANCH_NAMES {
            for (i, spec) in self.branch_modules().into_iter().enumerate() {
                out.push(PlannedModule {
                    name: format!("{b}.m{i}"),
                    spec,
                });
            }
        }
        for (i, spec) in self.mainstream_modules().into_iter().enumerate() {
            out.push(PlannedModule {
                name: format!("main.m{i}"),
                spec,
            });
        }
        out
    }

    pub fn feature_channels(&self) -> usize {
        self.channel_plan[NUM_PARTS - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.structure.parts().len() != NUM_PARTS {
            return Err(Error::Spec(format!("structure must have {NUM_PARTS} parts")));
        }
        if self.channel_plan.len() != self.structure.parts().len() {
            return Err(Error::Spec(format!(
                "channel plan has {} widths for {} structure parts",
                self.channel_plan.len(),
                self.structure.parts().len()
            )));
        }
        if self.channel_plan.contains(&0) {
            return Err(Error::Spec("channel widths must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Spec("num_classes must be positive".into()));
        }
        for m in self.planned_modules() {
            m.spec
                .validate()
                .map_err(|e| Error::Spec(format!("module {}: {e}", m.name)))?;
            if m.spec.attention {
                crate::attention::part_att_param_count(m.spec.out_channels, self.attention_reduction, 1)
                    .map_err(|e| Error::Spec(format!("attention after {}: {e}", m.name)))?;
            }
        }
        Ok(())
    }
}

/// A mainstream module and its optional attention block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MainModule {
    pub name: String,
    pub module: ResGcnModule,
    pub attention: Option<PartAtt>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classifier {
    /// `[K, C]`.
    pub weight: ParamId,
    /// `[K]`.
    pub bias: ParamId,
}

/// Branch inputs of a batch with bodies folded into the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B', 6, T, V]` for joint, velocity and bone features.
    pub inputs: [Tensor; 3],
    /// Sample index of every folded row.
    pub owner: Vec<usize>,
    pub samples: usize,
}

impl Batch {
    /// Keeps the non-empty bodies of every sample, or body 0 if all are empty.
    pub fn from_branches(items: &[&Branches]) -> Result<Batch> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("cannot assemble an empty batch".into()))?;
        let (t, v) = (first.frames(), first.joints());
        let mut owner = Vec::new();
        let mut data: [Vec<f64>; 3] = Default::default();
        for (i, b) in items.iter().enumerate() {
            if b.frames() != t || b.joints() != v {
                return Err(Error::dim(
                    "batch",
                    format!("sample {i} is {}x{}, expected {t}x{v}", b.frames(), b.joints()),
                ));
            }
            let mut bodies = b.non_empty_bodies();
            if bodies.is_empty() {
                bodies.push(0);
            }
            let m_total = b.bodies();
            for m in bodies {
                owner.push(i);
                for (k, branch) in b.as_array().into_iter().enumerate() {
                    let src = branch.features.data();
                    data[k].extend((0..BRANCH_CHANNELS * t * v).map(|j| src[j * m_total + m]));
                }
            }
        }
        let rows = owner.len();
        let inputs = data.map(|d| Tensor::new(vec![rows, BRANCH_CHANNELS, t, v], d).expect("consistent sizes"));
        Ok(Batch {
            inputs,
            owner,
            samples: items.len(),
        })
    }

    /// `[samples, rows]` matrix averaging rows per sample.
    pub fn fold_matrix(&self) -> Tensor {
        let mut counts = vec![0usize; self.samples];
        for &o in &self.owner {
            counts[o] += 1;
        }
        let rows = self.owner.len();
        Tensor::from_fn(&[self.samples, rows], |i| {
            if self.owner[i[1]] == i[0] {
                1.0 / counts[i[0]] as f64
            } else {
                0.0
            }
        })
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[samples, K]`.
    pub logits: Var,
    /// `[rows, K]`, one row per folded body.
    pub body_logits: Var,
    /// Last feature map before pooling, `[rows, C, T', V]`.
    pub features: Var,
    pub updates: Vec<StatUpdate>,
}

#[derive(Clone, Debug)]
pub struct ResGcnModel {
    pub spec: ModelSpec,
    pub graph: SkeletonGraph,
    pub adjacency: AdjacencySet,
    pub store: ParamStore,
    pub branches: Vec<Vec<(String, ResGcnModule)>>,
    pub mainstream: Vec<MainModule>,
    pub classifier: Classifier,
}

/// Builds a model with seeded initial weights.
pub fn build_model(spec: &ModelSpec, graph: &SkeletonGraph, seed: u64) -> Result<ResGcnModel> {
    spec.validate()?;
    let adjacency = build_adjacency(&graph.edges, graph.num_joints, spec.max_distance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut branches = Vec::with_capacity(3);
    for b in BRANCH_NAMES {
        let mut modules = Vec::new();
        for (i, m) in spec.branch_modules().iter().enumerate() {
            let name = format!("{b}.m{i}");
            let module = ResGcnModule::register(&mut store, &name, m, &adjacency, &mut rng)?;
            modules.push((name, module));
        }
        branches.push(modules);
    }
    let mut mainstream = Vec::new();
    for (i, m) in spec.mainstream_modules().iter().enumerate() {
        let name = format!("main.m{i}");
        let module = ResGcnModule::register(&mut store, &name, m, &adjacency, &mut rng)?;
        let attention = if m.attention {
            Some(PartAtt::register(
                &mut store,
                &format!("{name}.att"),
                m.out_channels,
                spec.attention_reduction,
                graph.part_of(),
                &mut rng,
            )?)
        } else {
            None
        };
        mainstream.push(MainModule {
            name,
            module,
            attention,
        });
    }
    let c = spec.feature_channels();
    let k = spec.num_classes;
    let classifier = Classifier {
        weight: store.register(
            "classifier.weight",
            ParamKind::Classifier,
            true,
            fan_out_normal(&[k, c], &mut rng),
        ),
        bias: store.register("classifier.bias", ParamKind::Classifier, false, Tensor::zeros(&[k])),
    };
    Ok(ResGcnModel {
        spec: spec.clone(),
        graph: graph.clone(),
        adjacency,
        store,
        branches,
        mainstream,
        classifier,
    })
}

impl ResGcnModel {
    pub fn module_count(&self) -> usize {
        self.branches.iter().map(Vec::len).sum::<usize>() + self.mainstream.len()
    }

    /// Records a forward pass of `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: Mode) -> Result<Forward> {
        let v = self.graph.num_joints;
        for x in &batch.inputs {
            if x.shape()[3] != v {
                return Err(Error::dim("model", format!("input has {} joints, graph has {v}", x.shape()[3])));
            }
        }
        let mut ctx = Ctx::new(tape, &self.store, mode);
        let mut outs = Vec::with_capacity(3);
        for (modules, input) in self.branches.iter().zip(&batch.inputs) {
            let mut x = ctx.tape.constant(input.clone());
            for (_, m) in modules {
                x = m.forward(&mut ctx, &self.adjacency, x)?;
            }
            outs.push(x);
        }
        let mut x = ctx.tape.concat(&outs, 1)?;
        for m in &self.mainstream {
            x = m.module.forward(&mut ctx, &self.adjacency, x)?;
            if let Some(att) = &m.attention {
                x = att.forward(&mut ctx, x)?;
            }
        }
        let features = x;
        let rows = batch.owner.len();
        let c = self.spec.feature_channels();
        let pooled = ctx.tape.mean_pool(features, &[2, 3])?;
        let pooled = ctx.tape.reshape(pooled, &[rows, c])?;
        let w = ctx.param(self.classifier.weight);
        let wt = ctx.tape.transpose(w)?;
        let body_logits = ctx.tape.matmul(pooled, wt)?;
        let bias = ctx.param(self.classifier.bias);
        let bias = ctx.tape.reshape(bias, &[1, self.spec.num_classes])?;
        let body_logits = ctx.tape.add(body_logits, bias)?;
        let fold = ctx.tape.constant(batch.fold_matrix());
        let logits = ctx.tape.matmul(fold, body_logits)?;
        Ok(Forward {
            logits,
            body_logits,
            features,
            updates: ctx.into_updates(),
        })
    }

    /// Eval-mode logits `[samples, K]` without gradient bookkeeping.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, batch, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        apply_stat_updates(&mut self.store, updates);
    }

    /// Parameter-name prefixes used for the per-module breakdown.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = self.branches.iter().flatten().map(|(n, _)| n.clone()).collect();
        for m in &self.mainstream {
            out.push(m.name.clone());
            if m.attention.is_some() {
                out.push(format!("{}.att", m.name));
            }
        }
        out.push("classifier".into());
        out
    }

    pub fn count_params(&self) -> ParamCount {
        ParamCount::of(&self.store, &self.groups())
    }
}

/// Trainable-scalar counts, total and broken down.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    /// Per group prefix, in model order.
    pub by_module: Vec<(String, usize)>,
    pub by_kind: Vec<(ParamKind, usize)>,
}

impl ParamCount {
    /// Counts trainable entries of `store`, assigning each to the longest
    /// matching group prefix (or `"other"`).
    pub fn of(store: &ParamStore, groups: &[String]) -> ParamCount {
        let mut by_module: Vec<(String, usize)> = groups.iter().map(|g| (g.clone(), 0)).collect();
        let kinds = [
            ParamKind::Conv,
            ParamKind::EdgeMask,
            ParamKind::NormAffine,
            ParamKind::Attention,
            ParamKind::Classifier,
        ];
        let mut by_kind: Vec<(ParamKind, usize)> = kinds.iter().map(|&k| (k, 0)).collect();
        let mut total = 0;
        for e in store.entries().iter().filter(|e| e.param.trainable) {
            let n = e.param.numel();
            total += n;
            let slot = by_kind.iter_mut().find(|(k, _)| *k == e.kind).expect("trainable kind");
            slot.1 += n;
            let group = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| e.name.len() > g.len() && e.name.starts_with(g.as_str()) && e.name.as_bytes()[g.len()] == b'.')
                .max_by_key(|(_, g)| g.len())
                .map(|(i, _)| i);
            match group {
                Some(i) => by_module[i].1 += n,
                None => match by_module.iter_mut().find(|(g, _)| g == "other") {
                    Some(slot) => slot.1 += n,
                    None => by_module.push(("other".into(), n)),
                },
            }
        }
        ParamCount {
            total,
            by_module,
            by_kind,
        }
    }

    pub fn kind(&self, kind: ParamKind) -> usize {
        self.by_kind.iter().find(|(k, _)| *k == kind).map_or(0, |(_, n)| *n)
    }

    pub fn module(&self, name: &str) -> Option<usize> {
        self.by_module.iter().find(|(g, _)| g == name).map(|(_, n)| *n)
    }
}

/// Parameter count of the model `spec` describes on `graph`.
pub fn count_params(spec: &ModelSpec, graph: &SkeletonGraph) -> Result<ParamCount> {
    Ok(build_model(spec, graph, 0)?.count_params())
}

/// JSON sidecar stored next to an `RGCN1` checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub graph: GraphFile,
    pub structural_hash: String,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the weights to `path` and the sidecar to `<path>.json`.
pub fn save_checkpoint(model: &ResGcnModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    model.store.write_checkpoint(&mut w)?;
    let meta = CheckpointMeta {
        model: model.spec.clone(),
        graph: model.graph.to_file_data(),
        structural_hash: model.store.structural_hash(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ResGcnModel> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let graph = SkeletonGraph::from_file_data(meta.graph)?;
    let mut model = build_model(&meta.model, &graph, 0)?;
    let hash = model.store.structural_hash();
    if hash != meta.structural_hash {
        return Err(Error::Format(format!(
            "structural hash mismatch: sidecar {}, rebuilt model {hash}",
            meta.structural_hash
        )));
    }
    model.store.read_checkpoint(BufReader::new(File::open(path)?))?;
    Ok(model)
}

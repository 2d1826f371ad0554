//! Skeleton topology: the joint tree, body parts, hop-distance adjacency and
//! the learnable edge-importance masks.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

const NTU25_JSON: &str = include_str!("../data/ntu25.json");

/// On-disk graph description. Joint indices are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub name: String,
    pub num_joints: usize,
    pub center: usize,
    /// `[parent, child]` pairs.
    pub edges: Vec<[usize; 2]>,
    pub parts: Vec<Vec<usize>>,
    #[serde(default)]
    pub part_names: Vec<String>,
}

/// A joint tree with a center joint and a partition into body parts.
/// Indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonGraph {
    pub name: String,
    pub num_joints: usize,
    /// `(parent, child)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub center: usize,
    pub parts: Vec<Vec<usize>>,
    pub part_names: Vec<String>,
    parent: Vec<Option<usize>>,
    part_of: Vec<usize>,
}

impl SkeletonGraph {
    pub fn new(
        name: impl Into<String>,
        num_joints: usize,
        edges: Vec<(usize, usize)>,
        center: usize,
        parts: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::Topology("graph has no joints".into()));
        }
        if edges.len() + 1 != num_joints {
            return Err(Error::Topology(format!(
                "a tree on {num_joints} joints has {} edges, got {}",
                num_joints - 1,
                edges.len()
            )));
        }
        let mut parent = vec![None; num_joints];
        for &(p, c) in &edges {
            if p >= num_joints || c >= num_joints || p == c {
                return Err(Error::Topology(format!("bad edge ({p}, {c})")));
            }
            if parent[c].replace(p).is_some() {
                return Err(Error::Topology(format!("joint {c} has two parents")));
            }
        }
        // With V-1 edges and unique parents, connectivity makes it a tree.
        graph_distances(&edges, num_joints)?;
        if center >= num_joints {
            return Err(Error::Topology(format!("center joint {center} out of range")));
        }
        let part_of = partition_index(&parts, num_joints)?;
        Ok(SkeletonGraph {
            name: name.into(),
            num_joints,
            edges,
            center,
            parts,
            part_names: Vec::new(),
            parent,
            part_of,
        })
    }

    /// The NTU RGB+D 25-joint skeleton rooted at the spine base with the
    /// spine middle as center and five body parts.
    pub fn ntu25() -> Self {
        let file: GraphFile = serde_json::from_str(NTU25_JSON).expect("bundled graph file parses");
        SkeletonGraph::from_file_data(file).expect("bundled graph file is valid")
    }

    pub fn from_file_data(f: GraphFile) -> Result<Self> {
        let dec = |i: usize| {
            if i == 0 || i > f.num_joints {
                Err(Error::Topology(format!("joint index {i} outside 1..={}", f.num_joints)))
            } else {
                Ok(i - 1)
            }
        };
        let edges = f
            .edges
            .iter()
            .map(|&[p, c]| Ok((dec(p)?, dec(c)?)))
            .collect::<Result<Vec<_>>>()?;
        let parts = f
            .parts
            .iter()
            .map(|p| p.iter().map(|&j| dec(j)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut g = SkeletonGraph::new(f.name, f.num_joints, edges, dec(f.center)?, parts)?;
        g.part_names = f.part_names;
        Ok(g)
    }

    pub fn to_file_data(&self) -> GraphFile {
        GraphFile {
            name: self.name.clone(),
            num_joints: self.num_joints,
            center: self.center + 1,
            edges: self.edges.iter().map(|&(p, c)| [p + 1, c + 1]).collect(),
            parts: self
                .parts
                .iter()
                .map(|p| p.iter().map(|j| j + 1).collect())
                .collect(),
            part_names: self.part_names.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        SkeletonGraph::from_file_data(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file_data())?)?;
        Ok(())
    }

    /// Parent of each joint; `None` for the root.
    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn root(&self) -> usize {
        self.parent.iter().position(Option::is_none).expect("tree has a root")
    }

    /// Part index of each joint.
    pub fn part_of(&self) -> &[usize] {
        &self.part_of
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// A path graph `0 - 1 - ... - (n-1)` rooted at joint 0 with every joint
    /// its own part.
    pub fn chain(n: usize) -> Result<Self> {
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        let parts = (0..n).map(|i| vec![i]).collect();
        SkeletonGraph::new(format!("chain-{n}"), n, edges, n / 2, parts)
    }
}

fn partition_index(parts: &[Vec<usize>], v: usize) -> Result<Vec<usize>> {
    let mut part_of = vec![usize::MAX; v];
    for (p, joints) in parts.iter().enumerate() {
        if joints.is_empty() {
            return Err(Error::Spec(format!("part {p} is empty")));
        }
        for &j in joints {
            if j >= v {
                return Err(Error::Spec(format!("part {p} names joint {j} outside the graph")));
            }
            if part_of[j] != usize::MAX {
                return Err(Error::Spec(format!("joint {j} belongs to parts {} and {p}", part_of[j])));
            }
            part_of[j] = p;
        }
    }
    if let Some(j) = part_of.iter().position(|&p| p == usize::MAX) {
        return Err(Error::Spec(format!("joint {j} belongs to no part")));
    }
    Ok(part_of)
}

/// All-pairs hop counts by breadth-first search from every joint. Edges are
/// treated as undirected.
pub fn graph_distances(edges: &[(usize, usize)], v: usize) -> Result<Vec<Vec<usize>>> {
    let mut nbrs = vec![Vec::new(); v];
    for &(a, b) in edges {
        if a >= v || b >= v {
            return Err(Error::Topology(format!("edge ({a}, {b}) outside {v} joints")));
        }
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut dist = vec![vec![usize::MAX; v]; v];
    for (src, row) in dist.iter_mut().enumerate() {
        row[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &w in &nbrs[u] {
                if row[w] == usize::MAX {
                    row[w] = row[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if let Some(far) = row.iter().position(|&d| d == usize::MAX) {
            return Err(Error::Topology(format!("joint {far} unreachable from joint {src}")));
        }
    }
    Ok(dist)
}

/// Exact-distance hop classes `A_0..A_D` and their symmetric normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencySet {
    pub max_distance: usize,
    pub num_joints: usize,
    /// Binary `V×V` matrices; `hops[d][i][j] = 1` iff `dist(i, j) == d`.
    pub hops: Vec<Tensor>,
    /// `Λ_d^{-1/2} A_d Λ_d^{-1/2}`; zero-degree rows stay zero.
    pub normalized: Vec<Tensor>,
}

pub fn build_adjacency(edges: &[(usize, usize)], v: usize, max_distance: usize) -> Result<AdjacencySet> {
    let dist = graph_distances(edges, v)?;
    let mut hops = Vec::with_capacity(max_distance + 1);
    let mut normalized = Vec::with_capacity(max_distance + 1);
    for d in 0..=max_distance {
        let a = Tensor::from_fn(&[v, v], |ix| if dist[ix[0]][ix[1]] == d { 1.0 } else { 0.0 });
        let deg: Vec<f64> = (0..v).map(|i| a.data()[i * v..(i + 1) * v].iter().sum()).collect();
        let n = Tensor::from_fn(&[v, v], |ix| {
            let (i, j) = (ix[0], ix[1]);
            let aij = a.data()[i * v + j];
            if aij == 0.0 {
                0.0
            } else {
                aij / (deg[i] * deg[j]).sqrt()
            }
        });
        hops.push(a);
        normalized.push(n);
    }
    Ok(AdjacencySet {
        max_distance,
        num_joints: v,
        hops,
        normalized,
    })
}

/// Learnable `V×V` multipliers, one per hop class, initialized to ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeImportance {
    pub masks: Vec<ParamId>,
}

impl EdgeImportance {
    pub fn register(store: &mut ParamStore, prefix: &str, adj: &AdjacencySet) -> Self {
        let v = adj.num_joints;
        let masks = (0..=adj.max_distance)
            .map(|d| store.register(format!("{prefix}.edge{d}"), ParamKind::EdgeMask, true, Tensor::ones(&[v, v])))
            .collect();
        EdgeImportance { masks }
    }
}

/// `Ā_d ⊗ M_d` for every hop class, differentiable in the masks.
pub fn masked_adjacency(
    tape: &mut Tape,
    store: &ParamStore,
    adj: &AdjacencySet,
    importance: &EdgeImportance,
) -> Result<Vec<Var>> {
    if importance.masks.len() != adj.normalized.len() {
        return Err(Error::dim(
            "masked_adjacency",
            format!("{} masks for {} hop classes", importance.masks.len(), adj.normalized.len()),
        ));
    }
    adj.normalized
        .iter()
        .zip(&importance.masks)
        .map(|(a, &m)| {
            let a = tape.constant(a.clone());
            let m = tape.param(store, m);
            if tape.shape(a) != tape.shape(m) {
                return Err(Error::dim(
                    "masked_adjacency",
                    format!("adjacency {:?} vs mask {:?}", tape.shape(a), tape.shape(m)),
                ));
            }
            tape.mul(a, m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Vec<(usize, usize)> {
        (1..n).map(|i| (i - 1, i)).collect()
    }

    #[test]
    fn ntu_graph_is_valid() {
        let g = SkeletonGraph::ntu25();
        assert_eq!(g.num_joints, 25);
        assert_eq!(g.edges.len(), 24);
        assert_eq!(g.root(), 0);
        assert_eq!(g.center, 1);
        assert_eq!(g.num_parts(), 5);
        let sizes: Vec<usize> = g.parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 6, 6, 4, 4]);
        let back = SkeletonGraph::from_file_data(g.to_file_data()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn distances_basic() {
        let g = SkeletonGraph::ntu25();
        let d = graph_distances(&g.edges, 25).unwrap();
        for (i, row) in d.iter().enumerate() {
            assert_eq!(row[i], 0);
        }
        for &(p, c) in &g.edges {
            assert_eq!(d[p][c], 1);
        }
        // head (4) -> neck (3) -> spine shoulder (21) -> spine middle (2) -> spine base (1)
        assert_eq!(d[3][0], 4);
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        assert!(matches!(graph_distances(&[(0, 1)], 3), Err(Error::Topology(_))));
    }

    #[test]
    fn unit_degree_normalization() {
        let adj = build_adjacency(&path(2), 2, 1).unwrap();
        assert_eq!(adj.normalized[1], adj.hops[1]);
        assert_eq!(adj.normalized[0], Tensor::eye(2));
    }

    #[test]
    fn three_node_path_normalization() {
        let adj = build_adjacency(&path(3), 3, 1).unwrap();
        let a = &adj.normalized[1];
        let h = 1.0 / 2f64.sqrt();
        assert_eq!(a.at(&[0, 1]), h);
        assert_eq!(a.at(&[1, 0]), h);
        assert_eq!(a.at(&[0, 2]), 0.0);
    }

    #[test]
    fn zero_degree_rows_stay_zero() {
        // On a 3-path, only the two ends are 2 hops apart; the middle has degree 0.
        let adj = build_adjacency(&path(3), 3, 2).unwrap();
        let a2 = &adj.normalized[2];
        assert!((0..3).all(|j| a2.at(&[1, j]) == 0.0));
        assert_eq!(a2.at(&[0, 2]), 1.0);
    }

    #[test]
    fn parts_must_partition() {
        assert!(SkeletonGraph::new("x", 3, path(3), 0, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(SkeletonGraph::new("x", 3, path(3), 0, vec![vec![0, 1]]).is_err());
        assert!(SkeletonGraph::new("x", 3, vec![(0, 1)], 0, vec![vec![0, 1, 2]]).is_err());
    }

    #[test]
    fn masked_adjacency_identities_and_gradient() {
        let g = SkeletonGraph::chain(4).unwrap();
        let adj = build_adjacency(&g.edges, 4, 2).unwrap();
        let mut store = ParamStore::new();
        let imp = EdgeImportance::register(&mut store, "m", &adj);
        let mut tape = Tape::new();
        let out = masked_adjacency(&mut tape, &store, &adj, &imp).unwrap();
        for (d, &o) in out.iter().enumerate() {
            assert_eq!(tape.value(o), &adj.normalized[d]);
        }
        let mut total = tape.sum(out[0]);
        for &o in &out[1..] {
            let s = tape.sum(o);
            total = tape.add(total, s).unwrap();
        }
        tape.backward(total).unwrap();
        tape.accumulate_param_grads(&mut store);
        for (d, &m) in imp.masks.iter().enumerate() {
            assert_eq!(&store.get(m).grad, &adj.normalized[d]);
        }

        for &m in &imp.masks {
            store.get_mut(m).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let out = masked_adjacency(&mut tape, &store, &adj, &imp).unwrap();
        assert!(out.iter().all(|&o| tape.value(o).is_all_zero()));
    }
}

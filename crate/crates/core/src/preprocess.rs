//! The three 6-channel input branches derived from raw joint coordinates:
//! joint positions, motion velocities and bone features.
//!
//! Branch files hold three tagged `SKL1` records (`C = 6`), each preceded by a
//! 4-byte ASCII kind tag: `JOIN`, `VELO`, `BONE`, in that order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::skeleton::{self, SkeletonSequence};
use crate::tensor::Tensor;

pub const BRANCH_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Joint,
    Velocity,
    Bone,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Joint, BranchKind::Velocity, BranchKind::Bone];

    pub fn tag(self) -> &'static [u8; 4] {
        match self {
            BranchKind::Joint => b"JOIN",
            BranchKind::Velocity => b"VELO",
            BranchKind::Bone => b"BONE",
        }
    }
}

/// One preprocessed input, `[6, T, V, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInput {
    pub kind: BranchKind,
    pub features: Tensor,
}

impl BranchInput {
    pub fn at(&self, c: usize, t: usize, v: usize, m: usize) -> f64 {
        self.features.at(&[c, t, v, m])
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

/// All three branches of one sequence, in `(joint, velocity, bone)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Branches {
    pub joint: BranchInput,
    pub velocity: BranchInput,
    pub bone: BranchInput,
    pub valid_frames: usize,
    pub label: Option<usize>,
}

impl Branches {
    pub fn as_array(&self) -> [&BranchInput; 3] {
        [&self.joint, &self.velocity, &self.bone]
    }

    pub fn frames(&self) -> usize {
        self.joint.frames()
    }

    pub fn joints(&self) -> usize {
        self.joint.features.shape()[2]
    }

    pub fn bodies(&self) -> usize {
        self.joint.features.shape()[3]
    }

    /// Bodies carrying any nonzero feature.
    pub fn non_empty_bodies(&self) -> Vec<usize> {
        (0..self.bodies())
            .filter(|&m| {
                self.as_array().iter().any(|b| {
                    let body = b.features.narrow(3, m, 1).expect("body index in range");
                    !body.is_all_zero()
                })
            })
            .collect()
    }
}

fn check_graph(x: &SkeletonSequence, g: &SkeletonGraph) -> Result<()> {
    if x.joints() != g.num_joints {
        return Err(Error::dim(
            "preprocess",
            format!("sequence has {} joints, graph has {}", x.joints(), g.num_joints),
        ));
    }
    Ok(())
}

/// Absolute coordinates (channels 0-2) and coordinates relative to the center
/// joint (channels 3-5), per body.
pub fn joint_branch(x: &SkeletonSequence, g: &SkeletonGraph) -> Result<BranchInput> {
    check_graph(x, g)?;
    let (t, v, m) = (x.frames(), x.joints(), x.bodies());
    let c = g.center;
    let src = x.coords();
    let features = Tensor::from_fn(&[BRANCH_CHANNELS, t, v, m], |i| {
        let (ch, tt, vv, mm) = (i[0], i[1], i[2], i[3]);
        if ch < 3 {
            src.at(&[ch, tt, vv, mm])
        } else {
            src.at(&[ch - 3, tt, vv, mm]) - src.at(&[ch - 3, tt, c, mm])
        }
    });
    Ok(BranchInput {
        kind: BranchKind::Joint,
        features,
    })
}

/// Two-step differences `x[t+2] - x[t]` (channels 0-2) and one-step
/// differences `x[t+1] - x[t]` (channels 3-5). Frames without a successor at
/// the required distance are zero.
pub fn velocity_branch(x: &SkeletonSequence) -> BranchInput {
    let (t, v, m) = (x.frames(), x.joints(), x.bodies());
    let src = x.coords();
    let features = Tensor::from_fn(&[BRANCH_CHANNELS, t, v, m], |i| {
        let (ch, tt, vv, mm) = (i[0], i[1], i[2], i[3]);
        let step = if ch < 3 { 2 } else { 1 };
        if tt + step >= t {
            return 0.0;
        }
        let c = ch % 3;
        src.at(&[c, tt + step, vv, mm]) - src.at(&[c, tt, vv, mm])
    });
    BranchInput {
        kind: BranchKind::Velocity,
        features,
    }
}

/// Direction angle of `l` against each axis, `arccos(l_w / |l|)`. A zero-length
/// bone has all angles zero.
pub fn bone_angles(l: [f64; 3]) -> [f64; 3] {
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    if norm == 0.0 {
        return [0.0; 3];
    }
    l.map(|w| (w / norm).clamp(-1.0, 1.0).acos())
}

/// Bone displacement to the parent joint (channels 0-2) and its direction
/// angles (channels 3-5). The root joint's bone is zero.
pub fn bone_branch(x: &SkeletonSequence, g: &SkeletonGraph) -> Result<BranchInput> {
    check_graph(x, g)?;
    let (t, v, m) = (x.frames(), x.joints(), x.bodies());
    let mut features = Tensor::zeros(&[BRANCH_CHANNELS, t, v, m]);
    for tt in 0..t {
        for vv in 0..v {
            let Some(p) = g.parent(vv) else { continue };
            for mm in 0..m {
                let (a, b) = (x.joint(tt, vv, mm), x.joint(tt, p, mm));
                let l = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                let ang = bone_angles(l);
                for c in 0..3 {
                    features.set(&[c, tt, vv, mm], l[c]);
                    features.set(&[c + 3, tt, vv, mm], ang[c]);
                }
            }
        }
    }
    Ok(BranchInput {
        kind: BranchKind::Bone,
        features,
    })
}

pub fn build_branches(x: &SkeletonSequence, g: &SkeletonGraph) -> Result<Branches> {
    Ok(Branches {
        joint: joint_branch(x, g)?,
        velocity: velocity_branch(x),
        bone: bone_branch(x, g)?,
        valid_frames: x.valid_frames(),
        label: x.label,
    })
}

pub fn write_branches<W: Write>(w: &mut W, b: &Branches) -> Result<()> {
    for branch in b.as_array() {
        w.write_all(branch.kind.tag())?;
        skeleton::write_skl1(w, &branch.features, b.valid_frames, b.label)?;
    }
    Ok(())
}

pub fn read_branches<R: Read>(r: &mut R) -> Result<Branches> {
    let mut out = Vec::with_capacity(3);
    let mut header = None;
    for kind in BranchKind::ALL {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag)?;
        if &tag != kind.tag() {
            return Err(Error::Format(format!(
                "expected branch tag {:?}, found {:?}",
                String::from_utf8_lossy(kind.tag()),
                String::from_utf8_lossy(&tag)
            )));
        }
        let (h, features) = skeleton::read_skl1(r, BRANCH_CHANNELS)?;
        if header.is_some_and(|prev| prev != h) {
            return Err(Error::Format("branch records disagree on their headers".into()));
        }
        header = Some(h);
        out.push(BranchInput { kind, features });
    }
    let h = header.expect("three records read");
    let mut it = out.into_iter();
    Ok(Branches {
        joint: it.next().unwrap(),
        velocity: it.next().unwrap(),
        bone: it.next().unwrap(),
        valid_frames: h.valid_frames,
        label: h.label,
    })
}

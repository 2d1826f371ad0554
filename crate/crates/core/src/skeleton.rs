//! Skeleton sequences: the NTU `.skeleton` text format, fixed-length
//! normalization, and the `SKL1` binary container.
//!
//! `SKL1` record (little-endian):
//!
//! ```text
//! b"SKL1"  i32 T  i32 V  i32 M  i32 valid_frames  i32 label (-1 = none)
//! f64 payload in C, T, V, M order
//! ```
//!
//! The channel count `C` is not stored; raw skeletons have `C = 3` and
//! preprocessed branches `C = 6`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 25;
pub const MAX_BODIES: usize = 2;
pub const DEFAULT_FRAMES: usize = 300;
pub const SKL1_MAGIC: &[u8; 4] = b"SKL1";

/// 3-D joint coordinates indexed `[channel, frame, joint, body]`.
///
/// Frames at or beyond `valid_frames` are zero in every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    coords: Tensor,
    valid_frames: usize,
    pub label: Option<usize>,
}

impl SkeletonSequence {
    pub fn new(coords: Tensor, valid_frames: usize, label: Option<usize>) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::dim("skeleton", format!("expected [3, T, V, M], got {s:?}")));
        }
        if valid_frames > s[1] {
            return Err(Error::dim(
                "skeleton",
                format!("valid_frames {valid_frames} exceeds T = {}", s[1]),
            ));
        }
        let seq = SkeletonSequence {
            coords,
            valid_frames,
            label,
        };
        if !seq.tail_is_zero() {
            return Err(Error::State(format!("frames from {valid_frames} on are not zero")));
        }
        Ok(seq)
    }

    pub fn zeros(frames: usize, joints: usize, bodies: usize) -> Self {
        SkeletonSequence {
            coords: Tensor::zeros(&[3, frames, joints, bodies]),
            valid_frames: frames,
            label: None,
        }
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn bodies(&self) -> usize {
        self.coords.shape()[3]
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_frames
    }

    pub fn joint(&self, frame: usize, joint: usize, body: usize) -> [f64; 3] {
        [0, 1, 2].map(|c| self.coords.at(&[c, frame, joint, body]))
    }

    /// Applies `f` to every valid joint position; the zero tail is kept.
    pub fn map_joints(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> SkeletonSequence {
        let mut out = self.clone();
        for t in 0..self.valid_frames {
            for v in 0..self.joints() {
                for m in 0..self.bodies() {
                    let p = f(self.joint(t, v, m));
                    for (c, &x) in p.iter().enumerate() {
                        out.coords.set(&[c, t, v, m], x);
                    }
                }
            }
        }
        out
    }

    pub fn tail_is_zero(&self) -> bool {
        let s = self.coords.shape();
        let (t, inner) = (s[1], s[2] * s[3]);
        (0..3).all(|c| {
            let start = (c * t + self.valid_frames) * inner;
            self.coords.data()[start..(c + 1) * t * inner].iter().all(|&x| x == 0.0)
        })
    }
}

/// Parses an NTU `.skeleton` text stream, keeping at most two bodies.
///
/// When more than two bodies appear, the two with the largest motion energy
/// (sum of squared frame-to-frame joint displacement) are kept, ties broken by
/// body id. The kept bodies are ordered by decreasing energy; a missing second
/// body is an all-zero block.
pub fn parse_ntu_skeleton(text: &str) -> Result<SkeletonSequence> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unexpected end of input, expected {what}"),
            })
    };
    let eof_line = text.lines().count() + 1;
    let fix_eof = |e: Error| match e {
        Error::Parse { line: 0, msg } => Error::Parse { line: eof_line, msg },
        e => e,
    };

    let (ln, l) = next("frame count").map_err(fix_eof)?;
    let frames = parse_count(ln, l, "frame count")?;
    if frames == 0 {
        return Err(Error::Parse {
            line: ln,
            msg: "sequence declares zero frames".into(),
        });
    }
    // body id -> per-frame joint positions
    let mut tracks: BTreeMap<String, Vec<Option<Vec<[f64; 3]>>>> = BTreeMap::new();
    for t in 0..frames {
        let (ln, l) = next("body count").map_err(fix_eof)?;
        let bodies = parse_count(ln, l, "body count")?;
        for _ in 0..bodies {
            let (ln, l) = next("body metadata").map_err(fix_eof)?;
            let meta: Vec<&str> = l.split_whitespace().collect();
            if meta.len() != 10 {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("body metadata needs 10 fields, got {}", meta.len()),
                });
            }
            for f in &meta[1..] {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: ln,
                    msg: format!("non-numeric metadata field {f:?}"),
                })?;
            }
            let id = meta[0].to_string();
            let (ln, l) = next("joint count").map_err(fix_eof)?;
            let nj = parse_count(ln, l, "joint count")?;
            if nj != NUM_JOINTS {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected {NUM_JOINTS} joints, got {nj}"),
                });
            }
            let mut joints = Vec::with_capacity(NUM_JOINTS);
            for _ in 0..NUM_JOINTS {
                let (ln, l) = next("joint line").map_err(fix_eof)?;
                let fields = l
                    .split_whitespace()
                    .map(|f| {
                        f.parse::<f64>().map_err(|_| Error::Parse {
                            line: ln,
                            msg: format!("non-numeric joint field {f:?}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if fields.len() != 12 {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("joint line needs 12 fields, got {}", fields.len()),
                    });
                }
                joints.push([fields[0], fields[1], fields[2]]);
            }
            let track = tracks.entry(id).or_insert_with(|| vec![None; frames]);
            track[t] = Some(joints);
        }
    }

    let mut ranked: Vec<(f64, &String)> = tracks
        .iter()
        .map(|(id, track)| (motion_energy(track), id))
        .collect();
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| cmp_body_id(a.1, b.1))
    });

    let mut coords = Tensor::zeros(&[3, frames, NUM_JOINTS, MAX_BODIES]);
    for (m, (_, id)) in ranked.iter().take(MAX_BODIES).enumerate() {
        for (t, joints) in tracks[*id].iter().enumerate() {
            let Some(joints) = joints else { continue };
            for (v, p) in joints.iter().enumerate() {
                for c in 0..3 {
                    coords.set(&[c, t, v, m], p[c]);
                }
            }
        }
    }
    Ok(SkeletonSequence {
        coords,
        valid_frames: frames,
        label: None,
    })
}

fn parse_count(line: usize, text: &str, what: &str) -> Result<usize> {
    text.trim().parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} {:?}", text.trim()),
    })
}

/// Numeric-looking ids compare by value, everything else lexically.
fn cmp_body_id(a: &str, b: &str) -> Ordering {
    match (a.parse::<u128>(), b.parse::<u128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn motion_energy(track: &[Option<Vec<[f64; 3]>>]) -> f64 {
    track
        .windows(2)
        .filter_map(|w| match (&w[0], &w[1]) {
            (Some(a), Some(b)) => Some(
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (0..3).map(|c| (q[c] - p[c]).powi(2)).sum::<f64>())
                    .sum::<f64>(),
            ),
            _ => None,
        })
        .sum()
}

/// Writes the valid frames of `seq` in the NTU text layout. Body `m` is
/// written with id `m` in every frame where it has a nonzero coordinate;
/// tracking fields are zero.
pub fn write_ntu_skeleton(seq: &SkeletonSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", seq.valid_frames);
    for t in 0..seq.valid_frames {
        let present: Vec<usize> = (0..seq.bodies())
            .filter(|&m| (0..seq.joints()).any(|v| seq.joint(t, v, m) != [0.0; 3]))
            .collect();
        let _ = writeln!(out, "{}", present.len());
        for m in present {
            let _ = writeln!(out, "{m} 0 0 0 0 0 0 0 0 2");
            let _ = writeln!(out, "{}", seq.joints());
            for v in 0..seq.joints() {
                let [x, y, z] = seq.joint(t, v, m);
                let _ = writeln!(out, "{x:?} {y:?} {z:?} 0 0 0 0 0 0 0 0 2");
            }
        }
    }
    out
}

/// Zero-pads at the end or truncates so the sequence has `target` frames.
pub fn pad_or_crop(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    if target == 0 {
        return Err(Error::Usage("target frame count must be at least 1".into()));
    }
    let (t, v, m) = (seq.frames(), seq.joints(), seq.bodies());
    if t == target {
        return Ok(seq.clone());
    }
    let inner = v * m;
    let keep = t.min(target);
    let mut data = vec![0.0; 3 * target * inner];
    for c in 0..3 {
        data[c * target * inner..(c * target + keep) * inner]
            .copy_from_slice(&seq.coords.data()[c * t * inner..(c * t + keep) * inner]);
    }
    Ok(SkeletonSequence {
        coords: Tensor::from_parts(vec![3, target, v, m], data),
        valid_frames: seq.valid_frames.min(target),
        label: seq.label,
    })
}

/// Header fields of an `SKL1` record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Skl1Header {
    pub frames: usize,
    pub joints: usize,
    pub bodies: usize,
    pub valid_frames: usize,
    pub label: Option<usize>,
}

/// Writes one `SKL1` record for `data: [C, T, V, M]`.
pub fn write_skl1<W: Write>(w: &mut W, data: &Tensor, valid_frames: usize, label: Option<usize>) -> Result<()> {
    let s = data.shape();
    if s.len() != 4 {
        return Err(Error::dim("skl1", format!("expected [C, T, V, M], got {s:?}")));
    }
    let mut buf = Vec::with_capacity(24 + data.numel() * 8);
    buf.extend_from_slice(SKL1_MAGIC);
    let label = label.map_or(-1, |l| l as i32);
    for x in [s[1] as i32, s[2] as i32, s[3] as i32, valid_frames as i32, label] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &x in data.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one `SKL1` record with `channels` channels.
pub fn read_skl1<R: Read>(r: &mut R, channels: usize) -> Result<(Skl1Header, Tensor)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SKL1_MAGIC {
        return Err(Error::Format("missing SKL1 header".into()));
    }
    let mut ints = [0i32; 5];
    for x in &mut ints {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *x = i32::from_le_bytes(b);
    }
    let [t, v, m, valid, label] = ints;
    if t <= 0 || v <= 0 || m <= 0 || valid < 0 || valid > t || label < -1 {
        return Err(Error::Format(format!("invalid SKL1 header {ints:?}")));
    }
    let header = Skl1Header {
        frames: t as usize,
        joints: v as usize,
        bodies: m as usize,
        valid_frames: valid as usize,
        label: (label >= 0).then_some(label as usize),
    };
    let n = channels * header.frames * header.joints * header.bodies;
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(vec![channels, header.frames, header.joints, header.bodies], data)?;
    Ok((header, t))
}

pub fn write_sequence<W: Write>(w: &mut W, seq: &SkeletonSequence) -> Result<()> {
    write_skl1(w, &seq.coords, seq.valid_frames, seq.label)
}

pub fn read_sequence<R: Read>(r: &mut R) -> Result<SkeletonSequence> {
    let (h, coords) = read_skl1(r, 3)?;
    SkeletonSequence::new(coords, h.valid_frames, h.label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body_block(id: &str, joints: &[[f64; 3]]) -> String {
        let mut s = format!("{id} 0 0 0 0 0 0 0 0 2\n25\n");
        for j in joints {
            s += &format!("{} {} {} 0 0 0 0 0 0 0 0 2\n", j[0], j[1], j[2]);
        }
        s
    }

    fn zero_pose() -> Vec<[f64; 3]> {
        vec![[0.0; 3]; 25]
    }

    #[test]
    fn zero_fixture() {
        let text = format!("2\n1\n{}1\n{}", body_block("7", &zero_pose()), body_block("7", &zero_pose()));
        let s = parse_ntu_skeleton(&text).unwrap();
        assert_eq!(s.valid_frames(), 2);
        assert_eq!(s.coords().shape(), &[3, 2, 25, 2]);
        assert!(s.coords().is_all_zero());
    }

    #[test]
    fn reads_back_first_joint() {
        let mut pose = zero_pose();
        pose[0] = [1.0, 2.0, 3.0];
        let text = format!("1\n1\n{}", body_block("1", &pose));
        let s = parse_ntu_skeleton(&text).unwrap();
        assert_eq!(s.joint(0, 0, 0), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn keeps_two_most_active_bodies() {
        // Body "a" is static, "b" moves by 1 m, "c" moves by 0.5 m in x.
        let shift = |d: f64| zero_pose().iter().map(|p| [p[0] + d, p[1], p[2]]).collect::<Vec<_>>();
        let frame = |da: f64, db: f64, dc: f64| {
            format!(
                "3\n{}{}{}",
                body_block("10", &shift(da)),
                body_block("20", &shift(db)),
                body_block("30", &shift(dc))
            )
        };
        let text = format!("2\n{}{}", frame(0.0, 0.0, 0.0), frame(0.0, 1.0, 0.5));
        let s = parse_ntu_skeleton(&text).unwrap();
        // energies: a = 0, b = 25 * 1, c = 25 * 0.25 -> keep b then c
        assert_eq!(s.bodies(), 2);
        assert_eq!(s.joint(1, 0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(s.joint(1, 0, 1), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn equal_energy_ties_break_by_id() {
        let text = format!(
            "1\n3\n{}{}{}",
            body_block("9", &zero_pose()),
            body_block("10", &[[1.0, 0.0, 0.0]; 25]),
            body_block("2", &[[2.0, 0.0, 0.0]; 25])
        );
        let s = parse_ntu_skeleton(&text).unwrap();
        // all energies are 0 -> ids 2 and 9 win, in that order
        assert_eq!(s.joint(0, 0, 0), [2.0, 0.0, 0.0]);
        assert_eq!(s.joint(0, 0, 1), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "1\n1\n5 0 0 0 0 0 0 0 0 2\n24\n";
        match parse_ntu_skeleton(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let mut text = format!("1\n1\n{}", body_block("1", &zero_pose()));
        text = text.replacen("0 0 0 0 0 0 0 0 0 0 0 2", "0 x 0 0 0 0 0 0 0 0 0 2", 1);
        match parse_ntu_skeleton(&text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("non-numeric"));
            }
            other => panic!("{other:?}"),
        }
        let truncated = "2\n1\n";
        assert!(matches!(parse_ntu_skeleton(truncated), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn pad_and_crop() {
        let mut s = SkeletonSequence::zeros(10, 25, 2);
        s = s.map_joints(|_| [1.0, 1.0, 1.0]);
        let p = pad_or_crop(&s, 300).unwrap();
        assert_eq!(p.frames(), 300);
        assert_eq!(p.valid_frames(), 10);
        assert!(p.tail_is_zero());
        assert_eq!(p.joint(9, 0, 0), [1.0; 3]);
        assert_eq!(p.joint(10, 0, 0), [0.0; 3]);

        let long = SkeletonSequence::zeros(400, 25, 1).map_joints(|_| [2.0; 3]);
        let c = pad_or_crop(&long, 300).unwrap();
        assert_eq!(c.frames(), 300);
        assert_eq!(c.valid_frames(), 300);
        assert_eq!(c.coords().narrow(1, 0, 300).unwrap(), long.coords().narrow(1, 0, 300).unwrap());
        assert_eq!(pad_or_crop(&c, 300).unwrap(), c);
        assert!(pad_or_crop(&c, 0).is_err());
    }

    #[test]
    fn nonzero_tail_is_rejected() {
        let coords = Tensor::ones(&[3, 4, 25, 1]);
        assert!(SkeletonSequence::new(coords, 2, None).is_err());
    }

    #[test]
    fn skl1_round_trip() {
        let mut s = SkeletonSequence::zeros(6, 25, 2).map_joints(|_| [0.25, -1.5, 3.0]);
        s.label = Some(3);
        let mut buf = Vec::new();
        write_sequence(&mut buf, &s).unwrap();
        assert_eq!(&buf[..4], b"SKL1");
        assert_eq!(buf.len(), 24 + 3 * 6 * 25 * 2 * 8);
        let back = read_sequence(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }
}

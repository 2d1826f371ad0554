//! Dataset manifests, evaluation splits and the synthetic motion generator.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{self, SkeletonSequence, NUM_JOINTS};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Sample name, e.g. `S001C002P003R002A013` for NTU recordings.
    pub name: String,
    /// Path of the sequence file relative to the manifest.
    pub path: String,
    pub label: usize,
    pub subject: u32,
    pub camera: u32,
    pub setup: u32,
}

/// How entries are divided into training and evaluation partitions. The
/// listed ids go to training, everything else to evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SplitRule {
    CrossSubject { train_subjects: BTreeSet<u32> },
    CrossView { train_cameras: BTreeSet<u32> },
    CrossSetup { train_setups: BTreeSet<u32> },
}

impl SplitRule {
    pub fn is_train(&self, e: &ManifestEntry) -> bool {
        match self {
            SplitRule::CrossSubject { train_subjects } => train_subjects.contains(&e.subject),
            SplitRule::CrossView { train_cameras } => train_cameras.contains(&e.camera),
            SplitRule::CrossSetup { train_setups } => train_setups.contains(&e.setup),
        }
    }

    /// NTU RGB+D 60 cross-subject training subjects.
    pub fn ntu60_xsub() -> Self {
        let ids = [
            1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38,
        ];
        SplitRule::CrossSubject {
            train_subjects: ids.into_iter().collect(),
        }
    }

    /// NTU RGB+D 60 cross-view: cameras 2 and 3 train.
    pub fn ntu60_xview() -> Self {
        SplitRule::CrossView {
            train_cameras: [2, 3].into_iter().collect(),
        }
    }

    /// NTU RGB+D 120 cross-setup: even setup ids train.
    pub fn ntu120_xsetup() -> Self {
        SplitRule::CrossSetup {
            train_setups: (2..=32).step_by(2).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub split: SplitRule,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.label >= self.num_classes) {
            return Err(Error::Format(format!(
                "entry {} has label {} outside [0, {})",
                e.name, e.label, self.num_classes
            )));
        }
        Ok(())
    }

    /// Indices of the requested partition, in manifest order.
    pub fn indices(&self, part: Partition) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| self.split.is_train(e) == (part == Partition::Train))
            .map(|(i, _)| i)
            .collect()
    }

    /// Drops entries whose sample name is listed.
    pub fn exclude(&mut self, names: &BTreeSet<String>) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| !names.contains(&e.name));
        before - self.entries.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        Ok(())
    }
}

/// Parses an exclusion list: one sample name per line, `#` starts a comment.
pub fn parse_exclusion_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Splits an NTU sample name `SsssCcccPpppRrrrAaaa` into
/// `(setup, camera, subject, replication, action)`; all 1-based.
pub fn parse_ntu_name(name: &str) -> Option<(u32, u32, u32, u32, u32)> {
    let stem = name.split('.').next()?;
    let b = stem.as_bytes();
    if b.len() != 20 {
        return None;
    }
    let field = |tag: u8, at: usize| -> Option<u32> {
        if b[at] != tag {
            return None;
        }
        stem[at + 1..at + 4].parse().ok()
    };
    Some((
        field(b'S', 0)?,
        field(b'C', 4)?,
        field(b'P', 8)?,
        field(b'R', 12)?,
        field(b'A', 16)?,
    ))
}

/// Rest pose of the 25-joint skeleton in meters (x right, y up, z depth).
pub const REST_POSE: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 3.0],     // 1 spine base
    [0.0, 0.25, 3.0],    // 2 spine middle
    [0.0, 0.55, 3.0],    // 3 neck
    [0.0, 0.70, 3.0],    // 4 head
    [-0.18, 0.48, 3.0],  // 5 left shoulder
    [-0.22, 0.22, 3.0],  // 6 left elbow
    [-0.24, 0.0, 3.0],   // 7 left wrist
    [-0.25, -0.07, 3.0], // 8 left hand
    [0.18, 0.48, 3.0],   // 9 right shoulder
    [0.22, 0.22, 3.0],   // 10 right elbow
    [0.24, 0.0, 3.0],    // 11 right wrist
    [0.25, -0.07, 3.0],  // 12 right hand
    [-0.09, -0.02, 3.0], // 13 left hip
    [-0.10, -0.42, 3.0], // 14 left knee
    [-0.10, -0.80, 3.0], // 15 left ankle
    [-0.10, -0.85, 2.9], // 16 left foot
    [0.09, -0.02, 3.0],  // 17 right hip
    [0.10, -0.42, 3.0],  // 18 right knee
    [0.10, -0.80, 3.0],  // 19 right ankle
    [0.10, -0.85, 2.9],  // 20 right foot
    [0.0, 0.48, 3.0],    // 21 spine shoulder
    [-0.26, -0.13, 3.0], // 22 left hand tip
    [-0.22, -0.10, 3.0], // 23 left thumb
    [0.26, -0.13, 3.0],  // 24 right hand tip
    [0.22, -0.10, 3.0],  // 25 right thumb
];

/// Vertical swing weight of each joint; only the arms move.
pub const SWING_WEIGHT: [f64; NUM_JOINTS] = [
    0.0, 0.0, 0.0, 0.0, //
    0.0, 0.5, 1.0, 1.0, //
    0.0, 0.5, 1.0, 1.0, //
    0.0, 0.0, 0.0, 0.0, //
    0.0, 0.0, 0.0, 0.0, //
    0.0, 1.0, 1.0, 1.0, 1.0,
];

/// Parameters of the synthetic motion generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    /// Per-sequence uniform amplitude jitter as a fraction of the class amplitude.
    pub amplitude_jitter: f64,
    /// Standard deviation of per-coordinate noise in meters.
    pub noise_std: f64,
    /// Half-width of the uniform per-sequence translation in x and z.
    pub translation: f64,
    pub subjects: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            amplitude_jitter: 0.1,
            noise_std: 0.005,
            translation: 0.3,
            subjects: 10,
        }
    }
}

/// Swing amplitude (meters) of class `k`.
pub fn class_amplitude(k: usize) -> f64 {
    0.12 + 0.04 * (k % 4) as f64
}

/// Swing frequency of class `k`, in cycles per sequence.
pub fn class_frequency(k: usize) -> f64 {
    1.0 + k as f64
}

/// A generated dataset: manifest plus the sequences in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<SkeletonSequence>,
}

/// Generates `per_class` sequences for each of `num_classes` classes.
///
/// Every class swings both arms vertically at its own frequency and amplitude
/// with independent random phases per arm, so a single frame does not reveal
/// the class. The second body slot is empty. Subjects `1..=7` form the
/// training split.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    frames: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    synth_dataset_with(num_classes, per_class, frames, seed, SynthParams::default())
}

pub fn synth_dataset_with(
    num_classes: usize,
    per_class: usize,
    frames: usize,
    seed: u64,
    params: SynthParams,
) -> Result<SyntheticDataset> {
    if num_classes < 2 {
        return Err(Error::Usage("synthetic datasets need at least 2 classes".into()));
    }
    if per_class == 0 || frames == 0 {
        return Err(Error::Usage("per_class and frames must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::Usage(e.to_string()))?;
    let mut entries = Vec::with_capacity(num_classes * per_class);
    let mut sequences = Vec::with_capacity(num_classes * per_class);
    for j in 0..per_class {
        for k in 0..num_classes {
            let amp = class_amplitude(k) * (1.0 + rng.random_range(-params.amplitude_jitter..=params.amplitude_jitter));
            let freq = class_frequency(k);
            let phase = [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)];
            let offset = [
                rng.random_range(-params.translation..=params.translation),
                0.0,
                rng.random_range(-params.translation..=params.translation),
            ];
            let mut coords = Tensor::zeros(&[3, frames, NUM_JOINTS, skeleton::MAX_BODIES]);
            for t in 0..frames {
                let angle = std::f64::consts::TAU * freq * t as f64 / frames as f64;
                let swing = [amp * (angle + phase[0]).sin(), amp * (angle + phase[1]).sin()];
                for v in 0..NUM_JOINTS {
                    // left-arm joints take the first phase, right-arm joints the second
                    let side = usize::from(REST_POSE[v][0] > 0.0);
                    let dy = SWING_WEIGHT[v] * swing[side];
                    for c in 0..3 {
                        let base = REST_POSE[v][c] + offset[c] + if c == 1 { dy } else { 0.0 };
                        coords.set(&[c, t, v, 0], base + noise.sample(&mut rng));
                    }
                }
            }
            let subject = (j as u32 % params.subjects) + 1;
            let camera = (j as u32 % 3) + 1;
            let index = entries.len();
            let name = format!("S{:03}C{:03}P{:03}R{:03}A{:03}", 1, camera, subject, 1 + (j / params.subjects as usize) as u32, k + 1);
            entries.push(ManifestEntry {
                name,
                path: format!("seq_{index:05}.skl"),
                label: k,
                subject,
                camera,
                setup: 1,
            });
            sequences.push(SkeletonSequence::new(coords, frames, Some(k))?);
        }
    }
    let train_subjects = (1..=params.subjects * 7 / 10).collect();
    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            num_classes,
            split: SplitRule::CrossSubject { train_subjects },
            entries,
        },
        sequences,
    })
}

/// Writes `manifest.json` plus one `SKL1` file per sequence into `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, sequences: &[SkeletonSequence]) -> Result<()> {
    if manifest.entries.len() != sequences.len() {
        return Err(Error::Usage("manifest and sequence counts differ".into()));
    }
    std::fs::create_dir_all(dir)?;
    for (e, s) in manifest.entries.iter().zip(sequences) {
        let mut w = BufWriter::new(File::create(dir.join(&e.path))?);
        skeleton::write_sequence(&mut w, s)?;
    }
    manifest.save(&dir.join(MANIFEST_FILE))
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SkeletonSequence>)> {
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    let sequences = manifest
        .entries
        .iter()
        .map(|e| {
            let mut r = BufReader::new(File::open(dir.join(&e.path))?);
            skeleton::read_sequence(&mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, sequences))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let d = synth_dataset(4, 50, 16, 7).unwrap();
        assert_eq!(d.manifest.entries.len(), 200);
        for k in 0..4 {
            assert_eq!(d.manifest.entries.iter().filter(|e| e.label == k).count(), 50);
        }
        d.manifest.validate().unwrap();
        for s in &d.sequences {
            assert_eq!(s.joints(), 25);
            assert!(s.tail_is_zero());
            assert!(s.coords().narrow(3, 1, 1).unwrap().is_all_zero());
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synth_dataset(3, 4, 12, 11).unwrap();
        let b = synth_dataset(3, 4, 12, 11).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(3, 4, 12, 12).unwrap();
        assert_ne!(a.sequences, c.sequences);
    }

    #[test]
    fn needs_two_classes() {
        assert!(synth_dataset(1, 4, 12, 0).is_err());
    }

    #[test]
    fn split_partitions_entries() {
        let d = synth_dataset(4, 20, 8, 1).unwrap();
        let train = d.manifest.indices(Partition::Train);
        let eval = d.manifest.indices(Partition::Eval);
        let mut all: Vec<usize> = train.iter().chain(&eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..80).collect::<Vec<_>>());
        assert_eq!(train.len(), 56);
        assert!(train.iter().all(|i| !eval.contains(i)));
    }

    #[test]
    fn exclusions_and_names() {
        let mut d = synth_dataset(2, 3, 8, 1).unwrap().manifest;
        let first = d.entries[0].name.clone();
        let list = parse_exclusion_list(&format!("# bad samples\n{first}\n\n"));
        assert_eq!(d.exclude(&list), 1);
        assert_eq!(d.entries.len(), 5);
        assert_eq!(parse_ntu_name("S001C002P003R002A013.skeleton"), Some((1, 2, 3, 2, 13)));
        assert_eq!(parse_ntu_name("S001X002P003R002A013"), None);
    }

    #[test]
    fn manifest_json_round_trip() {
        let d = synth_dataset(2, 2, 8, 1).unwrap().manifest;
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"rule\":\"cross_subject\""));
        let back: DatasetManifest = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
    }
}

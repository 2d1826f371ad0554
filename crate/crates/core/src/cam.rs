//! Class activation maps over (frame, joint) and their JSON export.
//!
//! Under global mean pooling the logit of class `k` is the mean of
//! `Σ_c w_kc · F_c(t, v)` plus the bias, so the map needs no gradients.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Batch, ResGcnModel};
use crate::nn::Mode;
use crate::preprocess::Branches;
use crate::tensor::Tensor;
use crate::train::argmax;

pub const DEFAULT_QUANTILE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    /// `[T', V]`.
    pub values: Tensor,
    pub class_id: usize,
    /// `T' / T`.
    pub frame_scale: f64,
}

impl ActivationMap {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Weighted channel sum of `features` `[rows, C, T', V]` averaged over rows.
pub fn cam_from_features(features: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 4 || s[1] != weights.len() || s[0] == 0 {
        return Err(Error::dim(
            "cam",
            format!("features {s:?} with {} classifier weights", weights.len()),
        ));
    }
    let (rows, c, tv) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; tv];
    let data = features.data();
    for r in 0..rows {
        for (ch, &w) in weights.iter().enumerate() {
            let src = &data[(r * c + ch) * tv..(r * c + ch + 1) * tv];
            for (o, x) in out.iter_mut().zip(src) {
                *o += w * x;
            }
        }
    }
    for o in &mut out {
        *o /= rows as f64;
    }
    Tensor::new(vec![s[2], s[3]], out)
}

/// Eval-mode features and logits of a single sequence.
fn features_and_logits(model: &ResGcnModel, input: &Branches) -> Result<(Tensor, Tensor)> {
    let batch = Batch::from_branches(&[input])?;
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &batch, Mode::Eval)?;
    Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
}

/// Highest-scoring class of `input`; ties resolve to the lowest index.
pub fn predicted_class(model: &ResGcnModel, input: &Branches) -> Result<usize> {
    let (_, logits) = features_and_logits(model, input)?;
    Ok(argmax(logits.data()))
}

pub fn class_activation_map(model: &ResGcnModel, input: &Branches, class_id: usize) -> Result<ActivationMap> {
    let k = model.spec.num_classes;
    if class_id >= k {
        return Err(Error::Usage(format!("class {class_id} out of range for {k} classes")));
    }
    let (features, _) = features_and_logits(model, input)?;
    let w = &model.store.get(model.classifier.weight).value;
    let c = w.shape()[1];
    let row = &w.data()[class_id * c..(class_id + 1) * c];
    let values = cam_from_features(&features, row)?;
    let frame_scale = values.shape()[0] as f64 / input.frames() as f64;
    Ok(ActivationMap {
        values,
        class_id,
        frame_scale,
    })
}

/// Quantile of `values` taking the next higher sample, so the threshold is
/// always an attained value and `q` near 1 selects the maximum.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q * (sorted.len() - 1) as f64).ceil() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivatedFrame {
    pub frame: usize,
    pub joints: Vec<usize>,
}

/// Joints of each listed frame scoring strictly above the sequence-wide
/// `threshold_quantile` of the map.
pub fn activated_joints(map: &ActivationMap, frames: &[usize], threshold_quantile: f64) -> Result<Vec<ActivatedFrame>> {
    if !(threshold_quantile > 0.0 && threshold_quantile < 1.0) {
        return Err(Error::Usage(format!("quantile {threshold_quantile} is not in (0, 1)")));
    }
    let (t, v) = (map.frames(), map.joints());
    if let Some(&bad) = frames.iter().find(|&&f| f >= t) {
        return Err(Error::Usage(format!("frame {bad} out of range for {t} frames")));
    }
    let threshold = quantile(map.values.data(), threshold_quantile);
    Ok(frames
        .iter()
        .map(|&f| ActivatedFrame {
            frame: f,
            joints: (0..v).filter(|&j| map.values.at(&[f, j]) > threshold).collect(),
        })
        .collect())
}

/// Every `step`-th frame index of a map with `frames` frames.
pub fn sampled_frames(frames: usize, step: usize) -> Vec<usize> {
    (0..frames).step_by(step.max(1)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameScores {
    pub frame: usize,
    pub scores: Vec<f64>,
}

/// On-disk CAM document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamDocument {
    pub class_id: usize,
    pub frame_scale: f64,
    pub num_frames: usize,
    pub num_joints: usize,
    pub quantile: f64,
    pub edges: Vec<[usize; 2]>,
    pub frames: Vec<FrameScores>,
    pub activated: Vec<ActivatedFrame>,
}

impl CamDocument {
    pub fn new(map: &ActivationMap, activated: &[ActivatedFrame], quantile: f64, edges: &[(usize, usize)]) -> Self {
        let v = map.joints();
        CamDocument {
            class_id: map.class_id,
            frame_scale: map.frame_scale,
            num_frames: map.frames(),
            num_joints: v,
            quantile,
            edges: edges.iter().map(|&(a, b)| [a, b]).collect(),
            frames: map
                .values
                .data()
                .chunks(v)
                .enumerate()
                .map(|(frame, s)| FrameScores {
                    frame,
                    scores: s.to_vec(),
                })
                .collect(),
            activated: activated.to_vec(),
        }
    }

    pub fn map(&self) -> Result<ActivationMap> {
        if self.frames.len() != self.num_frames
            || self.frames.iter().enumerate().any(|(i, f)| f.frame != i || f.scores.len() != self.num_joints)
        {
            return Err(Error::Format(format!(
                "CAM document does not hold {} frames of {} joints",
                self.num_frames, self.num_joints
            )));
        }
        let data = self.frames.iter().flat_map(|f| f.scores.iter().copied()).collect();
        Ok(ActivationMap {
            values: Tensor::new(vec![self.num_frames, self.num_joints], data)?,
            class_id: self.class_id,
            frame_scale: self.frame_scale,
        })
    }
}

pub fn export_cam(
    map: &ActivationMap,
    activated: &[ActivatedFrame],
    quantile: f64,
    edges: &[(usize, usize)],
    path: &Path,
) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&CamDocument::new(map, activated, quantile, edges))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn import_cam(path: &Path) -> Result<CamDocument> {
    let doc: CamDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    doc.map()?;
    Ok(doc)
}

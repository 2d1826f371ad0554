//! SGD with Nesterov momentum, warmup plus step-decay learning rates, the
//! training loop and split evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Batch, ResGcnModel};
use crate::nn::Mode;
use crate::param::ParamStore;
use crate::preprocess::Branches;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            decay_epochs: vec![20, 50],
            decay_factor: 10.0,
            warmup_epochs: 10,
            max_epochs: 70,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor >= 1.0) {
            return bad(format!("decay_factor must be at least 1, got {}", self.decay_factor));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay epochs must increase strictly: {:?}", self.decay_epochs));
        }
        if let Some(&first) = self.decay_epochs.first() {
            if self.warmup_epochs >= first {
                return bad(format!("warmup ({}) must end before the first decay epoch ({first})", self.warmup_epochs));
            }
        }
        Ok(())
    }
}

/// Linear warmup `base·(e+1)/warmup`, then division by `decay_factor` once per
/// decay epoch already reached. The last warmup epoch is exactly `base`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.max_epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside [0, {})", cfg.max_epochs)));
    }
    if epoch + 1 < cfg.warmup_epochs {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let passed = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count() as i32;
    Ok(cfg.base_lr / cfg.decay_factor.powi(passed))
}

/// Mean cross-entropy of `logits: [N, K]` against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::inference();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// One Nesterov update of a flat parameter:
/// `g = grad + wd·w; v = m·v + g; w -= lr·(g + m·v)`.
pub fn sgd_nesterov_step(
    w: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != w.len() || velocity.len() != w.len() {
        return Err(Error::dim(
            "sgd",
            format!("weight {}, gradient {}, velocity {}", w.len(), grad.len(), velocity.len()),
        ));
    }
    for ((w, &g), v) in w.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * (g + momentum * *v);
    }
    Ok(())
}

/// Velocity buffers for every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .entries()
            .iter()
            .map(|e| if e.param.trainable { vec![0.0; e.param.numel()] } else { Vec::new() })
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Decay applies only to entries flagged for it.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::State("optimizer was created for a different parameter store".into()));
        }
        for (e, v) in store.entries_mut().iter_mut().zip(&mut self.velocity) {
            if !e.param.trainable {
                continue;
            }
            let wd = if e.decay { self.weight_decay } else { 0.0 };
            let p = &mut e.param;
            sgd_nesterov_step(p.value.data_mut(), p.grad.data(), v, lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy of the training-mode predictions made while fitting.
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

fn labels_of(items: &[&Branches]) -> Result<Vec<usize>> {
    items
        .iter()
        .enumerate()
        .map(|(i, b)| b.label.ok_or_else(|| Error::Usage(format!("sample {i} has no label"))))
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Shuffled batch index lists. A trailing single-sample batch joins the one
/// before it, since batch statistics need two values.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

/// Fits `model` on `train` for `cfg.max_epochs` epochs, calling `on_epoch`
/// after each. When `eval` is given, its accuracy is logged every epoch.
pub fn train(
    model: &mut ResGcnModel,
    train: &[&Branches],
    eval: Option<&[&Branches]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Usage(format!("training needs at least 2 samples, got {}", train.len())));
    }
    if eval.is_some_and(|e| e.is_empty()) {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let labels = labels_of(train)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.spec.num_classes) {
        return Err(Error::Usage(format!("label {bad} outside [0, {})", model.spec.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(epoch, cfg)?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let items: Vec<&Branches> = idx.iter().map(|&i| train[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let batch = Batch::from_branches(&items)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch, Mode::Train)?;
            let loss = tape.cross_entropy(out.logits, &y)?;
            tape.backward(loss)?;
            model.store.zero_grad();
            tape.accumulate_param_grads(&mut model.store);
            model.apply_stat_updates(&out.updates);
            opt.step(&mut model.store, lr)?;
            loss_sum += tape.value(loss).item() * y.len() as f64;
            let logits = tape.value(out.logits);
            let k = model.spec.num_classes;
            correct += y
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
                .count();
        }
        let eval_accuracy = match eval {
            Some(e) => Some(evaluate(model, e, cfg.batch_size)?.accuracy),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_accuracy,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Accuracy summary of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Summarizes argmax predictions of `logits: [N, K]`. Ties go to the lowest class.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("evaluate", format!("logits {s:?} for {} labels", labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Usage(format!("label {bad} outside [0, {k})")));
    }
    let predictions: Vec<usize> = (0..labels.len())
        .map(|i| argmax(&logits.data()[i * k..(i + 1) * k]))
        .collect();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&l, &p) in labels.iter().zip(&predictions) {
        confusion[l][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        per_class,
        confusion,
        predictions,
    })
}

/// Eval-mode logits for `items`, computed in chunks of `batch_size`.
pub fn predict_all(model: &ResGcnModel, items: &[&Branches], batch_size: usize) -> Result<Tensor> {
    let k = model.spec.num_classes;
    let mut data = Vec::with_capacity(items.len() * k);
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = Batch::from_branches(chunk)?;
        data.extend_from_slice(model.predict(&batch)?.data());
    }
    Tensor::new(vec![items.len(), k], data)
}

pub fn evaluate(model: &ResGcnModel, items: &[&Branches], batch_size: usize) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let labels = labels_of(items)?;
    let logits = predict_all(model, items, batch_size)?;
    evaluate_logits(&logits, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;
    use crate::graph::SkeletonGraph;
    use crate::model::{build_model, parse_structure, ModelSpec};
    use crate::preprocess::build_branches;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        let lr = |e| lr_at_epoch(e, &cfg).unwrap();
        assert_eq!(lr(0), 0.01);
        assert_eq!(lr(9), 0.1);
        assert_eq!(lr(15), 0.1);
        assert_eq!(lr(25), 0.01);
        assert_eq!(lr(55), 0.001);
        assert!(matches!(lr_at_epoch(70, &cfg), Err(Error::Usage(_))));
        for e in cfg.warmup_epochs..cfg.max_epochs - 1 {
            assert!(lr(e + 1) <= lr(e));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.warmup_epochs = 20;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn uniform_logits_loss() {
        let loss = cross_entropy(&Tensor::zeros(&[3, 60]), &[0, 5, 59]).unwrap();
        assert!((loss - 60f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let l = cross_entropy(&Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap(), &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).is_err());
    }

    #[test]
    fn nesterov_degenerate_cases() {
        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_nesterov_step(&mut w, &[0.5, 0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(w, vec![0.95, -2.05]);
        let mut w = vec![2.0];
        let mut v = vec![0.0];
        sgd_nesterov_step(&mut w, &[0.0], &mut v, 0.1, 0.0, 0.5).unwrap();
        assert!((w[0] - 1.9).abs() < 1e-15);
        assert!(sgd_nesterov_step(&mut w, &[0.0, 1.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn nesterov_quadratic_by_hand() {
        // f(w) = 1.5 w^2, grad = 3w
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let mut w = [2.0];
        let mut v = [0.0];
        for _ in 0..2 {
            let g = [3.0 * w[0]];
            sgd_nesterov_step(&mut w, &g, &mut v, lr, m, wd).unwrap();
        }
        // step 1: g = 6.02, v = 6.02, w = 2 - 0.1*(6.02 + 5.418) = 0.8562
        // step 2: g = 2.5686 + 0.008562 = 2.577162, v = 5.418 + 2.577162 = 7.995162,
        //         w = 0.8562 - 0.1*(2.577162 + 7.1956458) = -0.12108078
        assert!((w[0] - -0.12108078).abs() < 1e-12);
        assert!((v[0] - 7.995162).abs() < 1e-12);
    }

    #[test]
    fn constant_logits_score_the_class_prior() {
        let labels = [2, 2, 2, 0, 1];
        let logits = Tensor::from_fn(&[5, 3], |i| if i[1] == 2 { 1.0 } else { 0.0 });
        let e = evaluate_logits(&logits, &labels).unwrap();
        assert_eq!(e.accuracy, 0.6);
        assert_eq!(e.per_class, vec![Some(0.0), Some(0.0), Some(1.0)]);
        for (c, row) in e.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
        }
        assert!(matches!(evaluate_logits(&Tensor::zeros(&[0, 3]), &[]), Err(Error::Usage(_))));
    }

    fn tiny_setup() -> (ResGcnModel, Vec<Branches>) {
        let g = SkeletonGraph::ntu25();
        let data = synth_dataset(3, 4, 12, 1).unwrap();
        let items = data.sequences.iter().map(|s| build_branches(s, &g).unwrap()).collect();
        let spec = ModelSpec {
            structure: parse_structure("[B1,N1,N1,N1]").unwrap(),
            channel_plan: vec![8, 4, 8, 16],
            num_classes: 3,
            with_part_attention: true,
            ..Default::default()
        };
        (build_model(&spec, &g, 3).unwrap(), items)
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (mut model, items) = tiny_setup();
        let refs: Vec<&Branches> = items.iter().collect();
        let before: Vec<Tensor> = model.store.entries().iter().filter(|e| e.param.trainable).map(|e| e.param.value.clone()).collect();
        let mut opt = Sgd::new(&model.store, 0.9, 1e-4);
        let batch = Batch::from_branches(&refs[..4]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Mode::Train).unwrap();
        let loss = tape.cross_entropy(out.logits, &[0, 1, 2, 0]).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut model.store);
        opt.step(&mut model.store, 0.0).unwrap();
        let after: Vec<Tensor> = model.store.entries().iter().filter(|e| e.param.trainable).map(|e| e.param.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_descends_on_a_fixed_batch() {
        let (mut model, items) = tiny_setup();
        let refs: Vec<&Branches> = items.iter().collect();
        let labels: Vec<usize> = items.iter().map(|b| b.label.unwrap()).collect();
        let batch = Batch::from_branches(&refs).unwrap();
        let mut opt = Sgd::new(&model.store, 0.9, 0.0);
        let mut losses = Vec::new();
        for _ in 0..4 {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch, Mode::Train).unwrap();
            let loss = tape.cross_entropy(out.logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            model.store.zero_grad();
            tape.accumulate_param_grads(&mut model.store);
            opt.step(&mut model.store, 1e-3).unwrap();
            losses.push(tape.value(loss).item());
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let cfg = TrainConfig {
            max_epochs: 2,
            warmup_epochs: 1,
            decay_epochs: vec![],
            batch_size: 5,
            seed: 4,
            ..Default::default()
        };
        let run = || {
            let (mut model, items) = tiny_setup();
            let refs: Vec<&Branches> = items.iter().collect();
            train(&mut model, &refs, Some(&refs[..3]), &cfg, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|e| e.loss.is_finite() && e.eval_accuracy.is_some()));
    }

    #[test]
    fn trailing_singleton_batches_are_merged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(9, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }
}

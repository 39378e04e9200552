//! Training loops for the child-count predictor and the context model.
//!
//! Both loops are single-threaded with a fixed shuffle RNG, so a given seed
//! and corpus always produce the same parameters bit for bit.

use acnp_core::acnp::{Acnp, AcnpConfig};
use acnp_core::cloud::QuantizedCloud;
use acnp_core::context::ContextConfig;
use acnp_core::context_model::{ContextModel, ContextModelConfig, NumberNorm};
use acnp_core::nn::{AdamConfig, Graph};
use acnp_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::NodeSet;

const EVAL_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub decay: f64,
    /// Nodes per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn acnp_default() -> Self {
        Self { epochs: 20, lr: 1e-3, decay: 0.93, batch_size: 4096, seed: 0 }
    }

    pub fn context_model_default(ctx: ContextConfig) -> Self {
        if ctx.has_window() {
            Self { epochs: 80, lr: 1e-3, decay: 0.95, batch_size: 4096, seed: 0 }
        } else {
            Self { epochs: 40, lr: 1e-4, decay: 1.0, batch_size: 4096, seed: 0 }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr.is_finite()
            && self.lr > 0.0
            && self.decay.is_finite()
            && self.decay > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Optimizer(format!("invalid training configuration {self:?}")))
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// Mean training loss of one epoch, and the validation loss when a
/// validation set is watched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub validation: Option<f64>,
}

/// Nodes held out of the updates; training keeps the parameters of the epoch
/// with the lowest cross-entropy on them.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub set: &'a NodeSet,
    pub numbers: Option<&'a [[f64; 8]]>,
}

fn check_set(set: &NodeSet, ctx: ContextConfig) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Shape("training set is empty".into()));
    }
    acnp_core::context::check_layout(&set.contexts, ctx)
}

/// Runs `epochs` passes over `model`; `step` returns the summed batch loss
/// and applies one update, `validate` scores the model after each epoch.
fn run_epochs<M, F, V>(
    model: &mut M,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut step: F,
    mut validate: V,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&mut M, &[usize], &AdamConfig) -> Result<f64>,
    V: FnMut(&M) -> Result<Option<f64>>,
{
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let adam = AdamConfig { lr: cfg.lr_at(epoch), ..AdamConfig::default() };
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += step(model, batch, &adam)?;
        }
        let log = EpochLog { epoch: epoch + 1, lr: adam.lr, loss: total / n as f64, validation: validate(model)? };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Trains on MSE against true child counts; the final bias starts at the
/// mean training count.
pub fn train_acnp(
    set: &NodeSet,
    model_cfg: AcnpConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Acnp, Vec<EpochLog>)> {
    cfg.validate()?;
    check_set(set, model_cfg.context)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Acnp::new(model_cfg, &mut rng)?;
    let counts = set.child_counts();
    model.set_output_bias(counts.iter().sum::<f64>() / counts.len() as f64);
    let logs = run_epochs(
        &mut model,
        set.len(),
        cfg,
        &mut rng,
        |model, batch, adam| {
            let ctxs: Vec<_> = batch.iter().map(|&i| set.contexts[i].clone()).collect();
            let target: Vec<f64> = batch.iter().map(|&i| counts[i]).collect();
            let (loss, grads) = {
                let mut g = Graph::new(model.params());
                let l = model.loss(&mut g, &ctxs, &target)?;
                (g.value(l).data()[0], g.backward(l)?)
            };
            let ps = model.params_mut();
            ps.zero_grads();
            ps.accumulate(&grads)?;
            ps.adam_step(adam)?;
            Ok(loss * batch.len() as f64)
        },
        |_| Ok(None),
        on_epoch,
    )?;
    Ok((model, logs))
}

/// Trains on cross-entropy (bits per node). `numbers` must be given exactly
/// when `model_cfg.enhanced` is set; they stay fixed during training and
/// their per-component statistics set the model's input normalization.
pub fn train_context_model(
    set: &NodeSet,
    numbers: Option<&[[f64; 8]]>,
    model_cfg: ContextModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ContextModel, Vec<EpochLog>)> {
    train_context_model_inner(set, numbers, None, model_cfg, cfg, on_epoch)
}

/// [`train_context_model`] with early stopping: the returned model is the
/// snapshot from the epoch with the lowest validation cross-entropy.
pub fn train_context_model_validated(
    set: &NodeSet,
    numbers: Option<&[[f64; 8]]>,
    validation: Validation<'_>,
    model_cfg: ContextModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ContextModel, Vec<EpochLog>)> {
    check_numbers(validation.set, validation.numbers, model_cfg.enhanced)?;
    train_context_model_inner(set, numbers, Some(validation), model_cfg, cfg, on_epoch)
}

fn check_numbers(set: &NodeSet, numbers: Option<&[[f64; 8]]>, enhanced: bool) -> Result<()> {
    match numbers {
        Some(n) if n.len() != set.len() => Err(Error::Shape("one child-count vector per node required".into())),
        Some(_) if !enhanced => Err(Error::Shape("child-count vectors given to a baseline model".into())),
        None if enhanced => Err(Error::Shape("enhanced model needs child-count vectors".into())),
        _ => Ok(()),
    }
}

fn train_context_model_inner(
    set: &NodeSet,
    numbers: Option<&[[f64; 8]]>,
    validation: Option<Validation<'_>>,
    model_cfg: ContextModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ContextModel, Vec<EpochLog>)> {
    cfg.validate()?;
    check_set(set, model_cfg.context)?;
    check_numbers(set, numbers, model_cfg.enhanced)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ContextModel::new(model_cfg, &mut rng)?;
    if let Some(n) = numbers {
        model.set_number_norm(NumberNorm::fit(n))?;
    }
    let mut best: Option<(f64, ContextModel)> = None;
    let logs = run_epochs(
        &mut model,
        set.len(),
        cfg,
        &mut rng,
        |model, batch, adam| {
            let ctxs: Vec<_> = batch.iter().map(|&i| set.contexts[i].clone()).collect();
            let syms: Vec<_> = batch.iter().map(|&i| set.symbols[i]).collect();
            let nums: Option<Vec<[f64; 8]>> = numbers.map(|n| batch.iter().map(|&i| n[i]).collect());
            let (loss, grads) = {
                let mut g = Graph::new(model.params());
                let total = model.loss(&mut g, &ctxs, nums.as_deref(), &syms)?;
                let mean = g.scale(total, 1.0 / batch.len() as f64)?;
                (g.value(total).data()[0], g.backward(mean)?)
            };
            let ps = model.params_mut();
            ps.zero_grads();
            ps.accumulate(&grads)?;
            ps.adam_step(adam)?;
            Ok(loss)
        },
        |model| {
            let Some(v) = validation else { return Ok(None) };
            let bits = evaluate_bits(model, v.set, v.numbers)?;
            if best.as_ref().is_none_or(|(b, _)| bits < *b) {
                best = Some((bits, model.clone()));
            }
            Ok(Some(bits))
        },
        on_epoch,
    )?;
    Ok((best.map_or(model, |(_, m)| m), logs))
}

/// Child-count vectors for every node of `set` from a frozen predictor.
pub fn acnp_numbers(acnp: &Acnp, set: &NodeSet) -> Result<Vec<[f64; 8]>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.contexts.chunks(EVAL_BATCH) {
        out.extend(acnp.number_vectors(chunk)?);
    }
    Ok(out)
}

/// Out-of-fold child-count vectors for `clouds`, in [`NodeSet::from_clouds`]
/// order. Cloud `i` falls in fold `i % folds` and is described by a
/// predictor trained on the other folds only, so the vectors carry the error
/// a frozen predictor makes on clouds it has not seen.
pub fn cross_fit_numbers(
    clouds: &[&QuantizedCloud],
    model_cfg: AcnpConfig,
    cfg: &TrainConfig,
    folds: usize,
) -> Result<Vec<[f64; 8]>> {
    if folds < 2 || folds > clouds.len() {
        return Err(Error::Shape(format!("{folds} folds over {} clouds", clouds.len())));
    }
    let ctx = model_cfg.context;
    let per_cloud: Vec<NodeSet> = clouds.iter().map(|c| NodeSet::from_clouds([*c], ctx)).collect::<Result<_>>()?;
    let mut out: Vec<Vec<[f64; 8]>> = vec![Vec::new(); clouds.len()];
    for fold in 0..folds {
        let mut fit = NodeSet::default();
        for (_, s) in per_cloud.iter().enumerate().filter(|(i, _)| i % folds != fold) {
            fit.contexts.extend_from_slice(&s.contexts);
            fit.symbols.extend_from_slice(&s.symbols);
        }
        let (model, _) = train_acnp(&fit, model_cfg, cfg, |_| {})?;
        for (i, s) in per_cloud.iter().enumerate().filter(|(i, _)| i % folds == fold) {
            out[i] = acnp_numbers(&model, s)?;
        }
    }
    Ok(out.concat())
}

/// Mean cross-entropy of `model` on `set`, in bits per node.
pub fn evaluate_bits(model: &ContextModel, set: &NodeSet, numbers: Option<&[[f64; 8]]>) -> Result<f64> {
    check_set(set, model.context())?;
    let mut bits = 0.0;
    for (start, chunk) in (0..set.len()).step_by(EVAL_BATCH).zip(set.contexts.chunks(EVAL_BATCH)) {
        let nums = numbers.map(|n| &n[start..start + chunk.len()]);
        let mut g = Graph::new(model.params());
        let l = model.loss(&mut g, chunk, nums, &set.symbols[start..start + chunk.len()])?;
        bits += g.value(l).data()[0];
    }
    Ok(bits / set.len() as f64)
}

/// Mean absolute child-count error of `acnp` on `set`.
pub fn evaluate_count_error(acnp: &Acnp, set: &NodeSet) -> Result<f64> {
    check_set(set, acnp.context())?;
    let counts = set.child_counts();
    let mut err = 0.0;
    for (start, chunk) in (0..set.len()).step_by(EVAL_BATCH).zip(set.contexts.chunks(EVAL_BATCH)) {
        for (n_hat, n) in acnp.predict_child_count(chunk)?.iter().zip(&counts[start..]) {
            err += (n_hat - n).abs();
        }
    }
    Ok(err / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_corpus;
    use crate::synth::SyntheticKind;

    fn small_acnp(ctx: ContextConfig) -> AcnpConfig {
        AcnpConfig { attention_dim: 8, mlp_hidden: 16, ..AcnpConfig::new(ctx) }
    }

    fn small_model(ctx: ContextConfig, enhanced: bool) -> ContextModelConfig {
        ContextModelConfig { extraction_hidden: 24, aggregation_hidden: 24, attention_dim: 8, ..ContextModelConfig::new(ctx, enhanced) }
    }

    #[test]
    fn constant_count_corpus_reaches_low_mse() {
        // every node of a full cube has eight children
        let pts: Vec<[u32; 3]> = (0..64u32).map(|i| [i % 4, (i / 4) % 4, i / 16]).collect();
        let cloud = QuantizedCloud::from_voxels(2, pts).unwrap();
        let ctx = ContextConfig::ancestors_only(2).unwrap();
        let set = NodeSet::from_clouds([&cloud; 4], ctx).unwrap();
        let cfg = TrainConfig { batch_size: 4, ..TrainConfig::acnp_default() };
        let (_, logs) = train_acnp(&set, small_acnp(ctx), &cfg, |_| {}).unwrap();
        assert!(logs.last().unwrap().loss < 0.25, "{logs:?}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let corpus = synthetic_corpus(&[SyntheticKind::Plane], 2, 200, 5, 3).unwrap();
        let ctx = ContextConfig::new(2, 3).unwrap();
        let set = NodeSet::from_clouds(corpus.iter().map(|c| &c.cloud), ctx).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 32, seed: 9, ..TrainConfig::acnp_default() };
        let run = || {
            let (a, _) = train_acnp(&set, small_acnp(ctx), &cfg, |_| {}).unwrap();
            let (m, _) = train_context_model(&set, None, small_model(ctx, false), &cfg, |_| {}).unwrap();
            (a.to_checkpoint().to_bytes(), m.to_checkpoint().to_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn enhanced_requires_matching_numbers() {
        let corpus = synthetic_corpus(&[SyntheticKind::Sphere], 1, 100, 4, 0).unwrap();
        let ctx = ContextConfig::ancestors_only(2).unwrap();
        let set = NodeSet::from_clouds(corpus.iter().map(|c| &c.cloud), ctx).unwrap();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::context_model_default(ctx) };
        assert!(train_context_model(&set, None, small_model(ctx, true), &cfg, |_| {}).is_err());
        let short = vec![[0.125; 8]; set.len() - 1];
        assert!(train_context_model(&set, Some(&short), small_model(ctx, true), &cfg, |_| {}).is_err());
        let wrong = ContextConfig::ancestors_only(3).unwrap();
        assert!(train_context_model(&set, None, small_model(wrong, false), &cfg, |_| {}).is_err());
        assert!(train_acnp(&NodeSet::default(), small_acnp(ctx), &cfg, |_| {}).is_err());
        let bad = TrainConfig { lr: -1.0, ..cfg };
        assert!(train_acnp(&set, small_acnp(ctx), &bad, |_| {}).is_err());
    }

    #[test]
    fn cross_fit_uses_only_other_folds() {
        let corpus = synthetic_corpus(&[SyntheticKind::Plane, SyntheticKind::Sphere], 2, 150, 4, 5).unwrap();
        let clouds: Vec<&QuantizedCloud> = corpus.iter().map(|c| &c.cloud).collect();
        let ctx = ContextConfig::ancestors_only(2).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 4, ..TrainConfig::acnp_default() };
        let all = cross_fit_numbers(&clouds, small_acnp(ctx), &cfg, 2).unwrap();
        assert_eq!(all.len(), NodeSet::from_clouds(clouds.iter().copied(), ctx).unwrap().len());

        // fold 1 holds clouds 1 and 3; its predictor sees clouds 0 and 2
        let fit = NodeSet::from_clouds([clouds[0], clouds[2]], ctx).unwrap();
        let (m, _) = train_acnp(&fit, small_acnp(ctx), &cfg, |_| {}).unwrap();
        let n0 = NodeSet::from_clouds([clouds[0]], ctx).unwrap().len();
        let c1 = NodeSet::from_clouds([clouds[1]], ctx).unwrap();
        assert_eq!(&all[n0..n0 + c1.len()], &acnp_numbers(&m, &c1).unwrap()[..]);

        assert!(cross_fit_numbers(&clouds, small_acnp(ctx), &cfg, 1).is_err());
        assert!(cross_fit_numbers(&clouds, small_acnp(ctx), &cfg, 5).is_err());
    }

    #[test]
    fn validation_keeps_the_best_epoch() {
        let corpus = synthetic_corpus(&[SyntheticKind::Sphere], 3, 200, 5, 8).unwrap();
        let ctx = ContextConfig::ancestors_only(2).unwrap();
        let fit = NodeSet::from_clouds(corpus[..2].iter().map(|c| &c.cloud), ctx).unwrap();
        let val = NodeSet::from_clouds([&corpus[2].cloud], ctx).unwrap();
        let cfg = TrainConfig { epochs: 6, lr: 3e-2, decay: 1.0, batch_size: 16, seed: 2 };
        let v = Validation { set: &val, numbers: None };
        let (m, logs) = train_context_model_validated(&fit, None, v, small_model(ctx, false), &cfg, |_| {}).unwrap();
        let scores: Vec<f64> = logs.iter().map(|l| l.validation.unwrap()).collect();
        let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(evaluate_bits(&m, &val, None).unwrap(), best);

        let (plain, logs) = train_context_model(&fit, None, small_model(ctx, false), &cfg, |_| {}).unwrap();
        assert!(logs.iter().all(|l| l.validation.is_none()));
        assert_eq!(evaluate_bits(&plain, &val, None).unwrap(), *scores.last().unwrap());

        let bad = Validation { set: &val, numbers: Some(&[]) };
        assert!(train_context_model_validated(&fit, None, bad, small_model(ctx, false), &cfg, |_| {}).is_err());
    }

    #[test]
    fn identical_symbols_are_learned() {
        let cloud = QuantizedCloud::from_voxels(3, vec![[0, 0, 0], [7, 7, 7]]).unwrap();
        let ctx = ContextConfig::ancestors_only(2).unwrap();
        let set = NodeSet::from_clouds([&cloud], ctx).unwrap();
        let s = set.symbols[0];
        let only: NodeSet = NodeSet { contexts: vec![set.contexts[0].clone(); 32], symbols: vec![s; 32] };
        let cfg = TrainConfig { epochs: 30, lr: 1e-2, decay: 1.0, batch_size: 8, seed: 1 };
        let (m, _) = train_context_model(&only, None, small_model(ctx, false), &cfg, |_| {}).unwrap();
        let p = m.forward_baseline(&only.contexts[..1]).unwrap()[0].prob(s);
        assert!(p > 0.9, "{p}");
    }
}

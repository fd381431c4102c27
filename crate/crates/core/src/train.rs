//! SGD training loop, evaluation helpers and experiment sweeps.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradCheck, GradCheckReport, MixtureTargets, Tape, Tensor};
use crate::density::{underflow_ratio, underflow_ratio_at, ComponentKind, DimSelection, UnderflowRow};
use crate::error::{invalid, Error, Result};
use crate::eval::{self, EvalResult, PosePrediction};
use crate::kv::{join_list, KvFile};
use crate::loss::{append_auxiliary_center, heuristic_partition, sample_partition, GroupingMode, LikelihoodSpace};
use crate::model::{Model, ModelConfig};
use crate::scalar::Precision;
use crate::synth::{self, GenConfig};
use crate::types::{GroupPartition, KeypointSet, PersonAnnotation, Scene, SkeletonSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations at which the rate is multiplied by `lr_decay_factor`.
    /// Empty means 2/3 and 8/9 of `iterations`.
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub k_g: usize,
    pub grouping: GroupingMode,
    pub kind: ComponentKind,
    pub likelihood_space: LikelihoodSpace,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub image_side: usize,
    pub levels: Vec<u32>,
    pub backbone_width: usize,
    pub head_layers: usize,
    pub head_width: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 8,
            lr: 0.01,
            lr_decay_steps: Vec::new(),
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-5,
            clip_norm: 7.0,
            k_g: 3,
            grouping: GroupingMode::Random,
            kind: ComponentKind::Laplace,
            likelihood_space: LikelihoodSpace::Log,
            seed: 0,
            dataset: None,
            eval_dataset: None,
            eval_interval: 0,
            image_side: 64,
            levels: vec![3, 4],
            backbone_width: 16,
            head_layers: 8,
            head_width: 32,
            score_thresh: eval::SCORE_THRESH,
            nms_iou: eval::NMS_IOU,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut kv = KvFile::parse(text)?;
        let (mut dataset, mut eval_dataset) = (String::new(), String::new());
        kv.set("iterations", &mut c.iterations)?;
        kv.set("batch_size", &mut c.batch_size)?;
        kv.set("lr", &mut c.lr)?;
        kv.set_list("lr_decay_steps", &mut c.lr_decay_steps)?;
        kv.set("lr_decay_factor", &mut c.lr_decay_factor)?;
        kv.set("momentum", &mut c.momentum)?;
        kv.set("weight_decay", &mut c.weight_decay)?;
        kv.set("clip_norm", &mut c.clip_norm)?;
        kv.set("k_g", &mut c.k_g)?;
        kv.set("grouping", &mut c.grouping)?;
        kv.set("kind", &mut c.kind)?;
        kv.set("likelihood_space", &mut c.likelihood_space)?;
        kv.set("seed", &mut c.seed)?;
        kv.set("dataset", &mut dataset)?;
        kv.set("eval_dataset", &mut eval_dataset)?;
        kv.set("eval_interval", &mut c.eval_interval)?;
        kv.set("image_side", &mut c.image_side)?;
        kv.set_list("levels", &mut c.levels)?;
        kv.set("backbone_width", &mut c.backbone_width)?;
        kv.set("head_layers", &mut c.head_layers)?;
        kv.set("head_width", &mut c.head_width)?;
        kv.set("score_thresh", &mut c.score_thresh)?;
        kv.set("nms_iou", &mut c.nms_iou)?;
        kv.finish()?;
        c.dataset = (!dataset.is_empty()).then(|| PathBuf::from(dataset));
        c.eval_dataset = (!eval_dataset.is_empty()).then(|| PathBuf::from(eval_dataset));
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        writeln!(s, "iterations = {}", self.iterations).ok();
        writeln!(s, "batch_size = {}", self.batch_size).ok();
        writeln!(s, "lr = {:?}", self.lr).ok();
        writeln!(s, "lr_decay_steps = {}", join_list(&self.lr_decay_steps)).ok();
        writeln!(s, "lr_decay_factor = {:?}", self.lr_decay_factor).ok();
        writeln!(s, "momentum = {:?}", self.momentum).ok();
        writeln!(s, "weight_decay = {:?}", self.weight_decay).ok();
        writeln!(s, "clip_norm = {:?}", self.clip_norm).ok();
        writeln!(s, "k_g = {}", self.k_g).ok();
        writeln!(s, "grouping = {}", self.grouping).ok();
        writeln!(s, "kind = {}", self.kind).ok();
        writeln!(s, "likelihood_space = {}", self.likelihood_space).ok();
        writeln!(s, "seed = {}", self.seed).ok();
        writeln!(s, "dataset = {}", path(&self.dataset)).ok();
        writeln!(s, "eval_dataset = {}", path(&self.eval_dataset)).ok();
        writeln!(s, "eval_interval = {}", self.eval_interval).ok();
        writeln!(s, "image_side = {}", self.image_side).ok();
        writeln!(s, "levels = {}", join_list(&self.levels)).ok();
        writeln!(s, "backbone_width = {}", self.backbone_width).ok();
        writeln!(s, "head_layers = {}", self.head_layers).ok();
        writeln!(s, "head_width = {}", self.head_width).ok();
        writeln!(s, "score_thresh = {:?}", self.score_thresh).ok();
        writeln!(s, "nms_iou = {:?}", self.nms_iou).ok();
        s
    }

    pub fn validate(&self, k_total: usize) -> Result<()> {
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("lr and clip_norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(invalid("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        if self.grouping == GroupingMode::Random && (self.k_g == 0 || !k_total.is_multiple_of(self.k_g)) {
            return Err(Error::Indivisible { k_total, k_g: self.k_g });
        }
        Ok(())
    }

    pub fn model_config(&self, k_total: usize) -> ModelConfig {
        let mut m = ModelConfig::desk(self.image_side, k_total);
        m.backbone.width = self.backbone_width;
        m.head.layers = self.head_layers;
        m.head.width = self.head_width;
        m.head.levels = self.levels.clone();
        m
    }

    pub fn decay_steps(&self) -> Vec<usize> {
        if self.lr_decay_steps.is_empty() {
            vec![self.iterations * 2 / 3, self.iterations * 8 / 9]
        } else {
            self.lr_decay_steps.clone()
        }
    }

    /// Learning rate in effect at iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let n = self.decay_steps().iter().filter(|&&s| iter >= s).count();
        self.lr * self.lr_decay_factor.powi(n as i32)
    }
}

/// Rescales `grad` in place to L2 norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Momentum SGD. Weight decay is added to the gradient before clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize, momentum: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            clip_norm,
            velocity: vec![0.0; n],
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> f64 {
        let mut g: Vec<f64> = grad.iter().zip(params.iter()).map(|(g, p)| g + self.weight_decay * p).collect();
        let norm = clip_global_norm(&mut g, self.clip_norm);
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(&g) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub underflow_ratio: f64,
    pub partition_hash: u64,
}

impl LogRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:016x}", self.iter, self.loss, self.underflow_ratio, self.partition_hash)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(crate::loss::LossReport::<f64>::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct Abort {
    pub iter: usize,
    pub partition: GroupPartition,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f64>,
    pub log: Vec<LogRow>,
    /// Set when training stopped on a non-finite loss.
    pub abort: Option<Abort>,
    /// `(iteration, AP@0.50)` at each evaluation point.
    pub evals: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn mean_underflow_ratio(&self) -> f64 {
        if self.log.is_empty() {
            return f64::NAN;
        }
        self.log.iter().map(|r| r.underflow_ratio).sum::<f64>() / self.log.len() as f64
    }
}

/// Ground truth of a scene with the auxiliary center appended.
pub fn training_targets(scene: &Scene) -> Vec<KeypointSet<f64>> {
    scene.persons.iter().map(append_auxiliary_center).collect()
}

/// Value and gradient of the batch loss at `model`'s parameters.
pub fn batch_loss(
    model: &Model<f64>,
    scenes: &[&Scene],
    partition: &GroupPartition,
    kind: ComponentKind,
    space: LikelihoodSpace,
) -> Result<(f64, Vec<f64>, f64)> {
    let tape = Tape::new();
    let params = model.record_params(&tape, true);
    let images: Vec<&[f64]> = scenes.iter().map(|s| s.image.as_slice()).collect();
    let x = tape.constant(model.batch_tensor(&images)?);
    let raw = model.forward(&tape, &params, x)?;
    let mut total = None;
    let mut ratio = 0.0;
    let sels = DimSelection::from_partition(partition);
    for (b, scene) in scenes.iter().enumerate() {
        let v = model.transform(&tape, &raw, b)?;
        let gts = training_targets(scene);
        let t = MixtureTargets {
            gts: &gts,
            groups: partition.groups(),
            kind,
            space,
        };
        let l = tape.mixture_nll(v.mu, v.gamma, v.log_pi, &t)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
        let field = model.field_from_tape(&tape, &v)?;
        ratio += sels.iter().map(|s| underflow_ratio::<f32, f64>(&field, &gts, s, kind)).sum::<f64>() / sels.len() as f64;
    }
    let total = total.ok_or_else(|| invalid("empty batch"))?;
    let loss = tape.scalar_mul(total, 1.0 / scenes.len() as f64);
    let value = tape.item(loss);
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(model.params.num_scalars());
    for p in &params {
        flat.extend_from_slice(grads.get(*p).expect("parameters require gradients"));
    }
    Ok((value, flat, ratio / scenes.len() as f64))
}

/// Trains from scratch on `scenes`, evaluating on `eval_scenes` every
/// `eval_interval` iterations when given.
pub fn train(
    config: &TrainConfig,
    skeleton: &SkeletonSpec,
    scenes: &[Scene],
    eval_scenes: Option<&[Scene]>,
) -> Result<TrainOutcome> {
    let k_total = skeleton.num_trainable();
    config.validate(k_total)?;
    if scenes.is_empty() {
        return Err(invalid("no training scenes"));
    }
    let mut model = Model::<f64>::init(config.model_config(k_total), config.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut group_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let fixed = match config.grouping {
        GroupingMode::Random => None,
        GroupingMode::Heuristic => Some(heuristic_partition(skeleton)?),
        GroupingMode::None => Some(GroupPartition::single(k_total)),
    };
    let mut sgd = Sgd::new(model.params.num_scalars(), config.momentum, config.weight_decay, config.clip_norm);
    let mut flat = model.params.flatten();
    let mut log = Vec::with_capacity(config.iterations);
    let mut evals = Vec::new();
    let mut abort = None;
    for iter in 0..config.iterations {
        let batch: Vec<&Scene> = (0..config.batch_size).map(|_| &scenes[data_rng.gen_range(0..scenes.len())]).collect();
        let partition = match &fixed {
            Some(p) => p.clone(),
            None => sample_partition(k_total, config.k_g, &mut group_rng)?,
        };
        let (loss, grad, ratio) = batch_loss(&model, &batch, &partition, config.kind, config.likelihood_space)?;
        log.push(LogRow {
            iter,
            loss,
            underflow_ratio: ratio,
            partition_hash: partition.fingerprint(),
        });
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            abort = Some(Abort {
                iter,
                detail: format!("loss {loss} with groups {:?}", partition.groups()),
                partition,
            });
            break;
        }
        sgd.step(&mut flat, &grad, config.lr_at(iter));
        model.params.unflatten(&flat)?;
        if let Some(ev) = eval_scenes {
            if config.eval_interval > 0 && (iter + 1) % config.eval_interval == 0 && iter + 1 < config.iterations {
                let r = evaluate(&model, ev, skeleton, config.score_thresh, config.nms_iou)?;
                evals.push((iter + 1, r.result.ap50));
            }
        }
    }
    if let (Some(ev), None) = (eval_scenes, &abort) {
        let r = evaluate(&model, ev, skeleton, config.score_thresh, config.nms_iou)?;
        evals.push((config.iterations, r.result.ap50));
    }
    Ok(TrainOutcome { model, log, abort, evals })
}

/// Decoded, suppressed predictions for one scene.
pub fn predict_scene(model: &Model<f64>, scene: &Scene, score_thresh: f64, nms_iou: f64) -> Result<Vec<PosePrediction<f64>>> {
    let field = model.predict(&scene.image)?;
    Ok(eval::nms(&eval::decode(&field, score_thresh), nms_iou))
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub result: EvalResult,
    pub duplicate_rate: f64,
    pub predictions: Vec<Vec<PosePrediction<f64>>>,
}

pub fn evaluate(model: &Model<f64>, scenes: &[Scene], skeleton: &SkeletonSpec, score_thresh: f64, nms_iou: f64) -> Result<EvalSummary> {
    let predictions = scenes
        .iter()
        .map(|s| predict_scene(model, s, score_thresh, nms_iou))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<PersonAnnotation<f64>>> = scenes.iter().map(|s| s.persons.clone()).collect();
    let result = eval::average_precision(&predictions, &gts, skeleton, &eval::oks_thresholds())?;
    let duplicate_rate = eval::duplicate_rate(&predictions, &gts, skeleton, 0.5)?;
    Ok(EvalSummary {
        result,
        duplicate_rate,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k_g: usize,
    pub ap: f64,
    pub ap50: f64,
    pub mean_underflow_ratio: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "k_g,ap,ap50,mean_underflow_ratio";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.k_g, self.ap, self.ap50, self.mean_underflow_ratio)
    }
}

/// One run per `K_g`, identical otherwise. Aborted runs give NaN metrics.
pub fn sweep_kg(
    base: &TrainConfig,
    kgs: &[usize],
    skeleton: &SkeletonSpec,
    scenes: &[Scene],
    eval_scenes: &[Scene],
) -> Result<Vec<SweepRow>> {
    let k_total = skeleton.num_trainable();
    if let Some(&k_g) = kgs.iter().find(|&&k| k == 0 || !k_total.is_multiple_of(k)) {
        return Err(Error::Indivisible { k_total, k_g });
    }
    kgs.iter()
        .map(|&k_g| {
            let cfg = TrainConfig {
                k_g,
                grouping: GroupingMode::Random,
                ..base.clone()
            };
            let out = train(&cfg, skeleton, scenes, None)?;
            let ratio = out.mean_underflow_ratio();
            if out.abort.is_some() {
                return Ok(SweepRow {
                    k_g,
                    ap: f64::NAN,
                    ap50: f64::NAN,
                    mean_underflow_ratio: ratio,
                });
            }
            let r = evaluate(&out.model, eval_scenes, skeleton, cfg.score_thresh, cfg.nms_iou)?;
            Ok(SweepRow {
                k_g,
                ap: r.result.ap,
                ap50: r.result.ap50,
                mean_underflow_ratio: ratio,
            })
        })
        .collect()
}

/// Contiguous groups `{0..k_g}, {k_g..2k_g}, ...` of `0..k_total`.
pub fn contiguous_partition(k_total: usize, k_g: usize) -> Result<GroupPartition> {
    if k_g == 0 || !k_total.is_multiple_of(k_g) {
        return Err(Error::Indivisible { k_total, k_g });
    }
    GroupPartition::new((0..k_total).collect::<Vec<_>>().chunks(k_g).map(<[usize]>::to_vec).collect(), k_total)
}

/// Underflow ratio of a model over a dataset for each group size, averaged
/// over the groups of a contiguous partition and over scenes.
pub fn diagnose_underflow(
    model: &Model<f64>,
    scenes: &[Scene],
    kgs: &[usize],
    precision: Precision,
    kind: ComponentKind,
) -> Result<Vec<UnderflowRow>> {
    let k_total = model.config.head.k_total;
    let fields = scenes.iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>>>()?;
    kgs.iter()
        .map(|&k_g| {
            let sels = DimSelection::from_partition(&contiguous_partition(k_total, k_g)?);
            let mut sum = 0.0;
            for (scene, field) in scenes.iter().zip(&fields) {
                let gts = training_targets(scene);
                sum += sels.iter().map(|s| underflow_ratio_at(precision, field, &gts, s, kind)).sum::<f64>() / sels.len() as f64;
            }
            Ok(UnderflowRow {
                k_g,
                kind,
                precision,
                ratio: if scenes.is_empty() { 0.0 } else { sum / scenes.len() as f64 },
            })
        })
        .collect()
}

/// Loss and gradient as a function of the flat parameter vector, for
/// finite-difference checks of the whole pipeline.
pub fn loss_fn<'a>(
    model: &'a Model<f64>,
    scenes: &'a [&'a Scene],
    partition: &'a GroupPartition,
    kind: ComponentKind,
) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) + 'a {
    let mut m = model.clone();
    move |p: &[f64]| {
        m.params.unflatten(p).expect("parameter count is fixed");
        let (l, g, _) = batch_loss(&m, scenes, partition, kind, LikelihoodSpace::Log).expect("shapes are fixed");
        (l, g)
    }
}

/// Finite-difference check of the whole pipeline, image to batch loss, on a
/// small model with a random partition of group size 3.
pub fn pipeline_gradcheck(probes: usize, seed: u64) -> Result<GradCheckReport> {
    let skeleton = SkeletonSpec::synthetic();
    let k_total = skeleton.num_trainable();
    let gen = GenConfig {
        image_side: 32,
        min_scale: 12.0,
        max_scale: 20.0,
        max_persons: 2,
        num_scenes: 2,
        seed,
        ..GenConfig::default()
    };
    let scenes = synth::generate(&gen)?;
    let mut cfg = ModelConfig::desk(32, k_total);
    cfg.backbone.width = 4;
    cfg.head.layers = 2;
    cfg.head.width = 8;
    let model = Model::<f64>::init(cfg, seed)?;
    let refs: Vec<&Scene> = scenes.iter().collect();
    let partition = sample_partition(k_total, 3, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let params = model.params.flatten();
    let f = loss_fn(&model, &refs, &partition, ComponentKind::Laplace);
    Ok(GradCheck::new(1e-3, probes).seed(seed).run(f, &params))
}

/// Deterministically shuffled copy, used to split datasets.
pub fn shuffled<T: Clone>(xs: &[T], seed: u64) -> Vec<T> {
    let mut v = xs.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Wraps a flat gradient as tensors shaped like the model parameters.
pub fn unflatten_like(model: &Model<f64>, flat: &[f64]) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::new();
    let mut at = 0;
    for t in &model.params.tensors {
        out.push(Tensor::new(t.shape().to_vec(), flat[at..at + t.len()].to_vec())?);
        at += t.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    #[test]
    fn pipeline_gradients_match_differences() {
        let r = pipeline_gradcheck(16, 3).unwrap();
        assert_eq!(r.checked.len(), 16);
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 2,
            backbone_width: 4,
            head_layers: 2,
            head_width: 4,
            ..TrainConfig::default()
        }
    }

    fn scenes(n: usize) -> Vec<Scene> {
        generate(&GenConfig {
            num_scenes: n,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![14.0, 0.0];
        assert_eq!(clip_global_norm(&mut g, 7.0), 14.0);
        assert_eq!(g, vec![7.0, 0.0]);
        let mut g = vec![0.0, 3.0];
        clip_global_norm(&mut g, 7.0);
        assert_eq!(g, vec![0.0, 3.0]);
    }

    #[test]
    fn decay_then_clip_then_momentum() {
        // Two steps by hand: wd 0.5, clip 1, momentum 0.5, lr 0.1.
        let mut sgd = Sgd::new(2, 0.5, 0.5, 1.0);
        let mut p = vec![2.0, 0.0];
        // g + wd p = (1 + 1, 0) = (2, 0) -> clipped (1, 0); v = (1, 0).
        sgd.step(&mut p, &[1.0, 0.0], 0.1);
        assert_eq!(p, vec![1.9, 0.0]);
        // g + wd p = (0.95, 0.2), norm < 1 -> v = (0.5 + 0.95, 0.2).
        sgd.step(&mut p, &[0.0, 0.2], 0.1);
        assert!((p[0] - (1.9 - 0.1 * 1.45)).abs() < 1e-15);
        assert!((p[1] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            iterations: 900,
            ..TrainConfig::default()
        };
        assert_eq!(c.decay_steps(), vec![600, 800]);
        assert_eq!(c.lr_at(599), 0.01);
        assert!((c.lr_at(600) - 0.001).abs() < 1e-18);
        assert!((c.lr_at(899) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn config_round_trip() {
        let c = TrainConfig {
            lr_decay_steps: vec![5, 9],
            grouping: GroupingMode::Heuristic,
            kind: ComponentKind::Cauchy,
            likelihood_space: LikelihoodSpace::LinearSingle,
            dataset: Some("d.jsonl".into()),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(TrainConfig::from_kv("bogus = 1").is_err());
        assert!(TrainConfig::default().validate(6).is_ok());
        let bad = TrainConfig {
            k_g: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(6), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let data = scenes(6);
        let sk = SkeletonSpec::synthetic();
        let a = train(&tiny_config(), &sk, &data, None).unwrap();
        let b = train(&tiny_config(), &sk, &data, None).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.log, b.log);
        assert!(a.abort.is_none());
    }

    #[test]
    fn first_loss_finite_for_all_group_sizes() {
        let data = scenes(4);
        let sk = SkeletonSpec::synthetic();
        let mut first = Vec::new();
        for (k_g, grouping) in [(1, GroupingMode::Random), (2, GroupingMode::Random), (3, GroupingMode::Random), (6, GroupingMode::Random), (3, GroupingMode::Heuristic), (6, GroupingMode::None)] {
            let c = TrainConfig {
                iterations: 1,
                k_g,
                grouping,
                ..tiny_config()
            };
            let out = train(&c, &sk, &data, None).unwrap();
            assert!(out.log[0].loss.is_finite());
            first.push(out.log[0].loss);
        }
        // A single random group of all six keypoints is the ungrouped loss.
        assert!((first[3] - first[5]).abs() < 1e-12 * first[5].abs());
    }

    #[test]
    fn sweep_has_one_row_per_group_size() {
        let data = scenes(4);
        let sk = SkeletonSpec::synthetic();
        let c = TrainConfig {
            iterations: 1,
            ..tiny_config()
        };
        let rows = sweep_kg(&c, &[1, 2, 3, 6], &sk, &data, &data[..2]).unwrap();
        assert_eq!(rows.iter().map(|r| r.k_g).collect::<Vec<_>>(), vec![1, 2, 3, 6]);
        assert!(sweep_kg(&c, &[4], &sk, &data, &data).is_err());
    }

    #[test]
    fn untrained_model_does_not_underflow() {
        let data = scenes(5);
        let m = Model::<f64>::init(tiny_config().model_config(6), 0).unwrap();
        for p in [Precision::Single, Precision::Double] {
            for row in diagnose_underflow(&m, &data, &[1, 2, 3, 6], p, ComponentKind::Laplace).unwrap() {
                assert_eq!(row.ratio, 0.0);
            }
        }
    }
}

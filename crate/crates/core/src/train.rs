//! Source training, shift-parameter adaptation and the regime harness.
//!
//! The joint loop alternates one source step (density MSE on a source batch)
//! with one adaptation step per track (density MSE of the transformed model
//! on a few-shot batch plus the shift regularizer). Source batches are drawn
//! from their own RNG stream, so the source trajectory is identical whether
//! zero, one or several adaptation tracks ride along. That lets the
//! no-adaptation baseline, the fine-tuning baselines' first phase and every
//! shift track of a study share one source run.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::GradientTape;
use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{NltError, Result};
use crate::metrics::count_errors;
use crate::net::{build_counter, CounterNet, NetConfig, Params};
use crate::nlt::{apply_nlt, backprop_through_nlt, init_shift_bank, reg_grad, reg_loss, ShiftBank};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Source learning rate.
    pub alpha: f64,
    /// Target learning rate (shift parameters, fine-tuning, supervised).
    pub beta: f64,
    /// Shift regularization weight.
    pub lambda: f64,
    pub source_batch: usize,
    pub target_batch: usize,
    pub iterations: usize,
    pub val_interval: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for the desk-scale networks.
    pub fn desk() -> Self {
        TrainConfig {
            alpha: 1e-4,
            beta: 1e-4,
            lambda: 1e-4,
            source_batch: 8,
            target_batch: 4,
            iterations: 3000,
            val_interval: 50,
            seed: 0,
        }
    }

    /// Defaults for the full VGG-16 network.
    pub fn paper() -> Self {
        TrainConfig {
            alpha: 1e-5,
            beta: 1e-5,
            lambda: 1e-4,
            source_batch: 12,
            target_batch: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NltError::InvalidArgument(format!("train config: {m}")));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("learning rates alpha and beta must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if self.source_batch == 0 || self.target_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.val_interval == 0 {
            return bad("val_interval must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    NoAdapt,
    Supervised,
    FinetuneAll,
    FinetuneDecoder,
    Nlt,
    NltFactorOnly,
    NltBiasOnly,
    /// Needs an image-translation front end; always rejected.
    IfsNlt,
}

impl Regime {
    pub const ALL: [Regime; 8] = [
        Regime::NoAdapt,
        Regime::Supervised,
        Regime::FinetuneAll,
        Regime::FinetuneDecoder,
        Regime::Nlt,
        Regime::NltFactorOnly,
        Regime::NltBiasOnly,
        Regime::IfsNlt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::NoAdapt => "no_adapt",
            Regime::Supervised => "supervised",
            Regime::FinetuneAll => "finetune_all",
            Regime::FinetuneDecoder => "finetune_decoder",
            Regime::Nlt => "nlt",
            Regime::NltFactorOnly => "nlt_factor_only",
            Regime::NltBiasOnly => "nlt_bias_only",
            Regime::IfsNlt => "ifs_nlt",
        }
    }

    /// Whether the regime reads labelled target training data.
    pub fn uses_few_shot(self) -> bool {
        !matches!(self, Regime::NoAdapt)
    }

    fn shift_freeze(self) -> Option<ShiftFreeze> {
        match self {
            Regime::Nlt => Some(ShiftFreeze::None),
            Regime::NltFactorOnly => Some(ShiftFreeze::Bias),
            Regime::NltBiasOnly => Some(ShiftFreeze::Factor),
            _ => None,
        }
    }

    fn check_supported(self) -> Result<()> {
        match self {
            Regime::IfsNlt => Err(NltError::InvalidArgument(
                "regime ifs_nlt needs an image-translation pipeline, which is not part of this library"
                    .into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = NltError;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| NltError::InvalidArgument(format!("unknown regime {s:?}")))
    }
}

/// Which shift component stays at its initial value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftFreeze {
    None,
    Factor,
    Bias,
}

/// Few-shot target training data with a read counter, so callers can audit
/// that a regime never looked at target labels.
#[derive(Debug, Default)]
pub struct FewShot {
    samples: Vec<Sample>,
    reads: Cell<usize>,
}

impl FewShot {
    pub fn new(samples: Vec<Sample>) -> Self {
        FewShot {
            samples,
            reads: Cell::new(0),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        self.reads.set(self.reads.get() + 1);
        &self.samples
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Uniform draw of `ceil(ratio * N)` samples without replacement.
pub fn select_few_shot(train: &[Sample], ratio: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(NltError::InvalidArgument(format!(
            "few-shot ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let m = ((ratio * train.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx[..m.min(train.len())]
        .iter()
        .map(|&i| train[i].clone())
        .collect())
}

/// Epoch-shuffled index stream; batches wrap across epoch boundaries.
#[derive(Clone, Debug)]
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchCycler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn stack(batch: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let dens: Vec<&Tensor> = batch.iter().map(|s| &s.density).collect();
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&dens)?))
}

/// Density loss `1/(2n) sum ||S(I) - Y||^2` and its gradient with respect to
/// every conv weight and bias.
pub fn density_gradients(net: &CounterNet, params: &Params, batch: &[&Sample]) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(NltError::EmptyBatch);
    }
    let (images, targets) = stack(batch)?;
    let mut tape = GradientTape::new();
    let pv = net.register_params(&mut tape, params, true);
    let x = tape.leaf(images);
    let y = tape.leaf(targets);
    let pred = net.forward_on_tape(&mut tape, &pv, x)?;
    let loss = tape.mse_loss(pred, y, batch.len())?;
    let loss_value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let mut grads = params.zeros_like();
    for (g, &(w, b)) in grads.layers.iter_mut().zip(&pv.layers) {
        g.weight.data_mut().copy_from_slice(tape.grad(w).expect("requires grad"));
        g.bias.data_mut().copy_from_slice(tape.grad(b).expect("requires grad"));
    }
    Ok((loss_value, grads))
}

/// One Adam step on the density loss, updating only the conv layers listed
/// in `trainable`. `opt` must have been built for exactly those layers
/// (`[w, b]` per layer, in list order).
fn density_step(
    net: &CounterNet,
    params: &mut Params,
    batch: &[&Sample],
    opt: &mut AdamState,
    trainable: &[usize],
) -> Result<f64> {
    let (loss, grads) = density_gradients(net, params, batch)?;
    let grad_refs: Vec<&[f32]> = trainable
        .iter()
        .flat_map(|&i| [grads.layers[i].weight.data(), grads.layers[i].bias.data()])
        .collect();
    let mut bufs: Vec<&mut [f32]> = params
        .layers
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| trainable.contains(i))
        .flat_map(|(_, l)| {
            let crate::net::ConvParams { weight, bias } = l;
            [weight.data_mut(), bias.data_mut()]
        })
        .collect();
    opt.step(&mut bufs, &grad_refs)?;
    Ok(loss)
}

/// One source step: `1/(2n) sum ||S(I) - Y||^2` over the batch, all parameters updated.
pub fn train_source_step(
    net: &CounterNet,
    params: &mut Params,
    batch: &[&Sample],
    opt: &mut AdamState,
) -> Result<f64> {
    let all: Vec<usize> = (0..params.layers.len()).collect();
    density_step(net, params, batch, opt, &all)
}

/// Loss terms of one adaptation step; `total = density + reg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptLoss {
    pub density: f64,
    /// Already multiplied by lambda.
    pub reg: f64,
    pub total: f64,
}

/// Adaptation loss (density term of the transformed model plus the shift
/// regularizer) and its gradient with respect to every factor and bias.
pub fn shift_gradients(
    net: &CounterNet,
    source: &Params,
    bank: &ShiftBank,
    batch: &[&Sample],
    lambda: f64,
) -> Result<(AdaptLoss, ShiftBank)> {
    if batch.is_empty() {
        return Err(NltError::EmptyBatch);
    }
    let target = apply_nlt(source, bank)?;
    let (images, targets) = stack(batch)?;
    let mut tape = GradientTape::new();
    let vars: Vec<_> = target
        .layers
        .into_iter()
        .map(|l| (tape.leaf(l.weight.with_grad()), tape.leaf(l.bias)))
        .collect();
    let pv = crate::net::ParamVars { layers: vars };
    let x = tape.leaf(images);
    let y = tape.leaf(targets);
    let pred = net.forward_on_tape(&mut tape, &pv, x)?;
    let loss = tape.mse_loss(pred, y, batch.len())?;
    let density = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;

    let weight_grads: Vec<&[f32]> = pv
        .layers
        .iter()
        .map(|&(w, _)| tape.grad(w).expect("target weights require grad"))
        .collect();
    let mut grad = backprop_through_nlt(&weight_grads, source)?;
    let reg = reg_loss(bank, lambda)?;
    let rg = reg_grad(bank, lambda)?;
    for (g, r) in grad.layers.iter_mut().zip(&rg.layers) {
        for (a, b) in g.factor.iter_mut().zip(&r.factor) {
            *a += b;
        }
        for (a, b) in g.bias.iter_mut().zip(&r.bias) {
            *a += b;
        }
    }
    let loss = AdaptLoss {
        density,
        reg,
        total: density + reg,
    };
    Ok((loss, grad))
}

/// One step on the shift bank with the source parameters frozen.
pub fn adapt_step(
    net: &CounterNet,
    source: &Params,
    bank: &mut ShiftBank,
    batch: &[&Sample],
    lambda: f64,
    opt: &mut AdamState,
    freeze: ShiftFreeze,
) -> Result<AdaptLoss> {
    let (loss, mut grad) = shift_gradients(net, source, bank, batch, lambda)?;
    for g in &mut grad.layers {
        match freeze {
            ShiftFreeze::None => {}
            ShiftFreeze::Factor => g.factor.fill(0.0),
            ShiftFreeze::Bias => g.bias.fill(0.0),
        }
    }
    let grad_bufs = grad.buffers();
    opt.step(&mut bank.buffers_mut(), &grad_bufs)?;
    Ok(loss)
}

/// One validation line of a training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub source_loss: Option<f64>,
    pub target_loss: Option<AdaptLoss>,
    pub val_mae: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "iter,source_loss,target_loss,val_mae,target_density_loss,target_reg_loss";
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        write!(
            f,
            "{},{},{},{},{},{}",
            self.iter,
            opt(self.source_loss),
            opt(self.target_loss.map(|l| l.total)),
            self.val_mae,
            opt(self.target_loss.map(|l| l.density)),
            opt(self.target_loss.map(|l| l.reg)),
        )
    }
}

/// Result of one regime: best-on-validation checkpoint plus its training log.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Optimizer steps taken on the source parameters.
    pub source_steps: u64,
    /// Optimizer steps taken on the target side (shift bank, fine-tuned or
    /// supervised parameters).
    pub target_steps: u64,
}

impl RegimeOutcome {
    /// Parameters the regime deploys on the target domain.
    pub fn target_params(&self) -> Result<Params> {
        self.checkpoint.target_params()
    }
}

struct Best {
    val_mae: f64,
    iteration: usize,
    params: Params,
    bank: Option<ShiftBank>,
}

impl Best {
    fn offer(slot: &mut Option<Best>, val_mae: f64, iteration: usize, params: &Params, bank: Option<&ShiftBank>) {
        if slot.as_ref().is_none_or(|b| val_mae < b.val_mae) {
            *slot = Some(Best {
                val_mae,
                iteration,
                params: params.clone(),
                bank: bank.cloned(),
            });
        }
    }

    fn into_checkpoint(self, net: &CounterNet, regime: Regime, seed: u64) -> Checkpoint {
        Checkpoint {
            arch: net.arch_string(),
            regime,
            iteration: self.iteration,
            seed,
            metrics: vec![("val_mae".into(), self.val_mae)],
            source: self.params,
            bank: self.bank,
        }
    }
}

fn is_eval_iter(t: usize, cfg: &TrainConfig) -> bool {
    t.is_multiple_of(cfg.val_interval) || t == cfg.iterations
}

fn val_mae(net: &CounterNet, params: &Params, val: &[Sample]) -> Result<f64> {
    Ok(count_errors(net, params, val)?.0)
}

struct Track<'a> {
    regime: Regime,
    freeze: ShiftFreeze,
    few_shot: &'a [Sample],
    bank: ShiftBank,
    opt: AdamState,
    sampler: BatchCycler,
    best: Option<Best>,
    log: Vec<LogRow>,
    last: Option<AdaptLoss>,
}

struct JointResult {
    source: Option<RegimeOutcome>,
    tracks: Vec<RegimeOutcome>,
}

/// Shared source stream with any number of adaptation tracks.
fn joint_loop(
    net: &CounterNet,
    source_train: &[Sample],
    tracks: &[(Regime, &[Sample])],
    target_val: &[Sample],
    cfg: &TrainConfig,
    select_source: bool,
) -> Result<JointResult> {
    if target_val.is_empty() {
        return Err(NltError::InvalidArgument("target validation split is empty".into()));
    }
    if cfg.iterations > 0 && source_train.is_empty() {
        return Err(NltError::EmptyBatch);
    }
    let mut source = net.params.clone();
    let mut src_opt = AdamState::new(&source.buffer_lens(), cfg.alpha);
    let mut src_sampler = BatchCycler::new(source_train.len(), cfg.seed, STREAM_SOURCE);
    let mut src_best: Option<Best> = None;
    let mut src_log = Vec::new();
    let mut src_last = None;

    let mut tracks: Vec<Track> = tracks
        .iter()
        .map(|&(regime, few_shot)| {
            let bank = init_shift_bank(net);
            let opt = AdamState::new(&bank.buffer_lens(), cfg.beta);
            Track {
                regime,
                freeze: regime.shift_freeze().expect("shift regime"),
                few_shot,
                bank,
                opt,
                sampler: BatchCycler::new(few_shot.len(), cfg.seed, STREAM_TARGET),
                best: None,
                log: Vec::new(),
                last: None,
            }
        })
        .collect();
    if cfg.iterations > 0 && tracks.iter().any(|t| t.few_shot.is_empty()) {
        return Err(NltError::EmptyBatch);
    }

    for t in 0..=cfg.iterations {
        if t > 0 {
            let idx = src_sampler.next_batch(cfg.source_batch);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &source_train[i]).collect();
            src_last = Some(train_source_step(net, &mut source, &batch, &mut src_opt)?);
            for tr in &mut tracks {
                let idx = tr.sampler.next_batch(cfg.target_batch);
                let batch: Vec<&Sample> = idx.iter().map(|&i| &tr.few_shot[i]).collect();
                tr.last = Some(adapt_step(
                    net,
                    &source,
                    &mut tr.bank,
                    &batch,
                    cfg.lambda,
                    &mut tr.opt,
                    tr.freeze,
                )?);
            }
        }
        if !is_eval_iter(t, cfg) {
            continue;
        }
        if select_source {
            let mae = val_mae(net, &source, target_val)?;
            Best::offer(&mut src_best, mae, t, &source, None);
            src_log.push(LogRow {
                iter: t,
                source_loss: src_last,
                target_loss: None,
                val_mae: mae,
            });
        }
        for tr in &mut tracks {
            let target = apply_nlt(&source, &tr.bank)?;
            let mae = val_mae(net, &target, target_val)?;
            Best::offer(&mut tr.best, mae, t, &source, Some(&tr.bank));
            tr.log.push(LogRow {
                iter: t,
                source_loss: src_last,
                target_loss: tr.last,
                val_mae: mae,
            });
        }
    }

    let source_steps = src_opt.step_count;
    let source_outcome = src_best.map(|b| RegimeOutcome {
        checkpoint: b.into_checkpoint(net, Regime::NoAdapt, cfg.seed),
        log: src_log,
        source_steps,
        target_steps: 0,
    });
    let tracks = tracks
        .into_iter()
        .map(|tr| RegimeOutcome {
            checkpoint: tr
                .best
                .expect("iteration 0 is always evaluated")
                .into_checkpoint(net, tr.regime, cfg.seed),
            log: tr.log,
            source_steps,
            target_steps: tr.opt.step_count,
        })
        .collect();
    Ok(JointResult {
        source: source_outcome,
        tracks,
    })
}

/// Plain supervised training of `trainable` layers on `samples`, starting
/// from `init`, with target-side batch size and learning rate.
fn target_loop(
    net: &CounterNet,
    init: Params,
    samples: &[Sample],
    trainable: &[usize],
    target_val: &[Sample],
    cfg: &TrainConfig,
    regime: Regime,
    source_steps: u64,
) -> Result<RegimeOutcome> {
    if samples.is_empty() {
        return Err(NltError::InvalidArgument(format!(
            "regime {regime} needs a non-empty few-shot set"
        )));
    }
    if target_val.is_empty() {
        return Err(NltError::InvalidArgument("target validation split is empty".into()));
    }
    let mut params = init;
    let lens: Vec<usize> = trainable
        .iter()
        .flat_map(|&i| [params.layers[i].weight.numel(), params.layers[i].bias.numel()])
        .collect();
    let mut opt = AdamState::new(&lens, cfg.beta);
    let mut sampler = BatchCycler::new(samples.len(), cfg.seed, STREAM_TARGET);
    let mut best = None;
    let mut log = Vec::new();
    let mut last = None;
    for t in 0..=cfg.iterations {
        if t > 0 {
            let idx = sampler.next_batch(cfg.target_batch);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let loss = density_step(net, &mut params, &batch, &mut opt, trainable)?;
            last = Some(AdaptLoss {
                density: loss,
                reg: 0.0,
                total: loss,
            });
        }
        if is_eval_iter(t, cfg) {
            let mae = val_mae(net, &params, target_val)?;
            Best::offer(&mut best, mae, t, &params, None);
            log.push(LogRow {
                iter: t,
                source_loss: None,
                target_loss: last,
                val_mae: mae,
            });
        }
    }
    Ok(RegimeOutcome {
        checkpoint: best
            .expect("iteration 0 is always evaluated")
            .into_checkpoint(net, regime, cfg.seed),
        log,
        source_steps,
        target_steps: opt.step_count,
    })
}

/// Conv layer indices updated by [`Regime::FinetuneDecoder`]: the last four.
pub fn decoder_finetune_layers(net: &CounterNet) -> Vec<usize> {
    let n = net.conv_specs().len();
    (n.saturating_sub(4)..n).collect()
}

/// Runs several regimes on shared data, sharing the source stream between
/// every regime that needs it. Each returned outcome is bitwise identical to
/// running that regime alone through [`run_regime`].
pub fn run_regimes(
    net_config: NetConfig,
    jobs: &[(Regime, &FewShot)],
    source_train: &[Sample],
    target_val: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<RegimeOutcome>> {
    cfg.validate()?;
    for (r, _) in jobs {
        r.check_supported()?;
    }
    let net = build_counter(net_config, cfg.seed);

    let shift_jobs: Vec<usize> = (0..jobs.len())
        .filter(|&i| jobs[i].0.shift_freeze().is_some())
        .collect();
    let needs_source = jobs.iter().any(|(r, _)| {
        matches!(r, Regime::NoAdapt | Regime::FinetuneAll | Regime::FinetuneDecoder)
    });

    let mut out: Vec<Option<RegimeOutcome>> = vec![None; jobs.len()];
    let mut source_best = None;
    if needs_source || !shift_jobs.is_empty() {
        let tracks: Vec<(Regime, &[Sample])> = shift_jobs
            .iter()
            .map(|&i| (jobs[i].0, jobs[i].1.samples()))
            .collect();
        let joint = joint_loop(&net, source_train, &tracks, target_val, cfg, needs_source)?;
        for (&i, o) in shift_jobs.iter().zip(joint.tracks) {
            out[i] = Some(o);
        }
        source_best = joint.source;
    }

    for (i, &(regime, few_shot)) in jobs.iter().enumerate() {
        let outcome = match regime {
            Regime::NoAdapt => source_best.clone().expect("source run"),
            Regime::FinetuneAll | Regime::FinetuneDecoder => {
                let src = source_best.as_ref().expect("source run");
                let trainable: Vec<usize> = if regime == Regime::FinetuneAll {
                    (0..net.params.layers.len()).collect()
                } else {
                    decoder_finetune_layers(&net)
                };
                target_loop(
                    &net,
                    src.checkpoint.source.clone(),
                    few_shot.samples(),
                    &trainable,
                    target_val,
                    cfg,
                    regime,
                    src.source_steps,
                )?
            }
            Regime::Supervised => {
                let all: Vec<usize> = (0..net.params.layers.len()).collect();
                target_loop(
                    &net,
                    net.params.clone(),
                    few_shot.samples(),
                    &all,
                    target_val,
                    cfg,
                    regime,
                    0,
                )?
            }
            _ => continue,
        };
        out[i] = Some(outcome);
    }
    Ok(out.into_iter().map(|o| o.expect("every job handled")).collect())
}

/// Runs one regime. `no_adapt` never reads `few_shot`.
pub fn run_regime(
    regime: Regime,
    net_config: NetConfig,
    source_train: &[Sample],
    few_shot: &FewShot,
    target_val: &[Sample],
    cfg: &TrainConfig,
) -> Result<RegimeOutcome> {
    let mut v = run_regimes(net_config, &[(regime, few_shot)], source_train, target_val, cfg)?;
    Ok(v.remove(0))
}

/// The full joint loop (one source step, then one shift step, per iteration).
pub fn run_joint_loop(
    net_config: NetConfig,
    source_train: &[Sample],
    few_shot: &FewShot,
    target_val: &[Sample],
    cfg: &TrainConfig,
) -> Result<RegimeOutcome> {
    run_regime(Regime::Nlt, net_config, source_train, few_shot, target_val, cfg)
}

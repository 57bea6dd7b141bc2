//! Training and evaluation loops.
//!
//! Training is single-threaded and fully determined by the seed: the model
//! is initialised from it and every epoch visits the training sequences in
//! an order shuffled by the stream `(seed, epoch)`. Gradients are averaged
//! over each mini-batch in index order before one AdamW step. After every
//! epoch the model is rolled out on the evaluation set and the parameters
//! with the lowest evaluation MSE are kept.
//!
//! Evaluation may fan out across `USTEP_THREADS` threads; predictions are
//! collected in sequence order before the report is reduced, so the result
//! does not depend on the thread count.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use ustep_core::data::Dataset;
use ustep_core::metrics::{frame_report, MetricsReport, ReportMeta};
use ustep_core::model::{
    loss_and_grads, ModelKind, Predictor, RecurrentConfig, RecurrentFreeConfig, RecurrentFreeLite, RecurrentLite,
    Ustep, UstepConfig,
};
use ustep_core::rng::Xoshiro256;
use ustep_core::segmentation::{choose_delta_t, default_macro_len, FrameSequence};
use ustep_core::{AdamState, AdamW, Grads, ParamStore, Tensor};

use crate::error::{Error, Result};

/// Checkpoint entry holding the frame channel count; not a parameter.
pub const CHANNELS_ENTRY: &str = "frame.channels";

/// Learning rates allowed in strict-grid mode.
pub const LR_GRID: [f64; 5] = [1e-2, 5e-3, 1e-3, 5e-4, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Micro segment length; the guideline rule is used when absent.
    pub delta_t: Option<usize>,
    /// Macro window length; the observed length rounded down to a multiple
    /// of `delta_t` when absent.
    pub delta_big: Option<usize>,
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
    pub cross_segment: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            delta_t: None,
            delta_big: None,
            hidden: 16,
            depth: 1,
            kernel: 3,
            cross_segment: true,
        }
    }
}

/// Segment scales for a task of `observed → predicted` frames.
pub fn resolve_scales(
    observed: usize,
    predicted: usize,
    delta_t: Option<usize>,
    delta_big: Option<usize>,
) -> Result<(usize, usize)> {
    let dt = delta_t.unwrap_or_else(|| choose_delta_t(observed, predicted));
    if dt == 0 {
        return Err(Error::Config("dt must be at least 1".into()));
    }
    let big = delta_big.unwrap_or_else(|| default_macro_len(observed, dt));
    if big == 0 || !big.is_multiple_of(dt) {
        return Err(Error::Config(format!("dT = {big} must be a positive multiple of dt = {dt}")));
    }
    if observed.div_ceil(dt) < 2 {
        return Err(Error::Config(format!(
            "T = {observed} observed frames span fewer than two micro segments of dt = {dt}"
        )));
    }
    if (observed + predicted).div_ceil(dt) < 3 {
        return Err(Error::Config(format!(
            "T + T' = {} frames give fewer than three micro segments of dt = {dt}; nothing to supervise",
            observed + predicted
        )));
    }
    Ok((dt, big))
}

/// A predictor of any kind, keeping access to kind-specific settings.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Ustep(Ustep),
    RecurrentLite(RecurrentLite),
    RecurrentFreeLite(RecurrentFreeLite),
}

impl AnyModel {
    /// Fresh model for frames of `frame = (C, H, W)` and a task of
    /// `observed → predicted` frames.
    pub fn build(
        spec: &ModelSpec,
        frame: (usize, usize, usize),
        observed: usize,
        predicted: usize,
        seed: u64,
    ) -> Result<Self> {
        let (c, h, w) = frame;
        Ok(match spec.kind {
            ModelKind::Ustep => {
                let (dt, big) = resolve_scales(observed, predicted, spec.delta_t, spec.delta_big)?;
                let cfg = UstepConfig {
                    hidden: spec.hidden,
                    depth: spec.depth,
                    kernel: spec.kernel,
                    cross_segment: spec.cross_segment,
                    ..UstepConfig::new(c, h, w, dt, big)
                };
                AnyModel::Ustep(Ustep::new(cfg, seed)?)
            }
            ModelKind::RecurrentLite => {
                let cfg = RecurrentConfig {
                    hidden: spec.hidden,
                    depth: spec.depth,
                    kernel: spec.kernel,
                    ..RecurrentConfig::new(c, h, w)
                };
                AnyModel::RecurrentLite(RecurrentLite::new(cfg, seed)?)
            }
            ModelKind::RecurrentFreeLite => {
                let cfg = RecurrentFreeConfig {
                    hidden: spec.hidden,
                    depth: spec.depth,
                    kernel: spec.kernel,
                    ..RecurrentFreeConfig::new(c, h, w, observed)
                };
                AnyModel::RecurrentFreeLite(RecurrentFreeLite::new(cfg, seed)?)
            }
        })
    }

    /// Rebuilds a model from checkpoint parameters for frames of shape
    /// `(C, H, W)`.
    pub fn from_params(params: &ParamStore, frame: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = frame;
        let kind = ModelKind::detect(params)
            .ok_or_else(|| Error::Data("checkpoint parameters match no known model".into()))?;
        let built = match kind {
            ModelKind::Ustep => Ustep::from_params(params, c, h, w).map(AnyModel::Ustep),
            ModelKind::RecurrentLite => RecurrentLite::from_params(params, c, h, w).map(AnyModel::RecurrentLite),
            ModelKind::RecurrentFreeLite => {
                RecurrentFreeLite::from_params(params, c, h, w).map(AnyModel::RecurrentFreeLite)
            }
        };
        built.map_err(|e| Error::Data(format!("checkpoint does not fit {c}×{h}×{w} frames: {e}")))
    }

    /// Parameters plus a [`CHANNELS_ENTRY`] record of the frame channel
    /// count, which the parameter shapes alone cannot pin down.
    pub fn checkpoint_store(&self) -> Result<ParamStore> {
        let mut store = self.params().clone();
        let c = frame_of(self).0 as f64;
        store.insert(CHANNELS_ENTRY, Tensor::new(&[1], vec![c])?)?;
        Ok(store)
    }

    /// Inverse of [`checkpoint_store`](Self::checkpoint_store) for frames of
    /// shape `(C, H, W)`.
    pub fn from_checkpoint(store: &ParamStore, frame: (usize, usize, usize)) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, t) in store.iter().filter(|(n, _)| *n != CHANNELS_ENTRY) {
            params.insert(name, t.clone())?;
        }
        if let Some(t) = store.get(CHANNELS_ENTRY) {
            let stored = t.data().first().copied().unwrap_or(f64::NAN);
            if stored != frame.0 as f64 {
                return Err(Error::Data(format!(
                    "checkpoint was trained on {stored}-channel frames, the dataset has {}",
                    frame.0
                )));
            }
        }
        Self::from_params(&params, frame)
    }

    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            AnyModel::Ustep(m) => m,
            AnyModel::RecurrentLite(m) => m,
            AnyModel::RecurrentFreeLite(m) => m,
        }
    }

    pub fn predictor_mut(&mut self) -> &mut dyn Predictor {
        match self {
            AnyModel::Ustep(m) => m,
            AnyModel::RecurrentLite(m) => m,
            AnyModel::RecurrentFreeLite(m) => m,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.predictor().kind()
    }

    pub fn params(&self) -> &ParamStore {
        self.predictor().params()
    }

    /// `(Δt, ΔT)` for the segment model.
    pub fn scales(&self) -> Option<(usize, usize)> {
        match self {
            AnyModel::Ustep(m) => Some((m.config().delta_t, m.config().delta_big)),
            _ => None,
        }
    }

    /// Checks that the model can roll out from `observed` frames.
    pub fn check_task(&self, observed: usize) -> Result<()> {
        match self {
            AnyModel::Ustep(m) => {
                let dt = m.config().delta_t;
                if observed.div_ceil(dt) < 2 {
                    return Err(Error::Data(format!(
                        "T = {observed} spans fewer than two micro segments of dt = {dt}"
                    )));
                }
            }
            AnyModel::RecurrentFreeLite(m) => {
                if m.config().frames != observed {
                    return Err(Error::Data(format!(
                        "checkpoint maps {} frames, T = {observed}",
                        m.config().frames
                    )));
                }
            }
            AnyModel::RecurrentLite(_) => {}
        }
        Ok(())
    }

    pub fn meta(&self, dataset_hash: &str, observed: usize) -> ReportMeta {
        ReportMeta {
            model: self.kind().name().to_owned(),
            dataset_hash: dataset_hash.to_owned(),
            delta_t: self.scales().map(|s| s.0),
            delta_big: self.scales().map(|s| s.1),
            observed,
            ..ReportMeta::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Reject learning rates outside [`LR_GRID`].
    pub strict_grid: bool,
    pub seed: u64,
    /// Observed frames `T`; the rest of each sequence is the target.
    pub observed: usize,
    pub model: ModelSpec,
    /// Record wall-clock seconds in the run log (makes it non-reproducible).
    pub record_time: bool,
}

impl TrainConfig {
    pub fn new(model: ModelSpec, observed: usize) -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 0.01,
            weight_decay: 0.05,
            strict_grid: false,
            seed: 0,
            observed,
            model,
            record_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr {} and weight decay {} must be finite and non-negative",
                self.lr, self.weight_decay
            )));
        }
        if self.strict_grid && !LR_GRID.contains(&self.lr) {
            return Err(Error::Config(format!("lr {} is not in the grid {LR_GRID:?}", self.lr)));
        }
        if self.observed == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_eval_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub best_eval_mse: f64,
    pub final_report: String,
}

impl RunLog {
    /// One JSON object per epoch, then a summary line naming the report
    /// written for the retained checkpoint.
    pub fn to_jsonl(&self, final_report: &str) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch log serialises"));
            out.push('\n');
        }
        let summary = RunSummary {
            best_epoch: self.best_epoch,
            best_eval_mse: self.best_eval_mse,
            final_report: final_report.to_owned(),
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serialises"));
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model holding the parameters with the lowest evaluation MSE.
    pub best: AnyModel,
    pub log: RunLog,
}

fn sequences(ds: &Dataset) -> Vec<FrameSequence> {
    (0..ds.num_sequences).map(|i| ds.sequence(i)).collect()
}

fn check_task(ds: &Dataset, observed: usize, what: &str) -> Result<()> {
    if observed >= ds.seq_len {
        return Err(Error::Config(format!(
            "{what} sequences have {} frames; T = {observed} leaves nothing to predict",
            ds.seq_len
        )));
    }
    Ok(())
}

/// Trains a fresh model. `on_epoch` sees each epoch's log entry as soon as
/// it is complete.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_task(train_set, cfg.observed, "training")?;
    check_task(eval_set, cfg.observed, "evaluation")?;
    let frame = (train_set.channels, train_set.height, train_set.width);
    if (eval_set.channels, eval_set.height, eval_set.width) != frame {
        return Err(Error::Config("training and evaluation frames differ in shape".into()));
    }
    let predicted = train_set.seq_len - cfg.observed;
    let eval_horizon = eval_set.seq_len - cfg.observed;
    let mut model = AnyModel::build(&cfg.model, frame, cfg.observed, predicted, cfg.seed)?;
    let train_seqs = sequences(train_set);
    let eval_seqs = sequences(eval_set);
    let opt = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = AdamState::new(model.params());
    let mut best: Option<(usize, f64, AnyModel)> = None;
    let mut log = RunLog::default();
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        Xoshiro256::for_stream(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut total: Option<Grads> = None;
            for &i in batch {
                let (loss, g) = loss_and_grads(model.predictor(), &train_seqs[i], cfg.observed)?;
                loss_sum += loss;
                match &mut total {
                    Some(t) => t.add_assign(&g),
                    None => total = Some(g),
                }
            }
            let mut grads = total.expect("batches are non-empty");
            grads.scale(1.0 / batch.len() as f64);
            let params = model.predictor_mut().params_mut();
            params.zero_grad();
            params.accumulate(&grads)?;
            opt.step(params, &mut state)?;
        }
        let eval_mse = mean_rollout_mse(model.predictor(), &eval_seqs, cfg.observed, eval_horizon)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_seqs.len() as f64,
            eval_mse,
            wall_clock_s: cfg.record_time.then(|| started.elapsed().as_secs_f64()),
        };
        if !(entry.train_loss.is_finite() && entry.eval_mse.is_finite()) {
            return Err(Error::Core(ustep_core::Error::NonFinite(format!("epoch {epoch} metrics"))));
        }
        on_epoch(&entry)?;
        if best.as_ref().is_none_or(|b| eval_mse < b.1) {
            best = Some((epoch, eval_mse, model.clone()));
        }
        log.epochs.push(entry);
    }
    let (best_epoch, best_eval_mse, best) = best.expect("at least one epoch");
    log.best_epoch = best_epoch;
    log.best_eval_mse = best_eval_mse;
    Ok(TrainOutcome { best, log })
}

/// Mean per-pixel MSE (clamped, as in reports) of `horizon`-frame rollouts.
fn mean_rollout_mse(model: &dyn Predictor, seqs: &[FrameSequence], observed: usize, horizon: usize) -> Result<f64> {
    let preds = predict_all(&|obs, h| model.predict(obs, h), seqs, observed, horizon, thread_count()?)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(seqs) {
        let target = s.slice(observed..observed + horizon)?;
        total += ustep_core::metrics::mse(p.data(), target.data())?;
    }
    Ok(total / seqs.len() as f64)
}

/// Number of evaluation threads from `USTEP_THREADS` (default 1).
pub fn thread_count() -> Result<usize> {
    match std::env::var("USTEP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("USTEP_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

type PredictFn<'a> = dyn Fn(&FrameSequence, usize) -> ustep_core::Result<FrameSequence> + Sync + 'a;

/// Rolls out every sequence, splitting the work over `threads` threads. Results are in sequence order.
fn predict_all(
    predict: &PredictFn<'_>,
    seqs: &[FrameSequence],
    observed: usize,
    horizon: usize,
    threads: usize,
) -> Result<Vec<FrameSequence>> {
    let threads = threads.min(seqs.len()).max(1);
    let run = |chunk: &[FrameSequence]| -> Result<Vec<FrameSequence>> {
        chunk
            .iter()
            .map(|s| Ok(predict(&s.slice(0..observed)?, horizon)?))
            .collect()
    };
    if threads <= 1 {
        return run(seqs);
    }
    let per = seqs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seqs.chunks(per).map(|c| scope.spawn(move || run(c))).collect();
        let mut out = Vec::with_capacity(seqs.len());
        for h in handles {
            out.extend(h.join().expect("evaluation thread panicked")?);
        }
        Ok(out)
    })
}

/// Repeats the last observed frame `horizon` times.
pub fn copy_last_frame(observed: &FrameSequence, horizon: usize) -> ustep_core::Result<FrameSequence> {
    let (c, h, w) = observed.frame_shape();
    let last = observed.frame(observed.len() - 1);
    let data = (0..horizon).flat_map(|_| last.iter().copied()).collect();
    FrameSequence::from_data(horizon, c, h, w, data)
}

fn report_over(
    predict: &PredictFn<'_>,
    ds: &Dataset,
    observed: usize,
    horizon: usize,
    meta: ReportMeta,
) -> Result<MetricsReport> {
    if observed == 0 || horizon == 0 {
        return Err(Error::Config("T and T' must both be at least 1".into()));
    }
    if observed + horizon > ds.seq_len {
        return Err(Error::Data(format!(
            "T + T' = {} exceeds the stored sequence length {}; no ground truth",
            observed + horizon,
            ds.seq_len
        )));
    }
    let seqs = sequences(ds);
    let preds = predict_all(predict, &seqs, observed, horizon, thread_count()?)?;
    let targets = seqs
        .iter()
        .map(|s| s.slice(observed..observed + horizon))
        .collect::<ustep_core::Result<Vec<_>>>()?;
    Ok(frame_report(&preds, &targets, meta)?)
}

/// Rolls `model` out over every sequence of `ds` and reports the frame-wise
/// metrics of its `horizon` predicted frames.
pub fn evaluate(
    model: &AnyModel,
    ds: &Dataset,
    observed: usize,
    horizon: usize,
    dataset_hash: &str,
) -> Result<MetricsReport> {
    if (ds.channels, ds.height, ds.width) != frame_of(model) {
        return Err(Error::Data(format!(
            "dataset frames are {}×{}×{}, model expects {:?}",
            ds.channels,
            ds.height,
            ds.width,
            frame_of(model)
        )));
    }
    model.check_task(observed)?;
    let p = model.predictor();
    report_over(&|obs, h| p.predict(obs, h), ds, observed, horizon, model.meta(dataset_hash, observed))
}

/// The copy-last-frame floor through the same evaluation path.
pub fn evaluate_floor(ds: &Dataset, observed: usize, horizon: usize, dataset_hash: &str) -> Result<MetricsReport> {
    let meta = ReportMeta {
        model: "floor".into(),
        dataset_hash: dataset_hash.to_owned(),
        observed,
        ..ReportMeta::default()
    };
    report_over(&copy_last_frame, ds, observed, horizon, meta)
}

fn frame_of(model: &AnyModel) -> (usize, usize, usize) {
    match model {
        AnyModel::Ustep(m) => (m.config().channels, m.config().height, m.config().width),
        AnyModel::RecurrentLite(m) => (m.config().channels, m.config().height, m.config().width),
        AnyModel::RecurrentFreeLite(m) => (m.config().channels, m.config().height, m.config().width),
    }
}

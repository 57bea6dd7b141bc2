//! Predictors: the micro/macro segment model and two single-paradigm
//! baselines, all built from the same convolutional layers.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::Xoshiro256;
use crate::segmentation::FrameSequence;
use crate::tensor::{ParamStore, Tensor};

mod baselines;
mod ustep;

pub use baselines::{InputSource, RecurrentConfig, RecurrentFreeConfig, RecurrentFreeLite, RecurrentLite};
pub use ustep::{HiddenState, StepRecord, TrainOutput, Ustep, UstepConfig};

/// Which predictor a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ustep,
    RecurrentLite,
    RecurrentFreeLite,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ustep => "ustep",
            ModelKind::RecurrentLite => "rec-lite",
            ModelKind::RecurrentFreeLite => "recfree-lite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ustep" => Some(ModelKind::Ustep),
            "rec-lite" => Some(ModelKind::RecurrentLite),
            "recfree-lite" => Some(ModelKind::RecurrentFreeLite),
            _ => None,
        }
    }

    /// Recognises the predictor from the parameter names it owns.
    pub fn detect(params: &ParamStore) -> Option<Self> {
        if params.get("gate_u.weight").is_some() {
            Some(ModelKind::Ustep)
        } else if params.get("gate.weight").is_some() {
            Some(ModelKind::RecurrentLite)
        } else if params.get("enc.in.weight").is_some() {
            Some(ModelKind::RecurrentFreeLite)
        } else {
            None
        }
    }
}

/// Common surface of every sequence predictor.
pub trait Predictor: Send + Sync {
    fn kind(&self) -> ModelKind;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the training loss of one sequence whose first `observed`
    /// frames are context and the rest targets. `vars` are the bound
    /// parameters of `tape`.
    fn training_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        seq: &FrameSequence,
        observed: usize,
    ) -> Result<Var>;

    /// Predicts `horizon` frames following `observed`.
    fn predict(&self, observed: &FrameSequence, horizon: usize) -> Result<FrameSequence>;
}

/// Loss value and parameter gradients for one training sequence.
pub fn loss_and_grads(
    model: &dyn Predictor,
    seq: &FrameSequence,
    observed: usize,
) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let vars = tape.bind(model.params());
    let loss = model.training_loss(&mut tape, &vars, seq, observed)?;
    Ok((tape.scalar(loss), tape.backward(loss)?))
}

/// Convolution with bias, addressed by its parameter indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
}

/// How a freshly registered convolution is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Weights uniform in `±sqrt(1/fan_in)`, bias zero.
    FanIn,
    Zero,
}

impl ConvLayer {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
        rng: &mut Xoshiro256,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {kernel} must be odd")));
        }
        let n = cout * cin * kernel * kernel;
        let data: Vec<f64> = match init {
            Init::FanIn => {
                let bound = math::sqrt(1.0 / (cin * kernel * kernel) as f64);
                (0..n).map(|_| rng.uniform(-bound, bound)).collect()
            }
            Init::Zero => alloc::vec![0.0; n],
        };
        let weight = store.insert(
            &format!("{name}.weight"),
            Tensor::new(&[cout, cin, kernel, kernel], data)?,
        )?;
        let bias = store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias })
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.weight], vars[self.bias])
    }

    /// `σ(W ∗ x + b)`.
    pub fn gate(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let pre = self.apply(tape, vars, x)?;
        Ok(tape.sigmoid(pre))
    }
}

/// Maps a channel-stacked segment into the shared hidden space.
pub trait SegmentEncoder {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn encode(&self, tape: &mut Tape, vars: &[Var], segment: Var) -> Result<Var>;
}

/// `1×1` projection to the hidden width followed by residual blocks
/// `h ← h + silu(conv_k(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub input: ConvLayer,
    pub blocks: Vec<ConvLayer>,
    in_channels: usize,
    hidden: usize,
}

impl ConvStack {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        depth: usize,
        kernel: usize,
        rng: &mut Xoshiro256,
    ) -> Result<Self> {
        let input = ConvLayer::register(
            store,
            &format!("{prefix}.in"),
            in_channels,
            hidden,
            1,
            Init::FanIn,
            rng,
        )?;
        let blocks = (0..depth)
            .map(|i| {
                ConvLayer::register(
                    store,
                    &format!("{prefix}.block{i}"),
                    hidden,
                    hidden,
                    kernel,
                    Init::FanIn,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            blocks,
            in_channels,
            hidden,
        })
    }
}

impl SegmentEncoder for ConvStack {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn out_channels(&self) -> usize {
        self.hidden
    }

    fn encode(&self, tape: &mut Tape, vars: &[Var], segment: Var) -> Result<Var> {
        let mut h = self.input.apply(tape, vars, segment)?;
        for block in &self.blocks {
            let z = block.apply(tape, vars, h)?;
            let a = tape.silu(z);
            h = tape.add(h, a)?;
        }
        Ok(h)
    }
}

/// Number of `"{prefix}.block{i}.weight"` entries.
pub(crate) fn count_blocks(params: &ParamStore, prefix: &str) -> usize {
    (0..)
        .take_while(|i| params.get(&format!("{prefix}.block{i}.weight")).is_some())
        .count()
}

pub(crate) fn shape_of<'a>(params: &'a ParamStore, name: &str) -> Result<&'a [usize]> {
    params
        .get(name)
        .map(|t| t.shape())
        .ok_or_else(|| Error::config(format!("parameter `{name}` missing")))
}

pub(crate) fn whole_frames(channels: usize, total: usize, what: &str) -> Result<usize> {
    if channels == 0 || !total.is_multiple_of(channels) {
        return Err(Error::config(format!(
            "{what} has {total} channels, not a multiple of {channels}"
        )));
    }
    Ok(total / channels)
}

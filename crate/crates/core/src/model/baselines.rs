//! Single-paradigm baselines sharing the segment model's building blocks.
//!
//! [`RecurrentLite`] is a frame-by-frame gated recurrence (one-frame micro
//! segments, no macro path). [`RecurrentFreeLite`] maps the whole observed
//! window to an equally long output window in one shot.

use alloc::format;
use alloc::vec::Vec;

use super::{count_blocks, shape_of, whole_frames, ConvLayer, ConvStack, Init, ModelKind, Predictor, SegmentEncoder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::segmentation::FrameSequence;
use crate::tensor::ParamStore;

/// Where the recurrent cell's input frame came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSource {
    /// Ground-truth frame with this index.
    Observed(usize),
    /// The model's own prediction of the frame with this index.
    Predicted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
}

impl RecurrentConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            hidden: 16,
            depth: 1,
            kernel: 3,
        }
    }
}

fn check_common(channels: usize, height: usize, width: usize, hidden: usize, depth: usize, kernel: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::config("frame geometry must be positive"));
    }
    if hidden == 0 || depth == 0 {
        return Err(Error::config("hidden width and encoder depth must be at least 1"));
    }
    if kernel.is_multiple_of(2) {
        return Err(Error::config(format!("kernel size {kernel} must be odd")));
    }
    Ok(())
}

fn check_frames(seq: &FrameSequence, c: usize, h: usize, w: usize) -> Result<()> {
    if seq.frame_shape() != (c, h, w) {
        return Err(Error::config(format!(
            "frames are {:?}, model expects {:?}",
            seq.frame_shape(),
            (c, h, w)
        )));
    }
    Ok(())
}

/// Per-frame gated recurrent predictor.
#[derive(Debug, Clone)]
pub struct RecurrentLite {
    config: RecurrentConfig,
    params: ParamStore,
    encoder: ConvStack,
    gate: ConvLayer,
    readout: ConvLayer,
}

impl RecurrentLite {
    pub fn new(config: RecurrentConfig, seed: u64) -> Result<Self> {
        check_common(config.channels, config.height, config.width, config.hidden, config.depth, config.kernel)?;
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = ConvStack::register(
            &mut params,
            "enc",
            config.channels,
            config.hidden,
            config.depth,
            config.kernel,
            &mut rng,
        )?;
        let gate = ConvLayer::register(&mut params, "gate", config.hidden, config.hidden, config.kernel, Init::FanIn, &mut rng)?;
        let readout = ConvLayer::register(&mut params, "readout", config.hidden, config.channels, 1, Init::Zero, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            gate,
            readout,
        })
    }

    pub fn from_params(params: &ParamStore, channels: usize, height: usize, width: usize) -> Result<Self> {
        if ModelKind::detect(params) != Some(ModelKind::RecurrentLite) {
            return Err(Error::config("parameters do not describe a rec-lite model"));
        }
        let enc_in = shape_of(params, "enc.in.weight")?;
        let gate = shape_of(params, "gate.weight")?;
        if enc_in[1] != channels {
            return Err(Error::config(format!(
                "parameter `enc.in.weight` expects {} channels, frames have {channels}",
                enc_in[1]
            )));
        }
        let config = RecurrentConfig {
            channels,
            height,
            width,
            hidden: enc_in[0],
            depth: count_blocks(params, "enc"),
            kernel: gate[2],
        };
        let mut model = Self::new(config, 0)?;
        model.params.assign_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.config
    }

    /// One cell update: encode the frame, gate the previous state against
    /// it, read out the next frame. Returns `(prediction, h)`.
    pub fn cell(&self, tape: &mut Tape, vars: &[Var], frame: Var, h_prev: Var) -> Result<(Var, Var)> {
        let x = self.encoder.encode(tape, vars, frame)?;
        let g = self.gate.gate(tape, vars, x)?;
        let carried = tape.mul(g, h_prev)?;
        let h = tape.add(x, carried)?;
        let pred = self.readout.apply(tape, vars, h)?;
        Ok((pred, h))
    }

    /// Runs the cell over `total - 1` inputs: ground truth for the first
    /// `observed` frames, its own predictions afterwards. Prediction `i`
    /// estimates frame `i + 1`.
    fn unroll(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        observed: &FrameSequence,
        n_observed: usize,
        total: usize,
    ) -> Result<(Vec<Var>, Vec<InputSource>)> {
        let cfg = &self.config;
        let mut h = tape.zeros(&[cfg.hidden, cfg.height, cfg.width]);
        let mut preds: Vec<Var> = Vec::with_capacity(total - 1);
        let mut sources = Vec::with_capacity(total - 1);
        for i in 0..total - 1 {
            let (input, source) = if i < n_observed {
                let f = observed.stacked(i..i + 1)?;
                (tape.constant(f), InputSource::Observed(i))
            } else {
                (preds[i - 1], InputSource::Predicted(i))
            };
            let (pred, next) = self.cell(tape, vars, input, h)?;
            h = next;
            preds.push(pred);
            sources.push(source);
        }
        Ok((preds, sources))
    }

    /// Teacher-forced over the first `observed` frames, autoregressive after,
    /// scored on every predicted frame `1..L`.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        seq: &FrameSequence,
        observed: usize,
    ) -> Result<(Var, Vec<InputSource>)> {
        check_frames(seq, self.config.channels, self.config.height, self.config.width)?;
        if observed == 0 || observed >= seq.len() {
            return Err(Error::config(format!(
                "observed length {observed} must lie in 1..{}",
                seq.len()
            )));
        }
        let (preds, sources) = self.unroll(tape, vars, seq, observed, seq.len())?;
        let mut total: Option<Var> = None;
        for (i, &p) in preds.iter().enumerate() {
            let target = tape.constant(seq.stacked(i + 1..i + 2)?);
            let l = tape.mse_loss(p, target)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.expect("at least one prediction"), 1.0 / preds.len() as f64);
        Ok((loss, sources))
    }

    /// Predicts `horizon` frames and reports the provenance of every input.
    pub fn rollout(&self, observed: &FrameSequence, horizon: usize) -> Result<(FrameSequence, Vec<InputSource>)> {
        check_frames(observed, self.config.channels, self.config.height, self.config.width)?;
        if horizon == 0 {
            return Err(Error::config("prediction horizon must be at least 1"));
        }
        let t = observed.len();
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let (preds, sources) = self.unroll(&mut tape, &vars, observed, t, t + horizon)?;
        let (c, h, w) = observed.frame_shape();
        let mut data = Vec::with_capacity(horizon * c * h * w);
        for &p in &preds[t - 1..] {
            data.extend_from_slice(tape.value(p));
        }
        Ok((FrameSequence::from_data(horizon, c, h, w, data)?, sources))
    }
}

impl Predictor for RecurrentLite {
    fn kind(&self) -> ModelKind {
        ModelKind::RecurrentLite
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn training_loss(&self, tape: &mut Tape, vars: &[Var], seq: &FrameSequence, observed: usize) -> Result<Var> {
        Ok(self.forward_train(tape, vars, seq, observed)?.0)
    }

    fn predict(&self, observed: &FrameSequence, horizon: usize) -> Result<FrameSequence> {
        Ok(self.rollout(observed, horizon)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentFreeConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Input and output window length `T`.
    pub frames: usize,
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
}

impl RecurrentFreeConfig {
    pub fn new(channels: usize, height: usize, width: usize, frames: usize) -> Self {
        Self {
            channels,
            height,
            width,
            frames,
            hidden: 16,
            depth: 1,
            kernel: 3,
        }
    }
}

/// Whole-window predictor: `T` stacked frames in, `T` stacked frames out.
#[derive(Debug, Clone)]
pub struct RecurrentFreeLite {
    config: RecurrentFreeConfig,
    params: ParamStore,
    encoder: ConvStack,
    readout: ConvLayer,
}

impl RecurrentFreeLite {
    pub fn new(config: RecurrentFreeConfig, seed: u64) -> Result<Self> {
        check_common(config.channels, config.height, config.width, config.hidden, config.depth, config.kernel)?;
        if config.frames == 0 {
            return Err(Error::config("window length must be at least 1"));
        }
        let width = config.frames * config.channels;
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = ConvStack::register(&mut params, "enc", width, config.hidden, config.depth, config.kernel, &mut rng)?;
        let readout = ConvLayer::register(&mut params, "readout", config.hidden, width, 1, Init::Zero, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            readout,
        })
    }

    pub fn from_params(params: &ParamStore, channels: usize, height: usize, width: usize) -> Result<Self> {
        if ModelKind::detect(params) != Some(ModelKind::RecurrentFreeLite) {
            return Err(Error::config("parameters do not describe a recfree-lite model"));
        }
        let enc_in = shape_of(params, "enc.in.weight")?;
        let kernel = match params.get("enc.block0.weight") {
            Some(t) => t.shape()[2],
            None => 3,
        };
        let config = RecurrentFreeConfig {
            channels,
            height,
            width,
            frames: whole_frames(channels, enc_in[1], "enc.in.weight")?,
            hidden: enc_in[0],
            depth: count_blocks(params, "enc"),
            kernel,
        };
        let mut model = Self::new(config, 0)?;
        model.params.assign_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &RecurrentFreeConfig {
        &self.config
    }

    /// Single-shot map of a `T·C × H × W` window to the next `T·C × H × W`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], window: Var) -> Result<Var> {
        let expected = [self.config.frames * self.config.channels, self.config.height, self.config.width];
        if tape.shape(window) != expected {
            return Err(Error::dim(
                "recurrent-free forward",
                format!("window is {:?}, expected {expected:?}", tape.shape(window)),
            ));
        }
        let h = self.encoder.encode(tape, vars, window)?;
        self.readout.apply(tape, vars, h)
    }

    /// Chains whole-window passes until `horizon` frames exist; each pass
    /// consumes the previous pass's output. Returns one var per pass and
    /// how many of its frames are used.
    fn chain(&self, tape: &mut Tape, vars: &[Var], observed: &FrameSequence, horizon: usize) -> Result<Vec<(Var, usize)>> {
        let t = self.config.frames;
        if observed.len() != t {
            return Err(Error::config(format!(
                "model maps {t} frames, got {} observed",
                observed.len()
            )));
        }
        let mut input = tape.constant(observed.stacked(0..t)?);
        let mut passes = Vec::new();
        let mut remaining = horizon;
        while remaining > 0 {
            let out = self.forward(tape, vars, input)?;
            let used = remaining.min(t);
            passes.push((out, used));
            remaining -= used;
            input = out;
        }
        Ok(passes)
    }

    pub fn rollout(&self, observed: &FrameSequence, horizon: usize) -> Result<FrameSequence> {
        check_frames(observed, self.config.channels, self.config.height, self.config.width)?;
        if horizon == 0 {
            return Err(Error::config("prediction horizon must be at least 1"));
        }
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let passes = self.chain(&mut tape, &vars, observed, horizon)?;
        let (c, h, w) = observed.frame_shape();
        let mut data = Vec::with_capacity(horizon * c * h * w);
        for (out, used) in passes {
            data.extend_from_slice(&tape.value(out)[..used * c * h * w]);
        }
        FrameSequence::from_data(horizon, c, h, w, data)
    }
}

impl Predictor for RecurrentFreeLite {
    fn kind(&self) -> ModelKind {
        ModelKind::RecurrentFreeLite
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn training_loss(&self, tape: &mut Tape, vars: &[Var], seq: &FrameSequence, observed: usize) -> Result<Var> {
        check_frames(seq, self.config.channels, self.config.height, self.config.width)?;
        if observed != self.config.frames || observed >= seq.len() {
            return Err(Error::config(format!(
                "model maps {} frames; sequence of {} with {observed} observed does not fit",
                self.config.frames,
                seq.len()
            )));
        }
        let horizon = seq.len() - observed;
        let context = seq.slice(0..observed)?;
        let passes = self.chain(tape, vars, &context, horizon)?;
        let c = self.config.channels;
        let mut start = observed;
        let mut total: Option<Var> = None;
        for (out, used) in passes {
            let scored = if used == self.config.frames { out } else { tape.narrow(out, 0, used * c)? };
            let target = tape.constant(seq.stacked(start..start + used)?);
            let l = tape.mse_loss(scored, target)?;
            let l = tape.scale(l, used as f64 / horizon as f64);
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
            start += used;
        }
        Ok(total.expect("horizon is positive"))
    }

    fn predict(&self, observed: &FrameSequence, horizon: usize) -> Result<FrameSequence> {
        self.rollout(observed, horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::tensor::Tensor;

    fn randomize(params: &mut ParamStore, seed: u64) {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        for i in 0..params.len() {
            for v in params.tensor_mut(i).data_mut() {
                *v = rng.uniform(-0.5, 0.5);
            }
        }
    }

    fn random_seq(len: usize, seed: u64) -> FrameSequence {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let data = (0..len * 36).map(|_| rng.next_f64()).collect();
        FrameSequence::from_data(len, 1, 6, 6, data).unwrap()
    }

    fn rec() -> RecurrentLite {
        let mut m = RecurrentLite::new(RecurrentConfig::new(1, 6, 6), 1).unwrap();
        randomize(m.params_mut(), 1);
        m
    }

    #[test]
    fn zero_history_prediction_comes_from_encoder() {
        let m = rec();
        let frame = random_seq(1, 2).stacked(0..1).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let x = tape.constant(frame);
        let h0 = tape.zeros(&[16, 6, 6]);
        let (pred, h) = m.cell(&mut tape, &vars, x, h0).unwrap();
        let enc = m.encoder.encode(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(h), tape.value(enc));
        let direct = m.readout.apply(&mut tape, &vars, enc).unwrap();
        assert_eq!(tape.value(pred), tape.value(direct));
    }

    #[test]
    fn recurrent_phases() {
        let m = rec();
        let (pred, sources) = m.rollout(&random_seq(4, 3), 3).unwrap();
        assert_eq!(pred.len(), 3);
        assert_eq!(
            sources,
            [
                InputSource::Observed(0),
                InputSource::Observed(1),
                InputSource::Observed(2),
                InputSource::Observed(3),
                InputSource::Predicted(4),
                InputSource::Predicted(5),
            ]
        );
        let produced_from_own_output = sources.iter().filter(|s| matches!(s, InputSource::Predicted(_))).count();
        // Three cell calls yield future frames; the last two consume earlier outputs.
        assert_eq!(sources.len() - 3, 3);
        assert_eq!(produced_from_own_output, 2);
    }

    #[test]
    fn recurrent_training_mixes_phases() {
        let m = rec();
        let seq = random_seq(8, 4);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let (_, sources) = m.forward_train(&mut tape, &vars, &seq, 4).unwrap();
        assert_eq!(sources.len(), 7);
        assert_eq!(sources[3], InputSource::Observed(3));
        assert_eq!(sources[4], InputSource::Predicted(4));
        assert!(m.forward_train(&mut tape, &vars, &seq, 8).is_err());
    }

    #[test]
    fn recurrent_rollout_matches_training_predictions() {
        let m = rec();
        let seq = random_seq(6, 5);
        let (pred, _) = m.rollout(&seq.slice(0..3).unwrap(), 3).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let (preds, _) = m.unroll(&mut tape, &vars, &seq, 3, 6).unwrap();
        for (k, p) in preds[2..].iter().enumerate() {
            assert_eq!(tape.value(*p), pred.frame(k));
        }
    }

    #[test]
    fn recurrent_gradcheck() {
        let mut m = RecurrentLite::new(
            RecurrentConfig {
                hidden: 3,
                ..RecurrentConfig::new(1, 6, 6)
            },
            2,
        )
        .unwrap();
        randomize(m.params_mut(), 2);
        let seq = random_seq(5, 6);
        let r = gradcheck(m.params(), 1e-5, |t, v| m.training_loss(t, v, &seq, 3)).unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    fn free(frames: usize) -> RecurrentFreeLite {
        let mut m = RecurrentFreeLite::new(RecurrentFreeConfig::new(1, 6, 6, frames), 1).unwrap();
        randomize(m.params_mut(), 7);
        m
    }

    #[test]
    fn recurrent_free_preserves_window_length() {
        let m = free(4);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let x = tape.constant(random_seq(4, 1).stacked(0..4).unwrap());
        let y = m.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(y), tape.shape(x));
        let short = tape.constant(Tensor::zeros(&[3, 6, 6]));
        assert!(m.forward(&mut tape, &vars, short).is_err());
    }

    #[test]
    fn recurrent_free_zero_input_gives_zero_output() {
        let mut m = free(2);
        for (name, b) in [("enc.in.bias", 0.0), ("enc.block0.bias", 0.0), ("readout.bias", 0.0)] {
            m.params_mut().get_mut(name).unwrap().data_mut().fill(b);
        }
        let out = m.rollout(&FrameSequence::from_data(2, 1, 6, 6, alloc::vec![0.0; 72]).unwrap(), 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_free_trims_and_chains() {
        let m = free(4);
        let obs = random_seq(4, 2);
        let one = m.rollout(&obs, 1).unwrap();
        let four = m.rollout(&obs, 4).unwrap();
        let eight = m.rollout(&obs, 8).unwrap();
        assert_eq!((one.len(), four.len(), eight.len()), (1, 4, 8));
        assert_eq!(one.data(), four.slice(0..1).unwrap().data());
        assert_eq!(four.data(), eight.slice(0..4).unwrap().data());
        assert_eq!(m.rollout(&four, 4).unwrap().data(), eight.slice(4..8).unwrap().data());
        assert!(m.rollout(&obs.slice(0..3).unwrap(), 1).is_err());
    }

    #[test]
    fn recurrent_free_gradcheck() {
        let mut m = RecurrentFreeLite::new(
            RecurrentFreeConfig {
                hidden: 3,
                ..RecurrentFreeConfig::new(1, 6, 6, 2)
            },
            3,
        )
        .unwrap();
        randomize(m.params_mut(), 3);
        let seq = random_seq(5, 8);
        let r = gradcheck(m.params(), 1e-5, |t, v| m.training_loss(t, v, &seq, 2)).unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    #[test]
    fn baselines_round_trip_through_params() {
        let r = rec();
        assert_eq!(ModelKind::detect(r.params()), Some(ModelKind::RecurrentLite));
        let back = RecurrentLite::from_params(r.params(), 1, 6, 6).unwrap();
        assert_eq!(back.config(), r.config());
        assert!(RecurrentFreeLite::from_params(r.params(), 1, 6, 6).is_err());

        let f = free(3);
        assert_eq!(ModelKind::detect(f.params()), Some(ModelKind::RecurrentFreeLite));
        let back = RecurrentFreeLite::from_params(f.params(), 1, 6, 6).unwrap();
        assert_eq!(back.config(), f.config());
        assert_eq!(back.params(), f.params());
    }
}

//! Segment-recurrent predictor over micro segments and macro windows.
//!
//! Per step `i`:
//!
//! ```text
//! Ū = F_U(u_{i+1})            V̄ = F_V(window_i)
//! g = σ(W_v ∗ V̄ + b_v)        h_V = V̄ + g ⊙ h_V'
//! m = σ(W_u ∗ Ū + b_u)        c = σ(W_c ∗ Ū + b_c)
//! h_U = Ū + m ⊙ h_U' + c ⊙ h_V
//! P_i = readout(h_U)          → frames [(i+2)Δt, (i+3)Δt)
//! ```

use alloc::format;
use alloc::vec::Vec;

use super::{count_blocks, shape_of, whole_frames, ConvLayer, ConvStack, Init, ModelKind, Predictor, SegmentEncoder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::segmentation::{check_scales, macro_window_frames, micro_segment_frames, pad_sequence, FrameSequence};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UstepConfig {
    /// Frames per micro segment.
    pub delta_t: usize,
    /// Frames per macro window; a multiple of `delta_t`.
    pub delta_big: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Shared hidden width `C'`.
    pub hidden: usize,
    /// Residual blocks per segment encoder.
    pub depth: usize,
    pub kernel: usize,
    /// When false the cross-segment gate is pinned to zero.
    pub cross_segment: bool,
}

impl UstepConfig {
    pub fn new(channels: usize, height: usize, width: usize, delta_t: usize, delta_big: usize) -> Self {
        Self {
            delta_t,
            delta_big,
            channels,
            height,
            width,
            hidden: 16,
            depth: 1,
            kernel: 3,
            cross_segment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scales(self.delta_t, self.delta_big)?;
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("frame geometry must be positive"));
        }
        if self.hidden == 0 || self.depth == 0 {
            return Err(Error::config("hidden width and encoder depth must be at least 1"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn hidden_shape(&self) -> [usize; 3] {
        [self.hidden, self.height, self.width]
    }
}

/// Micro and macro hidden states carried between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HiddenState {
    pub h_u: Var,
    pub h_v: Var,
}

/// Hidden states after one step, copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub h_u: Tensor,
    pub h_v: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// One `Δt·C × H × W` prediction per supervised step.
    pub predictions: Vec<Var>,
    pub loss: Var,
    pub states: Vec<HiddenState>,
}

#[derive(Debug, Clone)]
pub struct Ustep {
    config: UstepConfig,
    params: ParamStore,
    micro: ConvStack,
    macro_enc: ConvStack,
    gate_v: ConvLayer,
    gate_u: ConvLayer,
    gate_c: Option<ConvLayer>,
    readout: ConvLayer,
}

impl Ustep {
    /// Fresh model with weights drawn from the stream seeded by `seed`.
    pub fn new(config: UstepConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let hid = config.hidden;
        let k = config.kernel;
        let micro = ConvStack::register(&mut params, "micro", config.delta_t * c, hid, config.depth, k, &mut rng)?;
        let macro_enc =
            ConvStack::register(&mut params, "macro", config.delta_big * c, hid, config.depth, k, &mut rng)?;
        let gate_v = ConvLayer::register(&mut params, "gate_v", hid, hid, k, Init::FanIn, &mut rng)?;
        let gate_u = ConvLayer::register(&mut params, "gate_u", hid, hid, k, Init::FanIn, &mut rng)?;
        let gate_c = if config.cross_segment {
            Some(ConvLayer::register(&mut params, "gate_c", hid, hid, k, Init::FanIn, &mut rng)?)
        } else {
            None
        };
        let readout = ConvLayer::register(&mut params, "readout", hid, config.delta_t * c, 1, Init::Zero, &mut rng)?;
        Ok(Self {
            config,
            params,
            micro,
            macro_enc,
            gate_v,
            gate_u,
            gate_c,
            readout,
        })
    }

    /// Rebuilds a model around existing parameters, reading the
    /// architecture off their names and shapes.
    pub fn from_params(params: &ParamStore, channels: usize, height: usize, width: usize) -> Result<Self> {
        if ModelKind::detect(params) != Some(ModelKind::Ustep) {
            return Err(Error::config("parameters do not describe a ustep model"));
        }
        let micro_in = shape_of(params, "micro.in.weight")?;
        let macro_in = shape_of(params, "macro.in.weight")?;
        let gate = shape_of(params, "gate_u.weight")?;
        let config = UstepConfig {
            delta_t: whole_frames(channels, micro_in[1], "micro.in.weight")?,
            delta_big: whole_frames(channels, macro_in[1], "macro.in.weight")?,
            channels,
            height,
            width,
            hidden: micro_in[0],
            depth: count_blocks(params, "micro"),
            kernel: gate[2],
            cross_segment: params.get("gate_c.weight").is_some(),
        };
        let mut model = Self::new(config, 0)?;
        model.params.assign_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &UstepConfig {
        &self.config
    }

    pub fn micro_encoder(&self) -> &ConvStack {
        &self.micro
    }

    pub fn macro_encoder(&self) -> &ConvStack {
        &self.macro_enc
    }

    /// Parameter names of the macro path: its encoder and the context gate.
    pub fn macro_param_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("macro.") || n.starts_with("gate_v."))
            .collect()
    }

    /// `Ū = F_U(segment)` for a channel-stacked `Δt·C × H × W` segment.
    pub fn encode_micro(&self, tape: &mut Tape, vars: &[Var], segment: Var) -> Result<Var> {
        self.micro.encode(tape, vars, segment)
    }

    /// `V̄ = F_V(window)` for a channel-stacked `ΔT·C × H × W` window.
    pub fn encode_macro(&self, tape: &mut Tape, vars: &[Var], window: Var) -> Result<Var> {
        self.macro_enc.encode(tape, vars, window)
    }

    /// Context-gated macro recurrence `h_V = V̄ + σ(W_v ∗ V̄ + b_v) ⊙ h_prev`.
    pub fn macro_step(&self, tape: &mut Tape, vars: &[Var], v_bar: Var, h_prev: Var) -> Result<Var> {
        let g = self.gate_v.gate(tape, vars, v_bar)?;
        let carried = tape.mul(g, h_prev)?;
        tape.add(v_bar, carried)
    }

    /// Micro recurrence with cross-segment fusion
    /// `h_U = Ū + m ⊙ h_prev + c ⊙ h_V`.
    pub fn micro_step(&self, tape: &mut Tape, vars: &[Var], u_bar: Var, h_prev: Var, h_v: Var) -> Result<Var> {
        let m = self.gate_u.gate(tape, vars, u_bar)?;
        let c = match &self.gate_c {
            Some(gate) => gate.gate(tape, vars, u_bar)?,
            None => tape.zeros(&self.config.hidden_shape()),
        };
        let history = tape.mul(m, h_prev)?;
        let context = tape.mul(c, h_v)?;
        let h = tape.add(u_bar, history)?;
        tape.add(h, context)
    }

    /// `1×1` projection of `h_U` to `Δt·C` channels, i.e. `Δt` stacked frames.
    pub fn readout(&self, tape: &mut Tape, vars: &[Var], h_u: Var) -> Result<Var> {
        self.readout.apply(tape, vars, h_u)
    }

    pub fn zero_state(&self, tape: &mut Tape) -> HiddenState {
        let shape = self.config.hidden_shape();
        HiddenState {
            h_u: tape.zeros(&shape),
            h_v: tape.zeros(&shape),
        }
    }

    /// One recurrence step reading its inputs from `stream`, which must hold
    /// at least `(step + 2)·Δt` frames.
    pub fn step(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        stream: &FrameSequence,
        step: usize,
        state: HiddenState,
    ) -> Result<(Var, HiddenState)> {
        let cfg = &self.config;
        let window = macro_window_frames(stream, step, cfg.delta_t, cfg.delta_big)?;
        let segment = micro_segment_frames(stream, step + 1, cfg.delta_t)?;
        let window = tape.constant(window);
        let segment = tape.constant(segment);
        let v_bar = self.encode_macro(tape, vars, window)?;
        let u_bar = self.encode_micro(tape, vars, segment)?;
        let h_v = self.macro_step(tape, vars, v_bar, state.h_v)?;
        let h_u = self.micro_step(tape, vars, u_bar, state.h_u, h_v)?;
        let pred = self.readout(tape, vars, h_u)?;
        Ok((pred, HiddenState { h_u, h_v }))
    }

    fn check_frames(&self, seq: &FrameSequence) -> Result<()> {
        let cfg = &self.config;
        if seq.frame_shape() != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::config(format!(
                "frames are {:?}, model expects {:?}",
                seq.frame_shape(),
                (cfg.channels, cfg.height, cfg.width)
            )));
        }
        Ok(())
    }

    /// Teacher-forced pass over a whole sequence.
    ///
    /// Step `i` runs for `i = 0 … L_pad/Δt − 3` and its prediction is scored
    /// against frames `[(i+2)Δt, (i+3)Δt)`. Padded target frames are left out
    /// of each step's mean; the loss is the mean over steps.
    pub fn forward_train(&self, tape: &mut Tape, vars: &[Var], seq: &FrameSequence) -> Result<TrainOutput> {
        self.check_frames(seq)?;
        let dt = self.config.delta_t;
        let (padded, _) = pad_sequence(seq, dt)?;
        let segments = padded.len() / dt;
        if segments < 3 {
            return Err(Error::config(format!(
                "sequence of {} frames gives {segments} micro segments of {dt}; at least 3 are needed",
                seq.len()
            )));
        }
        let steps = segments - 2;
        let c = self.config.channels;
        let mut state = self.zero_state(tape);
        let mut predictions = Vec::with_capacity(steps);
        let mut states = Vec::with_capacity(steps);
        let mut total: Option<Var> = None;
        for i in 0..steps {
            let (pred, next) = self.step(tape, vars, &padded, i, state)?;
            state = next;
            predictions.push(pred);
            states.push(state);
            let start = (i + 2) * dt;
            let real = dt.min(seq.len() - start);
            let target = tape.constant(seq.stacked(start..start + real)?);
            let scored = if real == dt { pred } else { tape.narrow(pred, 0, real * c)? };
            let step_loss = tape.mse_loss(scored, target)?;
            total = Some(match total {
                Some(t) => tape.add(t, step_loss)?,
                None => step_loss,
            });
        }
        let loss = tape.scale(total.expect("at least one step"), 1.0 / steps as f64);
        Ok(TrainOutput {
            predictions,
            loss,
            states,
        })
    }

    /// Hidden states of the teacher-forced pass, one record per step.
    pub fn train_states(&self, seq: &FrameSequence) -> Result<Vec<StepRecord>> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let out = self.forward_train(&mut tape, &vars, seq)?;
        Ok(records(&tape, &out.states))
    }

    /// Autoregressive prediction of `horizon` frames after `observed`.
    ///
    /// The stream starts as the padded observation. Each step predicts
    /// frames `[(i+2)Δt, (i+3)Δt)`; predicted frames at or beyond the
    /// observed length are written into the stream (replacing pad copies or
    /// extending it) so later steps consume them. Earlier predictions only
    /// warm up the hidden states. Returns the predicted frames and the
    /// hidden-state record of every step.
    pub fn rollout(&self, observed: &FrameSequence, horizon: usize) -> Result<(FrameSequence, Vec<StepRecord>)> {
        self.check_frames(observed)?;
        if horizon == 0 {
            return Err(Error::config("prediction horizon must be at least 1"));
        }
        let dt = self.config.delta_t;
        let t_obs = observed.len();
        let (mut stream, _) = pad_sequence(observed, dt)?;
        if stream.len() < 2 * dt {
            return Err(Error::config(format!(
                "{t_obs} observed frames are fewer than two micro segments of {dt}"
            )));
        }
        let total = t_obs + horizon;
        let n = stream.frame_len();
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let mut state = self.zero_state(&mut tape);
        let mut states = Vec::new();
        let mut step = 0;
        loop {
            let (pred, next) = self.step(&mut tape, &vars, &stream, step, state)?;
            state = next;
            states.push(state);
            let start = (step + 2) * dt;
            let end = start + dt;
            if end > t_obs {
                let values = tape.value(pred).to_vec();
                for f in start.max(t_obs)..end {
                    let frame = &values[(f - start) * n..(f - start + 1) * n];
                    if f < stream.len() {
                        stream.frame_mut(f).copy_from_slice(frame);
                    } else {
                        stream.extend_from(frame)?;
                    }
                }
            }
            if end >= total {
                break;
            }
            step += 1;
        }
        Ok((stream.slice(t_obs..total)?, records(&tape, &states)))
    }
}

fn records(tape: &Tape, states: &[HiddenState]) -> Vec<StepRecord> {
    states
        .iter()
        .enumerate()
        .map(|(step, s)| StepRecord {
            step,
            h_u: tape.tensor(s.h_u),
            h_v: tape.tensor(s.h_v),
        })
        .collect()
}

impl Predictor for Ustep {
    fn kind(&self) -> ModelKind {
        ModelKind::Ustep
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn training_loss(&self, tape: &mut Tape, vars: &[Var], seq: &FrameSequence, _observed: usize) -> Result<Var> {
        Ok(self.forward_train(tape, vars, seq)?.loss)
    }

    fn predict(&self, observed: &FrameSequence, horizon: usize) -> Result<FrameSequence> {
        Ok(self.rollout(observed, horizon)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::model::loss_and_grads;

    fn randomize(params: &mut ParamStore, seed: u64, scale: f64) {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        for i in 0..params.len() {
            for v in params.tensor_mut(i).data_mut() {
                *v = rng.uniform(-scale, scale);
            }
        }
    }

    fn random_seq(len: usize, c: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let data = (0..len * c * h * w).map(|_| rng.next_f64()).collect();
        FrameSequence::from_data(len, c, h, w, data).unwrap()
    }

    fn set(model: &mut Ustep, name: &str, value: f64) {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(value);
    }

    /// Single-pixel, single-channel model with `1×1` gate kernels.
    fn scalar_model() -> Ustep {
        let mut cfg = UstepConfig::new(1, 1, 1, 1, 1);
        cfg.hidden = 1;
        cfg.kernel = 1;
        Ustep::new(cfg, 3).unwrap()
    }

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::full(&[1, 1, 1], v))
    }

    #[test]
    fn encoders_map_zero_to_zero() {
        let m = Ustep::new(UstepConfig::new(1, 8, 8, 2, 4), 1).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let seg = tape.zeros(&[2, 8, 8]);
        let win = tape.zeros(&[4, 8, 8]);
        let u = m.encode_micro(&mut tape, &vars, seg).unwrap();
        let v = m.encode_macro(&mut tape, &vars, win).unwrap();
        assert!(tape.value(u).iter().all(|&x| x == 0.0));
        assert!(tape.value(v).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encoder_shapes_agree() {
        let mut cfg = UstepConfig::new(1, 16, 16, 5, 10);
        cfg.hidden = 32;
        let m = Ustep::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let seg = tape.zeros(&[5, 16, 16]);
        let win = tape.zeros(&[10, 16, 16]);
        let u = m.encode_micro(&mut tape, &vars, seg).unwrap();
        let v = m.encode_macro(&mut tape, &vars, win).unwrap();
        assert_eq!(tape.shape(u), &[32, 16, 16]);
        assert_eq!(tape.shape(v), tape.shape(u));
        let bad = tape.zeros(&[3, 16, 16]);
        assert!(m.encode_micro(&mut tape, &vars, bad).is_err());
    }

    #[test]
    fn depth_zero_stack_is_a_channel_projection() {
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256::seed_from_u64(0);
        let stack = ConvStack::register(&mut store, "p", 2, 3, 0, 3, &mut rng).unwrap();
        let w = store.get_mut("p.in.weight").unwrap().data_mut();
        w.fill(0.0);
        w[0] = 1.0; // out 0 <- in 0
        w[3] = 1.0; // out 1 <- in 1
        let x = random_seq(2, 1, 4, 5, 9).into_tensor().reshape(&[2, 4, 5]).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(&store);
        let xv = tape.constant(x.clone());
        let y = stack.encode(&mut tape, &vars, xv).unwrap();
        let y = tape.value(y);
        assert_eq!(&y[..20], &x.data()[..20]);
        assert_eq!(&y[20..40], &x.data()[20..40]);
        assert!(y[40..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn macro_step_examples() {
        let mut m = scalar_model();
        set(&mut m, "gate_v.weight", 0.0);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let (v, h) = (scalar(&mut tape, 1.0), scalar(&mut tape, 2.0));
        let out = m.macro_step(&mut tape, &vars, v, h).unwrap();
        assert_eq!(tape.value(out), &[2.0]);
        let zero = scalar(&mut tape, 0.0);
        let out = m.macro_step(&mut tape, &vars, v, zero).unwrap();
        assert_eq!(tape.value(out), &[1.0]);

        set(&mut m, "gate_v.bias", -100.0);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let (v, h) = (scalar(&mut tape, 1.0), scalar(&mut tape, 2.0));
        let out = m.macro_step(&mut tape, &vars, v, h).unwrap();
        assert!((tape.value(out)[0] - 1.0).abs() < 1e-40);
    }

    #[test]
    fn micro_step_examples() {
        let mut m = scalar_model();
        set(&mut m, "gate_u.weight", 0.0);
        set(&mut m, "gate_c.weight", 0.0);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let u = scalar(&mut tape, 1.0);
        let h = scalar(&mut tape, 2.0);
        let hv = scalar(&mut tape, 4.0);
        let out = m.micro_step(&mut tape, &vars, u, h, hv).unwrap();
        assert_eq!(tape.value(out), &[4.0]);
        let zero = scalar(&mut tape, 0.0);
        let out = m.micro_step(&mut tape, &vars, u, zero, zero).unwrap();
        assert_eq!(tape.value(out), &[1.0]);

        set(&mut m, "gate_u.bias", 100.0);
        set(&mut m, "gate_c.bias", 100.0);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let u = scalar(&mut tape, 1.0);
        let h = scalar(&mut tape, 2.0);
        let hv = scalar(&mut tape, 4.0);
        let out = m.micro_step(&mut tape, &vars, u, h, hv).unwrap();
        assert!((tape.value(out)[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let mut m = Ustep::new(UstepConfig::new(1, 6, 6, 2, 4), 5).unwrap();
        randomize(m.params_mut(), 5, 0.5);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let x = tape.constant(random_seq(4, 1, 6, 6, 2).into_tensor().reshape(&[4, 6, 6]).unwrap());
        let v = m.encode_macro(&mut tape, &vars, x).unwrap();
        for gate in [&m.gate_v, &m.gate_u, m.gate_c.as_ref().unwrap()] {
            let g = gate.gate(&mut tape, &vars, v).unwrap();
            assert!(tape.value(g).iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }

    #[test]
    fn readout_selects_channel_zero() {
        let mut cfg = UstepConfig::new(1, 4, 4, 2, 2);
        cfg.hidden = 3;
        let mut m = Ustep::new(cfg, 1).unwrap();
        let w = m.params_mut().get_mut("readout.weight").unwrap();
        assert_eq!(w.shape(), &[2, 3, 1, 1]);
        let w = w.data_mut();
        w[0] = 1.0;
        w[3] = 1.0;
        let h = random_seq(3, 1, 4, 4, 4).into_tensor().reshape(&[3, 4, 4]).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let hv = tape.constant(h.clone());
        let out = m.readout(&mut tape, &vars, hv).unwrap();
        assert_eq!(tape.shape(out), &[2, 4, 4]);
        let out = tape.value(out);
        assert_eq!(&out[..16], &h.data()[..16]);
        assert_eq!(&out[16..], &h.data()[..16]);
    }

    #[test]
    fn supervised_step_counts() {
        let m = Ustep::new(UstepConfig::new(1, 4, 4, 5, 5), 1).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let out = m.forward_train(&mut tape, &vars, &random_seq(20, 1, 4, 4, 1)).unwrap();
        assert_eq!(out.predictions.len(), 2);
        assert!(m.forward_train(&mut tape, &vars, &random_seq(10, 1, 4, 4, 1)).is_err());
    }

    #[test]
    fn predictions_target_shifted_segments() {
        let mut m = Ustep::new(UstepConfig::new(1, 4, 4, 2, 4), 1).unwrap();
        randomize(m.params_mut(), 8, 0.5);
        let seq = random_seq(8, 1, 4, 4, 3);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let out = m.forward_train(&mut tape, &vars, &seq).unwrap();
        assert_eq!(out.predictions.len(), 2);
        let mse = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let l0 = mse(tape.value(out.predictions[0]), seq.stacked(4..6).unwrap().data());
        let l1 = mse(tape.value(out.predictions[1]), seq.stacked(6..8).unwrap().data());
        assert!((tape.scalar(out.loss) - (l0 + l1) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn padded_targets_are_masked() {
        let mut m = Ustep::new(UstepConfig::new(1, 4, 4, 2, 2), 1).unwrap();
        randomize(m.params_mut(), 8, 0.5);
        // 7 frames pad to 8: the last step scores only frame 6.
        let seq = random_seq(7, 1, 4, 4, 3);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let out = m.forward_train(&mut tape, &vars, &seq).unwrap();
        let mse = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let l0 = mse(tape.value(out.predictions[0]), seq.stacked(4..6).unwrap().data());
        let l1 = mse(&tape.value(out.predictions[1])[..16], seq.frame(6));
        assert!((tape.scalar(out.loss) - (l0 + l1) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_readout_on_constant_data_has_zero_loss() {
        let mut m = Ustep::new(UstepConfig::new(1, 4, 4, 2, 4), 1).unwrap();
        set(&mut m, "readout.bias", 0.25);
        let seq = FrameSequence::from_data(8, 1, 4, 4, alloc::vec![0.25; 128]).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let out = m.forward_train(&mut tape, &vars, &seq).unwrap();
        assert_eq!(tape.scalar(out.loss), 0.0);
    }

    #[test]
    fn rollout_geometry() {
        let m = Ustep::new(UstepConfig::new(1, 4, 4, 5, 5), 1).unwrap();
        let obs = random_seq(10, 1, 4, 4, 2);
        let (pred, states) = m.rollout(&obs, 10).unwrap();
        assert_eq!((pred.len(), states.len()), (10, 2));
        let (pred, states) = m.rollout(&obs, 1).unwrap();
        assert_eq!((pred.len(), states.len()), (1, 1));
        assert!(m.rollout(&obs.slice(0..5).unwrap(), 1).is_err());
    }

    #[test]
    fn rollout_feeds_back_its_own_frames() {
        let mut m = Ustep::new(UstepConfig::new(1, 4, 4, 2, 4), 4).unwrap();
        randomize(m.params_mut(), 4, 0.5);
        let obs = random_seq(4, 1, 4, 4, 6);
        let (long, _) = m.rollout(&obs, 6).unwrap();
        let (short, _) = m.rollout(&obs, 2).unwrap();
        assert_eq!(short.data(), long.slice(0..2).unwrap().data());

        // Step 1 of the rollout sees predicted frames 4..6 as its micro segment.
        let mut stream = obs.clone();
        stream.extend_from(short.data()).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let s0 = m.zero_state(&mut tape);
        let (_, s1) = m.step(&mut tape, &vars, &stream, 0, s0).unwrap();
        let (p1, _) = m.step(&mut tape, &vars, &stream, 1, s1).unwrap();
        assert_eq!(tape.value(p1), long.slice(2..4).unwrap().data());
    }

    #[test]
    fn train_and_rollout_states_agree_on_observed_region() {
        let mut m = Ustep::new(UstepConfig::new(1, 6, 6, 2, 4), 2).unwrap();
        randomize(m.params_mut(), 2, 0.4);
        let seq = random_seq(12, 1, 6, 6, 7);
        let train = m.train_states(&seq).unwrap();
        let (_, roll) = m.rollout(&seq.slice(0..8).unwrap(), 4).unwrap();
        // Steps 0..=2 read only frames below 8.
        for i in 0..3 {
            assert_eq!(train[i], roll[i]);
        }
    }

    #[test]
    fn first_macro_state_is_the_encoded_window() {
        let mut m = Ustep::new(UstepConfig::new(1, 6, 6, 2, 4), 2).unwrap();
        randomize(m.params_mut(), 2, 0.4);
        let seq = random_seq(8, 1, 6, 6, 7);
        let mut tape = Tape::new();
        let vars = tape.bind(m.params());
        let s0 = m.zero_state(&mut tape);
        let (_, s1) = m.step(&mut tape, &vars, &seq, 0, s0).unwrap();
        let window = tape.constant(macro_window_frames(&seq, 0, 2, 4).unwrap());
        let v = m.encode_macro(&mut tape, &vars, window).unwrap();
        assert_eq!(tape.value(s1.h_v), tape.value(v));
    }

    #[test]
    fn without_cross_gate_macro_path_gets_no_gradient() {
        let mut cfg = UstepConfig::new(1, 6, 6, 2, 4);
        cfg.hidden = 4;
        let seq = random_seq(8, 1, 6, 6, 1);
        for cross in [true, false] {
            cfg.cross_segment = cross;
            let mut m = Ustep::new(cfg, 3).unwrap();
            randomize(m.params_mut(), 3, 0.5);
            assert_eq!(m.params().get("gate_c.weight").is_some(), cross);
            let (_, grads) = loss_and_grads(&m, &seq, 4).unwrap();
            for name in m.macro_param_names() {
                let g = grads.get(m.params().index_of(name).unwrap()).unwrap_or(&[]);
                let all_zero = g.iter().all(|&x| x == 0.0);
                assert_eq!(all_zero, !cross, "{name}");
            }
        }
    }

    #[test]
    fn parameter_count_ignores_sequence_length() {
        let m = Ustep::new(UstepConfig::new(1, 4, 4, 2, 4), 1).unwrap();
        let before = m.params().num_scalars();
        for len in [6, 8, 13, 20] {
            let mut tape = Tape::new();
            let vars = tape.bind(m.params());
            m.forward_train(&mut tape, &vars, &random_seq(len, 1, 4, 4, 1)).unwrap();
        }
        assert_eq!(m.params().num_scalars(), before);
        assert_eq!(m.macro_param_names().len(), 6);
    }

    #[test]
    fn from_params_restores_architecture() {
        let mut cfg = UstepConfig::new(2, 5, 5, 2, 6);
        cfg.hidden = 3;
        cfg.depth = 2;
        cfg.cross_segment = false;
        let mut m = Ustep::new(cfg, 9).unwrap();
        randomize(m.params_mut(), 1, 1.0);
        let back = Ustep::from_params(m.params(), 2, 5, 5).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back.params(), m.params());
        assert!(Ustep::from_params(m.params(), 3, 5, 5).is_err());
    }

    #[test]
    fn full_model_gradcheck() {
        let mut cfg = UstepConfig::new(1, 8, 8, 2, 4);
        cfg.hidden = 4;
        let mut m = Ustep::new(cfg, 11).unwrap();
        randomize(m.params_mut(), 11, 0.5);
        let seq = random_seq(8, 1, 8, 8, 11);
        let report = gradcheck(m.params(), 1e-5, |tape, vars| Ok(m.forward_train(tape, vars, &seq)?.loss)).unwrap();
        assert!(report.within(1e-4), "{report:?}");
        assert_eq!(report.checked, m.params().num_scalars());
    }
}

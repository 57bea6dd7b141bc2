//! Micro segments and trailing macro windows over a frame sequence.
//!
//! A sequence is cut into non-overlapping micro segments of `delta_t`
//! frames. Step `i` of the segment recurrence consumes micro segment
//! `u_{i+1}`, i.e. frames `[(i+1)Δt, (i+2)Δt)`, together with the macro
//! window of the `ΔT` frames that end where that segment ends. Windows that
//! would start before frame 0 repeat frame 0 on the left. With `ΔT = 2Δt`
//! the window for step `i` is exactly `u_i ∪ u_{i+1}`.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames stored as an `L×C×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Tensor,
}

impl FrameSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(Error::dim(
                "frame sequence",
                format!("expected L×C×H×W, got {:?}", frames.shape()),
            ));
        }
        Ok(Self { frames })
    }

    pub fn from_data(len: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[len, c, h, w], data)?)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame_len(&self) -> usize {
        let (c, h, w) = self.frame_shape();
        c * h * w
    }

    pub fn frame(&self, index: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[index * n..(index + 1) * n]
    }

    pub fn frame_mut(&mut self, index: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.frames.data_mut()[index * n..(index + 1) * n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn data(&self) -> &[f64] {
        self.frames.data()
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::contract(format!(
                "frame range {range:?} outside sequence of length {}",
                self.len()
            )));
        }
        Ok(Self {
            frames: self.frames.narrow(range.start, range.end - range.start)?,
        })
    }

    /// Frames `[start, end)` stacked along channels: `(end-start)·C × H × W`.
    pub fn stacked(&self, range: Range<usize>) -> Result<Tensor> {
        let (c, h, w) = self.frame_shape();
        let n = range.end - range.start;
        self.slice(range)?.frames.reshape(&[n * c, h, w])
    }

    /// Gathers arbitrary frame indices, channel-stacked.
    pub fn gather_stacked(&self, indices: &[usize]) -> Result<Tensor> {
        let (c, h, w) = self.frame_shape();
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "frame {i} outside sequence of length {}",
                    self.len()
                )));
            }
            data.extend_from_slice(self.frame(i));
        }
        Tensor::new(&[indices.len() * c, h, w], data)
    }

    /// Appends `count` frames taken from a `count·C × H × W` or
    /// `count × C × H × W` buffer.
    pub fn extend_from(&mut self, frames: &[f64]) -> Result<()> {
        let n = self.frame_len();
        if frames.is_empty() || !frames.len().is_multiple_of(n) {
            return Err(Error::dim(
                "extend",
                format!("{} values is not a whole number of {n}-value frames", frames.len()),
            ));
        }
        let (c, h, w) = self.frame_shape();
        let len = self.len() + frames.len() / n;
        let mut data = core::mem::replace(&mut self.frames, Tensor::scalar(0.0)).into_data();
        data.extend_from_slice(frames);
        self.frames = Tensor::new(&[len, c, h, w], data)?;
        Ok(())
    }
}

/// Frames-per-micro-segment guideline: 5 when `T + T' > 10`, else 2.
pub fn choose_delta_t(observed: usize, predicted: usize) -> usize {
    if observed + predicted > 10 {
        5
    } else {
        2
    }
}

/// Macro window length: the observed length rounded down to a multiple of
/// `delta_t`, and never shorter than one micro segment.
pub fn default_macro_len(observed: usize, delta_t: usize) -> usize {
    ((observed / delta_t) * delta_t).max(delta_t)
}

/// Appends copies of the last frame until the length is a multiple of
/// `delta_t`. Returns the padded sequence and the number of frames added.
pub fn pad_sequence(seq: &FrameSequence, delta_t: usize) -> Result<(FrameSequence, usize)> {
    if delta_t == 0 {
        return Err(Error::config("delta_t must be at least 1"));
    }
    if seq.is_empty() {
        return Err(Error::contract("cannot pad an empty sequence"));
    }
    let pad = (delta_t - seq.len() % delta_t) % delta_t;
    let mut out = seq.clone();
    if pad > 0 {
        let last = seq.frame(seq.len() - 1).to_vec();
        let mut extra = Vec::with_capacity(pad * last.len());
        for _ in 0..pad {
            extra.extend_from_slice(&last);
        }
        out.extend_from(&extra)?;
    }
    Ok((out, pad))
}

/// Frame span of one macro window; `start` may be negative, in which case
/// the leading positions repeat frame 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacroWindow {
    pub start: isize,
    pub end: usize,
}

impl MacroWindow {
    pub fn for_step(step: usize, delta_t: usize, delta_big: usize) -> Self {
        let end = (step + 2) * delta_t;
        Self {
            start: end as isize - delta_big as isize,
            end,
        }
    }

    pub fn len(&self) -> usize {
        (self.end as isize - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source frame index for every window position, clamped at 0.
    pub fn indices(&self) -> Vec<usize> {
        (self.start..self.end as isize).map(|i| i.max(0) as usize).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPartition {
    pub delta_t: usize,
    pub delta_big: usize,
    pub micro: Vec<Range<usize>>,
    pub macro_windows: Vec<MacroWindow>,
    pub pad_count: usize,
    pub padded_len: usize,
}

impl SegmentPartition {
    /// `k = ΔT / Δt`.
    pub fn ratio(&self) -> usize {
        self.delta_big / self.delta_t
    }
}

pub(crate) fn check_scales(delta_t: usize, delta_big: usize) -> Result<()> {
    if delta_t == 0 {
        return Err(Error::config("delta_t must be at least 1"));
    }
    if delta_big == 0 || !delta_big.is_multiple_of(delta_t) {
        return Err(Error::config(format!(
            "macro length {delta_big} must be a positive multiple of delta_t {delta_t}"
        )));
    }
    Ok(())
}

/// Builds the micro/macro partition of a sequence of `len` frames.
pub fn partition_len(len: usize, delta_t: usize, delta_big: usize) -> Result<SegmentPartition> {
    check_scales(delta_t, delta_big)?;
    if len == 0 {
        return Err(Error::contract("cannot partition an empty sequence"));
    }
    let pad_count = (delta_t - len % delta_t) % delta_t;
    let padded_len = len + pad_count;
    if padded_len < 2 * delta_t {
        return Err(Error::config(format!(
            "padded length {padded_len} is shorter than two micro segments of {delta_t}"
        )));
    }
    let n_micro = padded_len / delta_t;
    let micro = (0..n_micro).map(|j| j * delta_t..(j + 1) * delta_t).collect();
    let macro_windows = (0..n_micro - 1)
        .map(|i| MacroWindow::for_step(i, delta_t, delta_big))
        .collect();
    Ok(SegmentPartition {
        delta_t,
        delta_big,
        micro,
        macro_windows,
        pad_count,
        padded_len,
    })
}

pub fn partition(seq: &FrameSequence, delta_t: usize, delta_big: usize) -> Result<SegmentPartition> {
    partition_len(seq.len(), delta_t, delta_big)
}

/// The `ΔT` frames ending at `(step + 2)·Δt`, channel-stacked into a
/// `ΔT·C × H × W` tensor, with left edge-replication of frame 0.
pub fn macro_window_frames(
    stream: &FrameSequence,
    step: usize,
    delta_t: usize,
    delta_big: usize,
) -> Result<Tensor> {
    check_scales(delta_t, delta_big)?;
    let window = MacroWindow::for_step(step, delta_t, delta_big);
    if stream.len() < window.end {
        return Err(Error::contract(format!(
            "macro window for step {step} needs {} frames, stream has {}",
            window.end,
            stream.len()
        )));
    }
    stream.gather_stacked(&window.indices())
}

/// Micro segment `u_j`, channel-stacked into `Δt·C × H × W`.
pub fn micro_segment_frames(stream: &FrameSequence, j: usize, delta_t: usize) -> Result<Tensor> {
    let end = (j + 1) * delta_t;
    if stream.len() < end {
        return Err(Error::contract(format!(
            "micro segment {j} needs {end} frames, stream has {}",
            stream.len()
        )));
    }
    stream.stacked(j * delta_t..end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Sequence whose frame `i` is filled with the value `i`.
    fn ramp(len: usize) -> FrameSequence {
        let mut data = Vec::new();
        for i in 0..len {
            data.extend_from_slice(&[i as f64; 4]);
        }
        FrameSequence::from_data(len, 1, 2, 2, data).unwrap()
    }

    fn frame_ids(t: &Tensor) -> Vec<usize> {
        t.data().chunks(4).map(|c| c[0] as usize).collect()
    }

    #[test]
    fn delta_t_guideline() {
        assert_eq!(choose_delta_t(10, 10), 5);
        assert_eq!(choose_delta_t(4, 4), 2);
        assert_eq!(choose_delta_t(10, 1), 5);
        assert_eq!(choose_delta_t(5, 5), 2);
    }

    #[test]
    fn padding_examples() {
        let (p, n) = pad_sequence(&ramp(10), 5).unwrap();
        assert_eq!((p.len(), n), (10, 0));
        let (p, n) = pad_sequence(&ramp(11), 5).unwrap();
        assert_eq!((p.len(), n), (15, 4));
        for i in 11..15 {
            assert_eq!(p.frame(i), p.frame(10));
        }
        let (p, n) = pad_sequence(&ramp(1), 2).unwrap();
        assert_eq!((p.len(), n), (2, 1));
        assert_eq!(p.frame(0), p.frame(1));
    }

    #[test]
    fn four_to_four_geometry() {
        let p = partition(&ramp(8), 2, 4).unwrap();
        assert_eq!(p.micro.len(), 4);
        let spans: Vec<(isize, usize)> = p.macro_windows.iter().map(|w| (w.start, w.end)).collect();
        assert_eq!(spans, vec![(0, 4), (2, 6), (4, 8)]);
        assert_eq!(p.macro_windows.len(), p.micro.len() - 1);
    }

    #[test]
    fn long_geometry() {
        let p = partition(&ramp(20), 5, 10).unwrap();
        assert_eq!(p.micro.len(), 4);
        let spans: Vec<(isize, usize)> = p.macro_windows.iter().map(|w| (w.start, w.end)).collect();
        assert_eq!(spans, vec![(0, 10), (5, 15), (10, 20)]);
    }

    #[test]
    fn edge_replicated_window() {
        let p = partition(&ramp(20), 2, 10).unwrap();
        let w = p.macro_windows[0];
        assert_eq!((w.start, w.end), (-6, 4));
        assert_eq!(w.indices(), vec![0, 0, 0, 0, 0, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn window_frames() {
        let s = ramp(10);
        assert_eq!(frame_ids(&macro_window_frames(&s, 0, 5, 10).unwrap()), (0..10).collect::<Vec<_>>());
        let s15 = ramp(15);
        assert_eq!(frame_ids(&macro_window_frames(&s15, 1, 5, 10).unwrap()), (5..15).collect::<Vec<_>>());
        let w = frame_ids(&macro_window_frames(&s, 0, 2, 10).unwrap());
        assert_eq!(w, vec![0, 0, 0, 0, 0, 0, 0, 1, 2, 3]);
        assert!(matches!(macro_window_frames(&s, 1, 5, 10), Err(Error::Contract(_))));
    }

    #[test]
    fn config_errors() {
        assert!(matches!(partition(&ramp(8), 2, 5), Err(Error::Config(_))));
        assert!(partition(&ramp(3), 2, 4).is_ok());
        assert!(matches!(partition(&ramp(2), 2, 4), Err(Error::Config(_))));
        assert!(matches!(partition(&ramp(8), 0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn default_macro_rounds_down() {
        assert_eq!(default_macro_len(10, 5), 10);
        assert_eq!(default_macro_len(11, 5), 10);
        assert_eq!(default_macro_len(4, 2), 4);
        assert_eq!(default_macro_len(3, 5), 5);
    }
}

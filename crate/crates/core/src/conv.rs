//! Same-padded 2D cross-correlation kernels on `C×H×W` buffers.
//!
//! The input is unfolded into a `(Cin·k·k) × (H·W)` column matrix so that
//! every inner loop runs over a whole contiguous plane.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Overlap of a plane with itself shifted by one kernel tap.
struct Tap {
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl ConvGeom {
    fn taps(&self) -> impl Iterator<Item = Tap> + '_ {
        let pad = (self.k / 2) as isize;
        (0..self.k * self.k).map(move |t| {
            let dy = (t / self.k) as isize - pad;
            let dx = (t % self.k) as isize - pad;
            Tap {
                dy,
                dx,
                y0: (-dy).max(0) as usize,
                y1: (self.h as isize - dy).clamp(0, self.h as isize) as usize,
                x0: (-dx).max(0) as usize,
                x1: (self.w as isize - dx).clamp(0, self.w as isize) as usize,
            }
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Row `(ci, tap)` holds `input[ci][y + dy][x + dx]`, zero outside.
    fn im2col<'a>(&self, input: &'a [f64]) -> Cow<'a, [f64]> {
        if self.k == 1 {
            return Cow::Borrowed(input);
        }
        let hw = self.h * self.w;
        let mut cols = Vec::with_capacity(self.rows() * hw);
        for ci in 0..self.cin {
            let plane = &input[ci * hw..(ci + 1) * hw];
            for tap in self.taps() {
                if tap.x0 >= tap.x1 || tap.y0 >= tap.y1 {
                    cols.resize(cols.len() + hw, 0.0);
                    continue;
                }
                cols.resize(cols.len() + tap.y0 * self.w, 0.0);
                for y in tap.y0..tap.y1 {
                    let src = ((y as isize + tap.dy) as usize * self.w) as isize + tap.dx;
                    cols.resize(cols.len() + tap.x0, 0.0);
                    cols.extend_from_slice(&plane[(src + tap.x0 as isize) as usize..][..tap.x1 - tap.x0]);
                    cols.resize(cols.len() + self.w - tap.x1, 0.0);
                }
                cols.resize(cols.len() + (self.h - tap.y1) * self.w, 0.0);
            }
        }
        Cow::Owned(cols)
    }

    /// Adjoint of one [`im2col`](Self::im2col) row: adds `row`, the column
    /// gradient of channel `ci` at `tap`, back onto that input plane.
    fn row2im_add(&self, tap: &Tap, row: &[f64], plane: &mut [f64]) {
        if tap.x0 >= tap.x1 {
            return;
        }
        for y in tap.y0..tap.y1 {
            let dst = ((y as isize + tap.dy) as usize * self.w) as isize + tap.dx;
            let dst = &mut plane[(dst + tap.x0 as isize) as usize..][..tap.x1 - tap.x0];
            for (d, s) in dst.iter_mut().zip(&row[y * self.w + tap.x0..y * self.w + tap.x1]) {
                *d += s;
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums keep the loop vectorisable
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn forward(g: ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = g.h * g.w;
    let rows = g.rows();
    let cols = g.im2col(input);
    let mut out: Vec<f64> = bias.iter().flat_map(|&b| core::iter::repeat_n(b, hw)).collect();
    for co in 0..g.cout {
        let out_c = &mut out[co * hw..(co + 1) * hw];
        for (r, &wv) in weight[co * rows..(co + 1) * rows].iter().enumerate() {
            if wv != 0.0 {
                axpy(out_c, wv, &cols[r * hw..(r + 1) * hw]);
            }
        }
    }
    out
}

/// Accumulates gradients for input, weight and bias given `grad_out`.
/// Any of the three targets may be skipped by passing `None`.
pub(crate) fn backward(
    g: ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let hw = g.h * g.w;
    let rows = g.rows();
    if let Some(gb) = grad_b {
        for co in 0..g.cout {
            gb[co] += grad_out[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
    }
    if let Some(gw) = grad_w {
        let cols = g.im2col(input);
        for co in 0..g.cout {
            let go = &grad_out[co * hw..(co + 1) * hw];
            for r in 0..rows {
                gw[co * rows + r] += dot(go, &cols[r * hw..(r + 1) * hw]);
            }
        }
    }
    if let Some(gi) = grad_in {
        let kk = g.k * g.k;
        let mut acc = vec![0.0; hw];
        for ci in 0..g.cin {
            for (t, tap) in g.taps().enumerate() {
                let r = ci * kk + t;
                acc.fill(0.0);
                for co in 0..g.cout {
                    let wv = weight[co * rows + r];
                    if wv != 0.0 {
                        axpy(&mut acc, wv, &grad_out[co * hw..(co + 1) * hw]);
                    }
                }
                g.row2im_add(&tap, &acc, &mut gi[ci * hw..(ci + 1) * hw]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation with explicit zero padding.
    fn naive(g: ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let p = (g.k / 2) as isize;
        let mut out = vec![0.0; g.cout * g.h * g.w];
        for co in 0..g.cout {
            for y in 0..g.h as isize {
                for x in 0..g.w as isize {
                    let mut s = bias[co];
                    for ci in 0..g.cin {
                        for ky in 0..g.k as isize {
                            for kx in 0..g.k as isize {
                                let iy = y + ky - p;
                                let ix = x + kx - p;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let iv = input[ci * g.h * g.w + iy as usize * g.w + ix as usize];
                                let wv = weight
                                    [((co * g.cin + ci) * g.k + ky as usize) * g.k + kx as usize];
                                s += iv * wv;
                            }
                        }
                    }
                    out[(co * g.h + y as usize) * g.w + x as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        let g = ConvGeom { cin: 2, cout: 3, h: 5, w: 4, k: 3 };
        let input: Vec<f64> = (0..g.cin * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let weight: Vec<f64> = (0..g.cout * g.cin * 9).map(|i| (i as f64 * 0.71).cos()).collect();
        let bias = [0.1, -0.2, 0.3];
        let a = forward(g, &input, &weight, &bias);
        let b = naive(g, &input, &weight, &bias);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_the_adjoint_of_naive_forward() {
        // <grad_out, d out> = <grad, d param> for unit perturbations
        let g = ConvGeom { cin: 2, cout: 3, h: 4, w: 5, k: 3 };
        let input: Vec<f64> = (0..g.cin * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let weight: Vec<f64> = (0..g.cout * g.cin * 9).map(|i| (i as f64 * 0.71).cos()).collect();
        let bias = [0.1, -0.2, 0.3];
        let go: Vec<f64> = (0..g.cout * g.h * g.w).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut gi = vec![0.0; input.len()];
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; 3];
        backward(g, &input, &weight, &go, Some(&mut gi), Some(&mut gw), Some(&mut gb));
        let base = naive(g, &input, &weight, &bias);
        let inner = |out: &[f64]| out.iter().zip(&base).zip(&go).map(|((o, b), d)| (o - b) * d).sum::<f64>();
        for i in 0..input.len() {
            let mut x = input.clone();
            x[i] += 1.0;
            assert!((inner(&naive(g, &x, &weight, &bias)) - gi[i]).abs() < 1e-12);
        }
        for i in 0..weight.len() {
            let mut w = weight.clone();
            w[i] += 1.0;
            assert!((inner(&naive(g, &input, &w, &bias)) - gw[i]).abs() < 1e-12);
        }
        for i in 0..3 {
            let mut b = bias;
            b[i] += 1.0;
            assert!((inner(&naive(g, &input, &weight, &b)) - gb[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_wider_than_frame() {
        let g = ConvGeom { cin: 1, cout: 1, h: 1, w: 2, k: 5 };
        let out = forward(g, &[1.0, 2.0], &[1.0; 25], &[0.0]);
        assert_eq!(out, naive(g, &[1.0, 2.0], &[1.0; 25], &[0.0]));
    }
}

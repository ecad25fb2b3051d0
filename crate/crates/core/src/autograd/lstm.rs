//! Forward and backward kernels for one LSTM direction.
//!
//! Gate order is input, forget, cell, output. Rows of every cached matrix are
//! indexed by `b * steps + t`; rows past a sequence's length stay zero.

use super::{gemm, Real};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
}

pub(crate) struct DirectionCache<T: Real> {
    /// Activated gates `[B*N, 4H]`.
    gates: Vec<T>,
    cells: Vec<T>,
    pub hidden: Vec<T>,
    prev_hidden: Vec<T>,
    prev_cells: Vec<T>,
}

pub(crate) struct DirectionGrads<T: Real> {
    pub input: Vec<T>,
    pub w_ih: Vec<T>,
    pub w_hh: Vec<T>,
    pub bias: Vec<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn step_index(len: usize, s: usize, reverse: bool) -> usize {
    if reverse {
        len - 1 - s
    } else {
        s
    }
}

pub(crate) fn forward_direction<T: Real>(
    x: &[T],
    dims: Dims,
    lengths: &[usize],
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
    reverse: bool,
) -> DirectionCache<T> {
    let Dims { batch, steps, input, hidden } = dims;
    let rows = batch * steps;
    let g4 = 4 * hidden;
    let mut proj = vec![T::zero(); rows * g4];
    gemm(false, true, rows, g4, input, T::one(), x, w_ih, T::zero(), &mut proj);

    let mut cache = DirectionCache {
        gates: vec![T::zero(); rows * g4],
        cells: vec![T::zero(); rows * hidden],
        hidden: vec![T::zero(); rows * hidden],
        prev_hidden: vec![T::zero(); rows * hidden],
        prev_cells: vec![T::zero(); rows * hidden],
    };
    let mut z = vec![T::zero(); g4];
    for (b, &len) in lengths.iter().enumerate() {
        let mut h = vec![T::zero(); hidden];
        let mut c = vec![T::zero(); hidden];
        for s in 0..len {
            let row = b * steps + step_index(len, s, reverse);
            for r in 0..g4 {
                let wr = &w_hh[r * hidden..(r + 1) * hidden];
                let mut acc = proj[row * g4 + r] + bias[r];
                for j in 0..hidden {
                    acc = acc + wr[j] * h[j];
                }
                z[r] = acc;
            }
            cache.prev_hidden[row * hidden..(row + 1) * hidden].copy_from_slice(&h);
            cache.prev_cells[row * hidden..(row + 1) * hidden].copy_from_slice(&c);
            let gates = &mut cache.gates[row * g4..(row + 1) * g4];
            for j in 0..hidden {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[hidden + j]);
                let g = z[2 * hidden + j].tanh();
                let o = sigmoid(z[3 * hidden + j]);
                gates[j] = i;
                gates[hidden + j] = f;
                gates[2 * hidden + j] = g;
                gates[3 * hidden + j] = o;
                c[j] = f * c[j] + i * g;
                h[j] = o * c[j].tanh();
            }
            cache.cells[row * hidden..(row + 1) * hidden].copy_from_slice(&c);
            cache.hidden[row * hidden..(row + 1) * hidden].copy_from_slice(&h);
        }
    }
    cache
}

/// Backpropagation through time for one direction given `d_hidden`, the
/// gradient with respect to that direction's per-step outputs `[B*N, H]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_direction<T: Real>(
    cache: &DirectionCache<T>,
    d_hidden: &[T],
    x: &[T],
    dims: Dims,
    lengths: &[usize],
    w_ih: &[T],
    w_hh: &[T],
    reverse: bool,
) -> DirectionGrads<T> {
    let Dims { batch, steps, input, hidden } = dims;
    let rows = batch * steps;
    let g4 = 4 * hidden;
    let mut dz_all = vec![T::zero(); rows * g4];
    for (b, &len) in lengths.iter().enumerate() {
        let mut dh_next = vec![T::zero(); hidden];
        let mut dc_next = vec![T::zero(); hidden];
        for s in (0..len).rev() {
            let row = b * steps + step_index(len, s, reverse);
            let gates = &cache.gates[row * g4..(row + 1) * g4];
            let c = &cache.cells[row * hidden..(row + 1) * hidden];
            let c_prev = &cache.prev_cells[row * hidden..(row + 1) * hidden];
            let dz = &mut dz_all[row * g4..(row + 1) * g4];
            for j in 0..hidden {
                let (i, f, g, o) = (gates[j], gates[hidden + j], gates[2 * hidden + j], gates[3 * hidden + j]);
                let dh = d_hidden[row * hidden + j] + dh_next[j];
                let tc = c[j].tanh();
                let d_o = dh * tc;
                let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
                dz[j] = dc * g * i * (T::one() - i);
                dz[hidden + j] = dc * c_prev[j] * f * (T::one() - f);
                dz[2 * hidden + j] = dc * i * (T::one() - g * g);
                dz[3 * hidden + j] = d_o * o * (T::one() - o);
                dc_next[j] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            for r in 0..g4 {
                let d = dz[r];
                let wr = &w_hh[r * hidden..(r + 1) * hidden];
                for j in 0..hidden {
                    dh_next[j] = dh_next[j] + wr[j] * d;
                }
            }
        }
    }
    let mut grads = DirectionGrads {
        input: vec![T::zero(); rows * input],
        w_ih: vec![T::zero(); g4 * input],
        w_hh: vec![T::zero(); g4 * hidden],
        bias: vec![T::zero(); g4],
    };
    gemm(true, false, g4, input, rows, T::one(), &dz_all, x, T::zero(), &mut grads.w_ih);
    gemm(true, false, g4, hidden, rows, T::one(), &dz_all, &cache.prev_hidden, T::zero(), &mut grads.w_hh);
    gemm(false, false, rows, input, g4, T::one(), &dz_all, w_ih, T::zero(), &mut grads.input);
    for row in dz_all.chunks(g4) {
        for (b, &d) in grads.bias.iter_mut().zip(row) {
            *b = *b + d;
        }
    }
    grads
}

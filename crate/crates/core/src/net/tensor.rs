//! Multi-channel grids with a one-voxel zero border, and the kernels the
//! network is built from.
//!
//! Every channel is stored on a `(nx+2) x (ny+2) x (nz+2)` grid whose border
//! stays zero between operations. A 3x3x3 same-padded convolution then
//! reduces to shifted multiply-adds over one contiguous index range, with
//! no per-row bounds logic.

use std::ops::{Add, AddAssign, Mul, Sub};

use crate::volume::Dims;

pub trait Real:
    Copy + Default + PartialOrd + Send + Sync + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Padded layout of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub dims: Dims,
    px: usize,
    plane: usize,
    len: usize,
}

impl Grid {
    pub fn new(dims: Dims) -> Self {
        let px = dims[0] + 2;
        let plane = px * (dims[1] + 2);
        Self {
            dims,
            px,
            plane,
            len: plane * (dims[2] + 2),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// Padded offset of interior voxel `(x, y, z)`.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> usize {
        (x + 1) + self.px * (y + 1) + self.plane * (z + 1)
    }

    /// Contiguous range spanning every interior voxel.
    fn interior(&self) -> (usize, usize) {
        let [nx, ny, nz] = self.dims;
        (self.at(0, 0, 0), self.at(nx - 1, ny - 1, nz - 1) + 1)
    }

    /// Index shifts for a cubic kernel of side 1 or 3, tap order
    /// `dx` fastest then `dy` then `dz`.
    fn taps(&self, k: usize) -> Vec<isize> {
        if k == 1 {
            return vec![0];
        }
        let mut v = Vec::with_capacity(27);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    v.push(dz * self.plane as isize + dy * self.px as isize + dx);
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub grid: Grid,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        let grid = Grid::new(dims);
        Self {
            channels,
            grid,
            data: vec![T::default(); channels * grid.len()],
        }
    }

    /// Single-channel tensor from an unpadded x-fastest array.
    pub fn from_dense(dims: Dims, values: &[T]) -> Self {
        let mut t = Self::zeros(1, dims);
        let [nx, ny, nz] = dims;
        for z in 0..nz {
            for y in 0..ny {
                let src = nx * (y + ny * z);
                let dst = t.grid.at(0, y, z);
                t.data[dst..dst + nx].copy_from_slice(&values[src..src + nx]);
            }
        }
        t
    }

    /// Interior of one channel as an unpadded x-fastest array.
    pub fn to_dense(&self, channel: usize) -> Vec<T> {
        let [nx, ny, nz] = self.grid.dims;
        let ch = self.channel(channel);
        let mut out = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                let s = self.grid.at(0, y, z);
                out.extend_from_slice(&ch[s..s + nx]);
            }
        }
        out
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    fn zero_borders(&mut self) {
        let g = self.grid;
        let [nx, ny, nz] = g.dims;
        for c in 0..self.channels {
            let ch = self.channel_mut(c);
            ch[..g.plane].fill(T::default());
            ch[(nz + 1) * g.plane..].fill(T::default());
            for z in 1..=nz {
                let base = z * g.plane;
                ch[base..base + g.px].fill(T::default());
                ch[base + (ny + 1) * g.px..base + g.plane].fill(T::default());
                for y in 1..=ny {
                    ch[base + y * g.px] = T::default();
                    ch[base + y * g.px + nx + 1] = T::default();
                }
            }
        }
    }

    /// Stack channels of `a` then `b`.
    pub fn concat(a: &Self, b: &Self) -> Self {
        assert_eq!(a.grid, b.grid);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self {
            channels: a.channels + b.channels,
            grid: a.grid,
            data,
        }
    }

    /// Split into the first `n` channels and the rest.
    pub fn split(self, n: usize) -> (Self, Self) {
        let at = n * self.grid.len();
        let mut head = self.data;
        let tail = head.split_off(at);
        (
            Self {
                channels: n,
                grid: self.grid,
                data: head,
            },
            Self {
                channels: self.channels - n,
                grid: self.grid,
                data: tail,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out[i] += sum_j w[j] * inp[base + i + shift[j]]` for `i` in `0..out.len()`.
fn accumulate_taps<T: Real>(out: &mut [T], inp: &[T], base: usize, shifts: &[isize], w: &[T]) {
    let n = out.len();
    let slice = |s: isize| -> &[T] {
        let at = (base as isize + s) as usize;
        &inp[at..at + n]
    };
    let mut j = 0;
    while j + 9 <= shifts.len() {
        let (s0, s1, s2) = (slice(shifts[j]), slice(shifts[j + 1]), slice(shifts[j + 2]));
        let (s3, s4, s5) = (slice(shifts[j + 3]), slice(shifts[j + 4]), slice(shifts[j + 5]));
        let (s6, s7, s8) = (slice(shifts[j + 6]), slice(shifts[j + 7]), slice(shifts[j + 8]));
        let wj = &w[j..j + 9];
        let (w0, w1, w2, w3, w4, w5, w6, w7, w8) =
            (wj[0], wj[1], wj[2], wj[3], wj[4], wj[5], wj[6], wj[7], wj[8]);
        for i in 0..n {
            out[i] += w0 * s0[i]
                + w1 * s1[i]
                + w2 * s2[i]
                + w3 * s3[i]
                + w4 * s4[i]
                + w5 * s5[i]
                + w6 * s6[i]
                + w7 * s7[i]
                + w8 * s8[i];
        }
        j += 9;
    }
    for (&s, &wv) in shifts[j..].iter().zip(&w[j..]) {
        for (o, &x) in out.iter_mut().zip(slice(s)) {
            *o += wv * x;
        }
    }
}

/// `acc[j] += sum_i g[i] * inp[base + i + shift[j]]`.
fn correlate_taps<T: Real>(acc: &mut [T], g: &[T], inp: &[T], base: usize, shifts: &[isize]) {
    const L: usize = 8;
    let n = g.len();
    for (a, &s) in acc.iter_mut().zip(shifts) {
        let at = (base as isize + s) as usize;
        let x = &inp[at..at + n];
        let mut lanes = [T::default(); L];
        let mut gc = g.chunks_exact(L);
        let mut xc = x.chunks_exact(L);
        for (gk, xk) in (&mut gc).zip(&mut xc) {
            for l in 0..L {
                lanes[l] += gk[l] * xk[l];
            }
        }
        let mut total = T::default();
        for (&gv, &xv) in gc.remainder().iter().zip(xc.remainder()) {
            total += gv * xv;
        }
        for l in lanes {
            total += l;
        }
        *a += total;
    }
}

/// Same-padded convolution. Weights are `[cout][cin][k^3]`.
pub fn conv_forward<T: Real>(input: &Tensor<T>, w: &[T], b: &[T], cout: usize, k: usize) -> Tensor<T> {
    let cin = input.channels;
    let kk = k * k * k;
    debug_assert_eq!(w.len(), cout * cin * kk);
    let grid = input.grid;
    let shifts = grid.taps(k);
    let (start, end) = grid.interior();
    let mut out = Tensor::zeros(cout, grid.dims);
    for co in 0..cout {
        let o = &mut out.channel_mut(co)[start..end];
        o.fill(b[co]);
        for ci in 0..cin {
            let wk = &w[(co * cin + ci) * kk..][..kk];
            accumulate_taps(o, input.channel(ci), start, &shifts, wk);
        }
    }
    out.zero_borders();
    out
}

/// Gradients of a convolution: returns `dL/dinput` and accumulates weight
/// and bias gradients. `gout` must have zero borders.
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    gout: &Tensor<T>,
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    k: usize,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let cin = input.channels;
    let cout = gout.channels;
    let kk = k * k * k;
    let grid = input.grid;
    let shifts = grid.taps(k);
    let flipped: Vec<isize> = shifts.iter().map(|s| -s).collect();
    let (start, end) = grid.interior();

    for co in 0..cout {
        let g = &gout.channel(co)[start..end];
        let mut sum = T::default();
        for &v in g {
            sum += v;
        }
        gb[co] += sum;
        for ci in 0..cin {
            let acc = &mut gw[(co * cin + ci) * kk..][..kk];
            correlate_taps(acc, g, input.channel(ci), start, &shifts);
        }
    }

    if !need_input_grad {
        return None;
    }
    let mut gin = Tensor::zeros(cin, grid.dims);
    let mut wt = vec![T::default(); kk];
    for ci in 0..cin {
        let o = &mut gin.channel_mut(ci)[start..end];
        for co in 0..cout {
            wt.copy_from_slice(&w[(co * cin + ci) * kk..][..kk]);
            accumulate_taps(o, gout.channel(co), start, &flipped, &wt);
        }
    }
    gin.zero_borders();
    Some(gin)
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Real>(mut t: Tensor<T>) -> Tensor<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    let zero = T::default();
    for v in &mut t.data {
        if *v < zero {
            *v = *v * slope;
        }
    }
    t
}

/// Backprop through leaky ReLU given its output (sign matches the input).
pub fn leaky_relu_backward<T: Real>(output: &Tensor<T>, mut g: Tensor<T>) -> Tensor<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    let zero = T::default();
    for (gv, &y) in g.data.iter_mut().zip(&output.data) {
        if y < zero {
            *gv = *gv * slope;
        }
    }
    g
}

/// 2x2x2 average pooling; input dims must be even.
pub fn avg_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [nx, ny, nz] = input.dims();
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(input.channels, od);
    let eighth = T::from_f64(0.125);
    let (gi, go) = (input.grid, out.grid);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let mut s = T::default();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let r = gi.at(2 * x, 2 * y + dy, 2 * z + dz);
                            s += src[r] + src[r + 1];
                        }
                    }
                    dst[go.at(x, y, z)] = s * eighth;
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(gout: &Tensor<T>, input_dims: Dims) -> Tensor<T> {
    let mut gin = Tensor::zeros(gout.channels, input_dims);
    let eighth = T::from_f64(0.125);
    let (gi, go) = (gin.grid, gout.grid);
    let od = gout.dims();
    for c in 0..gout.channels {
        let src = gout.channel(c);
        let dst = gin.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let v = src[go.at(x, y, z)] * eighth;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let r = gi.at(2 * x, 2 * y + dy, 2 * z + dz);
                            dst[r] = v;
                            dst[r + 1] = v;
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [nx, ny, nz] = input.dims();
    let od = [2 * nx, 2 * ny, 2 * nz];
    let mut out = Tensor::zeros(input.channels, od);
    let (gi, go) = (input.grid, out.grid);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                let row = go.at(0, y, z);
                for x in 0..od[0] {
                    dst[row + x] = src[gi.at(x / 2, y / 2, z / 2)];
                }
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(gout: &Tensor<T>) -> Tensor<T> {
    let [nx, ny, nz] = gout.dims();
    let id = [nx / 2, ny / 2, nz / 2];
    let mut gin = Tensor::zeros(gout.channels, id);
    let (gi, go) = (gin.grid, gout.grid);
    for c in 0..gout.channels {
        let src = gout.channel(c);
        let dst = gin.channel_mut(c);
        for z in 0..nz {
            for y in 0..ny {
                let row = go.at(0, y, z);
                for x in 0..nx {
                    dst[gi.at(x / 2, y / 2, z / 2)] += src[row + x];
                }
            }
        }
    }
    gin
}

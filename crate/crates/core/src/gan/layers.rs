//! Layer primitives over channels-last `[batch, time, channels]` buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::real::{matmul, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); len],
        }
    }

    /// Glorot-uniform initialization with the given fans.
    pub fn glorot<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: (0..len)
                .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}

/// Zero-filled gradient buffers matching `params`.
pub fn zero_grads<T: Real>(params: &[Param<T>]) -> Vec<Vec<T>> {
    params
        .iter()
        .map(|p| vec![T::zero(); p.data.len()])
        .collect()
}

/// Strided 1-D convolution geometry: output position `o` reads input
/// positions `o·stride + j − pad` for `j` in `0..kernel`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.kernel * self.channels
    }

    fn source(&self, o: usize, j: usize) -> Option<usize> {
        let pos = (o * self.stride + j) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.len_in).then_some(pos as usize)
    }
}

/// `[batch, len_in, C] → [batch·len_out, kernel·C]` patch matrix.
pub fn im2col<T: Real>(src: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.channels;
    let mut cols = vec![T::zero(); g.batch * g.len_out * g.cols()];
    for b in 0..g.batch {
        for o in 0..g.len_out {
            let row = (b * g.len_out + o) * g.cols();
            for j in 0..g.kernel {
                if let Some(pos) = g.source(o, j) {
                    let from = (b * g.len_in + pos) * c;
                    cols[row + j * c..row + (j + 1) * c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patches back into `[batch, len_in, C]`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.channels;
    let mut dst = vec![T::zero(); g.batch * g.len_in * c];
    for b in 0..g.batch {
        for o in 0..g.len_out {
            let row = (b * g.len_out + o) * g.cols();
            for j in 0..g.kernel {
                if let Some(pos) = g.source(o, j) {
                    let to = (b * g.len_in + pos) * c;
                    for (d, s) in dst[to..to + c]
                        .iter_mut()
                        .zip(&cols[row + j * c..row + (j + 1) * c])
                    {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
    dst
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o = *o + *b;
        }
    }
}

fn bias_grad<T: Real>(g: &[T], gb: &mut [T]) {
    for row in g.chunks(gb.len()) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc = *acc + *v;
        }
    }
}

/// Dense layer: `x [n, fan_in] · w [fan_in, fan_out] + b`.
pub fn dense_forward<T: Real>(x: &[T], n: usize, w: &Param<T>, b: Option<&Param<T>>) -> Vec<T> {
    let (fan_in, fan_out) = (w.shape[0], w.shape[1]);
    let mut out = vec![T::zero(); n * fan_out];
    matmul(
        n, fan_in, fan_out, x, false, &w.data, false, &mut out, false,
    );
    if let Some(b) = b {
        add_bias(&mut out, &b.data);
    }
    out
}

/// Accumulates weight (and optionally bias) gradients; returns `∂/∂x` if asked.
pub fn dense_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &Param<T>,
    g: &[T],
    grads: Option<(&mut [T], Option<&mut [T]>)>,
    want_input: bool,
) -> Option<Vec<T>> {
    let (fan_in, fan_out) = (w.shape[0], w.shape[1]);
    if let Some((gw, gb)) = grads {
        matmul(fan_in, n, fan_out, x, true, g, false, gw, true);
        if let Some(gb) = gb {
            bias_grad(g, gb);
        }
    }
    want_input.then(|| {
        let mut gx = vec![T::zero(); n * fan_in];
        matmul(n, fan_out, fan_in, g, false, &w.data, true, &mut gx, false);
        gx
    })
}

/// Strided convolution. `w` is `[kernel·C_in, C_out]`. Returns the output and
/// the patch matrix reused by the backward pass.
pub fn conv1d_forward<T: Real>(
    x: &[T],
    geom: &ConvGeom,
    w: &Param<T>,
    b: Option<&Param<T>>,
) -> (Vec<T>, Vec<T>) {
    let c_out = w.shape[1];
    let cols = im2col(x, geom);
    let rows = geom.batch * geom.len_out;
    let mut out = vec![T::zero(); rows * c_out];
    matmul(
        rows,
        geom.cols(),
        c_out,
        &cols,
        false,
        &w.data,
        false,
        &mut out,
        false,
    );
    if let Some(b) = b {
        add_bias(&mut out, &b.data);
    }
    (out, cols)
}

pub fn conv1d_backward<T: Real>(
    cols: &[T],
    geom: &ConvGeom,
    w: &Param<T>,
    g: &[T],
    grads: Option<(&mut [T], Option<&mut [T]>)>,
    want_input: bool,
) -> Option<Vec<T>> {
    let c_out = w.shape[1];
    let rows = geom.batch * geom.len_out;
    if let Some((gw, gb)) = grads {
        matmul(geom.cols(), rows, c_out, cols, true, g, false, gw, true);
        if let Some(gb) = gb {
            bias_grad(g, gb);
        }
    }
    want_input.then(|| {
        let mut gcols = vec![T::zero(); rows * geom.cols()];
        matmul(
            rows,
            c_out,
            geom.cols(),
            g,
            false,
            &w.data,
            true,
            &mut gcols,
            false,
        );
        col2im(&gcols, geom)
    })
}

/// Geometry of the transposed convolution that upsamples `len_in` steps by
/// `stride`, expressed as the forward convolution it is the adjoint of.
pub fn transposed_geom(
    batch: usize,
    len_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
) -> ConvGeom {
    ConvGeom {
        batch,
        len_in: len_in * stride,
        len_out: len_in,
        channels: c_out,
        kernel,
        stride,
        pad: same_pad(kernel, stride),
    }
}

/// Left padding of a "same" strided convolution.
pub fn same_pad(kernel: usize, stride: usize) -> usize {
    kernel.saturating_sub(stride) / 2
}

/// Transposed convolution, `w` is `[C_in, kernel·C_out]`; `geom` comes from
/// [`transposed_geom`].
pub fn conv_transpose1d_forward<T: Real>(
    x: &[T],
    geom: &ConvGeom,
    w: &Param<T>,
    b: Option<&Param<T>>,
) -> Vec<T> {
    let c_in = w.shape[0];
    let rows = geom.batch * geom.len_out;
    let mut cols = vec![T::zero(); rows * geom.cols()];
    matmul(
        rows,
        c_in,
        geom.cols(),
        x,
        false,
        &w.data,
        false,
        &mut cols,
        false,
    );
    let mut out = col2im(&cols, geom);
    if let Some(b) = b {
        add_bias(&mut out, &b.data);
    }
    out
}

pub fn conv_transpose1d_backward<T: Real>(
    x: &[T],
    geom: &ConvGeom,
    w: &Param<T>,
    g: &[T],
    grads: Option<(&mut [T], Option<&mut [T]>)>,
    want_input: bool,
) -> Option<Vec<T>> {
    let c_in = w.shape[0];
    let rows = geom.batch * geom.len_out;
    let gcols = im2col(g, geom);
    if let Some((gw, gb)) = grads {
        matmul(c_in, rows, geom.cols(), x, true, &gcols, false, gw, true);
        if let Some(gb) = gb {
            bias_grad(g, gb);
        }
    }
    want_input.then(|| {
        let mut gx = vec![T::zero(); rows * c_in];
        matmul(
            rows,
            geom.cols(),
            c_in,
            &gcols,
            false,
            &w.data,
            true,
            &mut gx,
            false,
        );
        gx
    })
}

/// Reflection index for a shift of `shift` steps: `t − shift` mirrored at the
/// boundaries without repeating the edge sample.
fn reflect(t: usize, shift: i32, len: usize) -> usize {
    let idx = t as i64 - shift as i64;
    let last = len as i64 - 1;
    let r = if idx < 0 {
        -idx
    } else if idx > last {
        2 * last - idx
    } else {
        idx
    };
    r.clamp(0, last) as usize
}

/// One shift per example, uniform over `[−n, n]`.
pub fn draw_shifts<R: Rng + ?Sized>(batch: usize, n: usize, rng: &mut R) -> Vec<i32> {
    let n = n as i32;
    (0..batch)
        .map(|_| if n == 0 { 0 } else { rng.random_range(-n..=n) })
        .collect()
}

/// Shifts every example's feature map in time by its own integer offset,
/// filling the vacated edge with a reflection of the signal.
pub fn phase_shuffle_apply<T: Real>(
    x: &[T],
    len: usize,
    channels: usize,
    shifts: &[i32],
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (b, &s) in shifts.iter().enumerate() {
        let base = b * len * channels;
        if s == 0 {
            out[base..base + len * channels].copy_from_slice(&x[base..base + len * channels]);
            continue;
        }
        for t in 0..len {
            let src = base + reflect(t, s, len) * channels;
            let dst = base + t * channels;
            out[dst..dst + channels].copy_from_slice(&x[src..src + channels]);
        }
    }
    out
}

pub fn phase_shuffle_backward<T: Real>(
    g: &[T],
    len: usize,
    channels: usize,
    shifts: &[i32],
) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    for (b, &s) in shifts.iter().enumerate() {
        let base = b * len * channels;
        for t in 0..len {
            let src = base + reflect(t, s, len) * channels;
            let dst = base + t * channels;
            for c in 0..channels {
                out[src + c] = out[src + c] + g[dst + c];
            }
        }
    }
    out
}

/// Random phase shuffle of `[batch, len, channels]` activations with radius `n`.
pub fn phase_shuffle<T: Real, R: Rng + ?Sized>(
    x: &[T],
    batch: usize,
    len: usize,
    channels: usize,
    n: usize,
    rng: &mut R,
) -> Vec<T> {
    let shifts = draw_shifts(batch, n, rng);
    phase_shuffle_apply(x, len, channels, &shifts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let g = ConvGeom {
            batch: 2,
            len_in: 64,
            len_out: 16,
            channels: 3,
            kernel: 25,
            stride: 4,
            pad: same_pad(25, 4),
        };
        let x = rand_vec(&mut r, 2 * 64 * 3);
        let y = rand_vec(&mut r, 2 * 16 * 25 * 3);
        let lhs = dot(&im2col(&x, &g), &y);
        let rhs = dot(&x, &col2im(&y, &g));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (b, lin, cin, cout, k, s) = (2, 32, 3, 4, 25, 4);
        let geom = ConvGeom {
            batch: b,
            len_in: lin,
            len_out: lin / s,
            channels: cin,
            kernel: k,
            stride: s,
            pad: same_pad(k, s),
        };
        let x = rand_vec(&mut r, b * lin * cin);
        let w = Param {
            name: "w".into(),
            shape: vec![k * cin, cout],
            data: rand_vec(&mut r, k * cin * cout),
        };
        let (out, _) = conv1d_forward(&x, &geom, &w, None);
        for bi in 0..b {
            for o in 0..lin / s {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let pos = (o * s + j) as isize - 10;
                        if pos < 0 || pos >= lin as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[(bi * lin + pos as usize) * cin + ci]
                                * w.data[(j * cin + ci) * cout + co];
                        }
                    }
                    assert!((out[(bi * (lin / s) + o) * cout + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // with shared weights laid out consistently, <convT(x), y> = <x, conv(y)>
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (b, lin, cin, cout, k, s) = (2, 8, 3, 2, 25, 4);
        let geom = transposed_geom(b, lin, cout, k, s);
        let wt = Param {
            name: "wt".into(),
            shape: vec![cin, k * cout],
            data: rand_vec(&mut r, cin * k * cout),
        };
        // conv weight [k·cout, cin] is the transpose of wt
        let mut wc = Param::zeros("wc", vec![k * cout, cin]);
        for ci in 0..cin {
            for kc in 0..k * cout {
                wc.data[kc * cin + ci] = wt.data[ci * k * cout + kc];
            }
        }
        let x = rand_vec(&mut r, b * lin * cin);
        let y = rand_vec(&mut r, b * lin * s * cout);
        let up = conv_transpose1d_forward(&x, &geom, &wt, None);
        let (down, _) = conv1d_forward(&y, &geom, &wc, None);
        assert!((dot(&up, &y) - dot(&x, &down)).abs() < 1e-10);
    }

    #[test]
    fn phase_shuffle_radius_zero_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut r, 3 * 20 * 2);
        assert_eq!(phase_shuffle(&x, 3, 20, 2, 0, &mut r), x);
    }

    #[test]
    fn phase_shuffle_is_a_reflected_shift() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (batch, len, ch, n) = (6, 30, 2, 2);
        let x = rand_vec(&mut r, batch * len * ch);
        for _ in 0..20 {
            let shifts = draw_shifts(batch, n, &mut r);
            let y = phase_shuffle_apply(&x, len, ch, &shifts);
            for (b, &k) in shifts.iter().enumerate() {
                assert!((-2..=2).contains(&k));
                let map = |v: &[f64], t: usize, c: usize| v[(b * len + t) * ch + c];
                // interior samples are an exact shift
                for t in 0..len {
                    let src = t as i32 - k;
                    if (0..len as i32).contains(&src) {
                        for c in 0..ch {
                            assert_eq!(map(&y, t, c), map(&x, src as usize, c));
                        }
                    }
                }
                // the shifted map holds the original content except at most 2n edge samples
                for c in 0..ch {
                    let mut orig: Vec<f64> = (0..len).map(|t| map(&x, t, c)).collect();
                    let shifted: Vec<f64> = (0..len).map(|t| map(&y, t, c)).collect();
                    let mut missing = 0;
                    for v in &shifted {
                        if let Some(p) = orig.iter().position(|o| o == v) {
                            orig.swap_remove(p);
                        } else {
                            missing += 1;
                        }
                    }
                    assert!(orig.len() <= 2 * n && missing <= 2 * n);
                }
            }
        }
    }

    #[test]
    fn phase_shuffle_backward_is_adjoint() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (batch, len, ch) = (4, 16, 3);
        let x = rand_vec(&mut r, batch * len * ch);
        let g = rand_vec(&mut r, batch * len * ch);
        let shifts = vec![-2, -1, 1, 2];
        let lhs = dot(&phase_shuffle_apply(&x, len, ch, &shifts), &g);
        let rhs = dot(&x, &phase_shuffle_backward(&g, len, ch, &shifts));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

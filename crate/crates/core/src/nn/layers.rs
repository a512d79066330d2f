//! Dense and one-dimensional convolution layers with hand-written backward
//! passes.
//!
//! Activations of a convolution are `[channels, length]` row-major, which is
//! the same memory as a column-major `length × channels` matrix. Both
//! directions of the convolution are expressed through `im2col`/`col2im` and
//! one matrix product so they share the same padding rules.
//!
//! Length conventions with kernel size `K` (odd) and padding `(K − 1)/2` on
//! both sides:
//!
//! * strided convolution, stride `s`: `L_out = ceil(L_in / s)`;
//! * transposed convolution, stride `s`: `L_out = s·L_in`, defined as the
//!   exact adjoint of the strided convolution from length `s·L_in`.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;

use super::params::{Gradients, Init, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Fully connected layer `y = W·x + b` with `W` stored `[n_out, n_in]`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        weight_init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[n_out, n_in], weight_init, rng);
        let b = store.add(&format!("{name}.b"), &[n_out], Init::Zeros, rng);
        Self { w, b, n_in, n_out }
    }

    /// He-style initialisation for a layer followed by ReLU.
    pub fn relu_init(n_in: usize) -> Init {
        Init::Scaled {
            fan_in: n_in,
            gain: std::f64::consts::SQRT_2,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in {
            return Err(Error::shape(format!("dense layer expects {} inputs, got {}", self.n_in, x.len())));
        }
        let w = store.get(self.w);
        let b = store.get(self.b);
        Ok((0..self.n_out)
            .map(|o| {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect())
    }

    /// Accumulates parameter gradients and returns ∂L/∂x.
    pub fn backward(&self, store: &ParamStore, grads: &mut Gradients, x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in || dy.len() != self.n_out {
            return Err(Error::shape("dense backward shape mismatch"));
        }
        let w = store.get(self.w);
        let mut dx = vec![0.0; self.n_in];
        {
            let gw = grads.get_mut(self.w);
            for o in 0..self.n_out {
                let g = dy[o];
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                let grow = &mut gw[o * self.n_in..(o + 1) * self.n_in];
                for i in 0..self.n_in {
                    grow[i] += g * x[i];
                    dx[i] += g * row[i];
                }
            }
        }
        let gb = grads.get_mut(self.b);
        for (g, d) in gb.iter_mut().zip(dy) {
            *g += d;
        }
        Ok(dx)
    }
}

/// `col[j, c·K + k] = x[c][j·s + k − pad]` (zero outside the signal).
fn im2col(x: &[f64], channels: usize, len_in: usize, k: usize, stride: usize, len_out: usize) -> DMatrix<f64> {
    let pad = (k - 1) / 2;
    let mut col = DMatrix::zeros(len_out, channels * k);
    let buf = col.as_mut_slice();
    for c in 0..channels {
        let xc = &x[c * len_in..(c + 1) * len_in];
        for t in 0..k {
            let start = (c * k + t) * len_out;
            let dst = &mut buf[start..start + len_out];
            for (j, d) in dst.iter_mut().enumerate() {
                let pos = (j * stride + t) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len_in {
                    *d = xc[pos as usize];
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `col` back onto a `[channels, len]` array.
fn col2im(col: &DMatrix<f64>, channels: usize, len: usize, k: usize, stride: usize, out: &mut [f64]) {
    let pad = (k - 1) / 2;
    let rows = col.nrows();
    let buf = col.as_slice();
    for c in 0..channels {
        let oc = &mut out[c * len..(c + 1) * len];
        for t in 0..k {
            let src = &buf[(c * k + t) * rows..(c * k + t + 1) * rows];
            for (j, &v) in src.iter().enumerate() {
                let pos = (j * stride + t) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    oc[pos as usize] += v;
                }
            }
        }
    }
}

/// One-dimensional convolution or transposed convolution.
///
/// Weights are stored `[c_out, c_in, K]` for a convolution and
/// `[c_in, c_out, K]` for a transposed convolution, so that a transposed
/// layer and a convolution with the same weight tensor are adjoint.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        transposed: bool,
        weight_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        assert!(stride >= 1);
        let shape = if transposed {
            [c_in, c_out, kernel]
        } else {
            [c_out, c_in, kernel]
        };
        let w = store.add(&format!("{name}.w"), &shape, weight_init, rng);
        let b = store.add(&format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
            transposed,
        }
    }

    /// He-style initialisation for a layer followed by ReLU.
    pub fn relu_init(c_in: usize, kernel: usize, stride: usize, transposed: bool) -> Init {
        // A transposed stride-s layer sees about K/s taps per output.
        let fan_in = if transposed {
            (c_in * kernel).div_ceil(stride)
        } else {
            c_in * kernel
        };
        Init::Scaled {
            fan_in,
            gain: std::f64::consts::SQRT_2,
        }
    }

    pub fn out_len(&self, len_in: usize) -> usize {
        if self.transposed {
            len_in * self.stride
        } else {
            len_in.div_ceil(self.stride)
        }
    }

    fn check(&self, x: &[f64], len_in: usize) -> Result<()> {
        if x.len() != self.c_in * len_in {
            return Err(Error::shape(format!(
                "convolution expects {} channels of length {len_in} ({} values), got {}",
                self.c_in,
                self.c_in * len_in,
                x.len()
            )));
        }
        Ok(())
    }

    /// Forward pass on a `[c_in, len_in]` input; returns `[c_out, out_len]`.
    pub fn forward(&self, store: &ParamStore, x: &[f64], len_in: usize) -> Result<Vec<f64>> {
        self.check(x, len_in)?;
        let (k, s) = (self.kernel, self.stride);
        let len_out = self.out_len(len_in);
        let w = store.get(self.w);
        let b = store.get(self.b);
        let mut out = if self.transposed {
            let wm = DMatrixView::from_slice(w, self.c_out * k, self.c_in);
            let xm = DMatrixView::from_slice(x, len_in, self.c_in);
            let dcol = xm * wm.transpose();
            let mut out = vec![0.0; self.c_out * len_out];
            col2im(&dcol, self.c_out, len_out, k, s, &mut out);
            out
        } else {
            let wm = DMatrixView::from_slice(w, self.c_in * k, self.c_out);
            let col = im2col(x, self.c_in, len_in, k, s, len_out);
            let y = col * wm;
            y.data.into()
        };
        for (o, &bo) in b.iter().enumerate() {
            out[o * len_out..(o + 1) * len_out].iter_mut().for_each(|v| *v += bo);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns ∂L/∂x for the input `x`
    /// that produced an output with gradient `dy`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Gradients,
        x: &[f64],
        len_in: usize,
        dy: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(x, len_in)?;
        let (k, s) = (self.kernel, self.stride);
        let len_out = self.out_len(len_in);
        if dy.len() != self.c_out * len_out {
            return Err(Error::shape("convolution backward: output gradient has the wrong size"));
        }
        let w = store.get(self.w);
        {
            let gb = grads.get_mut(self.b);
            for (o, g) in gb.iter_mut().enumerate() {
                *g += dy[o * len_out..(o + 1) * len_out].iter().sum::<f64>();
            }
        }
        let xm = DMatrixView::from_slice(x, len_in, self.c_in);
        if self.transposed {
            let wm = DMatrixView::from_slice(w, self.c_out * k, self.c_in);
            // forward was col2im(x·Wᵀ); its adjoint is im2col followed by ·W
            let col = im2col(dy, self.c_out, len_out, k, s, len_in);
            let gw = col.transpose() * xm;
            add_into(grads.get_mut(self.w), gw.as_slice());
            let dx = col * wm;
            Ok(dx.data.into())
        } else {
            let wm = DMatrixView::from_slice(w, self.c_in * k, self.c_out);
            let dym = DMatrixView::from_slice(dy, len_out, self.c_out);
            let col = im2col(x, self.c_in, len_in, k, s, len_out);
            let gw = col.transpose() * dym;
            add_into(grads.get_mut(self.w), gw.as_slice());
            let dcol = dym * wm.transpose();
            let mut dx = vec![0.0; self.c_in * len_in];
            col2im(&dcol, self.c_in, len_in, k, s, &mut dx);
            Ok(dx)
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 3, 3, Init::Zeros, &mut rng);
        for i in 0..3 {
            store.get_mut(d.w)[i * 3 + i] = 1.0;
        }
        assert_eq!(d.forward(&store, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        store.get_mut(d.b).copy_from_slice(&[0.1, 0.2, 0.3]);
        assert_eq!(d.forward(&store, &[0.0; 3]).unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(d.forward(&store, &[0.0; 2]).is_err());
    }

    #[test]
    fn dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 3, 4, Init::Scaled { fan_in: 3, gain: 1.0 }, &mut rng);
        store.get_mut(d.b).iter_mut().for_each(|v| *v = 0.3);
        let x = rand_vec(&mut rng, 3);
        let c = rand_vec(&mut rng, 4);
        let loss = |s: &ParamStore| -> f64 {
            let y = d.forward(s, &x).unwrap();
            y.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * 0.5 + y[0].powi(3)
        };
        let mut grads = store.zero_grads();
        let y = d.forward(&store, &x).unwrap();
        let mut dy: Vec<f64> = y.iter().zip(&c).map(|(a, b)| a - b).collect();
        dy[0] += 3.0 * y[0] * y[0];
        d.backward(&store, &mut grads, &x, &dy).unwrap();
        let report = grad_check(&mut store, &grads, loss, &GradCheckOptions::default());
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 1, 1, 5, 1, false, Init::Zeros, &mut rng);
        store.get_mut(conv.w)[2] = 1.0;
        let x = rand_vec(&mut rng, 11);
        assert_eq!(conv.forward(&store, &x, 11).unwrap(), x);
    }

    #[test]
    fn output_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let down = Conv1d::new(&mut store, "d", 2, 3, 5, 2, false, Init::Zeros, &mut rng);
        let up = Conv1d::new(&mut store, "u", 3, 2, 5, 2, true, Init::Zeros, &mut rng);
        assert_eq!(down.out_len(9), 5);
        assert_eq!(down.out_len(8), 4);
        assert_eq!(up.out_len(4), 8);
        assert_eq!(down.forward(&store, &[0.0; 18], 9).unwrap().len(), 15);
        assert_eq!(up.forward(&store, &[0.0; 12], 4).unwrap().len(), 16);
    }

    #[test]
    fn transposed_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, len_big) in [(2usize, 14usize), (1, 9), (2, 16)] {
            let mut store = ParamStore::new();
            let init = || Init::Scaled { fan_in: 10, gain: 1.0 };
            let conv = Conv1d::new(&mut store, "c", 3, 4, 5, stride, false, init(), &mut rng);
            let tconv = Conv1d::new(&mut store, "t", 4, 3, 5, stride, true, Init::Zeros, &mut rng);
            let wc = store.get(conv.w).to_vec();
            store.get_mut(tconv.w).copy_from_slice(&wc);
            let len_small = conv.out_len(len_big);
            assert_eq!(tconv.out_len(len_small), len_big.div_ceil(stride) * stride);
            if tconv.out_len(len_small) != len_big {
                continue;
            }
            let x = rand_vec(&mut rng, 3 * len_big);
            let y = rand_vec(&mut rng, 4 * len_small);
            let cx = conv.forward(&store, &x, len_big).unwrap();
            let ty = tconv.forward(&store, &y, len_small).unwrap();
            let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride}: {lhs} vs {rhs}");
        }
    }

    fn conv_grad_case(stride: usize, transposed: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(
            &mut store,
            "c",
            3,
            2,
            5,
            stride,
            transposed,
            Init::Scaled { fan_in: 15, gain: 1.0 },
            &mut rng,
        );
        store.get_mut(conv.b).copy_from_slice(&[0.2, -0.1]);
        let len = 7;
        let x = rand_vec(&mut rng, 3 * len);
        let c = rand_vec(&mut rng, 2 * conv.out_len(len));
        let loss = |s: &ParamStore| -> f64 {
            let y = conv.forward(s, &x, len).unwrap();
            y.iter().zip(&c).map(|(a, b)| a * b + 0.3 * a * a).sum()
        };
        let y = conv.forward(&store, &x, len).unwrap();
        let dy: Vec<f64> = y.iter().zip(&c).map(|(a, b)| b + 0.6 * a).collect();
        let mut grads = store.zero_grads();
        let dx = conv.backward(&store, &mut grads, &x, len, &dy).unwrap();
        let report = grad_check(&mut store, &grads, loss, &GradCheckOptions::default());
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        // input gradient by central differences
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let f = |xx: &[f64]| -> f64 {
                let y = conv.forward(&store, xx, len).unwrap();
                y.iter().zip(&c).map(|(a, b)| a * b + 0.3 * a * a).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-6 * fd.abs().max(dx[i].abs()).max(1e-3));
        }
    }

    #[test]
    fn conv_gradients() {
        conv_grad_case(1, false, 5);
        conv_grad_case(2, false, 6);
        conv_grad_case(1, true, 7);
        conv_grad_case(2, true, 8);
    }
}

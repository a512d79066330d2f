//! Forward and backward passes of the private ConvCNP.
//!
//! The pipeline for one task is: μ from the budget, `(t, C)` from the t/C
//! networks, private encoding on the grid, four input channels (density,
//! signal and two constant channels holding σ_d and σ_s), a UNet of strided
//! convolutions with skip concatenations, a final stride-1 transposed
//! convolution to two channels, and an unnormalised RBF smoother from the
//! grid to each target giving a mean and a log standard deviation.
//!
//! The GP noise fields are treated as constants when differentiating with
//! respect to λ; gradients do flow through their magnitudes σ_d and σ_s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TcMode};
use crate::accounting::{mu_from_budget, noise_scales_for_mu, PrivacyBudget};
use crate::dpsetconv::{
    clip, encode_with_noise, node_range, ContextSet, EncodeMode, EncodeRequest, EncodedRepresentation, EncoderNoise,
    TRUNCATION,
};
use crate::error::{Error, Result};
use crate::gp::GaussianPrediction;
use crate::grid::{GridAxis, GridSpec};
use crate::nn::ops::{concat_channels, relu, relu_backward, sigmoid};
use crate::nn::{Conv1d, Dense, Gradients, Init, ParamId, ParamStore};

/// Unit-scale noise fields for the two channels, drawn density first.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub density: Vec<f64>,
    pub signal: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(noise: &EncoderNoise, rng: &mut R) -> Self {
        let density = noise.sample(rng);
        let signal = noise.sample(rng);
        Self { density, signal }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            density: vec![0.0; len],
            signal: vec![0.0; len],
        }
    }
}

/// Raw network output at the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub means: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl ModelOutput {
    pub fn to_gaussian(&self) -> GaussianPrediction {
        GaussianPrediction {
            means: self.means.clone(),
            variances: self.log_std.iter().map(|s| (2.0 * s).exp()).collect(),
        }
    }

    /// Mean Gaussian NLL and its gradients with respect to the means and
    /// log standard deviations.
    pub fn nll_with_grad(&self, ys: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        if ys.len() != self.means.len() {
            return Err(Error::shape(format!(
                "{} targets scored against {} predictions",
                ys.len(),
                self.means.len()
            )));
        }
        if ys.is_empty() {
            return Err(Error::domain("no targets to score"));
        }
        let inv_n = 1.0 / ys.len() as f64;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut loss = 0.0;
        let mut dm = Vec::with_capacity(ys.len());
        let mut ds = Vec::with_capacity(ys.len());
        for ((&y, &m), &s) in ys.iter().zip(&self.means).zip(&self.log_std) {
            let r = y - m;
            let prec = (-2.0 * s).exp();
            loss += half_ln_2pi + s + 0.5 * r * r * prec;
            dm.push(-r * prec * inv_n);
            ds.push((1.0 - r * r * prec) * inv_n);
        }
        Ok((loss * inv_n, dm, ds))
    }
}

/// Mean target NLL of a Gaussian prediction.
pub fn nll_loss(prediction: &GaussianPrediction, target_ys: &[f64]) -> Result<f64> {
    prediction.mean_nll(target_ys)
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        depth: usize,
        out_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut n_in = 2;
        for i in 0..depth {
            layers.push(Dense::new(store, &format!("{name}.{i}"), n_in, hidden, Dense::relu_init(n_in), rng));
            n_in = hidden;
        }
        let out = Dense::new(store, &format!("{name}.out"), n_in, 1, Init::Zeros, rng);
        store.get_mut(out.b)[0] = out_bias;
        layers.push(out);
        Self { layers }
    }

    fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<(f64, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
        };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(store, &h)?;
            cache.inputs.push(std::mem::take(&mut h));
            if i < last {
                h = relu(&z);
                cache.pre.push(z);
            } else {
                return Ok((z[0], cache));
            }
        }
        unreachable!("an MLP has an output layer")
    }

    fn backward(&self, store: &ParamStore, grads: &mut Gradients, cache: &MlpCache, dout: f64) -> Result<()> {
        let last = self.layers.len() - 1;
        let mut dh = self.layers[last].backward(store, grads, &cache.inputs[last], &[dout])?;
        for i in (0..last).rev() {
            let dz = relu_backward(&cache.pre[i], &dh);
            dh = self.layers[i].backward(store, grads, &cache.inputs[i], &dz)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct TcCache {
    t: MlpCache,
    c: MlpCache,
}

#[derive(Debug, Clone)]
struct Architecture {
    log_lambda: ParamId,
    log_lambda_dec: Option<ParamId>,
    tc: Option<(Mlp, Mlp)>,
    init_conv: Conv1d,
    down: Vec<Conv1d>,
    up: Vec<Conv1d>,
    final_conv: Conv1d,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mu: f64,
    pub t: f64,
    pub c: f64,
    pub sigma_d: f64,
    pub sigma_s: f64,
    pub lambda: f64,
    pub lambda_dec: f64,
    tc: Option<TcCache>,
    clip_at: f64,
    context: ContextSet,
    raw_ys: Vec<f64>,
    noise: NoiseDraw,
    x_in: Vec<f64>,
    skips: Vec<Vec<f64>>,
    down_pre: Vec<Vec<f64>>,
    up_in: Vec<Vec<f64>>,
    up_pre: Vec<Vec<f64>>,
    final_in: Vec<f64>,
    out: Vec<f64>,
    target_xs: Vec<f64>,
}

/// A private convolutional conditional neural process.
#[derive(Debug, Clone)]
pub struct DpConvCnp {
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub store: ParamStore,
    arch: Architecture,
}

impl DpConvCnp {
    /// Builds a freshly initialised model; `seed` drives the weight draw.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let grid = config.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let log_lambda = store.add("log_lambda", &[1], Init::Constant(config.lambda_init.ln()), &mut rng);
        let log_lambda_dec = config
            .separate_decoder_lengthscale
            .then(|| store.add("log_lambda_dec", &[1], Init::Constant(config.lambda_init.ln()), &mut rng));
        let tc = match config.tc {
            TcMode::Learned => Some((
                Mlp::new(&mut store, "tnet", config.tc_hidden, config.tc_depth, 0.0, &mut rng),
                Mlp::new(&mut store, "cnet", config.tc_hidden, config.tc_depth, config.c_bias_init, &mut rng),
            )),
            TcMode::Fixed { .. } => None,
        };
        let k = config.kernel;
        let w = config.width;
        let init_conv = Conv1d::new(
            &mut store,
            "init",
            4,
            config.c_in,
            k,
            1,
            false,
            Init::Scaled { fan_in: 4 * k, gain: 1.0 },
            &mut rng,
        );
        let mut down = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let c_in = if i == 0 { config.c_in } else { w };
            down.push(Conv1d::new(
                &mut store,
                &format!("down{i}"),
                c_in,
                w,
                k,
                2,
                false,
                Conv1d::relu_init(c_in, k, 2, false),
                &mut rng,
            ));
        }
        let mut up = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let c_in = if i + 1 == config.depth { w } else { 2 * w };
            up.push(Conv1d::new(
                &mut store,
                &format!("up{i}"),
                c_in,
                w,
                k,
                2,
                true,
                Conv1d::relu_init(c_in, k, 2, true),
                &mut rng,
            ));
        }
        let final_conv = Conv1d::new(&mut store, "final", w + config.c_in, 2, k, 1, true, Init::Zeros, &mut rng);
        Ok(Self {
            config,
            grid,
            store,
            arch: Architecture {
                log_lambda,
                log_lambda_dec,
                tc,
                init_conv,
                down,
                up,
                final_conv,
            },
        })
    }

    fn axis(&self) -> GridAxis {
        self.grid.axes[0]
    }

    pub fn lambda_in(&self, store: &ParamStore) -> f64 {
        store.get(self.arch.log_lambda)[0].exp()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_in(&self.store)
    }

    fn lambda_dec_in(&self, store: &ParamStore) -> f64 {
        match self.arch.log_lambda_dec {
            Some(id) => store.get(id)[0].exp(),
            None => self.lambda_in(store),
        }
    }

    /// Noise factors for the current encoder lengthscale.
    pub fn encoder_noise(&self) -> Result<EncoderNoise> {
        EncoderNoise::new(&self.grid, self.lambda())
    }

    /// Identifies the output layer so callers (tests, warm starts) can reach it.
    pub fn final_layer(&self) -> (ParamId, ParamId) {
        (self.arch.final_conv.w, self.arch.final_conv.b)
    }

    fn tc_forward(&self, store: &ParamStore, mu: f64, n: usize) -> Result<(f64, f64, Option<TcCache>)> {
        if !(mu > 0.0) {
            return Err(Error::domain(format!("mu must be > 0, got {mu}")));
        }
        match (&self.arch.tc, self.config.tc) {
            (Some((tnet, cnet)), _) => {
                let x = [mu, n as f64 / self.config.n_scale];
                let (a_t, t_cache) = tnet.forward(store, &x)?;
                let (a_c, c_cache) = cnet.forward(store, &x)?;
                let t = sigmoid(a_t);
                let c = a_c.exp();
                if !(t > 0.0 && t < 1.0) || !(c > 0.0 && c.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "t/C networks left their range (t = {t}, C = {c})"
                    )));
                }
                Ok((t, c, Some(TcCache { t: t_cache, c: c_cache })))
            }
            (None, TcMode::Fixed { t, c }) => Ok((t, c, None)),
            (None, TcMode::Learned) => unreachable!("learned mode always builds networks"),
        }
    }

    /// The noise split `t ∈ (0,1)` and clip threshold `C > 0` for a task
    /// with GDP parameter `mu` and `n` context points.
    pub fn tc_maps(&self, mu: f64, n: usize) -> Result<(f64, f64)> {
        let (t, c, _) = self.tc_forward(&self.store, mu, n)?;
        Ok((t, c))
    }

    /// Gradient of `d_t·t + d_c·C` with respect to the t/C network
    /// parameters (zero for fixed maps).
    pub fn tc_maps_grad(&self, store: &ParamStore, mu: f64, n: usize, d_t: f64, d_c: f64) -> Result<(f64, f64, Gradients)> {
        let (t, c, cache) = self.tc_forward(store, mu, n)?;
        let mut grads = store.zero_grads();
        if let (Some((tnet, cnet)), Some(tc)) = (&self.arch.tc, &cache) {
            tnet.backward(store, &mut grads, &tc.t, d_t * t * (1.0 - t))?;
            cnet.backward(store, &mut grads, &tc.c, d_c * c)?;
        }
        Ok((t, c, grads))
    }

    fn check_targets(&self, target_xs: &[f64]) -> Result<()> {
        let axis = self.axis();
        for &x in target_xs {
            if !(x >= axis.origin && x <= axis.last()) {
                return Err(Error::domain(format!(
                    "target {x} lies outside the grid window [{}, {}]",
                    axis.origin,
                    axis.last()
                )));
            }
        }
        Ok(())
    }

    fn resolve_scales(&self, mu: f64, t: f64, c: f64, mode: EncodeMode, budget: PrivacyBudget) -> Result<(f64, f64, f64)> {
        let flags = self.config.flags;
        EncodeRequest {
            budget,
            clip: c,
            t,
            mode,
            flags,
        }
        .validate()?;
        let clip_at = if flags.enable_clip { c } else { f64::INFINITY };
        if !flags.enable_density_noise && !flags.enable_signal_noise {
            return Ok((0.0, 0.0, clip_at));
        }
        let scales = noise_scales_for_mu(crate::accounting::GdpParam::new(mu)?, c, t)?;
        let sigma_d = if flags.enable_density_noise { scales.sigma_d } else { 0.0 };
        let sigma_s = if flags.enable_signal_noise { scales.sigma_s } else { 0.0 };
        if !sigma_d.is_finite() || !sigma_s.is_finite() {
            return Err(Error::domain("signal noise needs a finite clip threshold"));
        }
        Ok((sigma_d, sigma_s, clip_at))
    }

    /// The private representation the model would feed to its CNN.
    pub fn encode(
        &self,
        context: &ContextSet,
        budget: PrivacyBudget,
        mode: EncodeMode,
        noise: &NoiseDraw,
    ) -> Result<EncodedRepresentation> {
        let mu = mu_from_budget(&budget)?.value();
        let (t, c, _) = self.tc_forward(&self.store, mu, context.len())?;
        let (sigma_d, sigma_s, clip_at) = self.resolve_scales(mu, t, c, mode, budget)?;
        encode_with_noise(
            context,
            &self.grid,
            self.lambda(),
            clip_at,
            (sigma_d, sigma_s),
            (&noise.density, &noise.signal),
        )
    }

    /// Forward pass with parameters taken from `store` and supplied noise.
    pub fn forward_with_noise(
        &self,
        store: &ParamStore,
        context: &ContextSet,
        target_xs: &[f64],
        budget: PrivacyBudget,
        mode: EncodeMode,
        noise: &NoiseDraw,
    ) -> Result<(ModelOutput, ForwardCache)> {
        self.check_targets(target_xs)?;
        let mu = mu_from_budget(&budget)?.value();
        let (t, c, tc_cache) = self.tc_forward(store, mu, context.len())?;
        let (sigma_d, sigma_s, clip_at) = self.resolve_scales(mu, t, c, mode, budget)?;
        let lambda = self.lambda_in(store);
        let lambda_dec = self.lambda_dec_in(store);
        let rep = encode_with_noise(
            context,
            &self.grid,
            lambda,
            clip_at,
            (sigma_d, sigma_s),
            (&noise.density, &noise.signal),
        )?;

        let len0 = self.grid.len();
        let mut x_in = Vec::with_capacity(4 * len0);
        x_in.extend_from_slice(&rep.density);
        x_in.extend_from_slice(&rep.signal);
        x_in.extend(std::iter::repeat_n(sigma_d, len0));
        x_in.extend(std::iter::repeat_n(sigma_s, len0));

        let arch = &self.arch;
        let depth = self.config.depth;
        let a0 = arch.init_conv.forward(store, &x_in, len0)?;
        let mut skips = Vec::with_capacity(depth + 1);
        let mut down_pre = Vec::with_capacity(depth);
        skips.push(a0);
        let mut len = len0;
        for layer in &arch.down {
            let z = layer.forward(store, skips.last().unwrap(), len)?;
            len = layer.out_len(len);
            skips.push(relu(&z));
            down_pre.push(z);
        }
        let mut up_in = vec![Vec::new(); depth];
        let mut up_pre = vec![Vec::new(); depth];
        let mut h = skips[depth].clone();
        for i in (0..depth).rev() {
            let z = arch.up[i].forward(store, &h, len)?;
            len = arch.up[i].out_len(len);
            let u = relu(&z);
            up_in[i] = std::mem::take(&mut h);
            up_pre[i] = z;
            h = concat_channels(&u, &skips[i]);
        }
        debug_assert_eq!(len, len0);
        let final_in = h;
        let out = arch.final_conv.forward(store, &final_in, len0)?;

        let (means, log_std) = self.smooth(&out, lambda_dec, target_xs);
        let clipped = ContextSet {
            xs: context.xs.clone(),
            ys: context.ys.iter().map(|&y| clip(y, clip_at)).collect(),
        };
        Ok((
            ModelOutput { means, log_std },
            ForwardCache {
                mu,
                t,
                c,
                sigma_d,
                sigma_s,
                lambda,
                lambda_dec,
                tc: tc_cache,
                clip_at,
                context: clipped,
                raw_ys: context.ys.clone(),
                noise: noise.clone(),
                x_in,
                skips,
                down_pre,
                up_in,
                up_pre,
                final_in,
                out,
                target_xs: target_xs.to_vec(),
            },
        ))
    }

    fn smooth(&self, out: &[f64], lambda: f64, target_xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let axis = self.axis();
        let len = axis.count;
        let reach = TRUNCATION * lambda;
        let inv_l = 1.0 / lambda;
        let mut means = Vec::with_capacity(target_xs.len());
        let mut log_std = Vec::with_capacity(target_xs.len());
        for &x in target_xs {
            let (mut m, mut s) = (0.0, 0.0);
            if let Some((lo, hi)) = node_range(&axis, x, reach) {
                for j in lo..=hi {
                    let u = (x - axis.point(j)) * inv_l;
                    let w = (-0.5 * u * u).exp();
                    m += w * out[j];
                    s += w * out[len + j];
                }
            }
            means.push(m);
            log_std.push(s);
        }
        (means, log_std)
    }

    /// Gradients of a scalar loss given its derivatives with respect to
    /// the predicted means and log standard deviations.
    pub fn backward(&self, store: &ParamStore, cache: &ForwardCache, dmeans: &[f64], dlog_std: &[f64]) -> Result<Gradients> {
        if dmeans.len() != cache.target_xs.len() || dlog_std.len() != cache.target_xs.len() {
            return Err(Error::shape("output gradients do not match the targets"));
        }
        let mut grads = store.zero_grads();
        let axis = self.axis();
        let len0 = axis.count;
        let arch = &self.arch;
        let depth = self.config.depth;
        let width = self.config.width;

        // decoder smoother
        let mut d_out = vec![0.0; 2 * len0];
        let mut d_lambda_dec = 0.0;
        {
            let lambda = cache.lambda_dec;
            let reach = TRUNCATION * lambda;
            let inv_l = 1.0 / lambda;
            for ((&x, &dm), &ds) in cache.target_xs.iter().zip(dmeans).zip(dlog_std) {
                if let Some((lo, hi)) = node_range(&axis, x, reach) {
                    for j in lo..=hi {
                        let u = (x - axis.point(j)) * inv_l;
                        let w = (-0.5 * u * u).exp();
                        d_out[j] += dm * w;
                        d_out[len0 + j] += ds * w;
                        d_lambda_dec += (dm * cache.out[j] + ds * cache.out[len0 + j]) * w * u * u * inv_l;
                    }
                }
            }
        }

        // CNN
        let level_len = |i: usize| len0 >> i;
        let mut d_h = arch.final_conv.backward(store, &mut grads, &cache.final_in, len0, &d_out)?;
        let mut d_skips: Vec<Vec<f64>> = cache.skips.iter().map(|s| vec![0.0; s.len()]).collect();
        for i in 0..depth {
            // d_h is the gradient of concat(u_i, skip_i)
            let u_len = width * level_len(i);
            add_into(&mut d_skips[i], &d_h[u_len..]);
            let dz = relu_backward(&cache.up_pre[i], &d_h[..u_len]);
            let d_in = arch.up[i].backward(store, &mut grads, &cache.up_in[i], level_len(i + 1), &dz)?;
            if i + 1 == depth {
                add_into(&mut d_skips[depth], &d_in);
            } else {
                d_h = d_in;
            }
        }
        for i in (0..depth).rev() {
            let dz = relu_backward(&cache.down_pre[i], &d_skips[i + 1]);
            let d_in = arch.down[i].backward(store, &mut grads, &cache.skips[i], level_len(i), &dz)?;
            add_into(&mut d_skips[i], &d_in);
        }
        let d_x = arch.init_conv.backward(store, &mut grads, &cache.x_in, len0, &d_skips[0])?;

        // encoder
        let (d_dens, rest) = d_x.split_at(len0);
        let (d_sig, rest) = rest.split_at(len0);
        let (d_const_d, d_const_s) = rest.split_at(len0);
        let flags = self.config.flags;
        let mut d_sigma_d = 0.0;
        let mut d_sigma_s = 0.0;
        if flags.enable_density_noise {
            d_sigma_d = d_const_d.iter().sum::<f64>() + dot(d_dens, &cache.noise.density);
        }
        if flags.enable_signal_noise {
            d_sigma_s = d_const_s.iter().sum::<f64>() + dot(d_sig, &cache.noise.signal);
        }
        let mut d_lambda = 0.0;
        let mut d_c = 0.0;
        {
            let lambda = cache.lambda;
            let reach = TRUNCATION * lambda;
            let inv_l = 1.0 / lambda;
            let clipping = cache.clip_at.is_finite();
            for (n, (&x, &y)) in cache.context.xs.iter().zip(&cache.context.ys).enumerate() {
                let Some((lo, hi)) = node_range(&axis, x, reach) else {
                    continue;
                };
                let mut through_signal = 0.0;
                for j in lo..=hi {
                    let u = (axis.point(j) - x) * inv_l;
                    let w = (-0.5 * u * u).exp();
                    d_lambda += (d_dens[j] + y * d_sig[j]) * w * u * u * inv_l;
                    through_signal += d_sig[j] * w;
                }
                // clip(y, C) = ±C when |y| > C
                let raw = cache.raw_ys[n];
                if clipping && raw.abs() > cache.clip_at {
                    d_c += raw.signum() * through_signal;
                }
            }
        }
        match arch.log_lambda_dec {
            Some(id) => grads.get_mut(id)[0] += d_lambda_dec * cache.lambda_dec,
            None => d_lambda += d_lambda_dec,
        }
        grads.get_mut(arch.log_lambda)[0] += d_lambda * cache.lambda;

        if let (Some((tnet, cnet)), Some(tc)) = (&arch.tc, &cache.tc) {
            let (t, c) = (cache.t, cache.c);
            d_c += d_sigma_s * cache.sigma_s / c;
            let d_t = -d_sigma_s * cache.sigma_s / (2.0 * t) + d_sigma_d * cache.sigma_d / (2.0 * (1.0 - t));
            tnet.backward(store, &mut grads, &tc.t, d_t * t * (1.0 - t))?;
            cnet.backward(store, &mut grads, &tc.c, d_c * c)?;
        }
        Ok(grads)
    }

    /// Mean NLL on the task's targets and its gradient, for given noise.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        context: &ContextSet,
        target_xs: &[f64],
        target_ys: &[f64],
        budget: PrivacyBudget,
        mode: EncodeMode,
        noise: &NoiseDraw,
    ) -> Result<(f64, Gradients)> {
        let (out, cache) = self.forward_with_noise(store, context, target_xs, budget, mode, noise)?;
        let (loss, dm, ds) = out.nll_with_grad(target_ys)?;
        let grads = self.backward(store, &cache, &dm, &ds)?;
        Ok((loss, grads))
    }

    /// Mean NLL for given noise, without gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        store: &ParamStore,
        context: &ContextSet,
        target_xs: &[f64],
        target_ys: &[f64],
        budget: PrivacyBudget,
        mode: EncodeMode,
        noise: &NoiseDraw,
    ) -> Result<f64> {
        let (out, _) = self.forward_with_noise(store, context, target_xs, budget, mode, noise)?;
        Ok(out.nll_with_grad(target_ys)?.0)
    }

    /// Forward pass drawing fresh noise from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        context: &ContextSet,
        target_xs: &[f64],
        budget: PrivacyBudget,
        mode: EncodeMode,
        rng: &mut R,
    ) -> Result<GaussianPrediction> {
        let noise = NoiseDraw::sample(&self.encoder_noise()?, rng);
        let (out, _) = self.forward_with_noise(&self.store, context, target_xs, budget, mode, &noise)?;
        Ok(out.to_gaussian())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

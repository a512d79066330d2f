use serde::{Deserialize, Serialize};

use crate::dpsetconv::{EncodeMode, EncoderFlags};
use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// How the noise split `t` and clip threshold `C` are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TcMode {
    /// Small networks of `(μ, N/n_scale)`, trained with everything else.
    Learned,
    /// Constants; `c` may be infinite when clipping is disabled.
    Fixed {
        t: f64,
        #[serde(with = "crate::serial::extended_float")]
        c: f64,
    },
}

/// Architecture and mechanism settings of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Interval the grid must cover. The right end is extended so the
    /// number of nodes is a multiple of `2^depth`.
    pub window: (f64, f64),
    pub points_per_unit: usize,
    pub depth: usize,
    pub width: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub lambda_init: f64,
    /// Separate decoder lengthscale; when false the decoder reuses λ.
    pub separate_decoder_lengthscale: bool,
    pub tc_hidden: usize,
    pub tc_depth: usize,
    /// Context sizes are divided by this before entering the t/C networks.
    pub n_scale: f64,
    /// Initial bias of the C network output, so C starts at `exp(c_bias_init)`.
    pub c_bias_init: f64,
    pub tc: TcMode,
    pub flags: EncoderFlags,
    /// Mode used while training; meta-testing always uses deploy mode.
    pub train_mode: EncodeMode,
}

impl ModelConfig {
    /// Desk-scale preset: four levels of 32 channels at 16 points per unit.
    pub fn tiny() -> Self {
        Self {
            window: (-7.0, 7.0),
            points_per_unit: 16,
            depth: 4,
            width: 32,
            c_in: 32,
            kernel: 5,
            lambda_init: 0.2,
            separate_decoder_lengthscale: false,
            tc_hidden: 32,
            tc_depth: 2,
            n_scale: 512.0,
            c_bias_init: 0.0,
            tc: TcMode::Learned,
            flags: EncoderFlags::ALL,
            train_mode: EncodeMode::Train,
        }
    }

    /// Full-size preset: seven levels of 256 channels at 32 points per unit.
    pub fn paper_scale() -> Self {
        Self {
            points_per_unit: 32,
            depth: 7,
            width: 256,
            ..Self::tiny()
        }
    }

    /// Signal-noise-only ablation: no clipping, no density noise, fixed
    /// `C` and `t`.
    pub fn ablation(base: Self, t: f64, c: f64) -> Self {
        Self {
            tc: TcMode::Fixed { t, c },
            flags: EncoderFlags::SIGNAL_NOISE_ONLY,
            train_mode: EncodeMode::Ablation,
            ..base
        }
    }

    /// Plain ConvCNP: no clipping and no noise.
    pub fn non_private(base: Self) -> Self {
        Self {
            tc: TcMode::Fixed {
                t: 0.5,
                c: f64::INFINITY,
            },
            flags: EncoderFlags::NONE,
            train_mode: EncodeMode::Ablation,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.window;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::domain(format!("bad window [{lo}, {hi}]")));
        }
        for (name, v) in [
            ("points_per_unit", self.points_per_unit),
            ("depth", self.depth),
            ("width", self.width),
            ("c_in", self.c_in),
            ("tc_hidden", self.tc_hidden),
            ("tc_depth", self.tc_depth),
        ] {
            if v == 0 {
                return Err(Error::domain(format!("{name} must be positive")));
            }
        }
        if self.depth > 16 {
            return Err(Error::domain("depth above 16 is not supported"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::domain(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(self.lambda_init > 0.0) || !(self.n_scale > 0.0) || !self.c_bias_init.is_finite() {
            return Err(Error::domain("lambda_init and n_scale must be positive"));
        }
        if let TcMode::Fixed { t, c } = self.tc {
            if !(t > 0.0 && t < 1.0) || !(c > 0.0) {
                return Err(Error::domain(format!("fixed t must lie in (0,1) and C > 0, got t={t}, C={c}")));
            }
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.points_per_unit as f64
    }

    /// The discretisation grid: starts at the window's left end and has a
    /// multiple of `2^depth` nodes reaching at least its right end.
    pub fn grid(&self) -> Result<GridSpec> {
        self.validate()?;
        let (lo, hi) = self.window;
        let needed = ((hi - lo) * self.points_per_unit as f64 - 1e-9).ceil() as usize + 1;
        let block = 1usize << self.depth;
        let count = needed.div_ceil(block) * block;
        GridSpec::one_d(lo, self.spacing(), count)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

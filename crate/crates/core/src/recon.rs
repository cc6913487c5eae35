//! Cascaded reconstruction network: residual convolutional blocks, each
//! followed by a data-consistency step against the measured k-space.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{self, ComplexImage, Domain, MeasuredKSpace};
use crate::nn::{relu_backward_inplace, relu_inplace, Conv, ParamSet, ShapeEntry};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub n_cascades: usize,
    pub convs_per_block: usize,
    pub channels: usize,
    pub kernel: usize,
    /// `None` replaces sampled lines with the measurements outright.
    pub dc_lambda: Option<f64>,
    pub residual: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_cascades: 2,
            convs_per_block: 3,
            channels: 16,
            kernel: 3,
            dc_lambda: None,
            residual: true,
        }
    }
}

impl ReconConfig {
    /// Five blocks of five convolutions.
    pub fn d5c5(channels: usize) -> Self {
        Self {
            n_cascades: 5,
            convs_per_block: 5,
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.kernel % 2 == 0 {
            return bad(format!("recon kernel must be odd, got {}", self.kernel));
        }
        if self.n_cascades < 1 {
            return bad("recon needs at least one cascade".into());
        }
        if self.convs_per_block < 2 {
            return bad(format!(
                "recon blocks need at least two convolutions, got {}",
                self.convs_per_block
            ));
        }
        if self.channels == 0 {
            return bad("recon channels must be positive".into());
        }
        kspace::check_lambda(self.dc_lambda)
    }

    /// Closed-form parameter count:
    /// `n_cascades * [(2·c·k² + c) + (convs−2)(c²·k² + c) + (c·2·k² + 2)]`.
    pub fn param_count(&self) -> usize {
        let (c, k) = (self.channels, self.kernel);
        let per_block = Conv::count(2, c, k)
            + (self.convs_per_block - 2) * Conv::count(c, c, k)
            + Conv::count(c, 2, k);
        self.n_cascades * per_block
    }

    fn layer_channels(&self, j: usize) -> (usize, usize) {
        let last = self.convs_per_block - 1;
        let cin = if j == 0 { 2 } else { self.channels };
        let cout = if j == last { 2 } else { self.channels };
        (cin, cout)
    }
}

/// Parameters of the reconstruction cascade plus the layer wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconParams<T> {
    config: ReconConfig,
    params: ParamSet<T>,
    layers: Vec<Vec<Conv>>,
}

/// Deterministic He-uniform initialization.
pub fn recon_init<T: Real>(config: &ReconConfig, seed: u64) -> Result<ReconParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let layers = (0..config.n_cascades)
        .map(|i| {
            (0..config.convs_per_block)
                .map(|j| {
                    let (cin, cout) = config.layer_channels(j);
                    let name = format!("recon.cascade{i}.conv{j}");
                    Conv::register(&mut params, &name, cin, cout, config.kernel, false, &mut rng)
                })
                .collect()
        })
        .collect();
    Ok(ReconParams {
        config: config.clone(),
        params,
        layers,
    })
}

impl<T: Real> ReconParams<T> {
    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn shape_manifest(&self) -> Vec<ShapeEntry> {
        self.params.shape_manifest()
    }

    /// Rebuilds the wiring for a config around stored tensors, checking every
    /// tensor shape against the config.
    pub fn from_parts(config: ReconConfig, params: ParamSet<T>) -> Result<Self> {
        let template = recon_init::<T>(&config, 0)?;
        if template.params.shape_manifest() != params.shape_manifest() {
            return Err(Error::ShapeMismatch(
                "stored recon tensors do not match the recon config".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            layers: template.layers,
        })
    }

    /// Zeroes the last convolution of every block so each residual update is
    /// zero.
    pub fn zero_final_layers(&mut self) {
        let last_layers: Vec<String> = (0..self.config.n_cascades)
            .map(|i| format!("recon.cascade{i}.conv{}", self.config.convs_per_block - 1))
            .collect();
        for p in self.params.iter_mut() {
            if last_layers.iter().any(|l| p.name.starts_with(&format!("{l}."))) {
                p.data.fill(T::zero());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ReconParams<U> {
        ReconParams {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Runs the cascade on one measurement and returns the complex image.
    pub fn forward(&self, m: &MeasuredKSpace<T>) -> Result<ComplexImage<T>> {
        let (out, _) = self.forward_batch(std::slice::from_ref(m))?;
        Ok(ComplexImage::new(unpack(&out, 0), Domain::Image))
    }

    /// Batched forward pass. The output is `[2, B, H, W]` (real, imag).
    pub(crate) fn forward_batch(
        &self,
        ms: &[MeasuredKSpace<T>],
    ) -> Result<(Array4<T>, ReconTrace<T>)> {
        let (h, w) = ms
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty recon batch".into()))?
            .shape();
        if ms.iter().any(|m| m.shape() != (h, w)) {
            return Err(Error::ShapeMismatch(
                "recon batch mixes image sizes".into(),
            ));
        }
        let b = ms.len();
        let mut x = Array4::<T>::zeros((2, b, h, w));
        for (i, m) in ms.iter().enumerate() {
            pack(&mut x, i, kspace::zero_fill(m)?.data());
        }
        let mut cascades = Vec::with_capacity(self.layers.len());
        for block in &self.layers {
            let mut acts = Vec::with_capacity(block.len() + 1);
            acts.push(x);
            for (j, conv) in block.iter().enumerate() {
                let mut y = conv.forward(&self.params, acts.last().unwrap());
                if j + 1 < block.len() {
                    relu_inplace(&mut y);
                }
                acts.push(y);
            }
            let update = acts.pop().unwrap();
            let mut next = if self.config.residual {
                &acts[0] + &update
            } else {
                update
            };
            for (i, m) in ms.iter().enumerate() {
                let mut grid = unpack(&next, i);
                kspace::dc_inplace(&mut grid, m, self.config.dc_lambda);
                pack(&mut next, i, &grid);
            }
            cascades.push(acts);
            x = next;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reconstruction activations".into()));
        }
        let masks = ms.iter().map(|m| m.mask().clone()).collect();
        Ok((x, ReconTrace { cascades, masks }))
    }

    /// Backpropagates `d_out` (`[2, B, H, W]`) through the cascade,
    /// accumulating parameter gradients.
    pub(crate) fn backward_batch(
        &self,
        trace: &ReconTrace<T>,
        d_out: Array4<T>,
        grads: &mut ParamSet<T>,
    ) {
        let mut d = d_out;
        for (block, acts) in self.layers.iter().zip(&trace.cascades).rev() {
            for (i, mask) in trace.masks.iter().enumerate() {
                let mut grid = unpack(&d, i);
                kspace::dc_backward_inplace(&mut grid, mask, self.config.dc_lambda);
                pack(&mut d, i, &grid);
            }
            let mut d_in = if self.config.residual {
                Some(d.clone())
            } else {
                None
            };
            let mut dy = d;
            for (j, conv) in block.iter().enumerate().rev() {
                if j + 1 < block.len() {
                    relu_backward_inplace(&mut dy, &acts[j + 1]);
                }
                dy = conv
                    .backward(&self.params, &acts[j], &dy, grads, true)
                    .unwrap();
            }
            d = match d_in.take() {
                Some(skip) => skip + &dy,
                None => dy,
            };
        }
    }
}

/// Activations kept for the backward pass.
pub(crate) struct ReconTrace<T> {
    /// Per cascade: block input followed by every hidden activation.
    cascades: Vec<Vec<Array4<T>>>,
    masks: Vec<kspace::SamplingMask>,
}

/// Single-sample convenience wrapper.
pub fn recon_forward<T: Real>(
    params: &ReconParams<T>,
    m: &MeasuredKSpace<T>,
) -> Result<ComplexImage<T>> {
    params.forward(m)
}

pub(crate) fn pack<T: Real>(x: &mut Array4<T>, b: usize, grid: &Array2<Complex<T>>) {
    let (_, _, h, w) = x.dim();
    for yy in 0..h {
        for xx in 0..w {
            let c = grid[(yy, xx)];
            x[(0, b, yy, xx)] = c.re;
            x[(1, b, yy, xx)] = c.im;
        }
    }
}

pub(crate) fn unpack<T: Real>(x: &Array4<T>, b: usize) -> Array2<Complex<T>> {
    let (_, _, h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(yy, xx)| {
        Complex::new(x[(0, b, yy, xx)], x[(1, b, yy, xx)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{forward_fft, make_mask, measure};
    use rand::Rng;

    fn phantom(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_param_count_matches_closed_form() {
        let cfg = ReconConfig::default();
        let p = recon_init::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.params().count(), cfg.param_count());
        // 2 * [(2*16*9+16) + (16*16*9+16) + (16*2*9+2)]
        assert_eq!(cfg.param_count(), 2 * (304 + 2320 + 290));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ReconConfig { kernel: 4, ..Default::default() },
            ReconConfig { n_cascades: 0, ..Default::default() },
            ReconConfig { convs_per_block: 1, ..Default::default() },
            ReconConfig { dc_lambda: Some(-0.5), ..Default::default() },
        ] {
            assert!(recon_init::<f32>(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ReconConfig::default();
        let a = recon_init::<f32>(&cfg, 3).unwrap();
        let b = recon_init::<f32>(&cfg, 3).unwrap();
        let c = recon_init::<f32>(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.params().max_abs_diff(c.params()) > 0.0);
    }

    #[test]
    fn zero_update_returns_zero_filled_image() {
        let cfg = ReconConfig::default();
        let mut p = recon_init::<f64>(&cfg, 1).unwrap();
        p.zero_final_layers();
        let mask = make_mask(16, 0.125, 4.0, 2).unwrap();
        let m = measure(&phantom(16, 16, 1), &mask).unwrap();
        let out = p.forward(&m).unwrap();
        let zf = kspace::zero_fill(&m).unwrap();
        for (a, b) in out.data().iter().zip(zf.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn full_mask_recovers_the_image() {
        let p = recon_init::<f64>(&ReconConfig::default(), 5).unwrap();
        let img = phantom(16, 16, 2);
        let mask = make_mask(16, 0.125, 1.0, 0).unwrap();
        let out = p.forward(&measure(&img, &mask).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(img.iter()) {
            assert!((a.re - b).abs() < 1e-10 && a.im.abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_lines_match_measurements() {
        let p = recon_init::<f32>(&ReconConfig::default(), 9).unwrap();
        let img = phantom(16, 16, 3).mapv(|v| v as f32);
        let mask = make_mask(16, 0.125, 4.0, 1).unwrap();
        let m = measure(&img, &mask).unwrap();
        let k = forward_fft(&p.forward(&m).unwrap()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if mask.lines()[x] {
                    assert!((k.data()[(y, x)] - m.kspace().data()[(y, x)]).norm() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn from_parts_checks_shapes() {
        let cfg = ReconConfig::default();
        let p = recon_init::<f32>(&cfg, 1).unwrap();
        let other = ReconConfig { channels: 8, ..cfg.clone() };
        assert!(ReconParams::from_parts(other, p.params().clone()).is_err());
        assert_eq!(ReconParams::from_parts(cfg, p.params().clone()).unwrap(), p);
    }
}

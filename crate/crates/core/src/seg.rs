//! Encoder-decoder segmentation network with skip connections.
//!
//! Encoder level `l` runs two convolutions with `base * 2^l` channels and a
//! 2x max-pool; a two-convolution bottleneck sits below the deepest level.
//! Each decoder level upsamples (nearest neighbour), convolves, concatenates
//! the matching encoder output and applies two more convolutions. A 1x1
//! projection and a channel softmax produce per-class probabilities.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace,
    softmax_backward, softmax_channels, split_channels, upsample2, upsample2_backward, Conv,
    ParamSet, ShapeEntry,
};
use crate::real::Real;

/// Per-class label map.
pub type LabelMap = Array2<u8>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    pub kernel: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            n_classes: 2,
            kernel: 3,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.kernel % 2 == 0 {
            return bad(format!("seg kernel must be odd, got {}", self.kernel));
        }
        if self.depth < 1 {
            return bad("seg depth must be at least 1".into());
        }
        if self.n_classes < 2 {
            return bad(format!("seg needs at least 2 classes, got {}", self.n_classes));
        }
        if self.base_channels == 0 {
            return bad("seg base channels must be positive".into());
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Closed-form parameter count, summing `Conv::count(cin, cout, k)`
    /// (`cout·cin·k² + cout`) over encoder, bottleneck, decoder and head.
    pub fn param_count(&self) -> usize {
        let k = self.kernel;
        let mut total = 0;
        for l in 0..self.depth {
            let cin = if l == 0 { 1 } else { self.channels(l - 1) };
            let c = self.channels(l);
            total += Conv::count(cin, c, k) + Conv::count(c, c, k);
        }
        let (cb_in, cb) = (self.channels(self.depth - 1), self.channels(self.depth));
        total += Conv::count(cb_in, cb, k) + Conv::count(cb, cb, k);
        for l in 0..self.depth {
            let (c, up) = (self.channels(l), self.channels(l + 1));
            total += Conv::count(up, c, k) + Conv::count(2 * c, c, k) + Conv::count(c, c, k);
        }
        total + Conv::count(self.base_channels, self.n_classes, 1)
    }

    /// Checks that an `h x w` input survives `depth` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::ShapeMismatch(format!(
                "seg input {h}x{w} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Level {
    conv_a: Conv,
    conv_b: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct UpLevel {
    up: Conv,
    merge: Conv,
    conv: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegParams<T> {
    config: SegConfig,
    params: ParamSet<T>,
    encoder: Vec<Level>,
    bottleneck: Level,
    /// Indexed by level, shallowest first.
    decoder: Vec<UpLevel>,
    head: Conv,
}

/// Per-class probabilities stored as `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities<T>(pub Array3<T>);

impl<T: Real> Probabilities<T> {
    pub fn n_classes(&self) -> usize {
        self.0.dim().0
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dim();
        (h, w)
    }

    pub fn class(&self, c: usize) -> ndarray::ArrayView2<'_, T> {
        self.0.index_axis(Axis(0), c)
    }
}

/// Deterministic He-uniform initialization.
pub fn seg_init<T: Real>(config: &SegConfig, seed: u64) -> Result<SegParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let k = config.kernel;
    let mut encoder = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let cin = if l == 0 { 1 } else { config.channels(l - 1) };
        let c = config.channels(l);
        encoder.push(Level {
            conv_a: Conv::register(&mut params, &format!("seg.enc{l}.conv_a"), cin, c, k, false, &mut rng),
            conv_b: Conv::register(&mut params, &format!("seg.enc{l}.conv_b"), c, c, k, false, &mut rng),
        });
    }
    let (cb_in, cb) = (config.channels(config.depth - 1), config.channels(config.depth));
    let bottleneck = Level {
        conv_a: Conv::register(&mut params, "seg.bottleneck.conv_a", cb_in, cb, k, false, &mut rng),
        conv_b: Conv::register(&mut params, "seg.bottleneck.conv_b", cb, cb, k, false, &mut rng),
    };
    let mut decoder = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let (c, up) = (config.channels(l), config.channels(l + 1));
        decoder.push(UpLevel {
            up: Conv::register(&mut params, &format!("seg.dec{l}.up"), up, c, k, false, &mut rng),
            merge: Conv::register(&mut params, &format!("seg.dec{l}.merge"), 2 * c, c, k, false, &mut rng),
            conv: Conv::register(&mut params, &format!("seg.dec{l}.conv"), c, c, k, false, &mut rng),
        });
    }
    let head = Conv::register(
        &mut params,
        "seg.head",
        config.base_channels,
        config.n_classes,
        1,
        false,
        &mut rng,
    );
    Ok(SegParams {
        config: config.clone(),
        params,
        encoder,
        bottleneck,
        decoder,
        head,
    })
}

struct LevelTrace<T> {
    input: Array4<T>,
    a: Array4<T>,
    b: Array4<T>,
    pool_arg: Vec<u8>,
}

struct UpTrace<T> {
    upsampled: Array4<T>,
    up: Array4<T>,
    cat: Array4<T>,
    merged: Array4<T>,
    out: Array4<T>,
}

/// Activations kept for the backward pass.
pub(crate) struct SegTrace<T> {
    encoder: Vec<LevelTrace<T>>,
    bottleneck: LevelTrace<T>,
    decoder: Vec<UpTrace<T>>,
    head_in: Array4<T>,
    probs: Array4<T>,
}


impl<T: Real> SegParams<T> {
    pub fn config(&self) -> &SegConfig {
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

    pub fn from_parts(config: SegConfig, params: ParamSet<T>) -> Result<Self> {
        let template = seg_init::<T>(&config, 0)?;
        if template.params.shape_manifest() != params.shape_manifest() {
            return Err(Error::ShapeMismatch(
                "stored seg tensors do not match the seg config".into(),
            ));
        }
        Ok(Self { params, ..template })
    }

    /// Zeroes the 1x1 projection, which makes every output uniform.
    pub fn zero_head(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.starts_with("seg.head.") {
                p.data.fill(T::zero());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> SegParams<U> {
        SegParams {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }

    pub fn forward(&self, img: &Array2<T>) -> Result<Probabilities<T>> {
        let (h, w) = img.dim();
        let x = img
            .to_owned()
            .into_shape_with_order((1, 1, h, w))
            .expect("2D image");
        let (probs, _) = self.forward_batch(x)?;
        Ok(Probabilities(probs.index_axis_move(Axis(1), 0)))
    }

    /// Batched forward pass on `[1, B, H, W]` input.
    pub(crate) fn forward_batch(&self, input: Array4<T>) -> Result<(Array4<T>, SegTrace<T>)> {
        let (c, _, h, w) = input.dim();
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("seg expects 1 input channel, got {c}")));
        }
        self.config.check_input(h, w)?;
        let p = &self.params;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut x = input;
        for level in &self.encoder {
            let mut t = run_level(p, level, x);
            let (pooled, arg) = max_pool2(&t.b);
            t.pool_arg = arg;
            encoder.push(t);
            x = pooled;
        }
        let bottleneck = run_level(p, &self.bottleneck, x);
        let mut x = bottleneck.b.clone();
        let mut decoder: Vec<UpTrace<T>> = Vec::with_capacity(self.decoder.len());
        for (l, up) in self.decoder.iter().enumerate().rev() {
            let upsampled = upsample2(&x);
            let mut u = up.up.forward(p, &upsampled);
            relu_inplace(&mut u);
            let cat = concat_channels(&u, &encoder[l].b);
            let mut merged = up.merge.forward(p, &cat);
            relu_inplace(&mut merged);
            let mut out = up.conv.forward(p, &merged);
            relu_inplace(&mut out);
            x = out.clone();
            decoder.push(UpTrace {
                upsampled,
                up: u,
                cat,
                merged,
                out,
            });
        }
        decoder.reverse();
        let logits = self.head.forward(p, &x);
        let probs = softmax_channels(&logits);
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segmentation activations".into()));
        }
        Ok((
            probs.clone(),
            SegTrace {
                encoder,
                bottleneck,
                decoder,
                head_in: x,
                probs,
            },
        ))
    }

    /// Backpropagates `d_probs` (`[C, B, H, W]`) and returns the gradient
    /// with respect to the input image when `need_input_grad` is set.
    pub(crate) fn backward_batch(
        &self,
        trace: &SegTrace<T>,
        d_probs: &Array4<T>,
        grads: &mut ParamSet<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let p = &self.params;
        let d_logits = softmax_backward(&trace.probs, d_probs);
        let mut dx = self
            .head
            .backward(p, &trace.head_in, &d_logits, grads, true)
            .unwrap();
        let mut d_skips = Vec::with_capacity(self.decoder.len());
        for (up, t) in self.decoder.iter().zip(&trace.decoder) {
            relu_backward_inplace(&mut dx, &t.out);
            let mut d_merged = up.conv.backward(p, &t.merged, &dx, grads, true).unwrap();
            relu_backward_inplace(&mut d_merged, &t.merged);
            let d_cat = up.merge.backward(p, &t.cat, &d_merged, grads, true).unwrap();
            let (mut d_up, d_skip) = split_channels(&d_cat, t.up.dim().0);
            d_skips.push(d_skip);
            relu_backward_inplace(&mut d_up, &t.up);
            let d_upsampled = up.up.backward(p, &t.upsampled, &d_up, grads, true).unwrap();
            dx = upsample2_backward(&d_upsampled);
        }
        dx = level_backward(p, &self.bottleneck, &trace.bottleneck, dx, grads, true).unwrap();
        for (l, (level, t)) in self.encoder.iter().zip(&trace.encoder).enumerate().rev() {
            let mut d_b = max_pool2_backward(&dx, &t.pool_arg, t.b.dim());
            d_b += &d_skips[l];
            let need = l > 0 || need_input_grad;
            match level_backward(p, level, t, d_b, grads, need) {
                Some(d) => dx = d,
                None => return None,
            }
        }
        Some(dx)
    }
}

fn run_level<T: Real>(p: &ParamSet<T>, level: &Level, input: Array4<T>) -> LevelTrace<T> {
    let mut a = level.conv_a.forward(p, &input);
    relu_inplace(&mut a);
    let mut b = level.conv_b.forward(p, &a);
    relu_inplace(&mut b);
    LevelTrace {
        input,
        a,
        b,
        pool_arg: Vec::new(),
    }
}

fn level_backward<T: Real>(
    p: &ParamSet<T>,
    level: &Level,
    t: &LevelTrace<T>,
    mut d_b: Array4<T>,
    grads: &mut ParamSet<T>,
    need_dx: bool,
) -> Option<Array4<T>> {
    relu_backward_inplace(&mut d_b, &t.b);
    let mut d_a = level.conv_b.backward(p, &t.a, &d_b, grads, true).unwrap();
    relu_backward_inplace(&mut d_a, &t.a);
    level.conv_a.backward(p, &t.input, &d_a, grads, need_dx)
}

/// Single-image convenience wrapper.
pub fn seg_forward<T: Real>(params: &SegParams<T>, img: &Array2<T>) -> Result<Probabilities<T>> {
    params.forward(img)
}

/// Per-pixel argmax; ties resolve to the lower class index.
pub fn binarize<T: Real>(probs: &Probabilities<T>) -> LabelMap {
    let (c, h, w) = probs.0.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if probs.0[(k, y, x)] > probs.0[(best, y, x)] {
                best = k;
            }
        }
        best as u8
    })
}

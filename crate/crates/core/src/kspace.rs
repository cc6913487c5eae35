//! Retrospective Cartesian undersampling: centered orthonormal FFTs, line masks,
//! zero-filled reconstruction and the data-consistency operator.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Which side of the Fourier pair an array lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Image,
    KSpace,
}

/// A 2D complex array tagged with its domain. Each element is stored as an
/// interleaved (real, imag) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage<T> {
    data: Array2<Complex<T>>,
    domain: Domain,
}

impl<T: Real> ComplexImage<T> {
    pub fn new(data: Array2<Complex<T>>, domain: Domain) -> Self {
        Self { data, domain }
    }

    pub fn zeros(height: usize, width: usize, domain: Domain) -> Self {
        Self::new(Array2::from_elem((height, width), Complex::default()), domain)
    }

    /// Real-valued image with zero imaginary part.
    pub fn from_real(image: &Array2<T>) -> Self {
        Self::new(image.mapv(|v| Complex::new(v, T::zero())), Domain::Image)
    }

    pub fn data(&self) -> &Array2<Complex<T>> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex<T>> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex<T>> {
        self.data
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// (height, width)
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn magnitude(&self) -> Array2<T> {
        self.data.mapv(|c| c.norm())
    }

    pub fn real(&self) -> Array2<T> {
        self.data.mapv(|c| c.re)
    }

    pub fn imag(&self) -> Array2<T> {
        self.data.mapv(|c| c.im)
    }

    /// Euclidean norm over all entries.
    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum::<T>().sqrt()
    }

    fn expect_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::WrongDomain {
                expected,
                found: self.domain,
            });
        }
        Ok(())
    }
}

/// Centered, orthonormal 2D DFT (DC at index `(H/2, W/2)`).
pub fn forward_fft<T: Real>(img: &ComplexImage<T>) -> Result<ComplexImage<T>> {
    img.expect_domain(Domain::Image)?;
    let mut data = img.data.clone();
    fft2c(&mut data, FftDirection::Forward);
    Ok(ComplexImage::new(data, Domain::KSpace))
}

/// Exact inverse (and adjoint) of [`forward_fft`].
pub fn inverse_fft<T: Real>(k: &ComplexImage<T>) -> Result<ComplexImage<T>> {
    k.expect_domain(Domain::KSpace)?;
    let mut data = k.data.clone();
    fft2c(&mut data, FftDirection::Inverse);
    Ok(ComplexImage::new(data, Domain::Image))
}

/// In-place centered orthonormal transform on a raw grid.
pub(crate) fn fft2c<T: Real>(data: &mut Array2<Complex<T>>, direction: FftDirection) {
    let (h, w) = data.dim();
    if h == 0 || w == 0 {
        return;
    }
    ifftshift(data);

    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(w, direction);
    let col_fft = planner.plan_fft(h, direction);
    let mut scratch = vec![
        Complex::default();
        row_fft
            .get_inplace_scratch_len()
            .max(col_fft.get_inplace_scratch_len())
    ];

    {
        let buf = data
            .as_slice_mut()
            .expect("fft2c needs a standard-layout array");
        for row in buf.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
    }
    let mut column = vec![Complex::default(); h];
    for mut col in data.columns_mut() {
        for (dst, src) in column.iter_mut().zip(col.iter()) {
            *dst = *src;
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        for (dst, src) in col.iter_mut().zip(column.iter()) {
            *dst = *src;
        }
    }

    fftshift(data);
    let scale = T::one() / T::from_usize(h * w).unwrap().sqrt();
    data.mapv_inplace(|c| c.scale(scale));
}

fn roll2<T: Copy>(data: &mut Array2<T>, shift_rows: usize, shift_cols: usize) {
    let (h, w) = data.dim();
    if (shift_rows % h == 0) && (shift_cols % w == 0) {
        return;
    }
    let src = data.clone();
    for ((i, j), v) in data.indexed_iter_mut() {
        *v = src[((i + h - shift_rows % h) % h, (j + w - shift_cols % w) % w)];
    }
}

/// Moves the zero-frequency entry from index 0 to the center.
pub fn fftshift<T: Copy>(data: &mut Array2<T>) {
    let (h, w) = data.dim();
    roll2(data, h / 2, w / 2);
}

/// Inverse of [`fftshift`], also for odd sizes.
pub fn ifftshift<T: Copy>(data: &mut Array2<T>) {
    let (h, w) = data.dim();
    roll2(data, h - h / 2, w - w / 2);
}

/// Phase-encode line mask. `lines[x]` keeps or drops k-space column `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    lines: Vec<bool>,
    center_fraction: f64,
    acceleration: f64,
    seed: u64,
}

impl SamplingMask {
    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn width(&self) -> usize {
        self.lines.len()
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kept(&self) -> usize {
        self.lines.iter().filter(|&&l| l).count()
    }

    /// Number of always-kept center lines, `floor(center_fraction * W)`.
    pub fn center_lines(&self) -> usize {
        center_line_count(self.width(), self.center_fraction)
    }

    /// Index range of the fully sampled center block.
    pub fn center_range(&self) -> std::ops::Range<usize> {
        center_range(self.width(), self.center_lines())
    }

    /// Probability with which each non-center line is kept.
    pub fn keep_probability(&self) -> f64 {
        keep_probability(self.width(), self.center_fraction, self.acceleration)
    }

    /// Broadcast to an `height x width` 0/1 grid, constant along each column.
    pub fn to_grid(&self, height: usize) -> Array2<u8> {
        Array2::from_shape_fn((height, self.width()), |(_, x)| self.lines[x] as u8)
    }
}

fn center_line_count(width: usize, center_fraction: f64) -> usize {
    (center_fraction * width as f64).floor() as usize
}

fn center_range(width: usize, n_center: usize) -> std::ops::Range<usize> {
    let start = width / 2 - n_center / 2;
    start..start + n_center
}

fn keep_probability(width: usize, center_fraction: f64, acceleration: f64) -> f64 {
    let n_c = center_line_count(width, center_fraction);
    if n_c >= width {
        return 0.0;
    }
    let budget = width as f64 / acceleration;
    ((budget - n_c as f64) / (width - n_c) as f64).clamp(0.0, 1.0)
}

/// Keeps the centered block of `floor(center_fraction * W)` lines and every
/// other line independently with the probability that makes the expected
/// number of kept lines equal `W / acceleration`.
pub fn make_mask(
    width: usize,
    center_fraction: f64,
    acceleration: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if width == 0 {
        return Err(Error::InvalidConfig("mask width must be positive".into()));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "center fraction must lie in (0, 1), got {center_fraction}"
        )));
    }
    if !(acceleration >= 1.0) || !acceleration.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "acceleration must be >= 1, got {acceleration}"
        )));
    }
    let n_c = center_line_count(width, center_fraction);
    let budget = width as f64 / acceleration;
    if n_c as f64 > budget {
        return Err(Error::InfeasibleMask {
            center_lines: n_c,
            budget,
        });
    }
    let p = keep_probability(width, center_fraction, acceleration);
    let center = center_range(width, n_c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = (0..width)
        .map(|x| center.contains(&x) || rng.random::<f64>() < p)
        .collect();
    Ok(SamplingMask {
        lines,
        center_fraction,
        acceleration,
        seed,
    })
}

impl fmt::Display for SamplingMask {
    /// `W center_fraction acceleration seed : 0101...`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} : ",
            self.width(),
            self.center_fraction,
            self.acceleration,
            self.seed
        )?;
        for &l in &self.lines {
            f.write_str(if l { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for SamplingMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidConfig(format!("mask line: {why}"));
        let (head, bits) = s.trim().split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("expected `W center_fraction acceleration seed`"));
        }
        let width: usize = fields[0].parse().map_err(|_| bad("width"))?;
        let center_fraction: f64 = fields[1].parse().map_err(|_| bad("center fraction"))?;
        let acceleration: f64 = fields[2].parse().map_err(|_| bad("acceleration"))?;
        let seed: u64 = fields[3].parse().map_err(|_| bad("seed"))?;
        let lines = bits
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad("line bits must be 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()?;
        if lines.len() != width {
            return Err(bad("bit count differs from width"));
        }
        Ok(SamplingMask {
            lines,
            center_fraction,
            acceleration,
            seed,
        })
    }
}

/// Masked k-space together with the mask that produced it. Every dropped line
/// is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasuredKSpace<T> {
    kspace: ComplexImage<T>,
    mask: SamplingMask,
}

impl<T: Real> MeasuredKSpace<T> {
    pub fn kspace(&self) -> &ComplexImage<T> {
        &self.kspace
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kspace.shape()
    }

    /// Same measurement at another precision.
    pub fn cast<U: Real>(&self) -> MeasuredKSpace<U> {
        let data = self
            .kspace
            .data
            .mapv(|c| Complex::new(U::lit(c.re.as_f64()), U::lit(c.im.as_f64())));
        MeasuredKSpace {
            kspace: ComplexImage::new(data, Domain::KSpace),
            mask: self.mask.clone(),
        }
    }
}

/// Keeps sampled lines verbatim and zeroes the rest.
pub fn apply_mask<T: Real>(k: &ComplexImage<T>, mask: &SamplingMask) -> Result<MeasuredKSpace<T>> {
    k.expect_domain(Domain::KSpace)?;
    let (_, w) = k.shape();
    if mask.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} lines but k-space is {} wide",
            mask.width(),
            w
        )));
    }
    let mut data = k.data.clone();
    for (x, mut col) in data.columns_mut().into_iter().enumerate() {
        if !mask.lines[x] {
            col.fill(Complex::default());
        }
    }
    Ok(MeasuredKSpace {
        kspace: ComplexImage::new(data, Domain::KSpace),
        mask: mask.clone(),
    })
}

/// Simulates a measurement of a real image: forward transform then mask.
pub fn measure<T: Real>(image: &Array2<T>, mask: &SamplingMask) -> Result<MeasuredKSpace<T>> {
    let k = forward_fft(&ComplexImage::from_real(image))?;
    apply_mask(&k, mask)
}

/// Inverse transform of the masked k-space.
pub fn zero_fill<T: Real>(m: &MeasuredKSpace<T>) -> Result<ComplexImage<T>> {
    inverse_fft(&m.kspace)
}

/// Replaces (`lambda = None`) or blends (`(K + lambda * k_meas) / (1 + lambda)`)
/// the predicted spectrum with the measurements on sampled lines. Unsampled
/// lines keep the prediction.
pub fn data_consistency<T: Real>(
    pred: &ComplexImage<T>,
    m: &MeasuredKSpace<T>,
    lambda: Option<f64>,
) -> Result<ComplexImage<T>> {
    pred.expect_domain(Domain::Image)?;
    check_lambda(lambda)?;
    if pred.shape() != m.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs measurement {:?}",
            pred.shape(),
            m.shape()
        )));
    }
    let mut data = pred.data.clone();
    dc_inplace(&mut data, m, lambda);
    Ok(ComplexImage::new(data, Domain::Image))
}

pub(crate) fn check_lambda(lambda: Option<f64>) -> Result<()> {
    match lambda {
        Some(l) if !(l >= 0.0) => Err(Error::NegativeLambda(l)),
        _ => Ok(()),
    }
}

/// Data consistency on a raw image-domain grid, without validation.
pub(crate) fn dc_inplace<T: Real>(
    data: &mut Array2<Complex<T>>,
    m: &MeasuredKSpace<T>,
    lambda: Option<f64>,
) {
    fft2c(data, FftDirection::Forward);
    let lines = m.mask.lines();
    match lambda {
        None => {
            Zip::indexed(data.view_mut())
                .and(m.kspace.data())
                .for_each(|(_, x), k, &meas| {
                    if lines[x] {
                        *k = meas;
                    }
                });
        }
        Some(l) => {
            let l = T::lit(l);
            let denom = T::one() / (T::one() + l);
            Zip::indexed(data.view_mut())
                .and(m.kspace.data())
                .for_each(|(_, x), k, &meas| {
                    if lines[x] {
                        *k = (*k + meas.scale(l)).scale(denom);
                    }
                });
        }
    }
    fft2c(data, FftDirection::Inverse);
}

/// Adjoint of the data-consistency Jacobian applied to an image-domain
/// gradient. The operator is affine in the prediction with linear part
/// `F^-1 D F`, `D` real diagonal, so the adjoint has the same form.
pub(crate) fn dc_backward_inplace<T: Real>(
    grad: &mut Array2<Complex<T>>,
    mask: &SamplingMask,
    lambda: Option<f64>,
) {
    fft2c(grad, FftDirection::Forward);
    let sampled_gain = match lambda {
        None => T::zero(),
        Some(l) => T::one() / (T::one() + T::lit(l)),
    };
    let lines = mask.lines();
    for (x, mut col) in grad.columns_mut().into_iter().enumerate() {
        if lines[x] {
            col.mapv_inplace(|c| c.scale(sampled_gain));
        }
    }
    fft2c(grad, FftDirection::Inverse);
}

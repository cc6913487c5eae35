//! Overlap and image-quality metrics, per-volume evaluation and the
//! lesion-size breakdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::DatasetManifest;
use crate::real::Real;
use crate::seg::{binarize, LabelMap};
use crate::trainer::{infer, load_samples, zero_filled_magnitude, MaskConfig, Sample, TrainState};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SIZE_BINS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// One-vs-rest pixel counts for `class_id`.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<ConfusionCounts> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(pred).and(truth).for_each(|&p, &t| match (p == class_id, t == class_id) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `tp / (tp + fp)`; 1 when both masks are empty, 0 when only the prediction is.
pub fn precision(c: &ConfusionCounts) -> f64 {
    match (c.tp + c.fp, c.tp + c.fn_) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (d, _) => c.tp as f64 / d as f64,
    }
}

/// `tp / (tp + fn)`; 1 when both masks are empty, 0 when only the truth is.
pub fn recall(c: &ConfusionCounts) -> f64 {
    match (c.tp + c.fn_, c.tp + c.fp) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (d, _) => c.tp as f64 / d as f64,
    }
}

fn check_same<T>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn peak<T: Real>(reference: &Array2<T>) -> f64 {
    reference.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max)
}

/// `10 log10(L^2 / MSE)` with `L = max(ref)`, clamped to `±PSNR_CAP`.
pub fn psnr<T: Real>(pred: &Array2<T>, reference: &Array2<T>) -> Result<f64> {
    check_same(pred, reference)?;
    let (sse, n) = squared_error(pred, reference);
    Ok(psnr_from(sse / n as f64, peak(reference)))
}

fn squared_error<T: Real>(pred: &Array2<T>, reference: &Array2<T>) -> (f64, usize) {
    let sse = pred
        .iter()
        .zip(reference)
        .map(|(&p, &r)| (p.as_f64() - r.as_f64()).powi(2))
        .sum();
    (sse, pred.len())
}

fn psnr_from(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).clamp(-PSNR_CAP, PSNR_CAP)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, xx)| (0..k).map(|i| g[i] * x[(y, xx + i)]).sum());
    Array2::from_shape_fn((oh, ow), |(y, xx)| (0..k).map(|i| g[i] * rows[(y + i, xx)]).sum())
}

/// Mean local SSIM over every full 11x11 Gaussian window (sigma 1.5) with
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` and `L = max(ref)` (1 if that is not
/// positive).
pub fn ssim<T: Real>(pred: &Array2<T>, reference: &Array2<T>) -> Result<f64> {
    check_same(pred, reference)?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let l = match peak(reference) {
        p if p > 0.0 => p,
        _ => 1.0,
    };
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let x = pred.mapv(|v| v.as_f64());
    let y = reference.mapv(|v| v.as_f64());
    let g = gaussian_window();
    let mx = filter_valid(&x, &g);
    let my = filter_valid(&y, &g);
    let sxx = filter_valid(&(&x * &x), &g);
    let syy = filter_valid(&(&y * &y), &g);
    let sxy = filter_valid(&(&x * &y), &g);
    let mut total = 0.0;
    Zip::from(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|&mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: u32,
    pub n_slices: usize,
    /// Indexed by foreground class (class 1 first).
    pub dice: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub zero_filled_psnr: f64,
    pub zero_filled_ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Foreground objects of one size class (pixel-count sextile).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    pub index: usize,
    pub min_pixels: usize,
    pub max_pixels: usize,
    pub count: usize,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub volumes: Vec<VolumeMetrics>,
    /// Mean and standard deviation over volumes, keyed by CSV column name.
    pub aggregate: BTreeMap<String, Summary>,
    pub size_bins: Vec<SizeBin>,
}

impl MetricsReport {
    fn foreground_names(&self) -> &[String] {
        &self.class_names[1..]
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "volume_id".to_string(),
            "n_slices".into(),
            "psnr".into(),
            "ssim".into(),
            "zero_filled_psnr".into(),
            "zero_filled_ssim".into(),
        ];
        for kind in ["dice", "precision", "recall"] {
            for name in self.foreground_names() {
                cols.push(format!("{kind}_{name}"));
            }
        }
        cols.join(",")
    }

    fn row_values(v: &VolumeMetrics) -> Vec<f64> {
        let mut out = vec![v.psnr, v.ssim, v.zero_filled_psnr, v.zero_filled_ssim];
        out.extend(&v.dice);
        out.extend(&v.precision);
        out.extend(&v.recall);
        out
    }

    /// One row per volume.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for v in &self.volumes {
            let vals: Vec<String> = Self::row_values(v).iter().map(|x| x.to_string()).collect();
            writeln!(out, "{},{},{}", v.volume_id, v.n_slices, vals.join(",")).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Mean of an aggregate column, e.g. `dice_lesion` or `psnr`.
    pub fn mean(&self, column: &str) -> Option<f64> {
        self.aggregate.get(column).map(|s| s.mean)
    }

    /// Mean Dice over all foreground classes and volumes.
    pub fn mean_foreground_dice(&self) -> f64 {
        let all: Vec<f64> = self.volumes.iter().flat_map(|v| v.dice.iter().copied()).collect();
        Summary::of(&all).mean
    }
}

/// Per-slice outputs feeding [`report_from_predictions`].
#[derive(Clone, Debug)]
pub struct SlicePrediction {
    pub volume_id: u32,
    pub truth_image: Array2<f32>,
    pub truth_labels: LabelMap,
    pub recon: Array2<f32>,
    pub zero_filled: Array2<f32>,
    pub labels: LabelMap,
}

/// Runs free-running inference on every sample.
pub fn predict(state: &TrainState<f32>, samples: &[Sample<f32>]) -> Result<Vec<SlicePrediction>> {
    samples
        .iter()
        .map(|s| {
            let (recon, probs) = infer(state, &s.measured)?;
            Ok(SlicePrediction {
                volume_id: s.volume_id,
                truth_image: s.image.clone(),
                truth_labels: s.labels.clone(),
                zero_filled: zero_filled_magnitude(&s.measured)?,
                recon,
                labels: binarize(&probs),
            })
        })
        .collect()
}

/// Volume-level metrics (3D tallies, PSNR over the stacked volume, mean
/// per-slice SSIM) aggregated over volumes, plus the size breakdown.
pub fn report_from_predictions(
    preds: &[SlicePrediction],
    class_names: &[String],
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::EmptySplit("nothing to evaluate".into()));
    }
    if class_names.len() < 2 {
        return Err(Error::InvalidConfig("need at least one foreground class".into()));
    }
    let n_fg = class_names.len() - 1;
    let mut ids: Vec<u32> = preds.iter().map(|p| p.volume_id).collect();
    ids.sort_unstable();
    ids.dedup();

    let mut volumes = Vec::with_capacity(ids.len());
    for &id in &ids {
        let slices: Vec<&SlicePrediction> = preds.iter().filter(|p| p.volume_id == id).collect();
        let mut counts = vec![ConfusionCounts::default(); n_fg];
        let (mut sse, mut zf_sse, mut n, mut pk) = (0.0, 0.0, 0usize, f64::NEG_INFINITY);
        let (mut ssim_sum, mut zf_ssim_sum) = (0.0, 0.0);
        for s in &slices {
            for (c, count) in counts.iter_mut().enumerate() {
                *count += confusion(&s.labels, &s.truth_labels, (c + 1) as u8)?;
            }
            check_same(&s.recon, &s.truth_image)?;
            let (e, m) = squared_error(&s.recon, &s.truth_image);
            sse += e;
            zf_sse += squared_error(&s.zero_filled, &s.truth_image).0;
            n += m;
            pk = pk.max(peak(&s.truth_image));
            ssim_sum += ssim(&s.recon, &s.truth_image)?;
            zf_ssim_sum += ssim(&s.zero_filled, &s.truth_image)?;
        }
        let k = slices.len() as f64;
        volumes.push(VolumeMetrics {
            volume_id: id,
            n_slices: slices.len(),
            dice: counts.iter().map(dice).collect(),
            precision: counts.iter().map(precision).collect(),
            recall: counts.iter().map(recall).collect(),
            psnr: psnr_from(sse / n as f64, pk),
            ssim: ssim_sum / k,
            zero_filled_psnr: psnr_from(zf_sse / n as f64, pk),
            zero_filled_ssim: zf_ssim_sum / k,
        });
    }

    let mut report = MetricsReport {
        class_names: class_names.to_vec(),
        volumes,
        aggregate: BTreeMap::new(),
        size_bins: size_bins(preds, n_fg),
    };
    let header = report.csv_header();
    let columns: Vec<&str> = header.split(',').skip(2).collect();
    for (i, col) in columns.iter().enumerate() {
        let vals: Vec<f64> = report
            .volumes
            .iter()
            .map(|v| MetricsReport::row_values(v)[i])
            .collect();
        report.aggregate.insert(col.to_string(), Summary::of(&vals));
    }
    Ok(report)
}

/// Evaluates a state on a dataset split; masks come from `mask` per volume.
pub fn evaluate(
    state: &TrainState<f32>,
    manifest: &DatasetManifest,
    mask: &MaskConfig,
) -> Result<MetricsReport> {
    let samples = load_samples(manifest, mask)?;
    let preds = predict(state, &samples)?;
    report_from_predictions(&preds, &manifest.class_names)
}

/// 8-connected components of `mask`; returns a component id per pixel
/// (0 = none) and the component count.
pub fn connected_components(mask: &Array2<bool>) -> (Array2<u32>, u32) {
    let (h, w) = mask.dim();
    let mut ids = Array2::<u32>::zeros((h, w));
    let mut next = 0;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[(y, x)] || ids[(y, x)] != 0 {
                continue;
            }
            next += 1;
            ids[(y, x)] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[(ny, nx)] && ids[(ny, nx)] == 0 {
                            ids[(ny, nx)] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (ids, next)
}

/// Ground-truth objects of every foreground class, scored by Dice inside
/// their bounding box grown by 2 pixels, then grouped by size sextile.
fn size_bins(preds: &[SlicePrediction], n_fg: usize) -> Vec<SizeBin> {
    let mut objects: Vec<(usize, f64)> = Vec::new();
    for p in preds {
        let (h, w) = p.truth_labels.dim();
        for c in 1..=n_fg as u8 {
            let truth = p.truth_labels.mapv(|l| l == c);
            let (ids, n) = connected_components(&truth);
            for id in 1..=n {
                let (mut y0, mut y1, mut x0, mut x1, mut size) = (h, 0, w, 0, 0);
                for ((y, x), &v) in ids.indexed_iter() {
                    if v == id {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                        size += 1;
                    }
                }
                let (y0, x0) = (y0.saturating_sub(2), x0.saturating_sub(2));
                let (y1, x1) = ((y1 + 2).min(h - 1), (x1 + 2).min(w - 1));
                let mut cc = ConfusionCounts::default();
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let t = ids[(y, x)] == id;
                        match (p.labels[(y, x)] == c, t) {
                            (true, true) => cc.tp += 1,
                            (true, false) => cc.fp += 1,
                            (false, true) => cc.fn_ += 1,
                            (false, false) => cc.tn += 1,
                        }
                    }
                }
                objects.push((size, dice(&cc)));
            }
        }
    }
    if objects.is_empty() {
        return Vec::new();
    }
    let mut sizes: Vec<usize> = objects.iter().map(|o| o.0).collect();
    sizes.sort_unstable();
    let cuts: Vec<usize> = (1..SIZE_BINS)
        .map(|q| sizes[(q * sizes.len() / SIZE_BINS).min(sizes.len() - 1)])
        .collect();
    let bin_of = |s: usize| cuts.iter().filter(|&&c| s >= c).count();
    (0..SIZE_BINS)
        .map(|b| {
            let members: Vec<&(usize, f64)> = objects.iter().filter(|o| bin_of(o.0) == b).collect();
            SizeBin {
                index: b,
                min_pixels: members.iter().map(|o| o.0).min().unwrap_or(0),
                max_pixels: members.iter().map(|o| o.0).max().unwrap_or(0),
                count: members.len(),
                mean_dice: if members.is_empty() {
                    f64::NAN
                } else {
                    members.iter().map(|o| o.1).sum::<f64>() / members.len() as f64
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn: 0 }
    }

    #[test]
    fn overlap_examples() {
        let c = counts(5, 0, 0);
        assert_eq!((dice(&c), precision(&c), recall(&c)), (1.0, 1.0, 1.0));
        let c = counts(0, 3, 2);
        assert_eq!((dice(&c), precision(&c), recall(&c)), (0.0, 0.0, 0.0));
        let c = counts(3, 1, 2);
        assert_eq!(dice(&c), 6.0 / 9.0);
        assert_eq!(precision(&c), 3.0 / 4.0);
        assert_eq!(recall(&c), 3.0 / 5.0);
        let empty = counts(0, 0, 0);
        assert_eq!((dice(&empty), precision(&empty), recall(&empty)), (1.0, 1.0, 1.0));
        assert_eq!(precision(&counts(0, 0, 4)), 0.0);
        assert_eq!(recall(&counts(0, 4, 0)), 0.0);
    }

    #[test]
    fn confusion_examples() {
        let mut truth = Array2::<u8>::zeros((4, 4));
        for i in 0..5 {
            truth[(i / 4, i % 4)] = 1;
        }
        let c = confusion(&truth, &truth, 1).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 0, 0, 11));
        let c = confusion(&Array2::zeros((4, 4)), &truth, 1).unwrap();
        assert_eq!((c.tp, c.fp), (0, 0));
        assert!(confusion(&Array2::zeros((4, 3)), &truth, 1).is_err());
    }

    #[test]
    fn psnr_examples() {
        let r = Array2::from_shape_fn((4, 4), |(i, j)| if i == 0 && j == 0 { 1.0 } else { 0.5 });
        assert_eq!(psnr(&r, &r).unwrap(), PSNR_CAP);
        let p = r.mapv(|v: f64| v + 0.1);
        assert!((psnr(&p, &r).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let p = generate_phantom(&PhantomConfig::default(), 0).unwrap().image;
        assert!((ssim(&p, &p).unwrap() - 1.0).abs() < 1e-9);
        let l = p.iter().copied().fold(0.0, f32::max);
        let inv = p.mapv(|v| l - v);
        assert!(ssim(&inv, &p).unwrap() < 0.5);
        let flat = Array2::from_elem((12, 12), 0.3f64);
        assert!((ssim(&flat, &flat).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(
            ssim(&Array2::<f64>::zeros((10, 20)), &Array2::zeros((10, 20))),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn components_and_bins() {
        let mut m = Array2::from_elem((6, 6), false);
        m[(0, 0)] = true;
        m[(1, 1)] = true;
        m[(4, 4)] = true;
        m[(4, 5)] = true;
        let (_, n) = connected_components(&m);
        assert_eq!(n, 2);
    }

    proptest! {
        #[test]
        fn f1_identity(tp in 1u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let c = counts(tp, fp, fn_);
            let (p, r) = (precision(&c), recall(&c));
            prop_assert!((dice(&c) - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }

        #[test]
        fn transpose_invariance(seed in 0u64..20) {
            let a = generate_phantom(&PhantomConfig { height: 24, width: 24, ..PhantomConfig::default() }, seed).unwrap().image.mapv(f64::from);
            let b = a.mapv(|v| (v * 0.9 + 0.03).sqrt());
            let (at, bt) = (a.t().to_owned(), b.t().to_owned());
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&at, &bt).unwrap()).abs() < 1e-9);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&at, &bt).unwrap()).abs() < 1e-9);
        }
    }
}

//! Joint training of the reconstruction and segmentation networks.
//!
//! Each step reconstructs the batch from its measurements, segments either
//! the fully sampled image (teacher step) or the reconstruction magnitude
//! (free-running step), and minimizes `alpha(epoch) * L_recon + beta(epoch) * L_seg`
//! with one Adam update per network.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kspace::{self, MeasuredKSpace, SamplingMask};
use crate::nn::{Adam, ParamSet};
use crate::phantom::{self, DatasetManifest};
use crate::real::Real;
use crate::recon::{recon_init, ReconConfig, ReconParams};
use crate::schedule::{alpha_beta, derive_seed, ItfsPolicy, WeightSchedule};
use crate::seg::{seg_init, LabelMap, Probabilities, SegConfig, SegParams};

/// Additive smoothing in the soft Dice loss.
pub const DICE_SMOOTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegLossKind {
    #[default]
    SoftDice,
    CrossEntropy,
}

/// How `L_recon` collapses the pixels of one image: the mean squared error, or
/// the plain squared L2 norm. Either way samples in a batch are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Loss choices for the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Losses {
    pub recon: Reduction,
    pub seg: SegLossKind,
}

impl From<SegLossKind> for Losses {
    fn from(seg: SegLossKind) -> Self {
        Self {
            recon: Reduction::default(),
            seg,
        }
    }
}

/// One training example: ground truth, its measurement and its labels.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Array2<T>,
    pub measured: MeasuredKSpace<T>,
    pub labels: LabelMap,
    pub volume_id: u32,
}

impl<T: Real> Sample<T> {
    pub fn new(image: Array2<T>, labels: LabelMap, mask: &SamplingMask, volume_id: u32) -> Result<Self> {
        if image.dim() != labels.dim() {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs labels {:?}",
                image.dim(),
                labels.dim()
            )));
        }
        let measured = kspace::measure(&image, mask)?;
        Ok(Self {
            image,
            measured,
            labels,
            volume_id,
        })
    }
}

/// Undersampling settings; each volume gets its own mask seeded from `seed`
/// and the volume id, shared by all of its slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_center_fraction")]
    pub center_fraction: f64,
    #[serde(default = "default_acceleration")]
    pub acceleration: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_center_fraction() -> f64 {
    0.08
}
fn default_acceleration() -> f64 {
    4.0
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            center_fraction: default_center_fraction(),
            acceleration: default_acceleration(),
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn volume_mask(&self, width: usize, volume_id: u32) -> Result<SamplingMask> {
        kspace::make_mask(
            width,
            self.center_fraction,
            self.acceleration,
            derive_seed(self.seed, volume_id as u64),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every_epochs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    #[serde(default)]
    pub schedule: WeightSchedule,
    #[serde(default)]
    pub itfs: ItfsPolicy,
    #[serde(default)]
    pub seg_loss: SegLossKind,
    #[serde(default)]
    pub recon_reduction: Reduction,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> u64 {
    50
}
fn default_batch_size() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-4
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            lr_decay: None,
            schedule: WeightSchedule::default(),
            itfs: ItfsPolicy::default(),
            seg_loss: SegLossKind::default(),
            recon_reduction: Reduction::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(d) = &self.lr_decay {
            if !(d.factor > 0.0) || d.every_epochs == 0 {
                return bad("lr_decay needs factor > 0 and every_epochs > 0".into());
            }
        }
        self.schedule.validate()?;
        self.itfs.validate()
    }

    pub fn learning_rate_at(&self, epoch: u64) -> f64 {
        match &self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every_epochs) as i32),
            None => self.learning_rate,
        }
    }
}

/// Everything needed to start a run besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub seg: SegConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub alpha: f64,
    pub beta: f64,
    pub teacher: bool,
    pub l_recon: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T = f32> {
    pub recon: ReconParams<T>,
    pub recon_opt: Adam<T>,
    pub seg: SegParams<T>,
    pub seg_opt: Adam<T>,
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    /// Root of every random stream used by training (init, data order).
    pub seed: u64,
    pub schedule: WeightSchedule,
    pub itfs: ItfsPolicy,
    pub seg_loss: SegLossKind,
    pub recon_reduction: Reduction,
    pub history: Vec<StepRecord>,
}

impl<T: Real> TrainState<T> {
    pub fn new(setup: &TrainSetup) -> Result<Self> {
        setup.training.validate()?;
        let seed = setup.training.seed;
        let recon = recon_init::<T>(&setup.recon, derive_seed(seed, 1))?;
        let seg = seg_init::<T>(&setup.seg, derive_seed(seed, 2))?;
        Ok(Self {
            recon_opt: Adam::new(recon.params()),
            seg_opt: Adam::new(seg.params()),
            recon,
            seg,
            epoch: 0,
            global_step: 0,
            seed,
            schedule: setup.training.schedule.clone(),
            itfs: setup.training.itfs.clone(),
            seg_loss: setup.training.seg_loss,
            recon_reduction: setup.training.recon_reduction,
            history: Vec::new(),
        })
    }
}

/// Mean squared difference between two magnitude images.
pub fn recon_loss<T: Real>(pred: &Array2<T>, target: &Array2<T>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Soft Dice loss averaged over the non-background classes.
pub fn seg_loss<T: Real>(probs: &Probabilities<T>, labels: &LabelMap) -> Result<f64> {
    seg_loss_with(SegLossKind::SoftDice, probs, labels)
}

pub fn seg_loss_with<T: Real>(
    kind: SegLossKind,
    probs: &Probabilities<T>,
    labels: &LabelMap,
) -> Result<f64> {
    let (c, h, w) = probs.0.dim();
    let p4 = probs.0.view().into_shape_with_order((c, 1, h, w)).unwrap();
    let (loss, _) = seg_loss_batch(kind, &p4.to_owned(), &[labels], false)?;
    Ok(loss)
}

fn check_labels(labels: &[&LabelMap], c: usize, h: usize, w: usize) -> Result<()> {
    for l in labels {
        if l.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?} vs probabilities {:?}",
                l.dim(),
                (h, w)
            )));
        }
        if let Some(&bad) = l.iter().find(|&&v| v as usize >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
    }
    Ok(())
}

/// Batch loss (mean over samples) and, when requested, its gradient with
/// respect to `probs` (`[C, B, H, W]`).
fn seg_loss_batch<T: Real>(
    kind: SegLossKind,
    probs: &Array4<T>,
    labels: &[&LabelMap],
    want_grad: bool,
) -> Result<(f64, Option<Array4<T>>)> {
    let (c, b, h, w) = probs.dim();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} label maps for a batch of {b}",
            labels.len()
        )));
    }
    check_labels(labels, c, h, w)?;
    let mut grad = want_grad.then(|| Array4::<T>::zeros((c, b, h, w)));
    let mut total = 0.0;
    match kind {
        SegLossKind::SoftDice => {
            if c < 2 {
                return Err(Error::InvalidConfig("soft Dice needs a foreground class".into()));
            }
            let scale = 1.0 / (b * (c - 1)) as f64;
            for (bi, lab) in labels.iter().enumerate() {
                for ci in 1..c {
                    let p = probs.index_axis(Axis(0), ci);
                    let p = p.index_axis(Axis(0), bi);
                    let mut inter = 0.0;
                    let mut sum_p = 0.0;
                    let mut sum_y = 0.0;
                    for (&pv, &y) in p.iter().zip(lab.iter()) {
                        let pv = pv.as_f64();
                        sum_p += pv;
                        if y as usize == ci {
                            inter += pv;
                            sum_y += 1.0;
                        }
                    }
                    let s = sum_p + sum_y + DICE_SMOOTH;
                    total += (1.0 - 2.0 * inter / s) * scale;
                    if let Some(g) = grad.as_mut() {
                        let mut g = g.index_axis_mut(Axis(0), ci);
                        let mut g = g.index_axis_mut(Axis(0), bi);
                        for (gv, &y) in g.iter_mut().zip(lab.iter()) {
                            let yv = if y as usize == ci { 1.0 } else { 0.0 };
                            *gv = T::lit(-2.0 * (yv * s - inter) / (s * s) * scale);
                        }
                    }
                }
            }
        }
        SegLossKind::CrossEntropy => {
            let scale = 1.0 / (b * h * w) as f64;
            for (bi, lab) in labels.iter().enumerate() {
                for ((yy, xx), &y) in lab.indexed_iter() {
                    let p = probs[(y as usize, bi, yy, xx)].as_f64().max(1e-12);
                    total -= p.ln() * scale;
                    if let Some(g) = grad.as_mut() {
                        g[(y as usize, bi, yy, xx)] = T::lit(-scale / p);
                    }
                }
            }
        }
    }
    Ok((total, grad))
}

/// Losses and parameter gradients of `alpha * L_recon + beta * L_seg` for one batch.
#[derive(Clone, Debug)]
pub struct JointGradients<T> {
    pub l_recon: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub recon: ParamSet<T>,
    pub seg: ParamSet<T>,
}

fn stack_images<T: Real>(batch: &[Sample<T>]) -> Result<Array4<T>> {
    let (h, w) = batch[0].image.dim();
    let mut out = Array4::<T>::zeros((1, batch.len(), h, w));
    for (i, s) in batch.iter().enumerate() {
        if s.image.dim() != (h, w) {
            return Err(Error::ShapeMismatch("batch mixes image sizes".into()));
        }
        out.index_axis_mut(Axis(1), i).index_axis_mut(Axis(0), 0).assign(&s.image);
    }
    Ok(out)
}

fn magnitude4<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (_, b, h, w) = x.dim();
    Array4::from_shape_fn((1, b, h, w), |(_, bi, yy, xx)| {
        x[(0, bi, yy, xx)].hypot(x[(1, bi, yy, xx)])
    })
}

fn run_joint<T: Real>(
    recon: &ReconParams<T>,
    seg: &SegParams<T>,
    batch: &[Sample<T>],
    weights: (f64, f64),
    teacher: bool,
    losses: Losses,
    want_grad: bool,
) -> Result<JointGradients<T>> {
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let (alpha, beta) = weights;
    let target = stack_images(batch)?;
    let ms: Vec<MeasuredKSpace<T>> = batch.iter().map(|s| s.measured.clone()).collect();
    let (out, rtrace) = recon.forward_batch(&ms)?;
    let mag = magnitude4(&out);
    if mag.dim() != target.dim() {
        return Err(Error::ShapeMismatch("measurement and image sizes differ".into()));
    }
    let n = match losses.recon {
        Reduction::Mean => mag.len(),
        Reduction::Sum => batch.len(),
    } as f64;
    let l_recon = mag
        .iter()
        .zip(&target)
        .map(|(&m, &t)| (m.as_f64() - t.as_f64()).powi(2))
        .sum::<f64>()
        / n;

    let seg_in = if teacher { target.clone() } else { mag.clone() };
    let (probs, strace) = seg.forward_batch(seg_in)?;
    let labels: Vec<&LabelMap> = batch.iter().map(|s| &s.labels).collect();
    let (l_seg, d_probs) = seg_loss_batch(losses.seg, &probs, &labels, want_grad)?;
    let l_total = alpha * l_recon + beta * l_seg;

    let mut recon_grads = recon.params().zeros_like();
    let mut seg_grads = seg.params().zeros_like();
    if let Some(d_probs) = d_probs {
        let d_probs = d_probs * T::lit(beta);
        let d_seg_in = seg.backward_batch(&strace, &d_probs, &mut seg_grads, !teacher);

        let two_alpha_n = T::lit(2.0 * alpha / n);
        let mut d_mag = Array4::from_shape_fn(mag.dim(), |i| two_alpha_n * (mag[i] - target[i]));
        if let Some(d) = d_seg_in {
            d_mag += &d;
        }
        let (_, b, h, w) = out.dim();
        let mut d_out = Array4::<T>::zeros((2, b, h, w));
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let m = mag[(0, bi, yy, xx)];
                    if m > T::zero() {
                        let g = d_mag[(0, bi, yy, xx)] / m;
                        d_out[(0, bi, yy, xx)] = g * out[(0, bi, yy, xx)];
                        d_out[(1, bi, yy, xx)] = g * out[(1, bi, yy, xx)];
                    }
                }
            }
        }
        recon.backward_batch(&rtrace, d_out, &mut recon_grads);
    }
    Ok(JointGradients {
        l_recon,
        l_seg,
        l_total,
        recon: recon_grads,
        seg: seg_grads,
    })
}

/// Losses and gradients of the weighted joint objective. On a teacher step the
/// segmentation network sees the fully sampled images, so reconstruction
/// parameters receive gradient only through `L_recon`.
pub fn joint_gradients<T: Real>(
    recon: &ReconParams<T>,
    seg: &SegParams<T>,
    batch: &[Sample<T>],
    weights: (f64, f64),
    teacher: bool,
    losses: impl Into<Losses>,
) -> Result<JointGradients<T>> {
    run_joint(recon, seg, batch, weights, teacher, losses.into(), true)
}

/// Forward-only `(L_recon, L_seg, L_total)`.
pub fn joint_loss<T: Real>(
    recon: &ReconParams<T>,
    seg: &SegParams<T>,
    batch: &[Sample<T>],
    weights: (f64, f64),
    teacher: bool,
    losses: impl Into<Losses>,
) -> Result<(f64, f64, f64)> {
    let j = run_joint(recon, seg, batch, weights, teacher, losses.into(), false)?;
    Ok((j.l_recon, j.l_seg, j.l_total))
}

/// One optimizer update on both networks. The record is appended to the
/// state's history and returned.
pub fn train_step<T: Real>(state: &mut TrainState<T>, batch: &[Sample<T>], lr: f64) -> Result<StepRecord> {
    let (alpha, beta) = alpha_beta(&state.schedule, state.epoch as i64)?;
    let teacher = state.itfs.is_teacher(state.global_step);
    let g = joint_gradients(
        &state.recon,
        &state.seg,
        batch,
        (alpha, beta),
        teacher,
        Losses {
            recon: state.recon_reduction,
            seg: state.seg_loss,
        },
    )?;
    let record = StepRecord {
        step: state.global_step,
        epoch: state.epoch,
        alpha,
        beta,
        teacher,
        l_recon: g.l_recon,
        l_seg: g.l_seg,
        l_total: g.l_total,
    };
    if !g.l_total.is_finite() || !g.recon.all_finite() || !g.seg.all_finite() {
        return Err(Error::NonFinite(format!(
            "step {} (epoch {}): L_recon={} L_seg={} L_total={}",
            record.step, record.epoch, record.l_recon, record.l_seg, record.l_total
        )));
    }
    state.recon_opt.update(state.recon.params_mut(), &g.recon, lr);
    state.seg_opt.update(state.seg.params_mut(), &g.seg, lr);
    state.global_step += 1;
    state.history.push(record.clone());
    Ok(record)
}

/// Loads every item of a manifest and measures it with its volume's mask.
pub fn load_samples(manifest: &DatasetManifest, mask: &MaskConfig) -> Result<Vec<Sample<f32>>> {
    if manifest.is_empty() {
        return Err(Error::EmptySplit(format!(
            "{} split under {}",
            manifest.split.as_str(),
            manifest.root.display()
        )));
    }
    (0..manifest.len())
        .map(|i| {
            let (image, labels, volume_id) = phantom::load_sample(manifest, i)?;
            let m = mask.volume_mask(image.ncols(), volume_id)?;
            Sample::new(image, labels, &m, volume_id)
        })
        .collect()
}

/// Sample order for an epoch; depends only on the run seed and epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + epoch));
    order.shuffle(&mut rng);
    order
}

/// Where a run writes its checkpoints and loss history.
#[derive(Clone, Copy, Debug)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u64,
}

/// Trains on in-memory samples until `state.epoch == training.epochs`.
/// With an output, writes `checkpoints/epoch_NNNN.ckpt` at the configured
/// cadence, then `final.ckpt` and `loss.csv`.
pub fn train_samples(
    state: &mut TrainState<f32>,
    training: &TrainingConfig,
    samples: &[Sample<f32>],
    out: Option<RunOutput>,
) -> Result<()> {
    training.validate()?;
    if samples.is_empty() && state.epoch < training.epochs {
        return Err(Error::EmptySplit("no training samples".into()));
    }
    while state.epoch < training.epochs {
        let lr = training.learning_rate_at(state.epoch);
        let order = epoch_order(state.seed, state.epoch, samples.len());
        for chunk in order.chunks(training.batch_size) {
            let batch: Vec<Sample<f32>> = chunk.iter().map(|&i| samples[i].clone()).collect();
            train_step(state, &batch, lr)?;
        }
        state.epoch += 1;
        if let Some(o) = out {
            if o.checkpoint_every > 0 && state.epoch % o.checkpoint_every == 0 {
                let path = o
                    .dir
                    .join("checkpoints")
                    .join(format!("epoch_{:04}.ckpt", state.epoch));
                checkpoint::save(state, &path)?;
            }
        }
    }
    if let Some(o) = out {
        write_run_outputs(state, o.dir)?;
    }
    Ok(())
}

fn write_run_outputs(state: &TrainState<f32>, dir: &Path) -> Result<()> {
    checkpoint::save(state, &final_checkpoint_path(dir))?;
    write_loss_csv(&state.history, &loss_csv_path(dir))
}

pub fn loss_csv_path(run_dir: &Path) -> PathBuf {
    run_dir.join("loss.csv")
}

pub fn final_checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("final.ckpt")
}

/// Fresh run on a dataset split.
pub fn train(setup: &TrainSetup, manifest: &DatasetManifest, out: Option<RunOutput>) -> Result<TrainState> {
    let mut state = TrainState::<f32>::new(setup)?;
    if setup.training.epochs == 0 {
        if let Some(o) = out {
            write_run_outputs(&state, o.dir)?;
        }
        return Ok(state);
    }
    let samples = load_samples(manifest, &setup.mask)?;
    train_samples(&mut state, &setup.training, &samples, out)?;
    Ok(state)
}

/// Continues a run from a checkpoint up to `setup.training.epochs`.
pub fn resume(
    setup: &TrainSetup,
    manifest: &DatasetManifest,
    checkpoint_path: &Path,
    out: Option<RunOutput>,
) -> Result<TrainState> {
    let mut state = checkpoint::load::<f32>(checkpoint_path)?;
    let samples = load_samples(manifest, &setup.mask)?;
    train_samples(&mut state, &setup.training, &samples, out)?;
    Ok(state)
}

/// Free-running inference: the reconstruction magnitude feeds segmentation.
pub fn infer<T: Real>(
    state: &TrainState<T>,
    m: &MeasuredKSpace<T>,
) -> Result<(Array2<T>, Probabilities<T>)> {
    let (out, _) = state.recon.forward_batch(std::slice::from_ref(m))?;
    let mag = magnitude4(&out);
    let (probs, _) = state.seg.forward_batch(mag.clone())?;
    let (_, _, h, w) = mag.dim();
    let image = mag.into_shape_with_order((h, w)).unwrap();
    Ok((image, Probabilities(probs.index_axis_move(Axis(1), 0))))
}

/// Zero-filled magnitude, the no-network baseline.
pub fn zero_filled_magnitude<T: Real>(m: &MeasuredKSpace<T>) -> Result<Array2<T>> {
    Ok(kspace::zero_fill(m)?.magnitude())
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,alpha,beta,teacher,L_recon,L_seg,L_total";

pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.alpha, r.beta, r.teacher as u8, r.l_recon, r.l_seg, r.l_total
        )
        .unwrap();
    }
    out
}

pub fn write_loss_csv(history: &[StepRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}

/// Parses a loss CSV written by [`write_loss_csv`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(corrupt("unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(corrupt(format!("row {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| corrupt(format!("row {}: {e}", i + 1)));
            let int = |s: &str| s.parse::<u64>().map_err(|e| corrupt(format!("row {}: {e}", i + 1)));
            Ok(StepRecord {
                step: int(f[0])?,
                epoch: int(f[1])?,
                alpha: num(f[2])?,
                beta: num(f[3])?,
                teacher: f[4] == "1",
                l_recon: num(f[5])?,
                l_seg: num(f[6])?,
                l_total: num(f[7])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::seg::seg_forward;

    fn toy_setup() -> TrainSetup {
        TrainSetup {
            recon: ReconConfig {
                n_cascades: 1,
                convs_per_block: 2,
                channels: 4,
                ..ReconConfig::default()
            },
            seg: SegConfig {
                depth: 1,
                base_channels: 4,
                ..SegConfig::default()
            },
            mask: MaskConfig {
                center_fraction: 0.25,
                acceleration: 2.0,
                seed: 3,
            },
            training: TrainingConfig {
                epochs: 2,
                batch_size: 2,
                learning_rate: 1e-3,
                ..TrainingConfig::default()
            },
        }
    }

    fn toy_samples(n: usize, size: usize) -> Vec<Sample<f32>> {
        let pc = PhantomConfig {
            height: size,
            width: size,
            ..PhantomConfig::default()
        };
        let setup = toy_setup();
        (0..n)
            .map(|i| {
                let p = generate_phantom(&pc, i as u64).unwrap();
                let m = setup.mask.volume_mask(size, i as u32 / 2).unwrap();
                Sample::new(p.image, p.labels, &m, i as u32 / 2).unwrap()
            })
            .collect()
    }

    fn one_hot_probs(labels: &LabelMap, c: usize) -> Probabilities<f64> {
        let (h, w) = labels.dim();
        Probabilities(ndarray::Array3::from_shape_fn((c, h, w), |(k, y, x)| {
            if labels[(y, x)] as usize == k {
                1.0
            } else {
                0.0
            }
        }))
    }

    #[test]
    fn recon_loss_examples() {
        let a = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        assert!((recon_loss(&(&a + 1.0), &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(recon_loss(&a, &Array2::zeros((4, 3))).is_err());
    }

    #[test]
    fn dice_loss_examples() {
        let mut labels = Array2::<u8>::zeros((4, 4));
        for x in 0..4 {
            labels[(1, x)] = 1;
        }
        let perfect = seg_loss(&one_hot_probs(&labels, 2), &labels).unwrap();
        assert!((perfect - (1.0 - 8.0 / 8.1)).abs() < 1e-12);

        let mut shifted = Array2::<u8>::zeros((4, 4));
        for x in 0..4 {
            shifted[(3, x)] = 1;
        }
        let disjoint = seg_loss(&one_hot_probs(&shifted, 2), &labels).unwrap();
        assert_eq!(disjoint, 1.0);

        let empty = Array2::<u8>::zeros((4, 4));
        assert_eq!(seg_loss(&one_hot_probs(&empty, 2), &empty).unwrap(), 1.0);

        let bad = Array2::<u8>::from_elem((4, 4), 2);
        assert!(matches!(
            seg_loss(&one_hot_probs(&empty, 2), &bad),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn teacher_step_isolates_recon_from_segmentation() {
        let setup = toy_setup();
        let state = TrainState::<f64>::new(&setup).unwrap();
        let batch: Vec<Sample<f64>> = toy_samples(2, 16)
            .into_iter()
            .map(|s| Sample {
                image: s.image.mapv(|v| v as f64),
                measured: s.measured.cast(),
                labels: s.labels,
                volume_id: s.volume_id,
            })
            .collect();
        let g = joint_gradients(&state.recon, &state.seg, &batch, (0.0, 1.0), true, SegLossKind::SoftDice).unwrap();
        assert!(g.recon.iter().all(|p| p.data.iter().all(|&v| v == 0.0)));
        assert!(g.seg.iter().any(|p| p.data.iter().any(|&v| v != 0.0)));
        let g = joint_gradients(&state.recon, &state.seg, &batch, (0.0, 1.0), false, SegLossKind::SoftDice).unwrap();
        assert!(g.recon.iter().any(|p| p.data.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn pure_recon_step_leaves_seg_unchanged() {
        let mut setup = toy_setup();
        setup.training.schedule = WeightSchedule::fixed(1.0);
        let mut state = TrainState::<f32>::new(&setup).unwrap();
        let before = state.seg.params().clone();
        let recon_before = state.recon.params().clone();
        let batch = toy_samples(2, 16);
        train_step(&mut state, &batch, 1e-3).unwrap();
        assert_eq!(state.seg.params(), &before);
        assert_ne!(state.recon.params(), &recon_before);
    }

    #[test]
    fn step_record_matches_replay() {
        let setup = toy_setup();
        let mut state = TrainState::<f32>::new(&setup).unwrap();
        let pre = state.clone();
        let batch = toy_samples(2, 16);
        let rec = train_step(&mut state, &batch, 1e-3).unwrap();
        let (lr, ls, lt) = joint_loss(&pre.recon, &pre.seg, &batch, (rec.alpha, rec.beta), true, SegLossKind::SoftDice).unwrap();
        assert!(rec.teacher);
        assert_eq!((rec.alpha, rec.beta), (0.8, 0.2));
        assert_eq!((rec.l_recon, rec.l_seg, rec.l_total), (lr, ls, lt));
        // Independent recomputation of the loss terms from the pre-step parameters.
        let mut r_sum = 0.0;
        let mut s_sum = 0.0;
        for s in &batch {
            let img = pre.recon.forward(&s.measured).unwrap().magnitude();
            r_sum += recon_loss(&img, &s.image).unwrap();
            s_sum += seg_loss(&seg_forward(&pre.seg, &s.image).unwrap(), &s.labels).unwrap();
        }
        assert!((lr - r_sum / 2.0).abs() < 1e-6);
        assert!((ls - s_sum / 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let setup = TrainSetup {
            training: TrainingConfig {
                epochs: 0,
                ..toy_setup().training
            },
            ..toy_setup()
        };
        let mut state = TrainState::<f32>::new(&setup).unwrap();
        let init = state.clone();
        train_samples(&mut state, &setup.training, &toy_samples(3, 16), None).unwrap();
        assert_eq!(state, init);
        assert!(state.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let setup = toy_setup();
        let samples = toy_samples(5, 16);
        let run = || {
            let mut s = TrainState::<f32>::new(&setup).unwrap();
            train_samples(&mut s, &setup.training, &samples, None).unwrap();
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history.len(), 6);
        assert_eq!(loss_csv(&a.history), loss_csv(&b.history));
        assert_eq!(a, b);
    }

    #[test]
    fn infer_is_free_running_and_deterministic() {
        let setup = toy_setup();
        let state = TrainState::<f32>::new(&setup).unwrap();
        let s = &toy_samples(1, 16)[0];
        let (img, probs) = infer(&state, &s.measured).unwrap();
        let (img2, probs2) = infer(&state, &s.measured).unwrap();
        assert_eq!(img, img2);
        assert_eq!(probs, probs2);
        let expected = seg_forward(&state.seg, &img).unwrap();
        assert_eq!(probs, expected);
        let mut other = state.clone();
        other.itfs.teacher_ratio = 1.0;
        assert_eq!(infer(&other, &s.measured).unwrap().1, probs);
    }

    #[test]
    fn lr_decay() {
        let t = TrainingConfig {
            learning_rate: 1e-3,
            lr_decay: Some(LrDecay {
                factor: 0.2,
                every_epochs: 10,
            }),
            ..TrainingConfig::default()
        };
        assert_eq!(t.learning_rate_at(9), 1e-3);
        assert!((t.learning_rate_at(10) - 2e-4).abs() < 1e-18);
        assert!((t.learning_rate_at(25) - 4e-5).abs() < 1e-18);
    }
}

//! Minimal building blocks for the two sub-networks: a flat parameter store,
//! same-padded 2D convolution via im2col + GEMM, pooling, upsampling and the
//! Adam update. Activations use a channel-major `[C, B, H, W]` layout so a
//! convolution over a whole batch is a single matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// One named parameter tensor, stored flat in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of parameter tensors. Gradients and optimizer moments
/// use the same layout as the parameters they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Shape manifest entry, `layer name -> tensor shape`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name, shape, data });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn shape_manifest(&self) -> Vec<ShapeEntry> {
        self.params
            .iter()
            .map(|p| ShapeEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    /// Flat view of scalar `i` across all tensors.
    pub fn scalar(&self, mut i: usize) -> T {
        for p in &self.params {
            if i < p.data.len() {
                return p.data[i];
            }
            i -= p.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn scalar_mut(&mut self, mut i: usize) -> &mut T {
        for p in &mut self.params {
            if i < p.data.len() {
                return &mut p.data[i];
            }
            i -= p.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Little-endian container: tensor count, then per tensor the name,
    /// rank, dims and values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.count() * T::BYTES);
        out.push(T::DTYPE_CODE);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let dtype = r.u8()?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Checkpoint(format!(
                "parameter dtype code {dtype}, expected {}",
                T::DTYPE_CODE
            )));
        }
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            params.push(Param { name, shape, data });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self { params })
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Same-padded, stride-1 convolution with an odd square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    weight: usize,
    bias: usize,
}

impl Conv {
    /// Registers weight `[cout, cin, k, k]` and bias `[cout]`. Weights are
    /// He-uniform in the fan-in unless `zero` is set; biases start at zero.
    pub(crate) fn register<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight_data = (0..cout * fan_in)
            .map(|_| {
                if zero {
                    T::zero()
                } else {
                    T::lit(rng.random_range(-bound..bound))
                }
            })
            .collect();
        let weight = params.push(format!("{name}.weight"), vec![cout, cin, k, k], weight_data);
        let bias = params.push(format!("{name}.bias"), vec![cout], vec![T::zero(); cout]);
        Self {
            cin,
            cout,
            k,
            weight,
            bias,
        }
    }

    /// Parameter count of one layer.
    pub(crate) fn count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    fn weight_view<'a, T: Real>(&self, params: &'a ParamSet<T>) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), &params.get(self.weight).data)
            .expect("weight shape")
    }

    pub(crate) fn forward<T: Real>(&self, params: &ParamSet<T>, x: &Array4<T>) -> Array4<T> {
        let (c, b, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let n = b * h * w;
        let weight = self.weight_view(params);
        let mut y = Array2::<T>::zeros((self.cout, n));
        if self.k == 1 {
            let xm = x.view().into_shape_with_order((c, n)).expect("standard layout");
            general_mat_mul(T::one(), &weight, &xm, T::zero(), &mut y);
        } else {
            for tile in tiles(c * self.k * self.k, b, h, w) {
                let col = im2col(x, self.k, &tile);
                let mut yt = y.slice_mut(s![.., tile.columns(h, w)]);
                general_mat_mul(T::one(), &weight, &col, T::zero(), &mut yt);
            }
        }
        let bias = &params.get(self.bias).data;
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias) {
            row.mapv_inplace(|v| v + bv);
        }
        y.into_shape_with_order((self.cout, b, h, w)).unwrap()
    }

    /// Accumulates weight and bias gradients into `grads` and returns the
    /// input gradient when `need_dx` is set.
    pub(crate) fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
        grads: &mut ParamSet<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let (c, b, h, w) = x.dim();
        let n = b * h * w;
        let dy2 = dy
            .view()
            .into_shape_with_order((self.cout, n))
            .expect("standard layout");
        let kk = c * self.k * self.k;
        {
            let gb = &mut grads.get_mut(self.bias).data;
            for (g, row) in gb.iter_mut().zip(dy2.axis_iter(Axis(0))) {
                *g += row.sum();
            }
        }
        let weight = self.weight_view(params);
        if self.k == 1 {
            let x2 = x.view().into_shape_with_order((c, n)).unwrap();
            let gw = &mut grads.get_mut(self.weight).data;
            let mut gw = ArrayViewMut2::from_shape((self.cout, kk), gw).unwrap();
            general_mat_mul(T::one(), &dy2, &x2.t(), T::one(), &mut gw);
            if !need_dx {
                return None;
            }
            let mut dx = Array2::<T>::zeros((kk, n));
            general_mat_mul(T::one(), &weight.t(), &dy2, T::zero(), &mut dx);
            return Some(dx.into_shape_with_order((c, b, h, w)).unwrap());
        }
        let mut dx = need_dx.then(|| Array4::<T>::zeros((c, b, h, w)));
        let mut dcol = Array2::<T>::zeros((0, 0));
        for tile in tiles(kk, b, h, w) {
            let col = im2col(x, self.k, &tile);
            let dyt = dy2.slice(s![.., tile.columns(h, w)]);
            {
                let gw = &mut grads.get_mut(self.weight).data;
                let mut gw = ArrayViewMut2::from_shape((self.cout, kk), gw).unwrap();
                general_mat_mul(T::one(), &dyt, &col.t(), T::one(), &mut gw);
            }
            if let Some(dx) = dx.as_mut() {
                if dcol.dim() != col.dim() {
                    dcol = Array2::zeros(col.dim());
                }
                general_mat_mul(T::one(), &weight.t(), &dyt, T::zero(), &mut dcol);
                col2im_add(&dcol, dx, self.k, &tile);
            }
        }
        dx
    }
}

/// Rows `y0..y1` of batch item `b`; the unit of the tiled im2col.
#[derive(Clone, Copy, Debug)]
struct Tile {
    b: usize,
    y0: usize,
    y1: usize,
}

impl Tile {
    fn columns(&self, h: usize, w: usize) -> std::ops::Range<usize> {
        (self.b * h + self.y0) * w..(self.b * h + self.y1) * w
    }
}

/// Splits the output into row bands whose im2col block stays cache-sized.
fn tiles(kk: usize, b: usize, h: usize, w: usize) -> impl Iterator<Item = Tile> {
    const TARGET_ELEMS: usize = 1 << 16;
    let rows = (TARGET_ELEMS / (kk * w).max(1)).clamp(1, h);
    (0..b).flat_map(move |bi| {
        (0..h).step_by(rows).map(move |y0| Tile {
            b: bi,
            y0,
            y1: (y0 + rows).min(h),
        })
    })
}

/// Copies `src` shifted left by `shift` (right when negative) into `dst`,
/// zero-filling what falls outside.
#[inline]
fn shifted_copy<T: Real>(dst: &mut [T], src: &[T], shift: isize) {
    let w = dst.len() as isize;
    if shift.abs() >= w {
        dst.fill(T::zero());
    } else if shift >= 0 {
        let s = shift as usize;
        let w = w as usize;
        dst[..w - s].copy_from_slice(&src[s..]);
        dst[w - s..].fill(T::zero());
    } else {
        let s = (-shift) as usize;
        let w = w as usize;
        dst[..s].fill(T::zero());
        dst[s..].copy_from_slice(&src[..w - s]);
    }
}

#[inline]
fn shifted_add<T: Real>(dst: &mut [T], src: &[T], shift: isize) {
    // dst[x + shift] += src[x]
    let w = dst.len() as isize;
    if shift.abs() >= w {
        return;
    }
    if shift >= 0 {
        let s = shift as usize;
        for (d, &v) in dst[s..].iter_mut().zip(src) {
            *d += v;
        }
    } else {
        let s = (-shift) as usize;
        for (d, &v) in dst.iter_mut().zip(&src[s..]) {
            *d += v;
        }
    }
}

/// Unfolds the `k x k` neighbourhoods of one tile into columns:
/// row `(ci, ky, kx)`, column `(y - y0) * w + x`.
fn im2col<T: Real>(x: &Array4<T>, k: usize, tile: &Tile) -> Array2<T> {
    let (c, b, h, w) = x.dim();
    let n = (tile.y1 - tile.y0) * w;
    let pad = (k / 2) as isize;
    let xs = x.as_slice().expect("standard layout");
    let mut col = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                for y in tile.y0..tile.y1 {
                    let dst = &mut row[(y - tile.y0) * w..][..w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &xs[((ci * b + tile.b) * h + sy as usize) * w..][..w];
                    shifted_copy(dst, src, dx);
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, n), col).unwrap()
}

/// Adjoint of [`im2col`], accumulated into `out`.
fn col2im_add<T: Real>(col: &Array2<T>, out: &mut Array4<T>, k: usize, tile: &Tile) {
    let (c, b, h, w) = out.dim();
    let n = (tile.y1 - tile.y0) * w;
    let pad = (k / 2) as isize;
    let cs = col.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &cs[((ci * k + ky) * k + kx) * n..][..n];
                for y in tile.y0..tile.y1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[(y - tile.y0) * w..][..w];
                    let dst = &mut os[((ci * b + tile.b) * h + sy as usize) * w..][..w];
                    shifted_add(dst, src, dx);
                }
            }
        }
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Masks `dy` by the post-activation values `y`.
pub(crate) fn relu_backward_inplace<T: Real>(dy: &mut Array4<T>, y: &Array4<T>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
}

/// 2x2 max pooling. Returns the pooled map and the winning offset (0..4) per
/// output cell; ties go to the first offset in row-major order.
pub(crate) fn max_pool2<T: Real>(x: &Array4<T>) -> (Array4<T>, Vec<u8>) {
    let (c, b, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<T>::zeros((c, b, ho, wo));
    let mut arg = vec![0u8; c * b * ho * wo];
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for plane in 0..c * b {
        for i in 0..ho {
            for j in 0..wo {
                let base = plane * h * w;
                let cands = [
                    xs[base + (2 * i) * w + 2 * j],
                    xs[base + (2 * i) * w + 2 * j + 1],
                    xs[base + (2 * i + 1) * w + 2 * j],
                    xs[base + (2 * i + 1) * w + 2 * j + 1],
                ];
                let mut best = 0;
                for q in 1..4 {
                    if cands[q] > cands[best] {
                        best = q;
                    }
                }
                let o = (plane * ho + i) * wo + j;
                ys[o] = cands[best];
                arg[o] = best as u8;
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool2_backward<T: Real>(
    dy: &Array4<T>,
    arg: &[u8],
    in_dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (c, b, h, w) = in_dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Array4::<T>::zeros(in_dims);
    let dxs = dx.as_slice_mut().unwrap();
    let dys = dy.as_slice().unwrap();
    for plane in 0..c * b {
        for i in 0..ho {
            for j in 0..wo {
                let o = (plane * ho + i) * wo + j;
                let q = arg[o] as usize;
                let (di, dj) = (q / 2, q % 2);
                dxs[plane * h * w + (2 * i + di) * w + 2 * j + dj] += dys[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((c, b, 2 * h, 2 * w));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for plane in 0..c * b {
        for i in 0..2 * h {
            for j in 0..2 * w {
                ys[(plane * 2 * h + i) * 2 * w + j] = xs[(plane * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (c, b, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((c, b, h, w));
    let dys = dy.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for plane in 0..c * b {
        for i in 0..h2 {
            for j in 0..w2 {
                dxs[(plane * h + i / 2) * w + j / 2] += dys[(plane * h2 + i) * w2 + j];
            }
        }
    }
    dx
}

/// Channel concatenation of two `[C, B, H, W]` maps.
pub(crate) fn concat_channels<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("concat shapes")
}

pub(crate) fn split_channels<T: Real>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        d.slice(s![..first, .., .., ..]).to_owned(),
        d.slice(s![first.., .., .., ..]).to_owned(),
    )
}

/// Softmax over the channel axis.
pub(crate) fn softmax_channels<T: Real>(logits: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = logits.dim();
    let plane = b * h * w;
    let ls = logits.as_slice().unwrap();
    let mut out = vec![T::zero(); ls.len()];
    for p in 0..plane {
        let mut mx = T::neg_infinity();
        for ci in 0..c {
            mx = mx.max(ls[ci * plane + p]);
        }
        let mut sum = T::zero();
        for ci in 0..c {
            let e = (ls[ci * plane + p] - mx).exp();
            out[ci * plane + p] = e;
            sum += e;
        }
        for ci in 0..c {
            out[ci * plane + p] /= sum;
        }
    }
    Array4::from_shape_vec((c, b, h, w), out).unwrap()
}

/// Given softmax output `p` and `dL/dp`, returns `dL/dlogits`.
pub(crate) fn softmax_backward<T: Real>(p: &Array4<T>, dp: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = p.dim();
    let plane = b * h * w;
    let ps = p.as_slice().unwrap();
    let ds = dp.as_slice().unwrap();
    let mut out = vec![T::zero(); ps.len()];
    for q in 0..plane {
        let mut dot = T::zero();
        for ci in 0..c {
            dot += ps[ci * plane + q] * ds[ci * plane + q];
        }
        for ci in 0..c {
            out[ci * plane + q] = ps[ci * plane + q] * (ds[ci * plane + q] - dot);
        }
    }
    Array4::from_shape_vec((c, b, h, w), out).unwrap()
}

/// Adaptive-moment optimizer state for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::lit(lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / sqrt_bc2 + eps);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        for part in [self.m.to_bytes(), self.v.to_bytes()] {
            out.extend_from_slice(&(part.len() as u64).to_le_bytes());
            out.extend_from_slice(&part);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let f = |r: &mut ByteReader| r.u64().map(f64::from_bits);
        let beta1 = f(&mut r)?;
        let beta2 = f(&mut r)?;
        let eps = f(&mut r)?;
        let step = r.u64()?;
        let len = r.u64()? as usize;
        let m = ParamSet::from_bytes(r.take(len)?)?;
        let len = r.u64()? as usize;
        let v = ParamSet::from_bytes(r.take(len)?)?;
        Ok(Self {
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct same-padded convolution, independent of im2col.
    fn naive_conv(x: &Array4<f64>, w: &[f64], bias: &[f64], cout: usize, k: usize) -> Array4<f64> {
        let (cin, b, h, wd) = x.dim();
        let pad = (k / 2) as isize;
        Array4::from_shape_fn((cout, b, h, wd), |(co, bi, y, xx)| {
            let mut acc = bias[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                            acc += w[((co * cin + ci) * k + ky) * k + kx]
                                * x[(ci, bi, sy as usize, sx as usize)];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, h, w) in &[(3, 5, 6), (5, 4, 4), (1, 3, 3), (3, 1, 1), (3, 2, 2)] {
            let mut params = ParamSet::<f64>::new();
            let conv = Conv::register(&mut params, "c", 3, 4, k, false, &mut rng);
            for v in params.get_mut(1).data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let x = random4((3, 2, h, w), 7);
            let y = conv.forward(&params, &x);
            let expected = naive_conv(&x, &params.get(0).data, &params.get(1).data, 4, k);
            let err = (&y - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "k={k} err={err}");
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <dy, conv(x) - b> == <dx, x> for the input gradient, and the weight
        // gradient pairs with the weights the same way.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::<f64>::new();
        let conv = Conv::register(&mut params, "c", 2, 3, 3, false, &mut rng);
        let x = random4((2, 2, 5, 4), 3);
        let dy = random4((3, 2, 5, 4), 4);
        let y = conv.forward(&params, &x);
        let lhs: f64 = (&y * &dy).sum();
        let mut grads = params.zeros_like();
        let dx = conv.backward(&params, &x, &dy, &mut grads, true).unwrap();
        let rhs: f64 = (&dx * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let gw: f64 = grads
            .get(0)
            .data
            .iter()
            .zip(&params.get(0).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - gw).abs() < 1e-10);
        assert!((grads.get(1).data.iter().sum::<f64>() - dy.sum()).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let x = random4((2, 1, 4, 6), 5);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.dim(), (2, 1, 2, 3));
        let dy = random4(y.dim(), 6);
        let dx = max_pool2_backward(&dy, &arg, x.dim());
        assert!(((&dy * &y).sum() - (&dx * &x).sum()).abs() < 1e-12);

        let u = upsample2(&y);
        let du = random4(u.dim(), 8);
        let back = upsample2_backward(&du);
        assert!(((&du * &u).sum() - (&back * &y).sum()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = random4((3, 2, 2, 2), 9).mapv(|v| v * 30.0);
        let p = softmax_channels(&x);
        for s in p.sum_axis(Axis(0)).iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_bytes_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::<f32>::new();
        Conv::register(&mut params, "a", 2, 3, 3, false, &mut rng);
        Conv::register(&mut params, "b", 3, 1, 1, false, &mut rng);
        let bytes = params.to_bytes();
        assert_eq!(ParamSet::<f32>::from_bytes(&bytes).unwrap(), params);
        assert!(ParamSet::<f64>::from_bytes(&bytes).is_err());
        assert!(ParamSet::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::<f64>::new();
        Conv::register(&mut params, "a", 2, 3, 3, false, &mut rng);
        let before = params.clone();
        let mut opt = Adam::new(&params);
        opt.update(&mut params, &before.zeros_like(), 1e-3);
        assert_eq!(params, before);
        assert_eq!(opt.step, 1);
        let restored = Adam::<f64>::from_bytes(&opt.to_bytes()).unwrap();
        assert_eq!(restored, opt);
    }
}

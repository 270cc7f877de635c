//! Dense row-major tensors and the convolution lowering used by the
//! networks.
//!
//! Everything is generic over [`Real`] so the same network code runs in
//! `f32` for training and serving, and in `f64` where numerical checks need
//! the extra headroom (finite differences, linearity checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c = a · b + beta · c` on strided matrices, `a` is `m×k`, `b` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    assert!((last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The scalar held by a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// The `i`-th slice along the leading axis, as a borrowed slice.
    pub fn outer(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize, pad_mode: PadMode) -> Self {
        ConvSpec {
            kernel,
            stride,
            pad,
            pad_mode,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::Shape(format!(
                "input {h}×{w} too small for kernel {} with pad {}",
                self.kernel, self.pad
            )));
        }
        if self.pad_mode == PadMode::Reflect && (self.pad >= h || self.pad >= w) {
            return Err(Error::Shape(format!(
                "reflect pad {} needs input larger than {h}×{w}",
                self.pad
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    /// Source coordinate along one axis for output position `o` and kernel
    /// tap `k`, or `None` when it falls into zero padding.
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        let n = len as isize;
        if (0..n).contains(&i) {
            return Some(i as usize);
        }
        match self.pad_mode {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                Some(r as usize)
            }
        }
    }

    /// Per-axis lookup table `[k][o] -> source index`.
    fn index_table(&self, out: usize, len: usize) -> Vec<Option<usize>> {
        let mut table = Vec::with_capacity(self.kernel * out);
        for k in 0..self.kernel {
            for o in 0..out {
                table.push(self.source(o, k, len));
            }
        }
        table
    }
}

/// A maximal stretch of output positions whose sources advance by a
/// constant step along one axis.
#[derive(Clone, Copy, Debug)]
struct Run {
    out: usize,
    len: usize,
    src: usize,
    step: isize,
}

/// Per kernel tap: the runs covering in-bounds sources, and whether every
/// output position is covered (no zero padding involved).
fn axis_runs(spec: &ConvSpec, out: usize, len: usize) -> Vec<(Vec<Run>, bool)> {
    (0..spec.kernel)
        .map(|k| {
            let mut runs: Vec<Run> = Vec::new();
            let mut covered = 0;
            for o in 0..out {
                let Some(s) = spec.source(o, k, len) else { continue };
                covered += 1;
                if let Some(r) = runs.last_mut() {
                    if r.out + r.len == o {
                        let want = r.src as isize + r.step * r.len as isize;
                        if r.len == 1 {
                            let step = s as isize - r.src as isize;
                            if step != 0 {
                                r.step = step;
                                r.len += 1;
                                continue;
                            }
                        } else if want == s as isize {
                            r.len += 1;
                            continue;
                        }
                    }
                }
                runs.push(Run {
                    out: o,
                    len: 1,
                    src: s,
                    step: 1,
                });
            }
            (runs, covered == out)
        })
        .collect()
}

/// Lowering of one `c×h×w` sample into a `(c·k·k) × (oh·ow)` matrix.
pub(crate) struct Im2Col {
    rows: Vec<Option<usize>>,
    cols: Vec<(Vec<Run>, bool)>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    identity: bool,
}

impl Im2Col {
    pub fn new(spec: &ConvSpec, c: usize, h: usize, w: usize) -> Result<Self> {
        let (oh, ow) = spec.output_size(h, w)?;
        Ok(Im2Col {
            rows: spec.index_table(oh, h),
            cols: axis_runs(spec, ow, w),
            c,
            h,
            w,
            oh,
            ow,
            k: spec.kernel,
            identity: spec.kernel == 1 && spec.stride == 1 && spec.pad == 0,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// True when lowering is the identity (1×1, stride 1, no padding), so
    /// the sample itself can be used as the column matrix.
    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn lower<T: Real>(&self, src: &[T], dst: &mut [T]) {
        if self.identity {
            dst.copy_from_slice(src);
            return;
        }
        let (k, oh, ow, l) = (self.k, self.oh, self.ow, self.out_len());
        let mut row = 0;
        for ch in 0..self.c {
            let plane = &src[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let out = &mut dst[row * l..(row + 1) * l];
                    let (runs, full) = &self.cols[kx];
                    for oy in 0..oh {
                        let seg = &mut out[oy * ow..(oy + 1) * ow];
                        match self.rows[ky * oh + oy] {
                            None => seg.fill(T::zero()),
                            Some(sy) => {
                                if !full {
                                    seg.fill(T::zero());
                                }
                                let src_row = &plane[sy * self.w..(sy + 1) * self.w];
                                for r in runs {
                                    let d = &mut seg[r.out..r.out + r.len];
                                    if r.step == 1 {
                                        d.copy_from_slice(&src_row[r.src..r.src + r.len]);
                                    } else {
                                        let mut s = r.src as isize;
                                        for v in d.iter_mut() {
                                            *v = src_row[s as usize];
                                            s += r.step;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Im2Col::lower`]: scatter-adds columns back into `dst`.
    pub fn raise<T: Real>(&self, cols: &[T], dst: &mut [T]) {
        if self.identity {
            for (d, &v) in dst.iter_mut().zip(cols) {
                *d += v;
            }
            return;
        }
        let (k, oh, ow, l) = (self.k, self.oh, self.ow, self.out_len());
        let mut row = 0;
        for ch in 0..self.c {
            let plane = &mut dst[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * l..(row + 1) * l];
                    let (runs, _) = &self.cols[kx];
                    for oy in 0..oh {
                        if let Some(sy) = self.rows[ky * oh + oy] {
                            let seg = &src[oy * ow..(oy + 1) * ow];
                            let dst_row = &mut plane[sy * self.w..(sy + 1) * self.w];
                            for r in runs {
                                let vals = &seg[r.out..r.out + r.len];
                                if r.step == 1 {
                                    for (d, &v) in dst_row[r.src..r.src + r.len].iter_mut().zip(vals) {
                                        *d += v;
                                    }
                                } else {
                                    let mut s = r.src as isize;
                                    for &v in vals {
                                        dst_row[s as usize] += v;
                                        s += r.step;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_matches_conv_arithmetic() {
        let s = ConvSpec::new(3, 2, 1, PadMode::Zero);
        assert_eq!(s.output_size(64, 64).unwrap(), (32, 32));
        let s = ConvSpec::new(7, 1, 3, PadMode::Reflect);
        assert_eq!(s.output_size(16, 16).unwrap(), (16, 16));
        let s = ConvSpec::new(4, 1, 1, PadMode::Zero);
        assert_eq!(s.output_size(8, 8).unwrap(), (7, 7));
        assert!(ConvSpec::new(7, 1, 3, PadMode::Reflect)
            .output_size(3, 3)
            .is_err());
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let s = ConvSpec::new(3, 1, 2, PadMode::Reflect);
        // input 0 1 2 3 padded by 2 -> 2 1 | 0 1 2 3 | 2 1
        let got: Vec<_> = (0..6).map(|o| s.source(o, 0, 4).unwrap()).collect();
        assert_eq!(got, vec![2, 1, 0, 1, 2, 3]);
        assert_eq!(s.source(5, 2, 4), Some(1));
    }

    #[test]
    fn raise_is_adjoint_of_lower() {
        // <lower(x), y> == <x, raise(y)> for arbitrary x, y.
        for mode in [PadMode::Zero, PadMode::Reflect] {
            let spec = ConvSpec::new(3, 2, 1, mode);
            let lw = Im2Col::new(&spec, 2, 5, 6).unwrap();
            let x: Vec<f64> = (0..60).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let y: Vec<f64> = (0..lw.patch_len() * lw.out_len())
                .map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0)
                .collect();
            let mut lx = vec![0.0; y.len()];
            lw.lower(&x, &mut lx);
            let mut ry = vec![0.0; x.len()];
            lw.raise(&y, &mut ry);
            let lhs: f64 = lx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ry).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{mode:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; a^T b = [[26,30],[38,44]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}

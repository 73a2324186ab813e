//! Bit-exact functional semantics of the spatial array and its peripheral
//! units. Everything here is a pure function over immutable inputs.
//!
//! Conventions:
//! - int8 operands, int32 accumulation; accumulation wraps on overflow and
//!   saturation only happens in [`scale_act`].
//! - scales are unsigned Q16.16 and products round to nearest, ties to even.
//! - activations are NHWC; im2col columns are ordered `(ky, kx, c)` with the
//!   channel fastest.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FuncError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("convolution/pooling produces an empty output: {0}")]
    DegenerateOutput(String),
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture sidecar: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fixture payload has {got} bytes, sidecar implies {expected}")]
    Length { got: usize, expected: usize },
    #[error(transparent)]
    Shape(#[from] FuncError),
}

/// Unsigned Q16.16 fixed-point multiplier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scale(pub u32);

impl Scale {
    pub const ONE: Scale = Scale(1 << 16);
    pub const FRAC_BITS: u32 = 16;

    /// Nearest representable scale; negative inputs clamp to zero.
    pub fn from_f64(v: f64) -> Scale {
        let raw = (v * 65536.0).round();
        Scale(raw.clamp(0.0, u32::MAX as f64) as u32)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 65536.0
    }

    /// `x * self`, rounded to nearest with ties to even.
    pub fn apply(self, x: i32) -> i64 {
        let prod = x as i64 * self.0 as i64;
        let floor = prod >> Self::FRAC_BITS;
        let rem = prod & 0xFFFF;
        match rem.cmp(&0x8000) {
            std::cmp::Ordering::Less => floor,
            std::cmp::Ordering::Greater => floor + 1,
            std::cmp::Ordering::Equal => floor + (floor & 1),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Relu6 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Activation> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Relu6),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "relu6" => Ok(Activation::Relu6),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

pub fn saturate_i8(v: i64) -> i8 {
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

/// Requantize one accumulator value: scale, activate, saturate to int8.
pub fn scale_act(x: i32, scale: Scale, act: Activation, relu6_shift: u32) -> i8 {
    let v = scale.apply(x);
    let v = match act {
        Activation::None => v,
        Activation::Relu => v.max(0),
        Activation::Relu6 => v.clamp(0, 6i64 << relu6_shift),
    };
    saturate_i8(v)
}

pub fn scale_act_slice(xs: &[i32], scale: Scale, act: Activation, relu6_shift: u32) -> Vec<i8> {
    xs.iter().map(|&x| scale_act(x, scale, act, relu6_shift)).collect()
}

/// Weight-stationary tile: each row of `a` streams past the resident weights
/// and picks up its bias from `d`. Returns `a * w + d`.
pub fn ws_tile(a: ArrayView2<i8>, w: ArrayView2<i8>, d: ArrayView2<i32>) -> Result<Array2<i32>, FuncError> {
    let (m, k) = a.dim();
    let (kw, n) = w.dim();
    if k != kw || d.dim() != (m, n) {
        return Err(FuncError::ShapeMismatch(format!("ws_tile: a {:?}, w {:?}, d {:?}", a.dim(), w.dim(), d.dim())));
    }
    let mut out = d.to_owned();
    for i in 0..m {
        for j in 0..n {
            let mut acc = out[[i, j]];
            for kk in 0..k {
                acc = acc.wrapping_add(a[[i, kk]] as i32 * w[[kk, j]] as i32);
            }
            out[[i, j]] = acc;
        }
    }
    Ok(out)
}

/// Output-stationary tile: partial sums stay resident while one outer
/// product per reduction step is accumulated. Returns `c + a * b`.
pub fn os_tile(a: ArrayView2<i8>, b: ArrayView2<i8>, c: ArrayView2<i32>) -> Result<Array2<i32>, FuncError> {
    let (m, k) = a.dim();
    let (kb, n) = b.dim();
    if k == 0 || k != kb || c.dim() != (m, n) {
        return Err(FuncError::ShapeMismatch(format!("os_tile: a {:?}, b {:?}, c {:?}", a.dim(), b.dim(), c.dim())));
    }
    let mut acc = c.to_owned();
    for kk in 0..k {
        for i in 0..m {
            let av = a[[i, kk]] as i32;
            for j in 0..n {
                acc[[i, j]] = acc[[i, j]].wrapping_add(av * b[[kk, j]] as i32);
            }
        }
    }
    Ok(acc)
}

/// Output extent of a sliding window, or `None` when no window fits.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Geometry of a sliding-window operator over an NHWC tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl WindowGeom {
    pub fn out_hw(&self) -> Result<(usize, usize), FuncError> {
        match (
            conv_out_dim(self.h, self.kh, self.stride, self.pad),
            conv_out_dim(self.w, self.kw, self.stride, self.pad),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(FuncError::DegenerateOutput(format!("{self:?}"))),
        }
    }

    pub fn patch_rows(&self) -> Result<usize, FuncError> {
        let (oh, ow) = self.out_hw()?;
        Ok(self.n * oh * ow)
    }

    pub fn patch_cols(&self) -> usize {
        self.kh * self.kw * self.c
    }

    /// Source NHWC coordinate of patch element `(row, col)`, or `None` when
    /// it lands in the zero padding.
    pub fn source(&self, row: usize, col: usize) -> Option<(usize, usize, usize, usize)> {
        let (oh, ow) = self.out_hw().ok()?;
        let n = row / (oh * ow);
        let rem = row % (oh * ow);
        let (oy, ox) = (rem / ow, rem % ow);
        let ch = col % self.c;
        let kk = col / self.c;
        let (ky, kx) = (kk / self.kw, kk % self.kw);
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if n >= self.n || iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
            return None;
        }
        Some((n, iy as usize, ix as usize, ch))
    }
}

/// Flatten convolution patches into matrix rows.
pub fn im2col(input: ArrayView4<i8>, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Array2<i8>, FuncError> {
    let (n, h, w, c) = input.dim();
    let g = WindowGeom { n, h, w, c, kh, kw, stride, pad };
    let rows = g.patch_rows()?;
    let cols = g.patch_cols();
    Ok(Array2::from_shape_fn((rows, cols), |(r, col)| match g.source(r, col) {
        Some(idx) => input[idx],
        None => 0,
    }))
}

/// Max pooling over NHWC; padded positions never win.
pub fn maxpool(
    input: ArrayView4<i8>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Array4<i8>, FuncError> {
    let (n, h, w, c) = input.dim();
    let g = WindowGeom { n, h, w, c, kh, kw, stride, pad };
    let (oh, ow) = g.out_hw()?;
    if pad >= kh || pad >= kw {
        return Err(FuncError::DegenerateOutput(format!("pad {pad} leaves windows without input")));
    }
    Ok(Array4::from_shape_fn((n, oh, ow, c), |(b, oy, ox, ch)| {
        let mut best = i8::MIN;
        for ky in 0..kh {
            for kx in 0..kw {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    best = best.max(input[[b, iy as usize, ix as usize, ch]]);
                }
            }
        }
        best
    }))
}

/// Elementwise int8 saturating addition through int32.
pub fn residual_add(a: &ArrayD<i8>, b: &ArrayD<i8>) -> Result<ArrayD<i8>, FuncError> {
    if a.shape() != b.shape() {
        return Err(FuncError::ShapeMismatch(format!("residual_add: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(ndarray::Zip::from(a).and(b).map_collect(|&x, &y| saturate_i8(x as i64 + y as i64)))
}

/// Direct convolution with int32 accumulation; weights are `[kh, kw, c, k]`.
pub fn conv2d_direct(
    input: ArrayView4<i8>,
    weights: ArrayView4<i8>,
    stride: usize,
    pad: usize,
) -> Result<Array4<i32>, FuncError> {
    let (n, h, w, c) = input.dim();
    let (kh, kw, wc, k) = weights.dim();
    if wc != c {
        return Err(FuncError::ShapeMismatch(format!("conv: input has {c} channels, weights expect {wc}")));
    }
    let g = WindowGeom { n, h, w, c, kh, kw, stride, pad };
    let (oh, ow) = g.out_hw()?;
    let mut out = Array4::<i32>::zeros((n, oh, ow, k));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        for ch in 0..c {
                            let x = input[[b, iy as usize, ix as usize, ch]] as i32;
                            for oc in 0..k {
                                let cell = &mut out[[b, oy, ox, oc]];
                                *cell = cell.wrapping_add(x * weights[[ky, kx, ch, oc]] as i32);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I8,
    I32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorData {
    I8(ArrayD<i8>),
    I32(ArrayD<i32>),
}

/// A dimensioned integer tensor (up to four extents, row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorBuf {
    data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: Vec<usize>,
    dtype: DType,
}

impl TensorBuf {
    pub fn from_i8(dims: &[usize], elems: Vec<i8>) -> Result<TensorBuf, FuncError> {
        Self::check_dims(dims)?;
        let arr = ArrayD::from_shape_vec(IxDyn(dims), elems).map_err(|e| FuncError::ShapeMismatch(e.to_string()))?;
        Ok(TensorBuf { data: TensorData::I8(arr) })
    }

    pub fn from_i32(dims: &[usize], elems: Vec<i32>) -> Result<TensorBuf, FuncError> {
        Self::check_dims(dims)?;
        let arr = ArrayD::from_shape_vec(IxDyn(dims), elems).map_err(|e| FuncError::ShapeMismatch(e.to_string()))?;
        Ok(TensorBuf { data: TensorData::I32(arr) })
    }

    fn check_dims(dims: &[usize]) -> Result<(), FuncError> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(FuncError::ShapeMismatch(format!("{} dims; tensors have 1 to 4", dims.len())));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        match &self.data {
            TensorData::I8(a) => a.shape(),
            TensorData::I32(a) => a.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_i8(&self) -> Option<&ArrayD<i8>> {
        match &self.data {
            TensorData::I8(a) => Some(a),
            TensorData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&ArrayD<i32>> {
        match &self.data {
            TensorData::I32(a) => Some(a),
            TensorData::I8(_) => None,
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::I8(a) => a.iter().map(|&v| v as u8).collect(),
            TensorData::I32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    /// Write `<base>.bin` (little-endian payload) and `<base>.json` (dims, dtype).
    pub fn write_fixture(&self, base: &Path) -> Result<(), FixtureError> {
        std::fs::write(base.with_extension("bin"), self.to_le_bytes())?;
        let side = Sidecar { dims: self.dims().to_vec(), dtype: self.dtype() };
        std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn read_fixture(base: &Path) -> Result<TensorBuf, FixtureError> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
        let bytes = std::fs::read(base.with_extension("bin"))?;
        let count: usize = side.dims.iter().product();
        let width = match side.dtype {
            DType::I8 => 1,
            DType::I32 => 4,
        };
        if bytes.len() != count * width {
            return Err(FixtureError::Length { got: bytes.len(), expected: count * width });
        }
        Ok(match side.dtype {
            DType::I8 => TensorBuf::from_i8(&side.dims, bytes.iter().map(|&b| b as i8).collect())?,
            DType::I32 => TensorBuf::from_i32(
                &side.dims,
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            )?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};

    #[test]
    fn ws_identity_and_product() {
        let w = arr2(&[[5i8, 6], [7, 8]]);
        let eye = arr2(&[[1i8, 0], [0, 1]]);
        let zero = Array2::<i32>::zeros((2, 2));
        assert_eq!(ws_tile(eye.view(), w.view(), zero.view()).unwrap(), arr2(&[[5, 6], [7, 8]]));
        let a = arr2(&[[1i8, 2], [3, 4]]);
        assert_eq!(ws_tile(a.view(), w.view(), zero.view()).unwrap(), arr2(&[[19, 22], [43, 50]]));
    }

    #[test]
    fn ws_zero_input_returns_bias() {
        let d = arr2(&[[9, -3], [1, 7]]);
        let a = Array2::<i8>::zeros((2, 2));
        let w = arr2(&[[100i8, -100], [55, 1]]);
        assert_eq!(ws_tile(a.view(), w.view(), d.view()).unwrap(), d);
    }

    #[test]
    fn ws_shape_mismatch() {
        let a = Array2::<i8>::zeros((2, 3));
        let w = Array2::<i8>::zeros((2, 2));
        let d = Array2::<i32>::zeros((2, 2));
        assert!(matches!(ws_tile(a.view(), w.view(), d.view()), Err(FuncError::ShapeMismatch(_))));
    }

    #[test]
    fn os_outer_product() {
        let a = arr2(&[[2i8], [3]]);
        let b = arr2(&[[4i8, 5]]);
        let c = Array2::<i32>::zeros((2, 2));
        assert_eq!(os_tile(a.view(), b.view(), c.view()).unwrap(), arr2(&[[8, 10], [12, 15]]));
    }

    #[test]
    fn os_carry_equals_concatenated_k() {
        let a1 = arr2(&[[1i8, -2], [3, 4]]);
        let b1 = arr2(&[[5i8, 6], [-7, 8]]);
        let a2 = arr2(&[[9i8], [10]]);
        let b2 = arr2(&[[11i8, -12]]);
        let zero = Array2::<i32>::zeros((2, 2));
        let step = os_tile(a1.view(), b1.view(), zero.view()).unwrap();
        let step = os_tile(a2.view(), b2.view(), step.view()).unwrap();
        let a = ndarray::concatenate![ndarray::Axis(1), a1, a2];
        let b = ndarray::concatenate![ndarray::Axis(0), b1, b2];
        assert_eq!(os_tile(a.view(), b.view(), zero.view()).unwrap(), step);
    }

    #[test]
    fn accumulation_wraps() {
        let a = Array2::<i8>::from_elem((1, 1), -128);
        let w = Array2::<i8>::from_elem((1, 1), -128);
        let d = Array2::<i32>::from_elem((1, 1), i32::MAX);
        assert_eq!(ws_tile(a.view(), w.view(), d.view()).unwrap()[[0, 0]], i32::MAX.wrapping_add(16384));
    }

    #[test]
    fn scale_act_examples() {
        assert_eq!(scale_act(300, Scale::ONE, Activation::None, 0), 127);
        assert_eq!(scale_act(-5, Scale::ONE, Activation::Relu, 0), 0);
        // 1000 * 0.0625 = 62.5 exactly; ties go to the even neighbour
        assert_eq!(scale_act(1000, Scale::from_f64(0.0625), Activation::None, 0), 62);
        assert_eq!(scale_act(1016, Scale::from_f64(0.0625), Activation::None, 0), 64);
        assert_eq!(scale_act(-1000, Scale::from_f64(0.0625), Activation::None, 0), -62);
        assert_eq!(scale_act(100, Scale::ONE, Activation::Relu6, 0), 6);
        assert_eq!(scale_act(100, Scale::ONE, Activation::Relu6, 3), 48);
        assert_eq!(scale_act(-100, Scale::ONE, Activation::Relu6, 3), 0);
    }

    #[test]
    fn im2col_one_by_one_is_reshape() {
        let x = Array::from_shape_fn((2, 3, 3, 4), |(n, h, w, c)| (n * 36 + h * 12 + w * 4 + c) as i8);
        let m = im2col(x.view(), 1, 1, 1, 0).unwrap();
        assert_eq!(m.dim(), (18, 4));
        assert_eq!(m.iter().copied().collect::<Vec<_>>(), x.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn im2col_three_by_three() {
        let x = Array::from_shape_fn((1, 4, 4, 1), |(_, h, w, _)| (h * 4 + w) as i8);
        let m = im2col(x.view(), 3, 3, 1, 0).unwrap();
        assert_eq!(m.dim(), (4, 9));
        // patch at output (0,1): rows 0..3, cols 1..4
        assert_eq!(m.row(1).to_vec(), vec![1, 2, 3, 5, 6, 7, 9, 10, 11]);
        assert_eq!(m.row(3).to_vec(), vec![5, 6, 7, 9, 10, 11, 13, 14, 15]);
    }

    #[test]
    fn im2col_padding_is_zero() {
        let x = Array::from_elem((1, 2, 2, 1), 7i8);
        let m = im2col(x.view(), 3, 3, 1, 1).unwrap();
        assert_eq!(m.dim(), (4, 9));
        // top-left output: only the bottom-right 2x2 of its window is inside
        assert_eq!(m.row(0).to_vec(), vec![0, 0, 0, 0, 7, 7, 0, 7, 7]);
    }

    #[test]
    fn im2col_degenerate() {
        let x = Array4::<i8>::zeros((1, 2, 2, 1));
        assert!(matches!(im2col(x.view(), 3, 3, 1, 0), Err(FuncError::DegenerateOutput(_))));
    }

    #[test]
    fn maxpool_and_residual() {
        let x = Array::from_shape_vec((1, 2, 2, 1), vec![1i8, 2, 3, 4]).unwrap();
        let p = maxpool(x.view(), 2, 2, 2, 0).unwrap();
        assert_eq!(p.into_raw_vec_and_offset().0, vec![4]);

        let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![100i8, -5, 7]).unwrap();
        let z = ArrayD::<i8>::zeros(IxDyn(&[3]));
        assert_eq!(residual_add(&a, &z).unwrap(), a);
        let sat = residual_add(&a, &a).unwrap();
        assert_eq!(sat[[0]], 127);
        let other = ArrayD::<i8>::zeros(IxDyn(&[4]));
        assert!(residual_add(&a, &other).is_err());
    }

    #[test]
    fn tensor_dims_validated() {
        assert!(TensorBuf::from_i8(&[2, 2], vec![0; 3]).is_err());
        assert!(TensorBuf::from_i8(&[1, 1, 1, 1, 1], vec![0]).is_err());
        let t = TensorBuf::from_i32(&[2, 2], vec![1, -2, 3, -4]).unwrap();
        assert_eq!(t.dtype(), DType::I32);
    }

    #[test]
    fn fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorBuf::from_i32(&[2, 3], vec![1, -2, 3, i32::MIN, 5, i32::MAX]).unwrap();
        let base = dir.path().join("acc");
        t.write_fixture(&base).unwrap();
        assert_eq!(TensorBuf::read_fixture(&base).unwrap(), t);
        let raw = std::fs::read(base.with_extension("bin")).unwrap();
        assert_eq!(&raw[4..8], &(-2i32).to_le_bytes());
    }
}

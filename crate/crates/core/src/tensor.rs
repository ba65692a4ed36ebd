//! Dense row-major `f64` arrays and the handful of kernels the training stack
//! needs: matrix products, elementwise maps, axis means and the
//! im2col/col2im pair used to lower convolutions onto matrix products.
//!
//! Every kernel is single-threaded with a fixed summation order, so identical
//! inputs always produce bit-identical outputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Elementwise function applied by [`Tensor::map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapOp {
    AddScalar(f64),
    MulScalar(f64),
    Sqrt,
    Pow(f64),
    Reciprocal,
    Square,
}

/// Axis collapsed by [`Tensor::reduce_mean`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Average over rows: `m×n -> n`.
    Rows,
    /// Average over columns: `m×n -> m`.
    Cols,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension { op: "Tensor::new", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "Tensor::from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a 2-D tensor (product of trailing extents otherwise).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension { op: "reshape", lhs: self.shape, rhs: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Dimension { op, lhs: self.shape.clone(), rhs: vec![] }),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Standard matrix product `self · b`. Each output element accumulates
    /// over the inner index in increasing order.
    pub fn matmul(&self, b: &Tensor) -> Result<Self> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, n) = b.require_2d("matmul")?;
        if k != k2 {
            return Err(Error::Dimension { op: "matmul", lhs: self.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `self · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Self> {
        let (m, k) = self.require_2d("matmul_nt")?;
        let (n, k2) = b.require_2d("matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension { op: "matmul_nt", lhs: self.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (x, y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `selfᵀ · b` without materialising the transpose.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Self> {
        let (k, m) = self.require_2d("matmul_tn")?;
        let (k2, n) = b.require_2d("matmul_tn")?;
        if k != k2 {
            return Err(Error::Dimension { op: "matmul_tn", lhs: self.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn map(&self, op: MapOp) -> Result<Self> {
        let mut out = Vec::with_capacity(self.data.len());
        for (index, &x) in self.data.iter().enumerate() {
            let y = match op {
                MapOp::AddScalar(c) => x + c,
                MapOp::MulScalar(c) => x * c,
                MapOp::Square => x * x,
                MapOp::Sqrt => {
                    if x < 0.0 {
                        return Err(Error::NumericDomain { op: "sqrt", index, value: x });
                    }
                    x.sqrt()
                }
                MapOp::Pow(p) => {
                    if x < 0.0 && p.fract() != 0.0 {
                        return Err(Error::NumericDomain { op: "pow", index, value: x });
                    }
                    pow(x, p)
                }
                MapOp::Reciprocal => {
                    if x <= 0.0 {
                        return Err(Error::NumericDomain { op: "reciprocal", index, value: x });
                    }
                    1.0 / x
                }
            };
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("map({op:?}) at index {index}")));
            }
            out.push(y);
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn reduce_mean(&self, axis: Axis) -> Result<Self> {
        let (m, n) = self.require_2d("reduce_mean")?;
        match axis {
            Axis::Rows => {
                if m == 0 {
                    return Err(Error::EmptyReduction("reduce_mean over rows"));
                }
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (a, &x) in acc.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                        *a += x;
                    }
                }
                let inv = m as f64;
                Ok(Self::vector(acc.into_iter().map(|a| a / inv).collect()))
            }
            Axis::Cols => {
                if n == 0 {
                    return Err(Error::EmptyReduction("reduce_mean over cols"));
                }
                let out =
                    (0..m).map(|i| self.data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
                Ok(Self::vector(out))
            }
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension { op: "dot", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

/// `x^p` with exact shortcuts for the exponents the optimizer uses most.
pub fn pow(x: f64, p: f64) -> f64 {
    if p == 0.5 {
        x.sqrt()
    } else if p == 1.0 {
        x
    } else {
        x.powf(p)
    }
}

/// Geometry shared by [`im2col`] and [`col2im`] for an NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Im2ColGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Geometry("kernel and stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Geometry(format!("kernel {kernel} larger than padded input {padded}")));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "(input {input} + 2*{padding} - kernel {kernel}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl Im2ColGeometry {
    pub fn for_input(shape: &[usize], kernel: (usize, usize), stride: usize, padding: usize) -> Result<Self> {
        let [batch, channels, height, width] = shape else {
            return Err(Error::Geometry(format!("im2col expects a B×C×H×W input, got {shape:?}")));
        };
        let g = Self {
            batch: *batch,
            channels: *channels,
            height: *height,
            width: *width,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride,
            padding,
        };
        g.out_h()?;
        g.out_w()?;
        Ok(g)
    }

    pub fn out_h(&self) -> Result<usize> {
        output_extent(self.height, self.kernel_h, self.stride, self.padding)
    }

    pub fn out_w(&self) -> Result<usize> {
        output_extent(self.width, self.kernel_w, self.stride, self.padding)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Row count of the unfolded matrix: `B · H_out · W_out`.
    pub fn rows(&self) -> Result<usize> {
        Ok(self.batch * self.out_h()? * self.out_w()?)
    }

    /// Visits every (row, column, flat input index) triple of the unfolding,
    /// skipping padded positions.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) -> Result<()> {
        let (oh, ow) = (self.out_h()?, self.out_w()?);
        let cols = self.patch_len();
        let (h, w) = (self.height as isize, self.width as isize);
        let mut row = 0;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base_y = (oy * self.stride) as isize - self.padding as isize;
                    let base_x = (ox * self.stride) as isize - self.padding as isize;
                    let mut col = 0;
                    for c in 0..self.channels {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        for ky in 0..self.kernel_h {
                            let y = base_y + ky as isize;
                            for kx in 0..self.kernel_w {
                                let x = base_x + kx as isize;
                                if y >= 0 && y < h && x >= 0 && x < w {
                                    f(row * cols + col, col, plane + (y * w + x) as usize);
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Ok(())
    }
}

/// Unfolds a B×C×H×W input into a `(B·H_out·W_out) × (C·κ_h·κ_w)` patch
/// matrix. Rows follow (batch, out-row, out-col) order; each patch is
/// flattened channel-major, then kernel row, then kernel column. Padding
/// contributes zeros.
pub fn im2col(input: &Tensor, kernel: (usize, usize), stride: usize, padding: usize) -> Result<Tensor> {
    let g = Im2ColGeometry::for_input(input.shape(), kernel, stride, padding)?;
    im2col_with(input, &g)
}

pub fn im2col_with(input: &Tensor, g: &Im2ColGeometry) -> Result<Tensor> {
    if input.shape() != g.input_shape() {
        return Err(Error::Geometry(format!(
            "input shape {:?} does not match geometry {:?}",
            input.shape(),
            g.input_shape()
        )));
    }
    let rows = g.rows()?;
    let cols = g.patch_len();
    let mut out = vec![0.0; rows * cols];
    let src = input.data();
    g.for_each_tap(|dst, _, s| out[dst] = src[s])?;
    Tensor::new(vec![rows, cols], out)
}

/// Adjoint of [`im2col`]: scatters patch entries back onto the input grid,
/// summing where patches overlap.
pub fn col2im(cols: &Tensor, g: &Im2ColGeometry) -> Result<Tensor> {
    let rows = g.rows()?;
    if cols.shape() != [rows, g.patch_len()] {
        return Err(Error::Geometry(format!(
            "column matrix {:?} inconsistent with geometry (expected [{rows}, {}])",
            cols.shape(),
            g.patch_len()
        )));
    }
    let mut out = Tensor::zeros(&g.input_shape());
    let src = cols.data();
    let dst = out.data_mut();
    g.for_each_tap(|c, _, d| dst[d] += src[c])?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let b = t2(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = t2(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = t2(&[&[2.0, 1.0, 0.0], &[-1.0, 0.5, 3.0]]);
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt, a.matmul(&b.transpose().unwrap()).unwrap());
        let tn = a.matmul_tn(&b).unwrap();
        assert_eq!(tn, a.transpose().unwrap().matmul(&b).unwrap());
    }

    #[test]
    fn map_examples() {
        let t = Tensor::vector(vec![4.0, 1.0, 0.25]);
        assert_eq!(t.map(MapOp::Sqrt).unwrap().data(), &[2.0, 1.0, 0.5]);
        let t = Tensor::vector(vec![4.0, 9.0]);
        assert_eq!(t.map(MapOp::Pow(1.0)).unwrap().data(), &[4.0, 9.0]);
        let err = Tensor::vector(vec![0.0, 1.0]).map(MapOp::Reciprocal).unwrap_err();
        assert!(matches!(err, Error::NumericDomain { op: "reciprocal", index: 0, .. }));
        let err = Tensor::vector(vec![1.0, -1.0]).map(MapOp::Sqrt).unwrap_err();
        assert!(matches!(err, Error::NumericDomain { index: 1, .. }));
    }

    #[test]
    fn reduce_mean_examples() {
        let t = t2(&[&[1.0, 3.0], &[3.0, 5.0]]);
        assert_eq!(t.reduce_mean(Axis::Rows).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(t.reduce_mean(Axis::Cols).unwrap().data(), &[2.0, 4.0]);
        let empty = Tensor::zeros(&[0, 3]);
        assert!(matches!(empty.reduce_mean(Axis::Rows), Err(Error::EmptyReduction(_))));
    }

    #[test]
    fn im2col_identity_unfolding() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, (1, 1), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 1]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_two_by_two_kernel_on_three_by_three() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let cols = im2col(&x, (2, 2), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        assert_eq!(cols.row(0), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(cols.row(1), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(cols.row(3), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn im2col_single_patch_and_padding() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![11.0, 12.0, 21.0, 22.0]).unwrap();
        let cols = im2col(&x, (2, 2), 2, 0).unwrap();
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.data(), &[11.0, 12.0, 21.0, 22.0]);

        // 2x2 kernel, padding 1, stride 1 on 2x2 -> 3x3 locations; corner patch
        // sees only the top-left pixel.
        let cols = im2col(&x, (2, 2), 1, 1).unwrap();
        assert_eq!(cols.shape(), &[9, 4]);
        assert_eq!(cols.row(0), &[0.0, 0.0, 0.0, 11.0]);
    }

    #[test]
    fn im2col_channel_major_patch_order() {
        // Two channels, 1x1 spatial, 1x1 kernel: patch is [c0, c1].
        let x = Tensor::new(vec![1, 2, 1, 1], vec![7.0, 8.0]).unwrap();
        assert_eq!(im2col(&x, (1, 1), 1, 0).unwrap().data(), &[7.0, 8.0]);
    }

    #[test]
    fn im2col_rejects_non_integer_extent() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(im2col(&x, (3, 3), 2, 0), Err(Error::Geometry(_))));
        assert!(matches!(im2col(&x, (5, 5), 1, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn col2im_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Im2ColGeometry::for_input(x.shape(), (1, 1), 1, 0).unwrap();
        assert_eq!(col2im(&im2col_with(&x, &g).unwrap(), &g).unwrap(), x);

        let g = Im2ColGeometry::for_input(&[1, 1, 3, 3], (2, 2), 1, 0).unwrap();
        let back = col2im(&Tensor::filled(&[4, 4], 1.0), &g).unwrap();
        assert_eq!(back.data()[4], 4.0);
        assert_eq!(back.data()[0], 1.0);
        assert_eq!(back.data()[1], 2.0);

        assert!(matches!(col2im(&Tensor::zeros(&[3, 4]), &g), Err(Error::Geometry(_))));
    }

    fn lcg_values(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn col2im_is_adjoint_on_four_by_four() {
        let g = Im2ColGeometry::for_input(&[1, 1, 4, 4], (2, 2), 1, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 4, 4], lcg_values(1, 16)).unwrap();
        let c = Tensor::new(vec![9, 4], lcg_values(2, 36)).unwrap();
        let lhs = im2col_with(&x, &g).unwrap().dot(&c).unwrap();
        let rhs = x.dot(&col2im(&c, &g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn adjoint_identity_holds(
            b in 1usize..3, c in 1usize..3, h in 2usize..7, w in 2usize..7,
            k in 1usize..3, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()
        ) {
            let Ok(g) = Im2ColGeometry::for_input(&[b, c, h, w], (k, k), stride, pad) else {
                return Ok(());
            };
            let x = Tensor::new(g.input_shape().to_vec(), lcg_values(seed, b * c * h * w)).unwrap();
            let rows = g.rows().unwrap();
            let cm = Tensor::new(vec![rows, g.patch_len()], lcg_values(seed ^ 0xabc, rows * g.patch_len())).unwrap();
            let lhs = im2col_with(&x, &g).unwrap().dot(&cm).unwrap();
            let rhs = x.dot(&col2im(&cm, &g).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn square_then_mean_matches_direct(seed in any::<u64>(), m in 1usize..6, n in 1usize..6) {
            let t = Tensor::new(vec![m, n], lcg_values(seed, m * n)).unwrap();
            let via_ops = t.map(MapOp::Square).unwrap().reduce_mean(Axis::Rows).unwrap();
            for j in 0..n {
                let direct = (0..m).map(|i| t.at(i, j).powi(2)).sum::<f64>() / m as f64;
                prop_assert!((via_ops.data()[j] - direct).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_is_deterministic(seed in any::<u64>()) {
            let a = Tensor::new(vec![3, 4], lcg_values(seed, 12)).unwrap();
            let b = Tensor::new(vec![4, 2], lcg_values(seed + 1, 8)).unwrap();
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{HapError, Result};

/// Row-major 2-D shape. Vectors are `n x 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub const fn vector(len: usize) -> Self {
        Shape { rows: len, cols: 1 }
    }

    pub const fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub const fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Dense matrix (or column vector) of finite `f64` values.
///
/// The shape is fixed at construction and every constructor rejects NaN and
/// infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(HapError::shape(
                "Tensor::from_vec",
                format!("{} elements ({shape})", shape.numel()),
                data.len(),
            ));
        }
        check_finite("Tensor::from_vec", &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::from_vec(Shape::vector(data.len()), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(Shape::new(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.shape.cols..(r + 1) * self.shape.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum with shape check.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("Tensor::add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("Tensor::sub", other, |a, b| a - b)
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.cols != other.shape.rows {
            return Err(HapError::shape(
                "Tensor::matmul",
                format!("{} rows", self.shape.cols),
                other.shape,
            ));
        }
        let out_shape = Shape::new(self.shape.rows, other.shape.cols);
        let mut out = vec![0.0; out_shape.numel()];
        matmul_into(
            &self.data,
            self.shape,
            false,
            &other.data,
            other.shape,
            false,
            &mut out,
        );
        let t = Tensor {
            shape: out_shape,
            data: out,
        };
        t.ensure_finite("Tensor::matmul")?;
        Ok(t)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(HapError::shape(op, self.shape, other.shape));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor {
            shape: self.shape,
            data,
        };
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        check_finite(op, &self.data)
    }
}

pub(crate) fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(HapError::NonFinite(format!(
            "{op} (element {pos} = {})",
            data[pos]
        )));
    }
    Ok(())
}

/// Dense product with optional transposes of either operand, written into
/// `out` (which must be zeroed and sized for the result).
pub(crate) fn matmul_into(
    a: &[f64],
    a_shape: Shape,
    ta: bool,
    b: &[f64],
    b_shape: Shape,
    tb: bool,
    out: &mut [f64],
) {
    let (ar, ac) = (a_shape.rows, a_shape.cols);
    let (br, bc) = (b_shape.rows, b_shape.cols);
    match (ta, tb) {
        (false, false) => {
            // (ar x ac)·(br x bc), ac == br
            if bc == 1 {
                for (o, a_row) in out.iter_mut().zip(a.chunks_exact(ac)) {
                    *o = dot(a_row, b);
                }
                return;
            }
            for (out_row, a_row) in out.chunks_exact_mut(bc).zip(a.chunks_exact(ac)) {
                for (&av, b_row) in a_row.iter().zip(b.chunks_exact(bc)) {
                    axpy(out_row, av, b_row);
                }
            }
        }
        (true, false) => {
            // Aᵀ·B: (ac x ar)·(br x bc), ar == br
            for (a_row, b_row) in a.chunks_exact(ac).zip(b.chunks_exact(bc)) {
                for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(bc)) {
                    axpy(out_row, av, b_row);
                }
            }
        }
        (false, true) => {
            // A·Bᵀ: (ar x ac)·(bc x br), ac == bc
            for (out_row, a_row) in out.chunks_exact_mut(br).zip(a.chunks_exact(ac)) {
                for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(bc)) {
                    *o = dot(a_row, b_row);
                }
            }
        }
        (true, true) => {
            // Aᵀ·Bᵀ: (ac x ar)·(bc x br), ar == bc
            for i in 0..ac {
                for j in 0..br {
                    let mut acc = 0.0;
                    for p in 0..ar {
                        acc += a[p * ac + i] * b[j * bc + p];
                    }
                    out[i * br + j] = acc;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

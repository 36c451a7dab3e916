//! Dense `(channels, height, width)` grids of `f64` and matching boolean masks.
//!
//! Every state, velocity field and decoded image in the crate is a
//! [`LatentGrid`]. Element-wise operations never broadcast: combining two
//! grids of different shapes is an [`Error::ShapeMismatch`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid dimensions in `(channels, height, width)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Number of elements.
    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// True when any dimension is zero.
    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ensure_nondegenerate(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::DegenerateShape(*self))
        } else {
            Ok(())
        }
    }

    /// Row-major flat index of `(c, y, x)`.
    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A dense real-valued tensor with value semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: Shape,
    data: Vec<f64>,
}

impl LatentGrid {
    /// Wraps `data` (row-major) as a grid. Rejects degenerate shapes, a
    /// length that does not match, and non-finite values.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.ensure_nondegenerate()?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected: shape.len(),
                found: data.len(),
            });
        }
        let grid = Self { shape, data };
        grid.ensure_finite()?;
        Ok(grid)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a grid by evaluating `f(c, y, x)` at every coordinate.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(c, y, x)]
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape,
                found: other.shape,
            })
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFiniteValue { index }),
            None => Ok(()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Combines two grids element-wise. Shapes must match exactly.
    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.ensure_same_shape(other)?;
        Ok(LatentGrid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> LatentGrid {
        self.map(|v| v * k)
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    /// Squared L2 norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Clamps every element into `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> LatentGrid {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Gathers the elements selected by `mask` into a `1x1xK` grid.
    pub fn select(&self, mask: &Mask) -> Result<LatentGrid> {
        mask.ensure_shape(self.shape)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(mask.as_slice())
            .filter_map(|(&v, &keep)| keep.then_some(v))
            .collect();
        if data.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(LatentGrid {
            shape: Shape::new(1, 1, data.len()),
            data,
        })
    }
}

impl std::ops::Index<usize> for LatentGrid {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// A boolean grid, e.g. an edit region or a similarity partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Shape,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Shape, data: Vec<bool>) -> Result<Self> {
        shape.ensure_nondegenerate()?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected: shape.len(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: bool) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    /// Element-wise predicate over a grid.
    pub fn from_grid(grid: &LatentGrid, pred: impl Fn(f64) -> bool) -> Self {
        Self {
            shape: grid.shape(),
            data: grid.as_slice().iter().map(|&v| pred(v)).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.index(c, y, x)]
    }

    /// Number of `true` elements.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn none(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            shape: self.shape,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    /// True when every `true` element of `self` is also `true` in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| !a || b)
    }

    pub fn ensure_shape(&self, shape: Shape) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: shape,
                found: self.shape,
            })
        }
    }
}

impl std::ops::Index<usize> for Mask {
    type Output = bool;

    fn index(&self, i: usize) -> &bool {
        &self.data[i]
    }
}

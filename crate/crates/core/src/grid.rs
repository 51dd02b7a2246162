use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// Square `n x n` table stored row-major, indexed by `(origin, destination)`.
///
/// Serializes as a flat row-major array; the side length is recovered from
/// the element count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<T>", try_from = "Vec<T>")]
#[serde(bound(serialize = "T: Clone + Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Grid<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(n: usize, value: T) -> Self {
        Self { n, data: vec![value; n * n] }
    }
}

impl<T> Grid<T> {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    /// Builds a grid from row-major data; `None` if the length is not a square.
    pub fn from_row_major(data: Vec<T>) -> Option<Self> {
        let n = (data.len() as f64).sqrt().round() as usize;
        (n * n == data.len()).then_some(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `(i, j, value)` in row-major order.
    pub fn iter_indexed(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let n = self.n;
        self.data.iter().enumerate().map(move |(k, v)| (k / n, k % n, v))
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> Grid<U> {
        Grid::from_fn(self.n, |i, j| f(i, j, &self[(i, j)]))
    }
}

impl Grid<f64> {
    pub fn zeros(n: usize) -> Self {
        Self::filled(n, 0.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self[(i, j)]).sum()
    }

    /// Max-norm of the entrywise difference.
    pub fn max_abs_diff(&self, other: &Grid<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.n + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.n + j]
    }
}

impl<T> From<Grid<T>> for Vec<T> {
    fn from(grid: Grid<T>) -> Self {
        grid.data
    }
}

impl<T> TryFrom<Vec<T>> for Grid<T> {
    type Error = String;

    fn try_from(data: Vec<T>) -> Result<Self, Self::Error> {
        let len = data.len();
        Grid::from_row_major(data).ok_or_else(|| format!("{len} entries do not form a square matrix"))
    }
}

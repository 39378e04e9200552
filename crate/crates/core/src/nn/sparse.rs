use alloc::vec;
use alloc::vec::Vec;

/// Compressed sparse rows, used for the mostly-one-hot model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    cols: usize,
    row_ptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(cols: usize) -> Self {
        Self { cols, row_ptr: vec![0], indices: Vec::new(), values: Vec::new() }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Appends an entry to the row under construction; zeros are dropped.
    pub fn push(&mut self, index: usize, value: f64) {
        debug_assert!(index < self.cols, "column {index} out of {}", self.cols);
        if value != 0.0 {
            self.indices.push(index as u32);
            self.values.push(value);
        }
    }

    /// Closes the row under construction.
    pub fn end_row(&mut self) {
        self.row_ptr.push(self.indices.len());
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.indices[span.clone()].iter().map(|&i| i as usize).zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows() * self.cols];
        for r in 0..self.rows() {
            for (i, v) in self.row(r) {
                out[r * self.cols + i] += v;
            }
        }
        out
    }
}

use crate::error::{ConfuError, Result};

/// Dense boolean attention mask, `[query_len × key_len]`; `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![false; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    /// Lower-triangular mask over `n` positions.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::none(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.allowed[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allow: bool) {
        self.allowed[i * self.cols + j] = allow;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|i| (i + 1..self.cols).all(|j| !self.get(i, j)))
    }

    /// Every query row must see at least one key.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(ConfuError::Mask(format!("query row {i} attends to no key")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_lower_triangular_and_valid() {
        let m = AttentionMask::causal(4);
        assert!(m.is_lower_triangular());
        assert!(m.validate().is_ok());
        assert!(m.get(3, 0) && !m.get(0, 3));
    }

    #[test]
    fn empty_row_is_rejected() {
        let mut m = AttentionMask::full(2, 2);
        m.set(1, 0, false);
        m.set(1, 1, false);
        assert!(matches!(m.validate(), Err(ConfuError::Mask(_))));
    }
}

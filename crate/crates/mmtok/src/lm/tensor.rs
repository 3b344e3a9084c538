//! Minimal row-major f64 matrix used for model parameters and activations.

use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| normal(rng) * std).collect();
        Tensor { rows, cols, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `a (m x k) @ b (k x n)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(kk);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T (m x k from k x m) @ b (k x n)`; used for weight gradients.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    for kk in 0..a.rows {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) @ b^T (k x n from n x k)`; used for activation gradients.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor { rows, cols, data }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = t(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);

        // a^T @ c where a^T comes from a as stored.
        let at_c = matmul_tn(&a, &c);
        assert_eq!(at_c.rows, 3);
        assert_eq!(at_c.cols, 2);
        assert_eq!(at_c.get(0, 0), 1.0 * 58.0 + 4.0 * 139.0);

        // c @ b^T.
        let c_bt = matmul_nt(&c, &b);
        assert_eq!(c_bt.rows, 2);
        assert_eq!(c_bt.cols, 3);
        assert_eq!(c_bt.get(0, 0), 58.0 * 7.0 + 64.0 * 8.0);
    }
}

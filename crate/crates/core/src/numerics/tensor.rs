/// Dense row-major matrix of doubles. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `out += a * b` for `a: r x k`, `b: k x c`.
pub(crate) fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (r, k, c) = (a.rows, a.cols, b.cols);
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` for `a: r x k`, `b: c x k`.
pub(crate) fn matmul_nt_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (r, k, c) = (a.rows, a.cols, b.rows);
    for i in 0..r {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b.data[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * c + j] += dot;
        }
    }
}

/// `out += a^T * b` for `a: k x r`, `b: k x c`.
pub(crate) fn matmul_tn_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (k, r, c) = (a.rows, a.cols, b.cols);
    for p in 0..k {
        let arow = &a.data[p * r..(p + 1) * r];
        let brow = &b.data[p * c..(p + 1) * c];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

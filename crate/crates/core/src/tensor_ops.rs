//! Order-3 tensors and the contractions used by multiplicative cells.
//!
//! Every tensor here has three modes in a fixed role order: output, input,
//! action. The contraction `W ×₂ x ×₃ a` collapses the input and action
//! modes against vectors and leaves a vector over the output mode:
//!
//! ```text
//! out_i = Σ_j Σ_k W_ijk x_j a_k
//! ```
//!
//! Two low-rank parameterizations avoid materializing `W`:
//!
//! * [`FactoredTensor`] (CP): `W_ijk = Σ_r λ_r U_ir V_jr C_kr`, which makes the
//!   contraction `U (λ ⊙ Vᵀx ⊙ Cᵀa)`.
//! * [`TuckerTensor`]: `W_ijk = Σ_pqr g_pqr A_ip B_jq C_kr`, which makes the
//!   contraction `A (G ×₂ Bᵀx ×₃ Cᵀa)`.
//!
//! Storage is flat row-major with the action index varying fastest.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `M x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::matvec", self.cols, x.len())?;
        let mut out = vec![0.0; self.rows];
        matvec_into(&self.data, self.rows, self.cols, x, &mut out);
        Ok(out)
    }

    /// `Mᵀ x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::matvec_t", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        matvec_t_into(&self.data, self.rows, self.cols, x, &mut out);
        Ok(out)
    }
}

/// Order-3 tensor with modes (output, input, action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(i: usize, j: usize, k: usize) -> Self {
        Self {
            dims: (i, j, k),
            values: vec![0.0; i * j * k],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        check_len("Tensor3::from_vec", dims.0 * dims.1 * dims.2, values.len())?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: bad,
                op: "Tensor3::from_vec",
            });
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(
        (ni, nj, nk): (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(ni * nj * nk);
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    values.push(f(i, j, k));
                }
            }
        }
        Self {
            dims: (ni, nj, nk),
            values,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.values[idx] = v;
    }

    /// The matrix `W[:, :, k]`.
    pub fn action_slice(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.dims.0, self.dims.1, |i, j| self.get(i, j, k))
    }
}

/// CP-factored order-3 tensor of rank `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredTensor {
    /// `I × M`
    pub w_out: Matrix,
    /// `J × M`
    pub w_in: Matrix,
    /// `K × M`
    pub w_act: Matrix,
    /// length `M`
    pub lambda: Vec<f64>,
}

impl FactoredTensor {
    pub fn new(w_out: Matrix, w_in: Matrix, w_act: Matrix, lambda: Vec<f64>) -> Result<Self> {
        let m = lambda.len();
        check_len("FactoredTensor::new (w_out rank)", m, w_out.cols())?;
        check_len("FactoredTensor::new (w_in rank)", m, w_in.cols())?;
        check_len("FactoredTensor::new (w_act rank)", m, w_act.cols())?;
        Ok(Self {
            w_out,
            w_in,
            w_act,
            lambda,
        })
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w_out.rows(), self.w_in.rows(), self.w_act.rows())
    }
}

/// Tucker-factored order-3 tensor with core ranks `(P, Q, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuckerTensor {
    pub core: Tensor3,
    /// `I × P`
    pub a: Matrix,
    /// `J × Q`
    pub b: Matrix,
    /// `K × R`
    pub c: Matrix,
}

impl TuckerTensor {
    pub fn new(core: Tensor3, a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let (p, q, r) = core.dims();
        check_len("TuckerTensor::new (A cols)", p, a.cols())?;
        check_len("TuckerTensor::new (B cols)", q, b.cols())?;
        check_len("TuckerTensor::new (C cols)", r, c.cols())?;
        Ok(Self { core, a, b, c })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.rows(), self.b.rows(), self.c.rows())
    }

    /// Materializes the full tensor.
    pub fn expand(&self) -> Tensor3 {
        let (p, q, r) = self.core.dims();
        Tensor3::from_fn(self.dims(), |i, j, k| {
            let mut s = 0.0;
            for pp in 0..p {
                for qq in 0..q {
                    for rr in 0..r {
                        s += self.core.get(pp, qq, rr)
                            * self.a.get(i, pp)
                            * self.b.get(j, qq)
                            * self.c.get(k, rr);
                    }
                }
            }
            s
        })
    }
}

/// `W ×₂ x ×₃ a`.
pub fn nmode_contract(w: &Tensor3, x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    let (ni, nj, nk) = w.dims();
    check_len("nmode_contract (input)", nj, x.len())?;
    check_len("nmode_contract (action)", nk, a.len())?;
    let mut out = vec![0.0; ni];
    nmode_into(&w.values, w.dims, x, a, &mut out);
    Ok(out)
}

/// CP-factored contraction `U (λ ⊙ Vᵀx ⊙ Cᵀa)`.
pub fn cp_contract(f: &FactoredTensor, x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    let u = f.w_in.matvec_t(x)?;
    let v = f.w_act.matvec_t(a)?;
    let mixed: Vec<f64> = f
        .lambda
        .iter()
        .zip(u.iter().zip(&v))
        .map(|(l, (u, v))| l * u * v)
        .collect();
    f.w_out.matvec(&mixed)
}

/// Tucker contraction `A (G ×₂ Bᵀx ×₃ Cᵀa)`.
pub fn tucker_contract(t: &TuckerTensor, x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    let xb = t.b.matvec_t(x)?;
    let ac = t.c.matvec_t(a)?;
    let core = nmode_contract(&t.core, &xb, &ac)?;
    t.a.matvec(&core)
}

/// Materializes `W_ijk = Σ_r λ_r U_ir V_jr C_kr`.
pub fn cp_reconstruct(f: &FactoredTensor) -> Tensor3 {
    let m = f.rank();
    Tensor3::from_fn(f.dims(), |i, j, k| {
        (0..m)
            .map(|r| f.lambda[r] * f.w_out.get(i, r) * f.w_in.get(j, r) * f.w_act.get(k, r))
            .sum()
    })
}

// Slice-level kernels shared with the differentiation tape. They assume the
// caller already validated lengths.

#[inline]
pub(crate) fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    if cols == 0 {
        out[..rows].iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)).take(rows) {
        *o = row.iter().zip(x).map(|(w, x)| w * x).sum();
    }
}

#[inline]
pub(crate) fn matvec_t_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|o| *o = 0.0);
    if cols == 0 {
        return;
    }
    for (row, &xr) in w.chunks_exact(cols).zip(x).take(rows) {
        if xr == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * xr;
        }
    }
}

/// Zero action entries are skipped, so one-hot actions cost one slice.
#[inline]
pub(crate) fn nmode_into(
    w: &[f64],
    (ni, nj, nk): (usize, usize, usize),
    x: &[f64],
    a: &[f64],
    out: &mut [f64],
) {
    for (i, o) in out.iter_mut().enumerate().take(ni) {
        let mut s = 0.0;
        for (j, &xj) in x.iter().enumerate().take(nj) {
            let base = (i * nj + j) * nk;
            let fiber = &w[base..base + nk];
            let mut inner = 0.0;
            for (wk, &ak) in fiber.iter().zip(a) {
                if ak != 0.0 {
                    inner += wk * ak;
                }
            }
            s += inner * xj;
        }
        *o = s;
    }
}

//! Linear solvers sized for Newton steps on small structured grids: a
//! banded LU with partial pivoting (planar grids produce narrow bands) and
//! a CSR matrix with ILU(0)-preconditioned BiCGStab (three-dimensional
//! grids produce bands too wide to factor densely).

use crate::error::{CmcError, Result};

// ---------------------------------------------------------------------------
// Banded storage and LU
// ---------------------------------------------------------------------------

/// Square banded matrix with `kl` subdiagonals and `ku` superdiagonals.
/// Storage reserves `kl` extra superdiagonals so partial pivoting can fill
/// in without reallocating (the classic band-factorization layout).
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    /// Row-major: entry `(i, j)` lives at `i * width + (j - i + kl)` for
    /// `j - i` in `[-kl, ku + kl]`.
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Banded { n, kl, ku, data: vec![0.0; n * width] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn width(&self) -> usize {
        2 * self.kl + self.ku + 1
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let d = j as isize - i as isize;
        if i < self.n && j < self.n && d >= -(self.kl as isize) && d <= (self.ku + self.kl) as isize
        {
            Some(i * self.width() + (d + self.kl as isize) as usize)
        } else {
            None
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map(|s| self.data[s]).unwrap_or(0.0)
    }

    /// Set entry `(i, j)`; it must lie within the declared band.
    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        let d = j as isize - i as isize;
        if d < -(self.kl as isize) || d > self.ku as isize {
            return Err(CmcError::Shape(format!(
                "entry ({i}, {j}) is outside the declared band (kl = {}, ku = {})",
                self.kl, self.ku
            )));
        }
        let s = self
            .slot(i, j)
            .ok_or_else(|| CmcError::Shape(format!("entry ({i}, {j}) out of range")))?;
        self.data[s] = v;
        Ok(())
    }

    pub fn add_to(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        self.set(i, j, self.get(i, j) + v)
    }

    /// `y = A x` (for tests and residual checks).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += self.get(i, j) * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// LU factorization with partial pivoting, in place. Fill-in stays
    /// inside the reserved `ku + kl` upper width.
    pub fn factor(mut self) -> Result<BandedLu> {
        let n = self.n;
        let mut ipiv = vec![0usize; n];
        for k in 0..n {
            let p_hi = (k + self.kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in (k + 1)..=p_hi {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best < f64::MIN_POSITIVE * 16.0 || !best.is_finite() {
                return Err(CmcError::Singular(format!(
                    "banded LU pivot at column {k} is {best:.3e}"
                )));
            }
            ipiv[k] = p;
            let j_hi = (k + self.ku + self.kl).min(n - 1);
            if p != k {
                for j in k..=j_hi {
                    // Within-window swap: both slots exist because p <= k + kl.
                    let sk = self.slot(k, j).expect("band");
                    let sp = self.slot(p, j).expect("band");
                    self.data.swap(sk, sp);
                }
            }
            let pivot = self.get(k, k);
            for i in (k + 1)..=p_hi {
                let m = self.get(i, k) / pivot;
                let sik = self.slot(i, k).expect("band");
                self.data[sik] = m;
                if m != 0.0 {
                    for j in (k + 1)..=j_hi {
                        let upd = self.get(i, j) - m * self.get(k, j);
                        let sij = self.slot(i, j).expect("band");
                        self.data[sij] = upd;
                    }
                }
            }
        }
        Ok(BandedLu { mat: self, ipiv })
    }
}

/// Factored form of a [`Banded`] matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    mat: Banded,
    ipiv: Vec<usize>,
}

impl BandedLu {
    /// Solve `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) -> Result<()> {
        let n = self.mat.n;
        if b.len() != n {
            return Err(CmcError::Shape(format!(
                "right-hand side has length {}, expected {n}",
                b.len()
            )));
        }
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                b.swap(k, p);
            }
            let hi = (k + self.mat.kl).min(n - 1);
            for i in (k + 1)..=hi {
                b[i] -= self.mat.get(i, k) * b[k];
            }
        }
        for k in (0..n).rev() {
            let hi = (k + self.mat.ku + self.mat.kl).min(n - 1);
            for j in (k + 1)..=hi {
                b[k] -= self.mat.get(k, j) * b[j];
            }
            b[k] /= self.mat.get(k, k);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Compressed sparse rows
// ---------------------------------------------------------------------------

/// Square sparse matrix in CSR form with sorted column indices per row.
#[derive(Debug, Clone)]
pub struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, _) in &triplets {
            if i >= n || j >= n {
                return Err(CmcError::Shape(format!("triplet ({i}, {j}) out of range for n = {n}")));
            }
        }
        triplets.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *vals.last_mut().expect("nonempty") += v;
            } else {
                col_idx.push(j);
                vals.push(v);
                last = Some((i, j));
            }
            row_ptr[i + 1] = col_idx.len();
        }
        // Rows with no entries inherit the previous offset.
        for i in 1..=n {
            row_ptr[i] = row_ptr[i].max(row_ptr[i - 1]);
        }
        Ok(Csr { n, row_ptr, col_idx, vals })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.vals[r])
    }

    fn entry(&self, i: usize, j: usize) -> Option<usize> {
        let (cols, _) = self.row(i);
        cols.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            y[i] = cols.iter().zip(vals).map(|(&j, v)| v * x[j]).sum();
        }
    }
}

// ---------------------------------------------------------------------------
// ILU(0) and BiCGStab
// ---------------------------------------------------------------------------

/// Incomplete LU factorization with zero fill-in (same sparsity as the
/// source matrix), stored as a modified copy.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: Csr,
    diag_ptr: Vec<usize>,
}

impl Ilu0 {
    pub fn factor(a: &Csr) -> Result<Self> {
        let mut lu = a.clone();
        let n = lu.n;
        let mut diag_ptr = vec![usize::MAX; n];
        for i in 0..n {
            diag_ptr[i] = lu
                .entry(i, i)
                .ok_or_else(|| CmcError::Singular(format!("row {i} has no diagonal entry")))?;
        }
        for i in 0..n {
            let row_range = lu.row_ptr[i]..lu.row_ptr[i + 1];
            for kk in row_range.clone() {
                let k = lu.col_idx[kk];
                if k >= i {
                    break;
                }
                let dk = lu.vals[diag_ptr[k]];
                if dk == 0.0 || !dk.is_finite() {
                    return Err(CmcError::Singular(format!("zero ILU(0) pivot at row {k}")));
                }
                let lik = lu.vals[kk] / dk;
                lu.vals[kk] = lik;
                if lik != 0.0 {
                    // Subtract lik * U(k, j) wherever (i, j) is in the pattern.
                    for jj in (diag_ptr[k] + 1)..lu.row_ptr[k + 1] {
                        let j = lu.col_idx[jj];
                        if let Some(p) = lu.entry(i, j) {
                            lu.vals[p] -= lik * lu.vals[jj];
                        }
                    }
                }
            }
            if lu.vals[diag_ptr[i]] == 0.0 {
                return Err(CmcError::Singular(format!("zero ILU(0) pivot at row {i}")));
            }
        }
        Ok(Ilu0 { lu, diag_ptr })
    }

    /// Solve `L U z = r`.
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.lu.n;
        z.copy_from_slice(r);
        for i in 0..n {
            let mut acc = z[i];
            for kk in self.lu.row_ptr[i]..self.diag_ptr[i] {
                acc -= self.lu.vals[kk] * z[self.lu.col_idx[kk]];
            }
            z[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = z[i];
            for kk in (self.diag_ptr[i] + 1)..self.lu.row_ptr[i + 1] {
                acc -= self.lu.vals[kk] * z[self.lu.col_idx[kk]];
            }
            z[i] = acc / self.lu.vals[self.diag_ptr[i]];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Right-preconditioned BiCGStab. Returns the solution and the number of
/// iterations used. Fails loudly on stagnation or breakdown.
pub fn bicgstab(
    a: &Csr,
    b: &[f64],
    precond: &Ilu0,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = a.n();
    if b.len() != n {
        return Err(CmcError::Shape(format!(
            "right-hand side has length {}, expected {n}",
            b.len()
        )));
    }
    let b_norm = norm2(b).max(f64::MIN_POSITIVE);
    let target = tol * b_norm;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if norm2(&r) <= target {
        return Ok((x, 0));
    }
    let r_hat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for iter in 1..=max_iters {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(CmcError::Singular("BiCGStab breakdown (rho -> 0)".to_string()));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond.apply(&p, &mut p_hat);
        a.matvec(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < 1e-300 {
            return Err(CmcError::Singular("BiCGStab breakdown (r_hat . v -> 0)".to_string()));
        }
        alpha = rho_new / denom;
        // s = r - alpha v (reuse r).
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        if norm2(&r) <= target {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok((x, iter));
        }
        precond.apply(&r, &mut s_hat);
        a.matvec(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt < 1e-300 {
            return Err(CmcError::Singular("BiCGStab breakdown (t . t -> 0)".to_string()));
        }
        omega = dot(&t, &r) / tt;
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
        }
        for i in 0..n {
            r[i] -= omega * t[i];
        }
        if norm2(&r) <= target {
            return Ok((x, iter));
        }
        rho = rho_new;
    }
    Err(CmcError::Singular(format!(
        "BiCGStab did not reach tolerance {tol:.1e} in {max_iters} iterations \
         (relative residual {:.3e})",
        norm2(&r) / b_norm
    )))
}

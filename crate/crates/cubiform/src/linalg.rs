//! Dense exact linear algebra over a field tower: rank, reduced row echelon
//! form, linear solving, nullspace bases, and inverses.
//!
//! Pivoting is deterministic (first nonzero entry in column order, rows
//! scanned top-down), so every downstream basis choice is reproducible.

use crate::scalar::{Field, Scalar};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matrix {
    field: Field,
    rows: usize,
    cols: usize,
    data: Vec<Vec<Scalar>>,
}

impl Matrix {
    pub fn zeros(field: &Field, rows: usize, cols: usize) -> Matrix {
        Matrix {
            field: field.clone(),
            rows,
            cols,
            data: vec![vec![field.zero(); cols]; rows],
        }
    }

    pub fn identity(field: &Field, n: usize) -> Matrix {
        let mut m = Matrix::zeros(field, n, n);
        for i in 0..n {
            m.data[i][i] = field.one();
        }
        m
    }

    pub fn from_rows(field: &Field, rows: Vec<Vec<Scalar>>) -> Matrix {
        let ncols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == ncols), "ragged matrix");
        Matrix {
            field: field.clone(),
            rows: rows.len(),
            cols: ncols,
            data: rows,
        }
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Scalar {
        &self.data[i][j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Scalar) {
        self.data[i][j] = v;
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        &self.data[i]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(&self.field, self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j][i] = self.data[i][j].clone();
            }
        }
        t
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Matrix::zeros(&self.field, self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if self.data[i][k].is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    if other.data[k][j].is_zero() {
                        continue;
                    }
                    let t = &self.data[i][k] * &other.data[k][j];
                    out.data[i][j] = &out.data[i][j] + &t;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Scalar]) -> Vec<Scalar> {
        assert_eq!(self.cols, v.len(), "dimension mismatch");
        (0..self.rows)
            .map(|i| {
                let mut acc = self.field.zero();
                for j in 0..self.cols {
                    if !self.data[i][j].is_zero() && !v[j].is_zero() {
                        acc = acc + &self.data[i][j] * &v[j];
                    }
                }
                acc
            })
            .collect()
    }

    /// Reduced row echelon form together with the pivot column indices.
    pub fn rref(&self) -> (Matrix, Vec<usize>) {
        let mut m = self.clone();
        let mut pivots = Vec::new();
        let mut r = 0usize;
        for c in 0..m.cols {
            if r == m.rows {
                break;
            }
            let Some(pr) = (r..m.rows).find(|&i| !m.data[i][c].is_zero()) else {
                continue;
            };
            m.data.swap(r, pr);
            let inv = m.data[r][c].inv().expect("pivot nonzero");
            for j in c..m.cols {
                m.data[r][j] = &m.data[r][j] * &inv;
            }
            for i in 0..m.rows {
                if i == r || m.data[i][c].is_zero() {
                    continue;
                }
                let factor = m.data[i][c].clone();
                for j in c..m.cols {
                    let t = &factor * &m.data[r][j];
                    m.data[i][j] = &m.data[i][j] - &t;
                }
            }
            pivots.push(c);
            r += 1;
        }
        (m, pivots)
    }

    pub fn rank(&self) -> usize {
        self.rref().1.len()
    }

    /// One particular solution of `self · x = b`, or None when inconsistent.
    pub fn solve(&self, b: &[Scalar]) -> Option<Vec<Scalar>> {
        assert_eq!(b.len(), self.rows, "dimension mismatch");
        let mut aug = Matrix::zeros(&self.field, self.rows, self.cols + 1);
        for i in 0..self.rows {
            for j in 0..self.cols {
                aug.data[i][j] = self.data[i][j].clone();
            }
            aug.data[i][self.cols] = b[i].clone();
        }
        let (r, pivots) = aug.rref();
        if pivots.contains(&self.cols) {
            return None; // a pivot in the constant column: inconsistent
        }
        let mut x = vec![self.field.zero(); self.cols];
        for (row, &col) in pivots.iter().enumerate() {
            x[col] = r.data[row][self.cols].clone();
        }
        Some(x)
    }

    /// Basis of the right nullspace, one vector per free column.
    pub fn nullspace(&self) -> Vec<Vec<Scalar>> {
        let (r, pivots) = self.rref();
        let pivot_set: std::collections::BTreeSet<usize> = pivots.iter().copied().collect();
        let mut basis = Vec::new();
        for free in 0..self.cols {
            if pivot_set.contains(&free) {
                continue;
            }
            let mut v = vec![self.field.zero(); self.cols];
            v[free] = self.field.one();
            for (row, &col) in pivots.iter().enumerate() {
                v[col] = -&r.data[row][free];
            }
            basis.push(v);
        }
        basis
    }

    pub fn inverse(&self) -> Option<Matrix> {
        assert_eq!(self.rows, self.cols, "inverse needs a square matrix");
        let n = self.rows;
        let mut aug = Matrix::zeros(&self.field, n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug.data[i][j] = self.data[i][j].clone();
            }
            aug.data[i][n + i] = self.field.one();
        }
        let (r, pivots) = aug.rref();
        if pivots.len() < n || pivots[..n] != (0..n).collect::<Vec<_>>()[..] {
            return None;
        }
        let mut inv = Matrix::zeros(&self.field, n, n);
        for i in 0..n {
            for j in 0..n {
                inv.data[i][j] = r.data[i][n + j].clone();
            }
        }
        Some(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(f: &Field, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows)
            .map(|_| (0..cols).map(|_| f.random_base(rng)).collect())
            .collect();
        Matrix::from_rows(f, data)
    }

    #[test]
    fn rank_oracles() {
        let f = Field::default_field();
        assert_eq!(Matrix::identity(&f, 4).rank(), 4);
        assert_eq!(Matrix::zeros(&f, 3, 5).rank(), 0);
        // Outer product has rank 1.
        let u = [1u64, 2, 3];
        let v = [4u64, 5, 6, 7];
        let data = u
            .iter()
            .map(|a| v.iter().map(|b| f.scalar_u64(a * b)).collect())
            .collect();
        assert_eq!(Matrix::from_rows(&f, data).rank(), 1);
    }

    #[test]
    fn solve_round_trip() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..25 {
            let a = random_matrix(&f, &mut rng, 4, 6);
            let x: Vec<Scalar> = (0..6).map(|_| f.random_base(&mut rng)).collect();
            let b = a.mul_vec(&x);
            let sol = a.solve(&b).expect("consistent by construction");
            assert_eq!(a.mul_vec(&sol), b);
        }
    }

    #[test]
    fn inconsistent_system_detected() {
        let f = Field::default_field();
        // x + y = 1 and x + y = 2 cannot both hold.
        let a = Matrix::from_rows(
            &f,
            vec![
                vec![f.one(), f.one()],
                vec![f.one(), f.one()],
            ],
        );
        let b = vec![f.one(), f.scalar_u64(2)];
        assert!(a.solve(&b).is_none());
    }

    #[test]
    fn rank_nullity_and_kernel_membership() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..25 {
            let a = random_matrix(&f, &mut rng, 3, 7);
            let rank = a.rank();
            let ns = a.nullspace();
            assert_eq!(rank + ns.len(), 7, "rank-nullity");
            for v in &ns {
                assert!(a.mul_vec(v).iter().all(Scalar::is_zero));
            }
            // Nullspace vectors are independent: stack and re-rank.
            let stacked = Matrix::from_rows(&f, ns.clone());
            assert_eq!(stacked.rank(), ns.len());
        }
    }

    #[test]
    fn inverse_round_trip() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut found = 0;
        while found < 10 {
            let a = random_matrix(&f, &mut rng, 5, 5);
            if let Some(inv) = a.inverse() {
                assert_eq!(a.mul(&inv), Matrix::identity(&f, 5));
                assert_eq!(inv.mul(&a), Matrix::identity(&f, 5));
                found += 1;
            }
        }
        assert!(Matrix::zeros(&f, 2, 2).inverse().is_none());
    }
}

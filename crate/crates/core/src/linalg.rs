//! Thin SVD by one-sided Jacobi rotations.

use nalgebra::DMatrix;

const MAX_SWEEPS: usize = 80;

/// `a = u * diag(s) * vt`, singular values non-increasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub vt: DMatrix<f64>,
}

impl Svd {
    /// Rank-`t` reconstruction from the leading components.
    pub fn reconstruct(&self, t: usize) -> DMatrix<f64> {
        let t = t.min(self.s.len());
        let mut us = self.u.columns(0, t).into_owned();
        for (j, s) in self.s.iter().take(t).enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.vt.rows(0, t)
    }
}

/// Orthogonalizes the columns of `w` in place, accumulating rotations into `v`.
fn hestenes(w: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    let n = w.ncols();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w, p, q, c, s);
                rotate(v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (a, b) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

/// Thin SVD of `a`. Each left singular vector is sign-fixed so its
/// largest-magnitude entry is positive.
pub fn svd(a: &DMatrix<f64>) -> Svd {
    let transposed = a.ncols() > a.nrows();
    let mut w = if transposed { a.transpose() } else { a.clone() };
    let n = w.ncols();
    let mut v = DMatrix::identity(n, n);
    hestenes(&mut w, &mut v);

    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let m = w.nrows();
    let mut left = DMatrix::zeros(m, n);
    let mut right = DMatrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            left.set_column(k, &(w.column(j) / sigma));
        }
        right.set_column(k, &v.column(j));
    }
    // left/right are the factors of `w = left * diag(s) * right^T`
    let (mut u, mut vmat) = if transposed { (right, left) } else { (left, right) };
    for k in 0..n {
        let col = u.column(k);
        let pivot = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            u.column_mut(k).neg_mut();
            vmat.column_mut(k).neg_mut();
        }
    }
    Svd {
        u,
        s,
        vt: vmat.transpose(),
    }
}

//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Thin SVD with singular values sorted in descending order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

/// Thin SVD of `m`, sorted by decreasing singular value. Left singular vectors
/// have their sign fixed so that the largest-magnitude entry is positive, which
/// makes the result reproducible regardless of the solver's sign choice.
pub fn sorted_svd(m: &DMatrix<f64>) -> Result<SortedSvd> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::RankDeficient("svd did not converge".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::RankDeficient("svd did not converge".into()))?;
    let k = svd.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut su = DMatrix::zeros(u.nrows(), k);
    let mut sv = DMatrix::zeros(k, v_t.ncols());
    let mut s = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let mut sign = 1.0;
        let mut best = 0.0;
        for &x in col.iter() {
            if x.abs() > best + 1e-14 {
                best = x.abs();
                sign = x.signum();
            }
        }
        su.set_column(dst, &(col * sign));
        sv.set_row(dst, &(v_t.row(src) * sign));
        s[dst] = svd.singular_values[src];
    }
    Ok(SortedSvd {
        u: su,
        singular_values: s,
        v_t: sv,
    })
}

/// Moore-Penrose pseudoinverse, discarding singular values at or below
/// `rel_tol * sigma_max`. Returns the pseudoinverse and the retained rank.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let svd = sorted_svd(m)?;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rel_tol * smax;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > cutoff && s > 0.0 {
            rank += 1;
            let v = svd.v_t.row(i).transpose();
            let u = svd.u.column(i);
            out += (v / s) * u.transpose();
        }
    }
    Ok((out, rank))
}

/// Ridge-regularized least squares: argmin ‖X w − y‖² + ridge·‖w‖².
pub fn ridge_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::dims(format!(
            "design has {} rows but target has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    let xt = x.transpose();
    let mut gram = &xt * x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let rhs = &xt * y;
    // Gram + ridge is symmetric positive definite for ridge > 0.
    match gram.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => {
            let (pinv, _) = pseudo_inverse(&gram, 1e-14)?;
            Ok(pinv * rhs)
        }
    }
}

pub(crate) fn all_finite<'a>(it: impl IntoIterator<Item = &'a f64>) -> bool {
    it.into_iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_svd_orders_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]);
        let svd = sorted_svd(&m).unwrap();
        assert_eq!(svd.singular_values.as_slice(), &[3.0, 2.0, 1.0]);
        let rec = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * &svd.v_t;
        assert!((rec - m).abs().max() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_one() {
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let v = DVector::from_vec(vec![3.0, 0.0, 4.0]);
        let m = &u * v.transpose();
        let (p, rank) = pseudo_inverse(&m, 1e-12).unwrap();
        assert_eq!(rank, 1);
        // M M+ M = M
        assert!((&m * &p * &m - &m).abs().max() < 1e-12);
    }

    #[test]
    fn ridge_recovers_exact_linear_map() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let w = DVector::from_vec(vec![0.5, -2.0]);
        let y = &x * &w;
        let got = ridge_least_squares(&x, &y, 1e-12).unwrap();
        assert!((got - w).abs().max() < 1e-9);
    }
}

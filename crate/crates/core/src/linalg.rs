//! Dense real kernels used by the encoding scheme.
//!
//! Matrices are `nalgebra` dense matrices. Everything that leaves this module
//! (files, wire frames) goes through [`write_mat`] / [`read_mat`], which use a
//! fixed little-endian row-major layout: two `u64` dimensions followed by
//! `rows * cols` `f64` entries.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value threshold below which a matrix is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Row norms below this are treated as zero when checking kernel bases.
pub const ZERO_ROW_TOLERANCE: f64 = 1e-12;

const MAX_ATTEMPTS: usize = 16;

// Upper bound on entries accepted by `read_mat`, so a corrupt header cannot
// trigger a huge allocation.
const MAX_SERIALIZED_ENTRIES: u64 = 1 << 28;

// Seed for the rotation used to repair zero rows in a kernel basis.
const KERNEL_REPAIR_SEED: u64 = 0x6b65_726e_656c_5f31;

/// Draws a `rows x cols` matrix with i.i.d. entries uniform on `[-scale, scale]`,
/// redrawing until it has full numerical column rank.
pub fn gen_full_col_rank<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> Result<Mat> {
    if cols == 0 || rows < cols {
        return Err(Error::Config(format!(
            "full column rank requires rows >= cols >= 1, got {rows}x{cols}"
        )));
    }
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::Config(format!("invalid entry scale {scale}")));
    }
    for _ in 0..MAX_ATTEMPTS {
        let m = Mat::from_row_iterator(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)),
        );
        if has_full_column_rank(&m) {
            return Ok(m);
        }
    }
    Err(Error::Generation(format!(
        "no full-column-rank {rows}x{cols} matrix after {MAX_ATTEMPTS} attempts (scale {scale})"
    )))
}

/// True when the smallest singular value exceeds `RANK_TOLERANCE` times the largest.
pub fn has_full_column_rank(m: &Mat) -> bool {
    if m.nrows() < m.ncols() {
        return false;
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    max > 0.0 && min > RANK_TOLERANCE * max
}

/// Ratio of the extreme singular values; infinite for rank-deficient input.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.singular_values();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Moore–Penrose left inverse `(mᵀm)⁻¹mᵀ` of a full-column-rank matrix.
///
/// Evaluated through a Householder QR factorization (`R⁻¹Qᵀ`), which is the same
/// matrix as the normal-equations form but keeps the residual `L·m − I` at the
/// level of `cond(m)` rather than `cond(m)²`.
pub fn left_inverse(m: &Mat) -> Result<Mat> {
    let (rows, cols) = m.shape();
    if rows < cols || cols == 0 {
        return Err(Error::Rank(format!(
            "left inverse needs a tall full-column-rank matrix, got {rows}x{cols}"
        )));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    let diag_min = r.diagonal().iter().fold(f64::INFINITY, |a, d| a.min(d.abs()));
    if !(diag_max > 0.0) || diag_min <= RANK_TOLERANCE * diag_max {
        return Err(Error::Rank(format!(
            "mᵀm is numerically singular ({rows}x{cols}, |R| diagonal range {diag_min:e}..{diag_max:e})"
        )));
    }
    let q_t = qr.q().transpose();
    r.solve_upper_triangular(&q_t)
        .ok_or_else(|| Error::Rank("triangular solve failed".into()))
}

/// Orthonormal basis of the orthogonal complement of `col(pi1)`.
///
/// For the Moore–Penrose left inverse this is exactly `ker(pi1_left)`. Rows
/// with (near) zero norm are repaired by rotating the basis with a seeded
/// random orthogonal matrix; the rotation keeps the span and orthonormality.
/// When no rotation can help (a single kernel column with a structural zero)
/// the basis is returned as is and callers that need nonzero rows must check.
pub fn kernel_basis(pi1: &Mat) -> Result<Mat> {
    let (rows, cols) = pi1.shape();
    if rows <= cols {
        return Err(Error::Rank(format!(
            "empty kernel: {rows}x{cols} matrix has no orthogonal complement"
        )));
    }
    if !has_full_column_rank(pi1) {
        return Err(Error::Rank("kernel basis needs a full-column-rank matrix".into()));
    }
    let qr = pi1.clone().qr();
    let mut q_t = Mat::identity(rows, rows);
    qr.q_tr_mul(&mut q_t);
    // Rows cols.. of Qᵀ are the trailing columns of the full Q.
    let mut basis = q_t.rows(cols, rows - cols).transpose();

    let mut rng = ChaCha20Rng::seed_from_u64(KERNEL_REPAIR_SEED);
    let k = rows - cols;
    for _ in 0..MAX_ATTEMPTS {
        if min_row_norm(&basis) >= ZERO_ROW_TOLERANCE || k == 1 {
            break;
        }
        let rotation = random_orthogonal(k, &mut rng);
        basis = &basis * rotation;
    }
    if min_row_norm(&basis) < ZERO_ROW_TOLERANCE {
        log::warn!("kernel basis still has a zero row after repair");
    }
    Ok(basis)
}

fn min_row_norm(m: &Mat) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(f64::INFINITY, f64::min)
}

fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    loop {
        let g = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..=1.0));
        if has_full_column_rank(&g) {
            return g.qr().q();
        }
    }
}

/// Per-row l1 and l2 norms.
pub fn norms(m: &Mat) -> (Vec<f64>, Vec<f64>) {
    m.row_iter()
        .map(|r| (r.iter().map(|x| x.abs()).sum::<f64>(), r.norm()))
        .unzip()
}

/// Largest absolute entry; zero for an empty matrix.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `max |a·b − I|` for square products, used by residual checks.
pub fn identity_residual(product: &Mat) -> f64 {
    let n = product.nrows();
    max_abs(&(product - Mat::identity(n, product.ncols())))
}

pub fn write_mat<W: Write + ?Sized>(w: &mut W, m: &Mat) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_vector<W: Write + ?Sized>(w: &mut W, v: &Vector) -> Result<()> {
    write_mat(w, &Mat::from_column_slice(v.len(), 1, v.as_slice()))
}

/// Serialized bytes of a vector, as they appear in files and wire frames.
pub fn vector_bytes(v: &Vector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * v.len());
    write_vector(&mut out, v).expect("writing to a Vec cannot fail");
    out
}

pub fn read_mat<R: Read + ?Sized>(r: &mut R) -> Result<Mat> {
    let rows = read_u64(r)?;
    let cols = read_u64(r)?;
    let count = rows
        .checked_mul(cols)
        .filter(|&n| n <= MAX_SERIALIZED_ENTRIES)
        .ok_or_else(|| Error::Format(format!("matrix header {rows}x{cols} too large")))?;
    let mut bytes = vec![0u8; count as usize * 8];
    read_exact(r, &mut bytes)?;
    let entries: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if entries.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("non-finite matrix entry".into()));
    }
    Ok(Mat::from_row_slice(rows as usize, cols as usize, &entries))
}

pub fn read_vector<R: Read + ?Sized>(r: &mut R) -> Result<Vector> {
    let m = read_mat(r)?;
    if m.ncols() != 1 && !(m.nrows() == 0 || m.ncols() == 0) {
        return Err(Error::Format(format!(
            "expected a column vector, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(Vector::from_column_slice(m.as_slice()))
}

pub(crate) fn read_u64<R: Read + ?Sized>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_exact<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated input".into())
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn one_by_one_is_nonzero() {
        for seed in 0..20 {
            let m = gen_full_col_rank(1, 1, 1.0, &mut rng(seed)).unwrap();
            assert!(m[(0, 0)] != 0.0);
        }
    }

    #[test]
    fn small_scale_column_respects_bound() {
        let m = gen_full_col_rank(3, 1, 1e-4, &mut rng(7)).unwrap();
        assert!(m.iter().all(|x| x.abs() <= 1e-4));
        // rank 1: the single singular value is the column norm
        let sv = m.singular_values();
        assert_eq!(sv.len(), 1);
        assert!((sv[0] - m.column(0).norm()).abs() <= 1e-18);
        assert!(sv[0] > 0.0);
    }

    #[test]
    fn zero_scale_fails_generation() {
        let err = gen_full_col_rank(3, 2, 0.0, &mut rng(1)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn wide_request_is_config_error() {
        assert!(matches!(
            gen_full_col_rank(2, 3, 1.0, &mut rng(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_full_col_rank(9, 4, 0.5, &mut rng(42)).unwrap();
        let b = gen_full_col_rank(9, 4, 0.5, &mut rng(42)).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn left_inverse_of_identity() {
        let l = left_inverse(&Mat::identity(4, 4)).unwrap();
        assert!(max_abs(&(l - Mat::identity(4, 4))) == 0.0);
    }

    #[test]
    fn left_inverse_of_scaled_axis() {
        let m = Mat::from_row_slice(2, 1, &[2.0, 0.0]);
        let l = left_inverse(&m).unwrap();
        assert!((l[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(l[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn left_inverse_residual_random() {
        let m = gen_full_col_rank(10, 7, 1.0, &mut rng(3)).unwrap();
        let l = left_inverse(&m).unwrap();
        assert!(identity_residual(&(&l * &m)) <= 1e-10);
    }

    #[test]
    fn left_inverse_rejects_rank_deficient() {
        let m = Mat::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(left_inverse(&m), Err(Error::Rank(_))));
    }

    #[test]
    fn kernel_of_first_axis() {
        let pi1 = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
        let n1 = kernel_basis(&pi1).unwrap();
        assert_eq!(n1.shape(), (2, 1));
        assert!(n1[(0, 0)].abs() < 1e-15);
        assert!((n1[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_of_square_is_empty() {
        assert!(matches!(
            kernel_basis(&Mat::identity(3, 3)),
            Err(Error::Rank(_))
        ));
    }

    /// Classical Gram–Schmidt on [pi1 | e1 | e2 | ...] as an independent oracle
    /// for the complement dimension and orthogonality.
    fn gram_schmidt_complement(pi1: &Mat) -> Mat {
        let n = pi1.nrows();
        let mut basis: Vec<Vector> = Vec::new();
        let push = |v: Vector, basis: &mut Vec<Vector>| {
            let mut w = v.clone();
            for b in basis.iter() {
                w -= b * b.dot(&v);
            }
            for b in basis.iter() {
                let c = b.dot(&w);
                w -= b * c;
            }
            if w.norm() > 1e-8 {
                basis.push(w.normalize());
                true
            } else {
                false
            }
        };
        for j in 0..pi1.ncols() {
            push(pi1.column(j).into_owned(), &mut basis);
        }
        let start = basis.len();
        for i in 0..n {
            let mut e = Vector::zeros(n);
            e[i] = 1.0;
            push(e, &mut basis);
        }
        let cols: Vec<Vector> = basis[start..].to_vec();
        Mat::from_columns(&cols)
    }

    #[test]
    fn kernel_of_diagonal_direction_matches_gram_schmidt() {
        let s = 1.0 / 3f64.sqrt();
        let pi1 = Mat::from_row_slice(3, 1, &[s, s, s]);
        let n1 = kernel_basis(&pi1).unwrap();
        let oracle = gram_schmidt_complement(&pi1);
        assert_eq!(n1.shape(), oracle.shape());
        assert!(max_abs(&(n1.transpose() * &pi1)) <= 1e-12);
        assert!(identity_residual(&(n1.transpose() * &n1)) <= 1e-12);
        // same subspace: projectors agree
        let p1 = &n1 * n1.transpose();
        let p2 = &oracle * oracle.transpose();
        assert!(max_abs(&(p1 - p2)) <= 1e-12);
    }

    #[test]
    fn kernel_basis_annihilated_by_left_inverse() {
        let pi1 = gen_full_col_rank(12, 5, 1e-4, &mut rng(11)).unwrap();
        let l = left_inverse(&pi1).unwrap();
        let n1 = kernel_basis(&pi1).unwrap();
        assert_eq!(n1.shape(), (12, 7));
        assert!(max_abs(&(&l * &n1)) <= 1e-10);
        assert!(identity_residual(&(n1.transpose() * &n1)) <= 1e-10);
    }

    #[test]
    fn zero_row_is_repaired_when_rotation_can_help() {
        // complement of span{e1} in R^3 spanned by e2, e3 has a zero first row
        let pi1 = Mat::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let n1 = kernel_basis(&pi1).unwrap();
        // first row is structurally zero: every complement vector has zero e1 component
        assert!(n1.row(0).norm() < 1e-12);
        // but a generic direction is repaired
        let pi1 = Mat::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        let n1 = kernel_basis(&pi1).unwrap();
        let (_, l2) = norms(&n1);
        assert!(l2.iter().all(|&r| r > 1e-12));
    }

    #[test]
    fn norms_of_three_four_five() {
        let (l1, l2) = norms(&Mat::from_row_slice(1, 2, &[3.0, -4.0]));
        assert_eq!(l1, vec![7.0]);
        assert_eq!(l2, vec![5.0]);
        let (l1, l2) = norms(&Mat::zeros(1, 3));
        assert_eq!((l1[0], l2[0]), (0.0, 0.0));
    }

    #[test]
    fn norms_match_summation_oracle() {
        let m = gen_full_col_rank(5, 5, 3.0, &mut rng(5)).unwrap();
        let (l1, l2) = norms(&m);
        for i in 0..5 {
            let mut a = 0.0;
            let mut b = 0.0;
            for j in 0..5 {
                a += m[(i, j)].abs();
                b += m[(i, j)] * m[(i, j)];
            }
            assert!((l1[i] - a).abs() <= 1e-14 * a);
            assert!((l2[i] - b.sqrt()).abs() <= 1e-14 * b.sqrt());
        }
    }

    #[test]
    fn serialization_layout_is_row_major_le() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_mat(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 16 + 32);
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&buf[24..32], &2.0f64.to_le_bytes());
        let back = read_mat(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_matrix_is_format_error() {
        let mut buf = Vec::new();
        write_mat(&mut buf, &Mat::identity(3, 3)).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_mat(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn serialization_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
                let mut r = rng(seed);
                let m = Mat::from_fn(rows, cols, |_, _| r.gen_range(-1e6..1e6));
                let mut buf = Vec::new();
                write_mat(&mut buf, &m).unwrap();
                let back = read_mat(&mut buf.as_slice()).unwrap();
                prop_assert_eq!(back.as_slice(), m.as_slice());
            }

            #[test]
            fn generated_pairs_satisfy_kernel_identities(
                cols in 1usize..8, extra in 1usize..6, seed in any::<u64>(), unit in any::<bool>()
            ) {
                let scale = if unit { 1.0 } else { 1e-4 };
                let pi1 = gen_full_col_rank(cols + extra, cols, scale, &mut rng(seed)).unwrap();
                let l = left_inverse(&pi1).unwrap();
                let n1 = kernel_basis(&pi1).unwrap();
                // Evaluating l * n1 in float64 rounds at about eps * |l| per term;
                // keygen redraws the rare draws where that exceeds 1e-10.
                let floor = 1e-10f64.max(16.0 * f64::EPSILON * (cols + extra) as f64 * max_abs(&l));
                prop_assert!(identity_residual(&(&l * &pi1)) <= floor);
                prop_assert!(max_abs(&(&l * &n1)) <= floor);
                prop_assert!(identity_residual(&(n1.transpose() * &n1)) <= 1e-10);
            }
        }
    }
}

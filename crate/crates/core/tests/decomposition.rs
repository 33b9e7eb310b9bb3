use convbasis::basisconv::{extract_basis_qr, extract_basis_svd};
use convbasis::rng::SeededRng;
use convbasis::Tensor;
use nalgebra::DMatrix;

fn random_weight(rng: &mut SeededRng, seed: u64) -> Tensor {
    let c_out = 2 + rng.below(7);
    let c_in = 1 + rng.below(3);
    let k = [1, 3][rng.below(2)];
    Tensor::randn(&[c_out, c_in, k, k], seed)
}

fn approx_error(w: &Tensor, basis: &Tensor, coeffs: &Tensor) -> f64 {
    let [c_out, c_in, kh, kw] = w.dims4().unwrap();
    let r = basis.shape()[0];
    let b = basis.clone().reshape(&[r, c_in * kh * kw]).unwrap();
    let m = w.clone().reshape(&[c_out, c_in * kh * kw]).unwrap();
    let e = m.sub(&coeffs.matmul(&b).unwrap()).unwrap().frobenius_norm();
    e * e
}

/// Singular values from an independent implementation.
fn reference_singular_values(w: &Tensor) -> Vec<f64> {
    let [c_out, ..] = w.dims4().unwrap();
    let cols = w.len() / c_out;
    let m = DMatrix::from_row_slice(c_out, cols, w.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn svd_meets_eckart_young_bound() {
    let mut rng = SeededRng::new(5);
    for i in 0..60 {
        let w = random_weight(&mut rng, i);
        let s = reference_singular_values(&w);
        for r in 1..=w.shape()[0] {
            let (basis, coeffs) = extract_basis_svd(&w, r).unwrap();
            let tail: f64 = s.iter().skip(r).map(|v| v * v).sum();
            let err = approx_error(&w, &basis, &coeffs);
            assert!((err - tail).abs() < 1e-9, "weight {i}, r={r}: error {err} vs tail {tail}");
        }
    }
}

#[test]
fn qr_basis_is_verbatim_and_never_beats_svd() {
    let mut rng = SeededRng::new(6);
    for i in 0..60 {
        let w = random_weight(&mut rng, 100 + i);
        let c_out = w.shape()[0];
        let flen = w.len() / c_out;
        for r in 1..=c_out {
            let q = extract_basis_qr(&w, r).unwrap();
            for (slot, &f) in q.selected.iter().enumerate() {
                assert_eq!(&q.basis.data()[slot * flen..(slot + 1) * flen], &w.data()[f * flen..(f + 1) * flen]);
            }
            let (b, c) = extract_basis_svd(&w, r).unwrap();
            let svd_err = approx_error(&w, &b, &c);
            let qr_err = approx_error(&w, &q.basis, &q.coeffs);
            assert!(qr_err >= svd_err - 1e-9, "weight {i}, r={r}: qr {qr_err} < svd {svd_err}");
            assert!((q.residual * q.residual - qr_err).abs() < 1e-9);
        }
    }
}

#[test]
fn full_rank_extraction_reconstructs() {
    let w = Tensor::randn(&[6, 2, 3, 3], 1);
    let (b, c) = extract_basis_svd(&w, 6).unwrap();
    assert!(approx_error(&w, &b, &c) < 1e-20);
    let q = extract_basis_qr(&w, 6).unwrap();
    assert!(q.residual < 1e-10);
}

//! Temporary GEMM A/B probe; removed before release.

use std::time::Instant;

use ndarray::Array2;

fn bench(label: &str, mut run: impl FnMut()) {
    run();
    let t = Instant::now();
    for _ in 0..5 {
        run();
    }
    println!("{label}: {:?}", t.elapsed() / 5);
}

#[test]
#[ignore]
fn gemm_ab() {
    // The hot conv shape: fusion 256ch 3x3 @32^2, batch 16.
    let (m, k, n) = (64usize, 2304usize, 16384usize);
    let a = Array2::<f32>::from_shape_fn((m, k), |(i, j)| ((i * 7 + j) % 13) as f32 * 0.1);
    let b = Array2::<f32>::from_shape_fn((k, n), |(i, j)| ((i + j * 3) % 11) as f32 * 0.1);
    let mut c = Array2::<f32>::zeros((m, n));

    bench("matrixmultiply 64x2304x16384 f32", || {
        ndarray::linalg::general_mat_mul(1.0f32, &a, &b, 0.0, &mut c);
    });

    let af = faer::mat::MatRef::from_row_major_slice(a.as_slice().unwrap(), m, k);
    let bf = faer::mat::MatRef::from_row_major_slice(b.as_slice().unwrap(), k, n);
    let mut cv = vec![0.0f32; m * n];
    bench("faer 64x2304x16384 f32", || {
        let cf = faer::mat::MatMut::from_row_major_slice_mut(&mut cv, m, n);
        faer::linalg::matmul::matmul(
            cf,
            faer::Accum::Replace,
            af,
            bf,
            1.0f32,
            faer::Par::Seq,
        );
    });

    // A smaller 1x1-conv-like shape.
    let (m2, k2, n2) = (64usize, 64usize, 16384usize);
    let a2 = Array2::<f32>::from_shape_fn((m2, k2), |(i, j)| ((i * 5 + j) % 7) as f32 * 0.1);
    let b2 = Array2::<f32>::from_shape_fn((k2, n2), |(i, j)| ((i + j) % 9) as f32 * 0.1);
    let mut c2 = Array2::<f32>::zeros((m2, n2));
    bench("matrixmultiply 64x64x16384 f32", || {
        ndarray::linalg::general_mat_mul(1.0f32, &a2, &b2, 0.0, &mut c2);
    });
    let af2 = faer::mat::MatRef::from_row_major_slice(a2.as_slice().unwrap(), m2, k2);
    let bf2 = faer::mat::MatRef::from_row_major_slice(b2.as_slice().unwrap(), k2, n2);
    let mut cv2 = vec![0.0f32; m2 * n2];
    bench("faer 64x64x16384 f32", || {
        let cf = faer::mat::MatMut::from_row_major_slice_mut(&mut cv2, m2, n2);
        faer::linalg::matmul::matmul(
            cf,
            faer::Accum::Replace,
            af2,
            bf2,
            1.0f32,
            faer::Par::Seq,
        );
    });

    // Agreement check.
    let cf_view = faer::mat::MatRef::from_row_major_slice(&cv, m, n);
    let mut worst = 0.0f32;
    for i in (0..m).step_by(7) {
        for j in (0..n).step_by(113) {
            worst = worst.max((c[[i, j]] - cf_view[(i, j)]).abs());
        }
    }
    println!("max sampled |diff|: {worst:e}");
}

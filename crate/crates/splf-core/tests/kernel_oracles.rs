//! Numeric kernels checked against naive 64-bit references.
//!
//! The matmul family and the convolutions are instantiated at f64 and
//! compared to quadruple-loop references at near machine precision, then the
//! f32 instantiations used in training are held to looser float tolerances.
//! Backward kernels are checked through adjoint identities, which hold
//! exactly for linear maps and are independent of any derivative derivation.

mod common;

use splf_core::kernels;

#[test]
fn matmul_plain_matches_reference() {
    let mut r = common::rng(11);
    let (m, k, n) = (7, 13, 9);
    let a = common::uniform(&mut r, m * k, -1.0, 1.0);
    let b = common::uniform(&mut r, k * n, -1.0, 1.0);
    let mut c = vec![0.0f64; m * n];
    kernels::mm_nn(&a, &b, m, k, n, &mut c);
    let want = common::matmul_ref(&a, &b, m, k, n);
    assert!(common::max_abs_diff(&c, &want) < 1e-12);
}

#[test]
fn matmul_transposed_variants_match_reference() {
    let mut r = common::rng(12);
    let (m, k, n) = (6, 11, 8);
    let a = common::uniform(&mut r, m * k, -1.0, 1.0);

    // B stored row-major as [n, k]; transpose it for the plain reference
    let bt = common::uniform(&mut r, n * k, -1.0, 1.0);
    let mut b = vec![0.0f64; k * n];
    for j in 0..n {
        for t in 0..k {
            b[t * n + j] = bt[j * k + t];
        }
    }
    let mut c = vec![0.0f64; m * n];
    kernels::mm_nt(&a, &bt, m, k, n, &mut c);
    let want = common::matmul_ref(&a, &b, m, k, n);
    assert!(common::max_abs_diff(&c, &want) < 1e-12);

    // A^T * B with A stored as [m, k]
    let b2 = common::uniform(&mut r, m * n, -1.0, 1.0);
    let mut at = vec![0.0f64; k * m];
    for i in 0..m {
        for t in 0..k {
            at[t * m + i] = a[i * k + t];
        }
    }
    let mut c2 = vec![0.0f64; k * n];
    kernels::mm_tn(&a, &b2, m, k, n, &mut c2);
    let want2 = common::matmul_ref(&at, &b2, k, m, n);
    assert!(common::max_abs_diff(&c2, &want2) < 1e-12);
}

#[test]
fn matmul_accumulates_into_output() {
    let a = [1.0f64, 2.0];
    let b = [3.0f64, 4.0];
    let mut c = [10.0f64];
    kernels::mm_nn(&a, &b, 1, 2, 1, &mut c);
    assert_eq!(c[0], 10.0 + 11.0);
}

/// Every convolution configuration the model uses, plus padding and grouping
/// edge cases, against the quadruple-loop reference in f64.
#[test]
fn conv2d_forward_matches_reference_across_configs() {
    // (n, cin, h, w, cout, k, stride, pad, groups)
    let configs: &[(usize, usize, usize, usize, usize, usize, usize, usize, usize)] = &[
        (2, 3, 8, 9, 4, 3, 1, 1, 1),
        (1, 3, 16, 16, 5, 4, 4, 0, 1),
        (2, 4, 9, 8, 4, 1, 1, 0, 1),
        (1, 6, 10, 10, 6, 5, 1, 2, 6),
        (2, 4, 8, 8, 6, 3, 2, 1, 2),
        (1, 2, 12, 12, 3, 7, 1, 3, 1),
        (1, 2, 7, 7, 2, 3, 1, 2, 1),
        (1, 3, 9, 9, 4, 3, 2, 1, 1),
    ];
    let mut r = common::rng(21);
    for &(n, cin, h, w, cout, k, stride, pad, groups) in configs {
        let x = common::uniform(&mut r, n * cin * h * w, -1.0, 1.0);
        let wt = common::uniform(&mut r, cout * (cin / groups) * k * k, -1.0, 1.0);
        let b = common::uniform(&mut r, cout, -0.5, 0.5);
        let oh = kernels::conv_out_dim(h, k, stride, pad);
        let ow = kernels::conv_out_dim(w, k, stride, pad);
        let mut y = vec![0.0f64; n * cout * oh * ow];
        kernels::conv2d_fwd(&x, &wt, Some(&b), &mut y, n, cin, h, w, cout, k, k, stride, pad, groups);
        let want = common::conv2d_ref(&x, &wt, Some(&b), n, cin, h, w, cout, k, k, stride, pad, groups);
        assert!(
            common::max_abs_diff(&y, &want) < 1e-12,
            "forward mismatch at config {:?}",
            (n, cin, h, w, cout, k, stride, pad, groups)
        );
    }
}

#[test]
fn conv2d_f32_stays_close_to_f64_reference() {
    let mut r = common::rng(22);
    let (n, cin, h, w, cout, k, stride, pad) = (2, 3, 16, 16, 8, 3, 1, 1);
    let x32 = common::uniform_f32(&mut r, n * cin * h * w, -1.0, 1.0);
    let w32 = common::uniform_f32(&mut r, cout * cin * k * k, -1.0, 1.0);
    let x64: Vec<f64> = x32.iter().map(|&v| v as f64).collect();
    let w64: Vec<f64> = w32.iter().map(|&v| v as f64).collect();
    let mut y = vec![0.0f32; n * cout * h * w];
    kernels::conv2d_fwd(&x32, &w32, None, &mut y, n, cin, h, w, cout, k, k, stride, pad, 1);
    let want = common::conv2d_ref(&x64, &w64, None, n, cin, h, w, cout, k, k, stride, pad, 1);
    assert!(common::max_abs_diff_f32(&y, &want) < 1e-4);
}

/// For the linear map y = conv(x; w), the identities <dy, y> = <dx, x> with
/// dx = bwd_input(dy) and <dy, y> = <dw, w> with dw = bwd_weight(dy) pin both
/// adjoints to the forward pass without any reference to derivatives.
#[test]
fn conv2d_backward_kernels_satisfy_adjoint_identities() {
    let configs: &[(usize, usize, usize, usize, usize, usize, usize, usize, usize)] = &[
        (2, 3, 8, 9, 4, 3, 1, 1, 1),
        (1, 3, 16, 16, 5, 4, 4, 0, 1),
        (2, 4, 9, 8, 4, 1, 1, 0, 1),
        (1, 6, 10, 10, 6, 5, 1, 2, 6),
        (2, 4, 8, 8, 6, 3, 2, 1, 2),
        (1, 2, 12, 12, 3, 7, 1, 3, 1),
    ];
    let mut r = common::rng(23);
    for &(n, cin, h, w, cout, k, stride, pad, groups) in configs {
        let x = common::uniform(&mut r, n * cin * h * w, -1.0, 1.0);
        let wt = common::uniform(&mut r, cout * (cin / groups) * k * k, -1.0, 1.0);
        let oh = kernels::conv_out_dim(h, k, stride, pad);
        let ow = kernels::conv_out_dim(w, k, stride, pad);
        let dy = common::uniform(&mut r, n * cout * oh * ow, -1.0, 1.0);

        let mut y = vec![0.0f64; dy.len()];
        kernels::conv2d_fwd(&x, &wt, None, &mut y, n, cin, h, w, cout, k, k, stride, pad, groups);
        let mut dx = vec![0.0f64; x.len()];
        kernels::conv2d_bwd_input(&dy, &wt, &mut dx, n, cin, h, w, cout, k, k, stride, pad, groups);
        let mut dw = vec![0.0f64; wt.len()];
        kernels::conv2d_bwd_weight(&x, &dy, &mut dw, n, cin, h, w, cout, k, k, stride, pad, groups);

        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let lhs = dot(&dy, &y);
        let via_input = dot(&dx, &x);
        let via_weight = dot(&dw, &wt);
        assert!(
            (lhs - via_input).abs() < 1e-9 * lhs.abs().max(1.0),
            "input adjoint broken at {:?}",
            (n, cin, h, w, cout, k, stride, pad, groups)
        );
        assert!(
            (lhs - via_weight).abs() < 1e-9 * lhs.abs().max(1.0),
            "weight adjoint broken at {:?}",
            (n, cin, h, w, cout, k, stride, pad, groups)
        );
    }
}

#[test]
fn bilinear_resize_matches_reference_and_identity() {
    let mut r = common::rng(31);
    let (planes, h, w) = (6, 7, 5);
    let x = common::uniform(&mut r, planes * h * w, -1.0, 1.0);

    for &(oh, ow) in &[(14usize, 9usize), (4, 3), (7, 5), (1, 1)] {
        let mut y = vec![0.0f64; planes * oh * ow];
        kernels::bilinear_fwd(&x, &mut y, planes, h, w, oh, ow);
        let want = common::bilinear_ref(&x, planes, h, w, oh, ow);
        assert!(common::max_abs_diff(&y, &want) < 1e-12, "resize to {}x{}", oh, ow);
    }

    // same-size resize is the identity under pixel-center sampling
    let mut same = vec![0.0f64; x.len()];
    kernels::bilinear_fwd(&x, &mut same, planes, h, w, h, w);
    assert_eq!(same, x);
}

#[test]
fn softmax_rows_matches_reference_and_shift_invariance() {
    let mut r = common::rng(32);
    let (rows, cols) = (9, 13);
    let x = common::uniform(&mut r, rows * cols, -4.0, 4.0);

    let mut got = x.clone();
    kernels::softmax_rows(&mut got, rows, cols);
    for ri in 0..rows {
        let row = &x[ri * cols..(ri + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for ci in 0..cols {
            assert!((got[ri * cols + ci] - exps[ci] / z).abs() < 1e-12);
        }
    }

    // shifting a row by a constant must not change the result
    let mut shifted = x.clone();
    for v in shifted.iter_mut() {
        *v += 1000.0;
    }
    kernels::softmax_rows(&mut shifted, rows, cols);
    assert!(common::max_abs_diff(&got, &shifted) < 1e-12);

    // huge magnitudes stay finite
    let mut hot = vec![-1e30f64, 1e30, 0.0];
    kernels::softmax_rows(&mut hot, 1, 3);
    assert!(hot.iter().all(|v| v.is_finite()));
    assert!((hot.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn activation_scalars_match_closed_forms() {
    for i in 0..200 {
        let x = (i as f64 - 100.0) / 10.0;
        let sig = kernels::sigmoid(x);
        assert!((sig - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);

        let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
        let gel = 0.5 * x * (1.0 + u.tanh());
        assert!((kernels::gelu(x) - gel).abs() < 1e-12);
    }
    assert_eq!(kernels::sigmoid(-100.0f64), kernels::sigmoid(-100.0f64));
    assert!(kernels::sigmoid(-500.0f64) >= 0.0);
    assert!(kernels::sigmoid(500.0f64) <= 1.0);
    assert!(kernels::gelu(-500.0f64).is_finite());
}

#[test]
fn token_map_layouts_roundtrip_and_transpose() {
    let mut r = common::rng(33);
    let (n, h, w, d) = (2, 3, 4, 5);
    let tokens = common::uniform(&mut r, n * h * w * d, -1.0, 1.0);
    let mut map = vec![0.0f64; tokens.len()];
    kernels::tokens_to_map(&tokens, &mut map, n, h, w, d);
    // token (ni, li, di) lands at plane di, position li
    for ni in 0..n {
        for li in 0..h * w {
            for di in 0..d {
                assert_eq!(map[(ni * d + di) * h * w + li], tokens[(ni * h * w + li) * d + di]);
            }
        }
    }
    let mut back = vec![0.0f64; tokens.len()];
    kernels::map_to_tokens(&map, &mut back, n, h, w, d);
    assert_eq!(back, tokens);
}

#[test]
fn patch_partition_roundtrips_and_orders_tiles_row_major() {
    let mut r = common::rng(34);
    let (n, c, h, w, p) = (2, 3, 8, 12, 4);
    let x = common::uniform(&mut r, n * c * h * w, -1.0, 1.0);
    let mut patches = vec![0.0f64; x.len()];
    kernels::partition_patches(&x, &mut patches, n, c, h, w, p);

    // patch (ni, gy, gx) channel ci pixel (py, px)
    let (gh, gw) = (h / p, w / p);
    for ni in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let pi = (ni * gh + gy) * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let got = patches[((pi * c + ci) * p + py) * p + px];
                            let want = x[((ni * c + ci) * h + gy * p + py) * w + gx * p + px];
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    let mut back = vec![0.0f64; x.len()];
    kernels::merge_patches(&patches, &mut back, n, c, h, w, p);
    assert_eq!(back, x);
}

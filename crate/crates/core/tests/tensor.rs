use hyperlearner::Tensor;
use hyperlearner::tensor::*;

fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], co: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += wt[((o * c + ci) * 3 + ky) * 3 + kx]
                                * x[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

#[test]
fn im2col_gemm_matches_direct_convolution() {
    let (c, h, w, co) = (2, 5, 4, 3);
    let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
    let wt: Vec<f64> = (0..co * c * 9).map(|i| (i as f64 * 0.11).cos()).collect();
    let cols = im2col(&x, c, h, w, 3, 1);
    let mut out = vec![0.0; co * h * w];
    gemm(co, c * 9, h * w, &wt, false, &cols, false, &mut out, 0.0);
    let reference = naive_conv(&x, c, h, w, &wt, co);
    for (a, b) in out.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn col2im_is_adjoint_of_im2col() {
    let (c, h, w) = (2, 4, 6);
    let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
    let cols = im2col(&x, c, h, w, 3, 1);
    let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.7).cos()).collect();
    let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
    let back = col2im(&y, c, h, w, 3, 1);
    let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn resize_preserves_constants_exactly() {
    let x = vec![0.1; 2 * 3 * 5];
    let y = resize_bilinear(&x, 2, 3, 5, 12, 20);
    assert!(y.iter().all(|&v| v == 0.1));
}

#[test]
fn resize_identity_size_is_identity() {
    let x: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
    assert_eq!(resize_bilinear(&x, 2, 3, 4, 3, 4), x);
}

#[test]
fn gemm_transposes() {
    // a: 2×3, b: 3×2
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let mut c = [0.0; 4];
    gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
    assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    // a^T stored as 3×2
    let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
    let mut c2 = [0.0; 4];
    gemm(2, 3, 2, &at, true, &b, false, &mut c2, 0.0);
    assert_eq!(c2, c);
}

#[test]
fn rot90_four_times_is_identity() {
    let t = Tensor::from_fn(&[2, 3, 5], |i| i as f64);
    let r = t.rot90().unwrap().rot90().unwrap().rot90().unwrap().rot90().unwrap();
    assert_eq!(r, t);
}

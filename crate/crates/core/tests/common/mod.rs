//! Brute-force oracles shared by the integration suites. These are written
//! as plain nested loops, independent of the library's im2col/matmul path,
//! so they can arbitrate its results.

#![allow(dead_code)]

use psnet_core::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

/// Direct convolution: out[n,k,oy,ox] = b[k] + sum_c,ki,kj w[k,c,ki,kj] * x_padded.
pub fn conv2d_oracle<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (k, _, kh, kw) = {
        let s = weight.shape();
        (s[0], s[1], s[2], s[3])
    };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[ki];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + input.at(&[ni, ci, iy as usize, ix as usize])
                                        * weight.at(&[ki, ci, dy, dx]);
                            }
                        }
                    }
                    out.set(&[ni, ki, oy, ox], acc);
                }
            }
        }
    }
    out
}

pub fn maxpool2d_oracle<T: Scalar>(input: &Tensor<T>, k: usize, stride: usize) -> Tensor<T> {
    let (n, c, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = input.at(&[ni, ci, oy * stride, ox * stride]);
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = input.at(&[ni, ci, oy * stride + dy, ox * stride + dx]);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.set(&[ni, ci, oy, ox], best);
                }
            }
        }
    }
    out
}

/// Triple-loop matrix multiply: `[N,D] x [D,E]`.
pub fn matmul_oracle<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let e = b.shape()[1];
    let mut out = Tensor::zeros(&[n, e]);
    for r in 0..n {
        for col in 0..e {
            let mut acc = T::zero();
            for i in 0..d {
                acc = acc + a.at(&[r, i]) * b.at(&[i, col]);
            }
            out.set(&[r, col], acc);
        }
    }
    out
}

pub fn assert_close<T: Scalar>(got: &Tensor<T>, want: &Tensor<T>, tol: f64, what: &str) {
    let d = got.max_rel_diff(want).unwrap_or_else(|e| panic!("{what}: {e}"));
    assert!(d <= tol, "{what}: max relative diff {d} exceeds {tol}");
}

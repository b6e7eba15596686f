//! Independent oracles shared by the integration suites.
//!
//! Nothing in here calls into the library's descriptor or regression code
//! paths; the point is to have a second opinion computed a different way.

#![allow(dead_code)]

use std::f64::consts::TAU;

use bcond::imaging::GrayImage;
use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};

/// Reference descriptor: recomputes gradients pixel by pixel and walks the
/// 4 x 4 cell grid cell-first, so both the arithmetic and the accumulation
/// order differ from the library pipeline.
pub fn brute_descriptor(img: &GrayImage, px: usize, py: usize, side: usize) -> ([f64; 128], f64) {
    assert!(side >= 4, "patch side {side} below the cell grid");
    let (w, h) = (img.width(), img.height());
    assert!(px + side <= w && py + side <= h, "patch out of bounds");
    let value = |x: usize, y: usize| img.pixels()[y * w + x];
    let gradient = |x: usize, y: usize| -> (f64, f64) {
        let dx = if x == 0 {
            value(1, y) - value(0, y)
        } else if x == w - 1 {
            value(w - 1, y) - value(w - 2, y)
        } else {
            (value(x + 1, y) - value(x - 1, y)) / 2.0
        };
        let dy = if y == 0 {
            value(x, 1) - value(x, 0)
        } else if y == h - 1 {
            value(x, h - 1) - value(x, h - 2)
        } else {
            (value(x, y + 1) - value(x, y - 1)) / 2.0
        };
        (dx, dy)
    };
    let cell = side / 4;
    let mut hist = [0.0f64; 128];
    for cy in 0..4 {
        for cx in 0..4 {
            // The last row/column of cells absorbs the remainder pixels.
            let y_hi = if cy == 3 { side } else { (cy + 1) * cell };
            let x_hi = if cx == 3 { side } else { (cx + 1) * cell };
            for dy in cy * cell..y_hi {
                for dx in cx * cell..x_hi {
                    let (gx, gy) = gradient(px + dx, py + dy);
                    let m = gx.hypot(gy);
                    if m == 0.0 {
                        continue;
                    }
                    let mut theta = gy.atan2(gx);
                    if theta < 0.0 {
                        theta += TAU;
                    }
                    let bin = (((theta * 8.0) / TAU).floor() as usize).min(7);
                    hist[(cy * 4 + cx) * 8 + bin] += m;
                }
            }
        }
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for v in &mut hist {
            *v /= norm;
        }
    } else {
        hist = [0.0; 128];
    }
    (hist, norm)
}

/// Every inferential statistic of one exact least-squares fit, converted to
/// f64 only at the very end.
#[derive(Debug, Clone)]
pub struct ExactFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub sigma: f64,
    pub f_statistic: f64,
    pub f_p_value: f64,
}

fn big(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite input")
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("rational fits in f64")
}

/// Gauss-Jordan inverse over the rationals. Exact arithmetic means any
/// nonzero pivot works; a missing pivot means the design is rank deficient.
fn invert(m: &[Vec<BigRational>]) -> Vec<Vec<BigRational>> {
    let p = m.len();
    let mut a = m.to_vec();
    let mut inv: Vec<Vec<BigRational>> = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| if i == j { BigRational::one() } else { BigRational::zero() })
                .collect()
        })
        .collect();
    for col in 0..p {
        let pivot = (col..p)
            .find(|&r| !a[r][col].is_zero())
            .expect("normal equations are full rank");
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col].clone();
        for j in 0..p {
            a[col][j] /= &d;
            inv[col][j] /= &d;
        }
        for r in 0..p {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let f = a[r][col].clone();
            for j in 0..p {
                let t = &f * &a[col][j];
                a[r][j] -= t;
                let t = &f * &inv[col][j];
                inv[r][j] -= t;
            }
        }
    }
    inv
}

/// Exact normal-equation least squares for the 4-column discount design.
///
/// Inference for the residual degrees of freedom this suite uses (dof = 2,
/// 3 model terms) has closed forms: the t CDF with 2 degrees of freedom is
/// `1/2 + t / (2 sqrt(2 + t^2))` and the F(3, 2) upper tail is
/// `1 - u^(3/2)` with `u = 3F / (3F + 2)`, so no special-function library
/// is involved on the oracle side.
pub fn exact_ols(rows: &[[f64; 4]], ys: &[f64]) -> ExactFit {
    let n = rows.len();
    let p = 4;
    assert_eq!(n, ys.len());
    assert_eq!(n - p, 2, "closed-form p-values assume 2 residual dof");

    let mut xtx = vec![vec![BigRational::zero(); p]; p];
    let mut xty = vec![BigRational::zero(); p];
    let mut yty = BigRational::zero();
    let mut ysum = BigRational::zero();
    for (row, &yv) in rows.iter().zip(ys) {
        let y = big(yv);
        for j in 0..p {
            let xj = big(row[j]);
            xty[j] += &xj * &y;
            for k in 0..p {
                let t = &xj * big(row[k]);
                xtx[j][k] += t;
            }
        }
        yty += &y * &y;
        ysum += y;
    }
    let inv = invert(&xtx);
    let beta: Vec<BigRational> = (0..p)
        .map(|j| {
            let mut s = BigRational::zero();
            for k in 0..p {
                s += &inv[j][k] * &xty[k];
            }
            s
        })
        .collect();

    let mut fitted_dot = BigRational::zero();
    for (b, v) in beta.iter().zip(&xty) {
        fitted_dot += b * v;
    }
    let rss = &yty - &fitted_dot;
    let n_r = BigRational::from_integer(BigInt::from(n));
    let tss = &yty - &(&ysum * &ysum) / &n_r;
    let dof = n - p;
    let dof_r = BigRational::from_integer(BigInt::from(dof));
    let sigma2 = &rss / &dof_r;
    let r2 = BigRational::one() - &rss / &tss;
    let one = BigRational::one();
    let adj = &one
        - &(&(&one - &r2) * BigRational::from_integer(BigInt::from(n - 1))) / &dof_r;
    // F = (R^2 / (p - 1)) / ((1 - R^2) / dof), kept rational until the end.
    let f_stat = &(&r2 * &dof_r)
        / &(&(&one - &r2) * BigRational::from_integer(BigInt::from(p - 1)));

    let mut std_errors = Vec::with_capacity(p);
    let mut t_values = Vec::with_capacity(p);
    let mut p_values = Vec::with_capacity(p);
    for j in 0..p {
        let var_j = &sigma2 * &inv[j][j];
        let se = to_f64(&var_j).sqrt();
        // t^2 stays exact; the square root and the sign happen in f64.
        let t2 = &(&beta[j] * &beta[j]) / &var_j;
        let t_abs = to_f64(&t2).sqrt();
        let t = if beta[j].is_negative() { -t_abs } else { t_abs };
        // Two-sided p for 2 dof: 1 - |t| / sqrt(2 + t^2), written in the
        // cancellation-free form 2 / (s (s + |t|)).
        let s = (2.0 + t_abs * t_abs).sqrt();
        let p_val = 2.0 / (s * (s + t_abs));
        std_errors.push(se);
        t_values.push(t);
        p_values.push(p_val);
    }

    let f = to_f64(&f_stat);
    let u = to_f64(&(&(&f_stat * BigRational::from_integer(BigInt::from(3)))
        / &(&(&f_stat * BigRational::from_integer(BigInt::from(3)))
            + BigRational::from_integer(BigInt::from(2)))));
    let f_p_value = 1.0 - u.powf(1.5);

    ExactFit {
        coefficients: beta.iter().map(to_f64).collect(),
        std_errors,
        t_values,
        p_values,
        r_squared: to_f64(&r2),
        adj_r_squared: to_f64(&adj),
        sigma: to_f64(&sigma2).sqrt(),
        f_statistic: f,
        f_p_value,
    }
}

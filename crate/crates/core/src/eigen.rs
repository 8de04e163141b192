//! Dense eigenvalues of a general real matrix.
//!
//! Householder reduction to upper Hessenberg form followed by the
//! Francis double-shift QR iteration (the EISPACK `orthes`/`hqr` pair,
//! eigenvalues only). Complex eigenvalues come out as conjugate pairs.

use crate::error::{Error, Result};

/// A (possibly complex) eigenvalue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// Reduces the row-major `n x n` matrix `h` to upper Hessenberg form in place.
pub(crate) fn hessenberg(n: usize, h: &mut [f64]) {
    if n < 3 {
        return;
    }
    let mut ort = vec![0.0; n];
    let high = n - 1;
    // Columns below this are treated as already reduced; low-rank input would
    // otherwise drive the reduction into subnormal arithmetic.
    let negligible = f64::EPSILON * f64::EPSILON * h.iter().map(|x| x.abs()).sum::<f64>();
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[i * n + m - 1].abs()).sum();
        if scale <= negligible {
            for i in m + 1..=high {
                h[i * n + m - 1] = 0.0;
            }
            continue;
        }
        let mut norm2 = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i * n + m - 1] / scale;
            norm2 += ort[i] * ort[i];
        }
        let mut g = norm2.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        norm2 -= ort[m] * g;
        ort[m] -= g;

        // H = (I - u u^T / h) H (I - u u^T / h)
        let mut f = vec![0.0; n];
        for i in m..=high {
            let row = &h[i * n + m..i * n + n];
            for (fj, x) in f[m..].iter_mut().zip(row) {
                *fj += ort[i] * x;
            }
        }
        for i in m..=high {
            let u = ort[i] / norm2;
            for (x, fj) in h[i * n + m..i * n + n].iter_mut().zip(&f[m..]) {
                *x -= fj * u;
            }
        }
        for i in 0..=high {
            let f: f64 = (m..=high).map(|j| ort[j] * h[i * n + j]).sum::<f64>() / norm2;
            for j in m..=high {
                h[i * n + j] -= f * ort[j];
            }
        }
        h[m * n + m - 1] = scale * g;
        for i in m + 1..=high {
            h[i * n + m - 1] = 0.0;
        }
    }
}

/// Eigenvalues of a row-major upper Hessenberg matrix (destroyed in the process).
pub(crate) fn hessenberg_eigenvalues(nn: usize, h: &mut [f64]) -> Result<Vec<Eigenvalue>> {
    let mut re = vec![0.0; nn];
    let mut im = vec![0.0; nn];
    if nn == 0 {
        return Ok(Vec::new());
    }
    let idx = |i: isize, j: isize| (i as usize) * nn + j as usize;
    let eps = f64::EPSILON;
    let max_sweeps = 60 * nn.max(10);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[i * nn + j].abs();
        }
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite { row: 0, col: 0 });
    }

    let low: isize = 0;
    let mut n = nn as isize - 1;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z);
    let (mut w, mut x, mut y);
    let mut iter = 0usize;
    let mut total = 0usize;

    while n >= low {
        // Single small sub-diagonal element.
        let mut l = n;
        while l > low {
            s = h[idx(l - 1, l - 1)].abs() + h[idx(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            // The absolute floor lets clusters of near-zero eigenvalues deflate.
            if h[idx(l, l - 1)].abs() < eps * s.max(eps * norm) {
                break;
            }
            l -= 1;
        }

        if l == n {
            h[idx(n, n)] += exshift;
            re[n as usize] = h[idx(n, n)];
            im[n as usize] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            w = h[idx(n, n - 1)] * h[idx(n - 1, n)];
            p = (h[idx(n - 1, n - 1)] - h[idx(n, n)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[idx(n, n)] += exshift;
            h[idx(n - 1, n - 1)] += exshift;
            x = h[idx(n, n)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                re[n as usize - 1] = x + z;
                re[n as usize] = if z != 0.0 { x - w / z } else { x + z };
                im[n as usize - 1] = 0.0;
                im[n as usize] = 0.0;
            } else {
                re[n as usize - 1] = x + p;
                re[n as usize] = x + p;
                im[n as usize - 1] = z;
                im[n as usize] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            x = h[idx(n, n)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[idx(n - 1, n - 1)];
                w = h[idx(n, n - 1)] * h[idx(n - 1, n)];
            }

            // Exceptional shifts.
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    h[idx(i, i)] -= x;
                }
                s = h[idx(n, n - 1)].abs() + h[idx(n - 1, n - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        h[idx(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }

            iter += 1;
            total += 1;
            if total > max_sweeps {
                return Err(Error::ConvergenceFailure {
                    iterations: total,
                    change: h[idx(n, n - 1)].abs(),
                });
            }

            // Two consecutive small sub-diagonal elements.
            let mut m = n - 2;
            loop {
                z = h[idx(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[idx(m + 1, m)] + h[idx(m, m + 1)];
                q = h[idx(m + 1, m + 1)] - z - r - s;
                r = h[idx(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let lhs = h[idx(m, m - 1)].abs() * (q.abs() + r.abs());
                let rhs = eps
                    * (p.abs()
                        * (h[idx(m - 1, m - 1)].abs() + z.abs() + h[idx(m + 1, m + 1)].abs()));
                if lhs < rhs {
                    break;
                }
                m -= 1;
            }

            for i in m + 2..=n {
                h[idx(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[idx(i, i - 3)] = 0.0;
                }
            }

            // Double QR step on rows l..=n, columns m..=n.
            let mut k = m;
            while k < n {
                let notlast = k != n - 1;
                if k != m {
                    p = h[idx(k, k - 1)];
                    q = h[idx(k + 1, k - 1)];
                    r = if notlast { h[idx(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[idx(k, k - 1)] = -s * x;
                    } else if l != m {
                        h[idx(k, k - 1)] = -h[idx(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in k..nn as isize {
                        p = h[idx(k, j)] + q * h[idx(k + 1, j)];
                        if notlast {
                            p += r * h[idx(k + 2, j)];
                            h[idx(k + 2, j)] -= p * z;
                        }
                        h[idx(k, j)] -= p * x;
                        h[idx(k + 1, j)] -= p * y;
                    }
                    for i in 0..=n.min(k + 3) {
                        p = x * h[idx(i, k)] + y * h[idx(i, k + 1)];
                        if notlast {
                            p += z * h[idx(i, k + 2)];
                            h[idx(i, k + 2)] -= p * r;
                        }
                        h[idx(i, k)] -= p;
                        h[idx(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    Ok(re
        .into_iter()
        .zip(im)
        .map(|(re, im)| Eigenvalue { re, im })
        .collect())
}

/// All eigenvalues of a row-major `n x n` matrix, sorted by descending modulus.
///
/// Ties in modulus keep the order produced by the QR sweep.
pub fn eigenvalues(n: usize, entries: &[f64]) -> Result<Vec<Eigenvalue>> {
    assert_eq!(entries.len(), n * n, "matrix must be n x n");
    if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            row: i / n,
            col: i % n,
        });
    }
    let mut h = entries.to_vec();
    hessenberg(n, &mut h);
    let mut vals = hessenberg_eigenvalues(n, &mut h)?;
    vals.sort_by(|a, b| b.modulus().total_cmp(&a.modulus()));
    Ok(vals)
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
/// Returns `None` for a numerically singular system.
pub(crate) fn solve_dense(n: usize, a: &mut [f64], b: &mut [f64]) -> Option<()> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for i in col + 1..n {
            let f = a[i * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[i * n + j] -= f * a[col * n + j];
            }
            b[i] -= f * b[col];
        }
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i * n + j] * b[j]).sum();
        b[i] = (b[i] - s) / a[i * n + i];
    }
    Some(())
}

//! Pure numeric kernels behind the tape operations.
//!
//! Everything here is a plain function of slices so the forward and backward
//! rules stay together and testable without a tape. Loops are arranged so the
//! innermost dimension is contiguous.

use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (&xi, yi) in x.iter().zip(y.iter_mut()) {
        *yi += alpha * xi;
    }
}

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            axpy(ap, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// dA[m,k] += dC[m,n] * B^T ; dB[k,n] += A^T * dC
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        for i in 0..m {
            let dcrow = &dc[i * n..(i + 1) * n];
            let darow = &mut da[i * k..(i + 1) * k];
            for p in 0..k {
                darow[p] += dot(dcrow, &b[p * n..(p + 1) * n]);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let dcrow = &dc[i * n..(i + 1) * n];
            for (p, &ap) in arow.iter().enumerate() {
                axpy(ap, dcrow, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// Same-padded 2-D cross-correlation.
///
/// input `[n, cin, h, w]`, kernel `[cout, cin, k, k]` with k odd,
/// optional bias `[cout]`, output `[n, cout, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    cout: usize,
    k: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let r = k / 2;
    let in_img = cin * h * w;
    let out_img = cout * h * w;
    for b in 0..n {
        let inb = &input[b * in_img..(b + 1) * in_img];
        let outb = &mut out[b * out_img..(b + 1) * out_img];
        for oc in 0..cout {
            let kbase = oc * cin * k * k;
            let bias_v = bias.map_or(T::zero(), |bv| bv[oc]);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias_v;
                    for ic in 0..cin {
                        let plane = &inb[ic * h * w..(ic + 1) * h * w];
                        let krow_base = kbase + ic * k * k;
                        for dy in 0..k {
                            let iy = y as isize + dy as isize - r as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            // dx range keeping ix = x + dx - r inside [0, w)
                            let dx0 = r.saturating_sub(x);
                            let dx1 = (w + r - x).min(k);
                            if dx0 >= dx1 {
                                continue;
                            }
                            let irow = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let ix0 = x + dx0 - r;
                            acc += dot(
                                &kernel[krow_base + dy * k + dx0..krow_base + dy * k + dx1],
                                &irow[ix0..ix0 + (dx1 - dx0)],
                            );
                        }
                    }
                    outb[oc * h * w + y * w + x] = acc;
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    cout: usize,
    k: usize,
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let r = k / 2;
    let in_img = cin * h * w;
    let out_img = cout * h * w;
    for b in 0..n {
        let inb = &input[b * in_img..(b + 1) * in_img];
        let doutb = &dout[b * out_img..(b + 1) * out_img];
        for oc in 0..cout {
            let dplane = &doutb[oc * h * w..(oc + 1) * h * w];
            if let Some(dbias) = dbias.as_deref_mut() {
                let mut s = T::zero();
                for &g in dplane {
                    s += g;
                }
                dbias[oc] += s;
            }
            for y in 0..h {
                for x in 0..w {
                    let g = dplane[y * w + x];
                    if g == T::zero() {
                        continue;
                    }
                    for ic in 0..cin {
                        let kbase = (oc * cin + ic) * k * k;
                        for dy in 0..k {
                            let iy = y as isize + dy as isize - r as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dx0 = r.saturating_sub(x);
                            let dx1 = (w + r - x).min(k);
                            if dx0 >= dx1 {
                                continue;
                            }
                            let ix0 = x + dx0 - r;
                            let row0 = iy as usize * w + ix0;
                            let span = dx1 - dx0;
                            if let Some(din) = dinput.as_deref_mut() {
                                let dinb = &mut din[b * in_img..(b + 1) * in_img];
                                axpy(
                                    g,
                                    &kernel[kbase + dy * k + dx0..kbase + dy * k + dx0 + span],
                                    &mut dinb[ic * h * w + row0..ic * h * w + row0 + span],
                                );
                            }
                            if let Some(dk) = dkernel.as_deref_mut() {
                                axpy(
                                    g,
                                    &inb[ic * h * w + row0..ic * h * w + row0 + span],
                                    &mut dk[kbase + dy * k + dx0..kbase + dy * k + dx0 + span],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Iteration geometry for an operation applied along one axis.
///
/// Row-major layout decomposes as `[outer, len, inner]` around `axis`.
pub struct AxisIter {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

pub fn axis_iter(shape: &[usize], axis: usize) -> AxisIter {
    AxisIter {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

/// Visit each 1-D slice along `axis`: calls `f(base, stride)` where the slice
/// elements live at `base + j * stride` for `j in 0..len`.
pub fn for_each_lane(it: &AxisIter, mut f: impl FnMut(usize, usize)) {
    for o in 0..it.outer {
        for i in 0..it.inner {
            f(o * it.len * it.inner + i, it.inner);
        }
    }
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize, out: &mut [T]) {
    let it = axis_iter(shape, axis);
    for_each_lane(&it, |base, stride| {
        let mut m = x[base];
        for j in 1..it.len {
            let v = x[base + j * stride];
            if v > m {
                m = v;
            }
        }
        let mut z = T::zero();
        for j in 0..it.len {
            let e = (x[base + j * stride] - m).exp();
            out[base + j * stride] = e;
            z += e;
        }
        for j in 0..it.len {
            out[base + j * stride] /= z;
        }
    });
}

/// dx = y * (dy - sum(dy * y)) per lane, where y is the softmax output.
pub fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
    dx: &mut [T],
) {
    let it = axis_iter(shape, axis);
    for_each_lane(&it, |base, stride| {
        let mut s = T::zero();
        for j in 0..it.len {
            let idx = base + j * stride;
            s += dy[idx] * y[idx];
        }
        for j in 0..it.len {
            let idx = base + j * stride;
            dx[idx] += y[idx] * (dy[idx] - s);
        }
    });
}

/// L2 normalization along `axis`; lanes with norm <= eps map to zero.
pub fn l2_normalize<T: Scalar>(x: &[T], shape: &[usize], axis: usize, eps: T, out: &mut [T]) {
    let it = axis_iter(shape, axis);
    for_each_lane(&it, |base, stride| {
        let mut ss = T::zero();
        for j in 0..it.len {
            let v = x[base + j * stride];
            ss += v * v;
        }
        let norm = ss.sqrt();
        if norm <= eps {
            for j in 0..it.len {
                out[base + j * stride] = T::zero();
            }
        } else {
            for j in 0..it.len {
                out[base + j * stride] = x[base + j * stride] / norm;
            }
        }
    });
}

/// dx = (dy - y * dot(y, dy)) / norm per lane; zero in the degenerate branch
/// (the same subgradient convention as abs at 0).
pub fn l2_normalize_backward<T: Scalar>(
    x: &[T],
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
    eps: T,
    dx: &mut [T],
) {
    let it = axis_iter(shape, axis);
    for_each_lane(&it, |base, stride| {
        let mut ss = T::zero();
        for j in 0..it.len {
            let v = x[base + j * stride];
            ss += v * v;
        }
        let norm = ss.sqrt();
        if norm <= eps {
            return;
        }
        let mut yd = T::zero();
        for j in 0..it.len {
            let idx = base + j * stride;
            yd += y[idx] * dy[idx];
        }
        for j in 0..it.len {
            let idx = base + j * stride;
            dx[idx] += (dy[idx] - y[idx] * yd) / norm;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x2_by_2x1() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, 1.0];
        let mut c = [0.0; 2];
        matmul(&a, &b, 2, 2, 1, &mut c);
        assert_eq!(c, [2.0, 4.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let mut t = vec![0.0; 6];
        transpose(&x, 2, 3, &mut t);
        let mut back = vec![0.0; 6];
        transpose(&t, 3, 2, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn softmax_lane_sums_to_one() {
        let x = [0.3, -1.0, 2.0, 0.0, 0.0, 0.0];
        let mut y = [0.0; 6];
        softmax(&x, &[2, 3], 1, &mut y);
        for row in y.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

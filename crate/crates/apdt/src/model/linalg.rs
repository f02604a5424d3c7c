//! Row-major matrix-vector kernels shared by the forward and backward passes.

/// out = W x, W stored row-major as rows x cols.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// dx += W^T dy.
pub(crate) fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(dy.len(), rows);
    debug_assert_eq!(dx.len(), cols);
    for (r, &g) in dy.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        for (d, &wv) in dx.iter_mut().zip(row) {
            *d += wv * g;
        }
    }
}

/// dW += dy x^T.
pub(crate) fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), rows * cols);
    debug_assert_eq!(dy.len(), rows);
    debug_assert_eq!(x.len(), cols);
    for (r, &g) in dy.iter().enumerate() {
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, &xv) in row.iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

pub(crate) fn add_acc(acc: &mut [f64], x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax over the whole slice.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_against_hand_computation() {
        // [[1, 2, 3], [4, 5, 6]] * [1, 1, 2]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, 1.0, 2.0];
        let mut out = [0.0; 2];
        matvec(&w, 2, 3, &x, &mut out);
        assert_eq!(out, [9.0, 21.0]);

        let mut dx = [0.0; 3];
        matvec_t_acc(&w, 2, 3, &[1.0, 1.0], &mut dx);
        assert_eq!(dx, [5.0, 7.0, 9.0]);

        let mut dw = [0.0; 6];
        outer_acc(&mut dw, 2, 3, &[1.0, 2.0], &[3.0, 4.0, 5.0]);
        assert_eq!(dw, [3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let mut v = vec![1.0, 3.0, 2.0, 3.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[1] > v[2] && v[2] > v[0]);
        assert!((v[1] - v[3]).abs() < 1e-15);

        // Shift invariance.
        let mut a = vec![700.0, 701.0, 702.0];
        softmax_in_place(&mut a);
        let mut b = vec![0.0, 1.0, 2.0];
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

//! Dense kernels: GEMM dispatch, convolution via im2col, affine layers.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point element type the network can run in.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the stated
    /// shapes; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `c (m x n) = alpha * op(a) * op(b) + beta * c`.
///
/// `a` holds `m x k` values (`k x m` when `ta`), `b` holds `k x n`
/// (`n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe exactly those extents.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, params: &'a mut [T]) -> &'a mut [T] {
        &mut params[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive slots while a network is laid out.
#[derive(Debug, Default)]
pub struct Allocator {
    pub total: usize,
}

impl Allocator {
    pub fn take(&mut self, len: usize) -> Slot {
        let s = Slot {
            offset: self.total,
            len,
        };
        self.total += len;
        s
    }
}

/// Square-kernel 2-d convolution over NHWC activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(kernel * kernel * cin) x cout`, row-major.
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv {
    pub fn new(alloc: &mut Allocator, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: alloc.take(kernel * kernel * cin * cout),
            bias: alloc.take(cout),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Returns the output activations and the im2col matrix.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T], n: usize, size: usize) -> (Vec<T>, Vec<T>) {
        let out = self.out_size(size);
        let rows = n * out * out;
        let kk = self.fan_in();
        let col = self.im2col(x, n, size, out);
        let mut y = vec![T::zero(); rows * self.cout];
        gemm(false, false, rows, self.cout, kk, T::one(), &col, self.weight.of(params), T::zero(), &mut y);
        let bias = self.bias.of(params);
        for row in y.chunks_exact_mut(self.cout) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        (y, col)
    }

    fn im2col<T: Scalar>(&self, x: &[T], n: usize, size: usize, out: usize) -> Vec<T> {
        let (k, cin) = (self.kernel, self.cin);
        let kk = self.fan_in();
        let mut col = vec![T::zero(); n * out * out * kk];
        for b in 0..n {
            let img = &x[b * size * size * cin..(b + 1) * size * size * cin];
            for oy in 0..out {
                for ox in 0..out {
                    let row = &mut col[((b * out + oy) * out + ox) * kk..][..kk];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= size as isize {
                                continue;
                            }
                            let src = (iy as usize * size + ix as usize) * cin;
                            let dst = (ky * k + kx) * cin;
                            row[dst..dst + cin].copy_from_slice(&img[src..src + cin]);
                        }
                    }
                }
            }
        }
        col
    }

    /// Accumulates weight/bias gradients into `grads`; returns the input
    /// gradient when `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        col: &[T],
        dy: &[T],
        n: usize,
        size: usize,
        need_input: bool,
    ) -> Option<Vec<T>> {
        let out = self.out_size(size);
        let rows = n * out * out;
        let kk = self.fan_in();
        gemm(true, false, kk, self.cout, rows, T::one(), col, dy, T::one(), self.weight.of_mut(grads));
        let db = self.bias.of_mut(grads);
        for row in dy.chunks_exact(self.cout) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !need_input {
            return None;
        }
        let mut dcol = vec![T::zero(); rows * kk];
        gemm(false, true, rows, kk, self.cout, T::one(), dy, self.weight.of(params), T::zero(), &mut dcol);
        let (k, cin) = (self.kernel, self.cin);
        let mut dx = vec![T::zero(); n * size * size * cin];
        for b in 0..n {
            let img = &mut dx[b * size * size * cin..(b + 1) * size * size * cin];
            for oy in 0..out {
                for ox in 0..out {
                    let row = &dcol[((b * out + oy) * out + ox) * kk..][..kk];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= size as isize {
                                continue;
                            }
                            let dst = (iy as usize * size + ix as usize) * cin;
                            let src = (ky * k + kx) * cin;
                            for c in 0..cin {
                                img[dst + c] += row[src + c];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Affine map `y = x W + b` over row vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(alloc: &mut Allocator, fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: alloc.take(fan_in * fan_out),
            bias: alloc.take(fan_out),
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T], n: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * self.fan_out];
        gemm(false, false, n, self.fan_out, self.fan_in, T::one(), x, self.weight.of(params), T::zero(), &mut y);
        let bias = self.bias.of(params);
        for row in y.chunks_exact_mut(self.fan_out) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    pub fn backward<T: Scalar>(&self, params: &[T], grads: &mut [T], x: &[T], dy: &[T], n: usize) -> Vec<T> {
        gemm(true, false, self.fan_in, self.fan_out, n, T::one(), x, dy, T::one(), self.weight.of_mut(grads));
        let db = self.bias.of_mut(grads);
        for row in dy.chunks_exact(self.fan_out) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![T::zero(); n * self.fan_in];
        gemm(false, true, n, self.fan_in, self.fan_out, T::one(), dy, self.weight.of(params), T::zero(), &mut dx);
        dx
    }
}

#[inline]
pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
#[inline]
pub fn relu_backward<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

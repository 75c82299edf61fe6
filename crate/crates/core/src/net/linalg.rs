//! Strided GEMM over `f32`/`f64` plus the handful of row-wise kernels the
//! transformer needs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the network can run in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const NAME: &'static str;

    /// Raw strided GEMM `C = alpha * A B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices and `c` must not
    /// alias `a` or `b`.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

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

impl Real for f64 {
    const NAME: &'static str = "f64";

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

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major contiguous matrix.
    pub fn rm(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Sub-matrix of a row-major buffer: `rows × cols` starting at column `col0`
    /// of a matrix with row stride `ld`.
    pub fn cols_of(data: &'a [T], rows: usize, ld: usize, col0: usize, cols: usize) -> Self {
        Self {
            data: &data[col0..],
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Mutable strided matrix view.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn rm(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, ld: usize, col0: usize, cols: usize) -> Self {
        Self {
            data: &mut data[col0..],
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }
}

/// `c = a · b + beta · c`.
pub fn gemm<T: Real>(a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above; `c` is a unique
    // borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out[rows × n] = x[rows × k] · w[k × n] + bias`.
pub fn linear<T: Real>(x: &[T], rows: usize, k: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(View::rm(x, rows, k), View::rm(w, k, n), T::one(), ViewMut::rm(out, rows, n));
}

/// Backward of [`linear`]: accumulates `dw += xᵀ dy`, `db += Σ dy` and
/// returns `dx = dy wᵀ` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    k: usize,
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Vec<T> {
    let n = db.len();
    gemm(View::rm(x, rows, k).t(), View::rm(dy, rows, n), T::one(), ViewMut::rm(dw, k, n));
    for row in dy.chunks_exact(n) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * k];
    gemm(View::rm(dy, rows, n), View::rm(w, k, n).t(), T::zero(), ViewMut::rm(&mut dx, rows, k));
    dx
}

pub const LN_EPS: f64 = 1e-6;

/// Parameter-free layer norm per row. Returns `(xhat, rstd)`.
pub fn layer_norm<T: Real>(x: &[T], width: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(LN_EPS);
    let inv = T::one() / T::from_usize(width).expect("width");
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / width);
    for (row, out) in x.chunks_exact(width).zip(xhat.chunks_exact_mut(width)) {
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// `dx = rstd · (dxhat − mean(dxhat) − xhat · mean(dxhat ⊙ xhat))`, accumulated into `dx`.
pub fn layer_norm_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: &[T], width: usize, dx: &mut [T]) {
    let inv = T::one() / T::from_usize(width).expect("width");
    for (((g, xh), r), out) in dxhat
        .chunks_exact(width)
        .zip(xhat.chunks_exact(width))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(width))
    {
        let mean_g = g.iter().copied().sum::<T>() * inv;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o += *r * (gi - mean_g - xi * mean_gx);
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; several times faster than the libm call.
fn fast_tanh<T: Real>(z: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + fast_tanh(inner))
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = fast_tanh(inner);
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * d_inner
}

/// In-place row softmax.
pub fn softmax_rows<T: Real>(x: &mut [T], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

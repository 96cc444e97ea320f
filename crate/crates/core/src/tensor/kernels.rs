//! Strided matrix products and im2col helpers.

/// A strided, row/column addressed view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `m x n` and row stride `ldc`.
pub(crate) fn gemm(a: Mat, b: Mat, c: &mut [f64], ldc: usize, beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    if m == 0 || n == 0 {
        return;
    }
    assert!(m.saturating_sub(1) * ldc + n <= c.len(), "gemm output bounds");
    if k == 0 {
        for i in 0..m {
            c[i * ldc..i * ldc + n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    assert!(a.last_index() < a.data.len() && b.last_index() < b.data.len(), "gemm input bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Unrolls `channels x len` input into `(channels * kw) x l_out` columns.
pub(crate) fn im2col(
    x: &[f64],
    channels: usize,
    len: usize,
    kw: usize,
    stride: usize,
    l_out: usize,
    col: &mut [f64],
) {
    for c in 0..channels {
        let xr = &x[c * len..(c + 1) * len];
        for t in 0..kw {
            let row = &mut col[(c * kw + t) * l_out..(c * kw + t + 1) * l_out];
            for (o, v) in row.iter_mut().enumerate() {
                *v = xr[o * stride + t];
            }
        }
    }
}

/// Scatter-adds columns back into the `channels x len` layout.
pub(crate) fn col2im(
    col: &[f64],
    channels: usize,
    len: usize,
    kw: usize,
    stride: usize,
    l_out: usize,
    dx: &mut [f64],
) {
    for c in 0..channels {
        let dr = &mut dx[c * len..(c + 1) * len];
        for t in 0..kw {
            let row = &col[(c * kw + t) * l_out..(c * kw + t + 1) * l_out];
            for (o, v) in row.iter().enumerate() {
                dr[o * stride + t] += v;
            }
        }
    }
}

/// `exp(x) - 1` for `x <= 0`, accurate to a few ulp of `exp(x)`.
///
/// Branch-free so the ELU loop vectorizes; inputs below -700 saturate to -1.
#[inline(always)]
pub(crate) fn exp_m1_nonpos(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5 * 2^52 rounds to the nearest integer and leaves it in the
    // low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = if x > -700.0 { x } else { -700.0 };
    let t = x * LOG2E + SHIFTER;
    let k = t - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of exp on |r| <= ln2 / 2, truncation error below 1e-17.
    let mut p = 1.0 / 6_227_020_800.0;
    for d in [
        479_001_600.0,
        39_916_800.0,
        3_628_800.0,
        362_880.0,
        40_320.0,
        5_040.0,
        720.0,
        120.0,
        24.0,
        6.0,
        2.0,
        1.0,
        1.0,
    ] {
        p = p * r + 1.0 / d;
    }
    let scale = f64::from_bits(
        t.to_bits()
            .wrapping_sub(SHIFTER.to_bits())
            .wrapping_add(1023)
            << 52,
    );
    p * scale - 1.0
}

#[inline(always)]
fn elu_slice(x: &mut [f64], alpha: f64) {
    for v in x.iter_mut() {
        let neg = alpha * exp_m1_nonpos(if *v < 0.0 { *v } else { 0.0 });
        if *v <= 0.0 {
            *v = neg;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn elu_slice_avx2(x: &mut [f64], alpha: f64) {
    elu_slice(x, alpha)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
unsafe fn elu_slice_avx512(x: &mut [f64], alpha: f64) {
    elu_slice(x, alpha)
}

/// In place: `x` where positive, `alpha * (exp(x) - 1)` elsewhere.
pub(crate) fn elu_in_place(x: &mut [f64], alpha: f64) {
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("avx512dq") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { elu_slice_avx512(x, alpha) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { elu_slice_avx2(x, alpha) };
        return;
    }
    elu_slice(x, alpha);
}

//! Dense row-major kernels shared by the forward and backward passes.

use num_traits::Float;

/// Floating-point element type of the encoder (`f32` for training, `f64`
/// for gradient checks).
pub trait Scalar:
    Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn of(x: f64) -> Self;
    fn wide(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// `out[n×m] = a[n×k] · b[k×m] (+ bias[m])`.
pub fn matmul<F: Scalar>(
    a: &[F],
    b: &[F],
    bias: Option<&[F]>,
    n: usize,
    k: usize,
    m: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        if let Some(bias) = bias {
            row.copy_from_slice(bias);
        }
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out[n×m] = a[n×k] · b[m×k]ᵀ`.
pub fn matmul_bt<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = dot(arow, brow);
        }
    }
    out
}

/// `acc[k×m] += a[n×k]ᵀ · b[n×m]`.
pub fn add_matmul_at<F: Scalar>(acc: &mut [F], a: &[F], b: &[F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let arow = &mut acc[p * m..(p + 1) * m];
            for (o, &bv) in arow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// `acc[m] += Σ_rows x[n×m]`.
pub fn add_column_sums<F: Scalar>(acc: &mut [F], x: &[F], m: usize) {
    for row in x.chunks(m) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
}

pub fn add_assign<F: Scalar>(acc: &mut [F], x: &[F]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let inner = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let x2 = x * x;
    let inner = c * (x + F::of(0.044715) * x2 * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::of(3.0 * 0.044715) * x2);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * dinner
}

/// In-place row softmax.
pub fn softmax_rows<F: Scalar>(x: &mut [F], m: usize) {
    for row in x.chunks_mut(m) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over rows of width `m`. Returns `(out, xhat, rstd)`.
pub fn layer_norm<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    m: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = x.len() / m;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); n];
    let inv_m = F::one() / F::of(m as f64);
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let mean = row.iter().copied().sum::<F>() * inv_m;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
        let r = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..m {
            let h = (row[j] - mean) * r;
            xhat[i * m + j] = h;
            out[i * m + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, rstd)
}

/// Backward of [`layer_norm`]: accumulates gain/bias grads, returns dx.
pub fn layer_norm_backward<F: Scalar>(
    dout: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    m: usize,
) -> Vec<F> {
    let n = rstd.len();
    let mut dx = vec![F::zero(); dout.len()];
    let inv_m = F::one() / F::of(m as f64);
    let mut dxhat = vec![F::zero(); m];
    for i in 0..n {
        let d = &dout[i * m..(i + 1) * m];
        let h = &xhat[i * m..(i + 1) * m];
        let mut sum_d = F::zero();
        let mut sum_dh = F::zero();
        for j in 0..m {
            dgain[j] = dgain[j] + d[j] * h[j];
            dbias[j] = dbias[j] + d[j];
            dxhat[j] = d[j] * gain[j];
            sum_d = sum_d + dxhat[j];
            sum_dh = sum_dh + dxhat[j] * h[j];
        }
        for j in 0..m {
            dx[i * m + j] = rstd[i] * (dxhat[j] - inv_m * sum_d - h[j] * inv_m * sum_dh);
        }
    }
    dx
}

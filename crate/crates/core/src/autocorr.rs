//! Circular autocorrelation via the Wiener–Khinchin route, the stability score
//! built on it, and the plain lagged autocorrelation used for decomposition
//! diagnostics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Autocorrelation values indexed by lag.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocorrSeries<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> AutocorrSeries<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lag(&self, tau: usize) -> T {
        self.values[tau]
    }
}

fn check_finite<T: Scalar>(x: &[T]) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite input at index {i}")));
    }
    Ok(())
}

/// `R[τ] = Σ_t x[t]·x[(t+τ) mod L]`, computed as the inverse FFT of the power
/// spectrum `F(x)·conj(F(x))`.
///
/// Forward transform unnormalized, inverse scaled by `1/L`.
pub fn circular_autocorrelation<T: Scalar>(x: &[T]) -> Result<AutocorrSeries<T>> {
    if x.is_empty() {
        return Err(Error::Domain("autocorrelation of an empty series".into()));
    }
    check_finite(x)?;
    let n = x.len();
    let mut planner = FftPlanner::<T>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);

    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    forward.process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), T::zero());
    }
    inverse.process(&mut buf);

    let scale = T::one() / T::of_usize(n);
    let energy: T = x.iter().map(|&v| v * v).sum();
    // Rounding in the imaginary part scales with the series energy.
    let tol = T::of(1e-8).max(T::epsilon() * T::of_usize(64 * n));
    let mut values = Vec::with_capacity(n);
    for (tau, c) in buf.iter().enumerate() {
        let re = c.re * scale;
        let im = c.im * scale;
        if im.abs() >= tol * (T::one() + re.abs().max(energy)) {
            return Err(Error::Numeric(format!(
                "imaginary residue {im} at lag {tau} exceeds tolerance"
            )));
        }
        values.push(re);
    }
    Ok(AutocorrSeries { values })
}

/// Stability score: mean over all lags of the circular autocorrelation divided
/// by the series' ℓ2 norm. Zero-norm series score 0.0.
pub fn stability_score<T: Scalar>(x: &[T]) -> Result<T> {
    if x.is_empty() {
        return Err(Error::Domain("stability score of an empty series".into()));
    }
    check_finite(x)?;
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm < T::of(1e-12) {
        return Ok(T::zero());
    }
    let r = circular_autocorrelation(x)?;
    let mean = r.values.iter().copied().sum::<T>() / T::of_usize(x.len());
    Ok(mean / norm)
}

/// Non-circular `R[τ] = Σ_{t=0}^{L-1-τ} x[t]·x[t+τ]` for `τ = 0..=max_lag`,
/// normalized so `R[0] = 1`. A zero-energy series gives all zeros.
pub fn lagged_autocorrelation<T: Scalar>(x: &[T], max_lag: usize) -> Result<Vec<T>> {
    if max_lag >= x.len() {
        return Err(Error::Domain(format!(
            "max lag {max_lag} must be below the series length {}",
            x.len()
        )));
    }
    check_finite(x)?;
    let raw: Vec<T> = (0..=max_lag)
        .map(|tau| {
            x[..x.len() - tau]
                .iter()
                .zip(&x[tau..])
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect();
    let r0 = raw[0];
    if r0 == T::zero() {
        return Ok(vec![T::zero(); max_lag + 1]);
    }
    Ok(raw.into_iter().map(|v| v / r0).collect())
}

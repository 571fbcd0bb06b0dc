//! Scalar-generic vector and series math shared by the embedder, the
//! retrieval ranker and the process-calculation tools.

use num_traits::Float;

/// Dot product over the common prefix of two slices.
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn l2_norm<F: Float>(values: &[F]) -> F {
    dot(values, values).sqrt()
}

/// Scales `values` to unit length in place. Returns `false` (leaving the
/// input untouched) when the vector has zero or non-finite norm.
pub fn normalize_in_place<F: Float>(values: &mut [F]) -> bool {
    let norm = l2_norm(values);
    if norm == F::zero() || !norm.is_finite() {
        return false;
    }
    for v in values.iter_mut() {
        *v = *v / norm;
    }
    true
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`; zero when either side has zero norm.
pub fn cosine<F: Float>(a: &[F], b: &[F]) -> F {
    let denom = l2_norm(a) * l2_norm(b);
    if denom == F::zero() {
        return F::zero();
    }
    dot(a, b) / denom
}

pub fn mean<F: Float>(values: &[F]) -> Option<F> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(F::zero(), |acc, &v| acc + v);
    Some(sum / F::from(values.len())?)
}

/// Population standard deviation.
pub fn std_dev<F: Float>(values: &[F]) -> Option<F> {
    let m = mean(values)?;
    let var = values.iter().fold(F::zero(), |acc, &v| acc + (v - m) * (v - m)) / F::from(values.len())?;
    Some(var.sqrt())
}

pub fn min_max<F: Float>(values: &[F]) -> Option<(F, F)> {
    let first = *values.first()?;
    Some(
        values
            .iter()
            .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    )
}

/// Least-squares slope of `series` against its indices `0..n`.
/// A single point has slope zero.
pub fn linear_trend<F: Float>(series: &[F]) -> Option<F> {
    let n = series.len();
    if n == 0 {
        return None;
    }
    if n == 1 {
        return Some(F::zero());
    }
    let xs: Vec<F> = (0..n).map(|i| F::from(i).unwrap()).collect();
    let x_mean = mean(&xs)?;
    let y_mean = mean(series)?;
    let mut num = F::zero();
    let mut den = F::zero();
    for (&x, &y) in xs.iter().zip(series) {
        num = num + (x - x_mean) * (y - y_mean);
        den = den + (x - x_mean) * (x - x_mean);
    }
    Some(num / den)
}

/// Absolute change and percentage reduction between an old and a new
/// duration. A positive percentage means the new value is smaller.
pub fn setup_time_delta<F: Float>(old: F, new: F) -> Option<(F, F)> {
    if old == F::zero() {
        return None;
    }
    let hundred = F::from(100.0)?;
    Some(((old - new).abs(), (old - new) / old * hundred))
}

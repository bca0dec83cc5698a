pub mod dot;
pub mod naive;

/// Elementwise relative closeness: |a - b| <= rtol * max(1, |a|, |b|).
pub fn max_rel_diff(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f32::max)
}

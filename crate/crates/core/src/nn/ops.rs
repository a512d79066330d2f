//! Pointwise nonlinearities and channel bookkeeping. Backward functions
//! take the upstream gradient and whatever forward quantity makes the local
//! derivative cheapest.

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Uses the subgradient 0 at x = 0.
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative expressed through the output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: f64, dy: f64) -> f64 {
    dy * y * (1.0 - y)
}

/// Derivative of exp expressed through its output.
pub fn exp_backward(y: f64, dy: f64) -> f64 {
    dy * y
}

/// Stacks `[C_a, L]` and `[C_b, L]` into `[C_a + C_b, L]`.
pub fn concat_channels(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Splits the gradient of a concatenation whose first part had `len_a`
/// values.
pub fn concat_backward(dy: &[f64], len_a: usize) -> (Vec<f64>, Vec<f64>) {
    (dy[..len_a].to_vec(), dy[len_a..].to_vec())
}

/// Channels `[from, to)` of a `[C, L]` array.
pub fn slice_channels(x: &[f64], len: usize, from: usize, to: usize) -> Vec<f64> {
    x[from * len..to * len].to_vec()
}

/// Scatters the gradient of a channel slice back into a zeroed `[C, L]`.
pub fn slice_backward(dy: &[f64], channels: usize, len: usize, from: usize) -> Vec<f64> {
    let mut dx = vec![0.0; channels * len];
    dx[from * len..from * len + dy.len()].copy_from_slice(dy);
    dx
}

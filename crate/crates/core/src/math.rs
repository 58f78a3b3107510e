//! Scalar helpers shared across modules.

/// Logistic function `1 / (1 + e^{-z})`, evaluated without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` in softplus form: `-log(1 + e^{-z})`.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Derivative of the logistic function, `σ(z)σ(-z)`.
pub fn sigmoid_derivative(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

/// Number of free entries of a symmetric d×d matrix, the support bound of an
/// optimal design.
pub fn support_bound(d: usize) -> usize {
    d * (d + 1) / 2
}

//! Feedback-control parameterization: a Gaussian RBF dictionary for the value
//! function and the induced linear-in-coefficients control family.
//!
//! Each dictionary entry is `phi_m(x) = exp(-(x - c_m)^2 / (2 r_m^2))`; the
//! control basis is its negated gradient `psi_m(x) = -phi_m'(x)`, so a control
//! `u_theta(x) = sum_m theta_m psi_m(x)` is the (negated) gradient of the
//! dictionary expansion `sum_m theta_m phi_m(x)`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("centers ({centers}) and widths ({widths}) must have equal length")]
    LengthMismatch { centers: usize, widths: usize },
    #[error("width at index {index} must be positive, got {value}")]
    NonPositiveWidth { index: usize, value: f64 },
    #[error("dictionary must contain at least one basis function")]
    Empty,
    #[error("theta has length {got}, dictionary has {expected} entries")]
    ThetaLengthMismatch { got: usize, expected: usize },
    #[error("theta entry {index} is not finite")]
    NonFiniteTheta { index: usize },
}

/// Gaussian radial basis dictionary: centers `c_m`, widths `r_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfDictionary {
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl RbfDictionary {
    pub fn new(centers: Vec<f64>, widths: Vec<f64>) -> Result<Self, BasisError> {
        if centers.len() != widths.len() {
            return Err(BasisError::LengthMismatch {
                centers: centers.len(),
                widths: widths.len(),
            });
        }
        if centers.is_empty() {
            return Err(BasisError::Empty);
        }
        for (index, &value) in widths.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(BasisError::NonPositiveWidth { index, value });
            }
        }
        Ok(Self { centers, widths })
    }

    /// Uniformly spaced centers `c_m = start + step * m` for `m = 1..=count`,
    /// all with the same width.
    pub fn uniform(start: f64, step: f64, count: usize, width: f64) -> Result<Self, BasisError> {
        let centers = (1..=count).map(|m| start + step * m as f64).collect();
        let widths = vec![width; count];
        Self::new(centers, widths)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// Kernel value `phi_m(x) = exp(-(x - c_m)^2 / (2 r_m^2))`, in (0, 1].
    pub fn rbf_value(&self, m: usize, x: f64) -> f64 {
        let z = (x - self.centers[m]) / self.widths[m];
        (-0.5 * z * z).exp()
    }

    /// Control basis `psi_m(x) = -phi_m'(x) = ((x - c_m) / r_m^2) phi_m(x)`.
    pub fn basis_psi(&self, m: usize, x: f64) -> f64 {
        let r = self.widths[m];
        (x - self.centers[m]) / (r * r) * self.rbf_value(m, x)
    }

    /// Fills `out` with `psi_m(x)` for every m. Hot-loop variant of
    /// [`basis_psi`](Self::basis_psi) that avoids re-allocating.
    pub fn psi_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        for (m, slot) in out.iter_mut().enumerate() {
            *slot = self.basis_psi(m, x);
        }
    }

    /// Residual between `psi_m` and the central finite difference of
    /// `-phi_m`: `|psi_m(x) + (phi_m(x+h) - phi_m(x-h)) / (2h)|`. Second
    /// order in `h` for exact gradients.
    pub fn gradient_check(&self, m: usize, x: f64, h: f64) -> f64 {
        let fd = (self.rbf_value(m, x + h) - self.rbf_value(m, x - h)) / (2.0 * h);
        (self.basis_psi(m, x) + fd).abs()
    }
}

/// A control `u_theta(x) = sum_m theta_m psi_m(x)`; linear in `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlModel {
    dictionary: RbfDictionary,
    theta: Vec<f64>,
}

impl ControlModel {
    pub fn new(dictionary: RbfDictionary, theta: Vec<f64>) -> Result<Self, BasisError> {
        if theta.len() != dictionary.len() {
            return Err(BasisError::ThetaLengthMismatch {
                got: theta.len(),
                expected: dictionary.len(),
            });
        }
        if let Some(index) = theta.iter().position(|v| !v.is_finite()) {
            return Err(BasisError::NonFiniteTheta { index });
        }
        Ok(Self { dictionary, theta })
    }

    /// The zero control (all coefficients zero), i.e. the base dynamics.
    pub fn zero(dictionary: RbfDictionary) -> Self {
        let theta = vec![0.0; dictionary.len()];
        Self { dictionary, theta }
    }

    pub fn dictionary(&self) -> &RbfDictionary {
        &self.dictionary
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Evaluates `u_theta(x)`.
    pub fn value(&self, x: f64) -> f64 {
        self.theta
            .iter()
            .enumerate()
            .map(|(m, &coef)| coef * self.dictionary.basis_psi(m, x))
            .sum()
    }
}

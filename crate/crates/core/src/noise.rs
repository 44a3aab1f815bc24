//! LiDAR point and image pixel measurement covariances.

use nalgebra::{Matrix3, Matrix3x2, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, tangent_basis, BearingVector};

pub type Matrix5 = SMatrix<f64, 5, 5>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageNoiseParams {
    /// Edge pixel standard deviation (pixels).
    pub sigma_i: f64,
}

impl Default for ImageNoiseParams {
    fn default() -> Self {
        Self { sigma_i: 1.5 }
    }
}

impl ImageNoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_i > 0.0 && self.sigma_i.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter("sigma_i must be > 0".into()))
        }
    }

    pub fn covariance(&self) -> nalgebra::Matrix2<f64> {
        nalgebra::Matrix2::identity() * (self.sigma_i * self.sigma_i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarNoiseParams {
    /// Ranging standard deviation (meters).
    pub sigma_d: f64,
    /// Bearing standard deviation per tangent axis (radians).
    pub sigma_omega: f64,
}

impl Default for LidarNoiseParams {
    fn default() -> Self {
        Self {
            sigma_d: 0.02,
            sigma_omega: 0.0015,
        }
    }
}

impl LidarNoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_d > 0.0 && self.sigma_omega > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "sigma_d and sigma_omega must be > 0".into(),
            ))
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sigma_d: self.sigma_d * c,
            sigma_omega: self.sigma_omega * c,
        }
    }
}

/// Covariance of a LiDAR point `d·ω` under ranging and bearing noise:
/// `A diag(σ_d², σ_ω², σ_ω²) Aᵀ` with `A = [ω, −d⌊ω×⌋N(ω)]`.
pub fn lidar_point_cov(bearing: &BearingVector, depth: f64, params: &LidarNoiseParams) -> Matrix3<f64> {
    let w = bearing.omega();
    let transverse: Matrix3x2<f64> = -(skew(w) * tangent_basis(bearing)) * depth;
    let radial = w * w.transpose() * (params.sigma_d * params.sigma_d);
    let cov = radial + transverse * transverse.transpose() * (params.sigma_omega * params.sigma_omega);
    (cov + cov.transpose()) * 0.5
}

/// Block-diagonal 5×5 covariance of `[ᴸw; ᴵw]` for one correspondence.
pub fn correspondence_noise_cov(
    lidar_point: &Vector3<f64>,
    img: &ImageNoiseParams,
    lid: &LidarNoiseParams,
) -> Matrix5 {
    let depth = lidar_point.norm();
    let bearing = BearingVector::new_normalize(*lidar_point).expect("lidar point must be non-zero");
    let mut cov = Matrix5::zeros();
    cov.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&lidar_point_cov(&bearing, depth, lid));
    cov.fixed_view_mut::<2, 2>(3, 3).copy_from(&img.covariance());
    cov
}

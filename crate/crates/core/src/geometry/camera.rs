use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

/// Pinhole intrinsics with zero skew. Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Multiplies all four intrinsic parameters by `factor` (pyramid levels).
pub fn scale_camera(intr: &Intrinsics, factor: f64) -> Intrinsics {
    Intrinsics {
        fx: intr.fx * factor,
        fy: intr.fy * factor,
        cx: intr.cx * factor,
        cy: intr.cy * factor,
    }
}

/// World-to-camera rigid transform: `X_cam = R · X_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::Config(format!(
                "rotation is not orthonormal (|RᵀR − I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera that sits at `center` and looks at `target`, with image rows
    /// increasing along `down`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let z = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera center coincides with its target".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("viewing direction parallel to the down vector".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rotation, -(rotation * center))
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, extrinsics: Extrinsics) -> Self {
        Self {
            intrinsics,
            extrinsics,
        }
    }

    pub fn scaled(&self, factor: f64) -> Camera {
        Camera {
            intrinsics: scale_camera(&self.intrinsics, factor),
            extrinsics: self.extrinsics,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.center()
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.rotation * x + self.extrinsics.translation
    }

    /// Pixel coordinates and camera-frame depth of a world point.
    pub fn project(&self, x: &Vector3<f64>) -> (f64, f64, f64) {
        let xc = self.world_to_camera(x);
        let k = &self.intrinsics;
        (k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy, xc.z)
    }

    /// World point seen at pixel `(u, v)` with camera-frame depth `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let xc = Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
        self.extrinsics.rotation.transpose() * (xc - self.extrinsics.translation)
    }

    /// Rigid transform taking this camera's frame to `other`'s frame.
    pub fn relative_to(&self, other: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
        let r = other.extrinsics.rotation * self.extrinsics.rotation.transpose();
        let t = other.extrinsics.translation - r * self.extrinsics.translation;
        (r, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        let ext = Extrinsics::look_at(
            Vector3::new(0.3, -0.1, -0.2),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        Camera::new(Intrinsics::new(80.0, 82.0, 39.5, 31.0).unwrap(), ext)
    }

    #[test]
    fn round_trip_is_identity() {
        let c = cam();
        for &(u, v, d) in &[(0.0, 0.0, 1.0), (12.25, 40.5, 2.7), (79.0, 63.0, 9.0)] {
            let x = c.back_project(u, v, d);
            let (u2, v2, d2) = c.project(&x);
            assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9 && (d - d2).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Extrinsics::new(m, Vector3::zeros()).is_err());
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn scaled_projection_is_scaled_pixel() {
        let c = cam();
        let x = Vector3::new(0.2, 0.1, 2.5);
        let (u, v, _) = c.project(&x);
        let (us, vs, _) = c.scaled(0.25).project(&x);
        assert!((us - 0.25 * u).abs() < 1e-12 && (vs - 0.25 * v).abs() < 1e-12);
        assert_eq!(scale_camera(&c.intrinsics, 1.0), c.intrinsics);
    }

    #[test]
    fn look_at_centers_target() {
        let c = cam();
        let (u, v, d) = c.project(&Vector3::new(0.0, 0.0, 3.0));
        assert!((u - 39.5).abs() < 1e-9 && (v - 31.0).abs() < 1e-9 && d > 0.0);
    }
}

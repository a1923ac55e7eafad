//! Rigid transforms between named frames and least-squares registration.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{angles_to_matrix, matrix_to_angles, FrameId, Pose6Dof};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rotation plus translation (cm) taking points from `source` to `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigidTransformFile", into = "RigidTransformFile")]
pub struct RigidTransform {
    source: FrameId,
    target: FrameId,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// On-disk form: rotation stored row-major.
#[derive(Serialize, Deserialize)]
struct RigidTransformFile {
    source: FrameId,
    target: FrameId,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransform> for RigidTransformFile {
    fn from(t: RigidTransform) -> Self {
        let r = &t.rotation;
        RigidTransformFile {
            source: t.source,
            target: t.target,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: t.translation.into(),
        }
    }
}

impl TryFrom<RigidTransformFile> for RigidTransform {
    type Error = Error;
    fn try_from(f: RigidTransformFile) -> Result<Self> {
        let rows = f.rotation;
        let rotation = Matrix3::from_fn(|i, j| rows[i][j]);
        RigidTransform::new(f.source, f.target, rotation, Vector3::from(f.translation))
    }
}

impl RigidTransform {
    pub fn new(
        source: FrameId,
        target: FrameId,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if rotation
            .iter()
            .chain(translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("non-finite transform"));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if ortho_err > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {ortho_err:e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid("rotation determinant is not +1"));
        }
        Ok(RigidTransform {
            source,
            target,
            rotation,
            translation,
        })
    }

    pub fn identity(source: FrameId, target: FrameId) -> Self {
        RigidTransform {
            source,
            target,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform from (azimuth, elevation, roll) degrees and a translation.
    pub fn from_angles(
        source: FrameId,
        target: FrameId,
        orientation_deg: [f64; 3],
        translation_cm: [f64; 3],
    ) -> Self {
        RigidTransform {
            source,
            target,
            rotation: angles_to_matrix(orientation_deg),
            translation: Vector3::from(translation_cm),
        }
    }

    pub fn source(&self) -> FrameId {
        self.source
    }

    pub fn target(&self) -> FrameId {
        self.target
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_rotation(&self, r: &Matrix3<f64>) -> Matrix3<f64> {
        self.rotation * r
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            source: self.target,
            target: self.source,
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `other ∘ self`: first `self`, then `other`.
    pub fn then(&self, other: &RigidTransform) -> Result<RigidTransform> {
        if other.source != self.target {
            return Err(Error::FrameMismatch {
                expected: self.target.to_string(),
                found: other.source.to_string(),
            });
        }
        Ok(RigidTransform {
            source: self.source,
            target: other.target,
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        })
    }

    /// Angle of the relative rotation between two transforms, radians.
    pub fn rotation_error(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        // acos loses precision near 0; use the skew part instead.
        let skew = Vector3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        );
        (skew.norm() / 2.0).atan2(c)
    }
}

/// Maps a pose expressed in `t.source()` into `t.target()`.
///
/// Position: `R·p + t`. Orientation: the rotation composition `R · R(θ)`
/// converted back to angles.
pub fn apply_transform(
    t: &RigidTransform,
    pose: &Pose6Dof,
    pose_frame: FrameId,
) -> Result<Pose6Dof> {
    if pose_frame != t.source {
        return Err(Error::FrameMismatch {
            expected: t.source.to_string(),
            found: pose_frame.to_string(),
        });
    }
    let p = t.apply_point(&pose.position_vector());
    let r = t.apply_rotation(&pose.rotation());
    Pose6Dof::new(p.into(), matrix_to_angles(&r))
}

/// Least-squares rigid registration (SVD with reflection correction):
/// minimizes Σ‖R·sᵢ + t − dᵢ‖².
pub fn estimate_rigid(
    source: FrameId,
    target: FrameId,
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            left: src.len(),
            right: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;

    let mut spread = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let s0 = s - cs;
        spread += s0 * s0.transpose();
        cross += (d - cd) * s0.transpose();
    }
    // Non-collinearity: the source cloud must span at least a plane.
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate(
            "correspondences are collinear or coincident".into(),
        ));
    }

    let svd = SVD::new(cross, true, true);
    let u = svd.u.ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let translation = cd - rotation * cs;
    RigidTransform::new(source, target, rotation, translation)
}

/// Root-mean-square Euclidean residual of `t` over the correspondences.
pub fn registration_rmse(t: &RigidTransform, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (t.apply_point(s) - d).norm_squared())
        .sum();
    (sum / src.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
        ]
    }

    #[test]
    fn identity_recovered() {
        let t = estimate_rigid(FrameId::Tracker, FrameId::Mtm, &pts(), &pts()).unwrap();
        assert!((t.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
    }

    #[test]
    fn pure_translation_recovered() {
        let off = Vector3::new(1.0, 2.0, 3.0);
        let dst: Vec<_> = pts().iter().map(|p| p + off).collect();
        let t = estimate_rigid(FrameId::Tracker, FrameId::Mtm, &pts(), &dst).unwrap();
        assert!((t.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!((t.translation() - off).norm() < 1e-12);
    }

    #[test]
    fn rz90_recovered() {
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let dst: Vec<_> = pts().iter().map(|p| rz * p).collect();
        let t = estimate_rigid(FrameId::Tracker, FrameId::Mtm, &pts(), &dst).unwrap();
        assert!((t.rotation() - rz).abs().max() < 1e-12);
        assert!(registration_rmse(&t, &pts(), &dst) < 1e-9);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let two = &pts()[..2];
        assert!(matches!(
            estimate_rigid(FrameId::Tracker, FrameId::Mtm, two, two),
            Err(Error::Degenerate(_))
        ));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            estimate_rigid(FrameId::Tracker, FrameId::Mtm, &line, &line),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn reflection_is_corrected() {
        // A mirrored target has no proper rotation fit; the result must still be proper.
        let dst: Vec<_> = pts().iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let t = estimate_rigid(FrameId::Tracker, FrameId::Mtm, &pts(), &dst).unwrap();
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn apply_transform_cases() {
        let pose = Pose6Dof::new([3.0, -2.0, 1.0], [10.0, 20.0, 30.0]).unwrap();
        let id = RigidTransform::identity(FrameId::Tracker, FrameId::Mtm);
        let same = apply_transform(&id, &pose, FrameId::Tracker).unwrap();
        for i in 0..3 {
            assert!((same.position[i] - pose.position[i]).abs() < 1e-12);
            assert!((same.orientation[i] - pose.orientation[i]).abs() < 1e-9);
        }

        let shift =
            RigidTransform::from_angles(FrameId::Tracker, FrameId::Mtm, [0.0; 3], [1.0, 0.0, 0.0]);
        let moved = apply_transform(&shift, &Pose6Dof::origin(), FrameId::Tracker).unwrap();
        assert_eq!(moved.position, [1.0, 0.0, 0.0]);
        assert_eq!(moved.orientation, [0.0, 0.0, 0.0]);

        // Rz(90°) on (1,0,0) with zero orientation: position (0,1,0), azimuth 90.
        let rz =
            RigidTransform::from_angles(FrameId::Tracker, FrameId::Mtm, [90.0, 0.0, 0.0], [0.0; 3]);
        let p = Pose6Dof::new([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]).unwrap();
        let out = apply_transform(&rz, &p, FrameId::Tracker).unwrap();
        assert!((Vector3::from(out.position) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((out.orientation[0] - 90.0).abs() < 1e-9);
        assert!(out.orientation[1].abs() < 1e-9 && out.orientation[2].abs() < 1e-9);

        // Composition oracle with a non-trivial pose orientation: Rz(90)·Rx(30)
        // is azimuth 90, roll 30 under the Z-Y-X convention.
        let q = Pose6Dof::new([1.0, 0.0, 0.0], [0.0, 0.0, 30.0]).unwrap();
        let out = apply_transform(&rz, &q, FrameId::Tracker).unwrap();
        assert!((out.orientation[0] - 90.0).abs() < 1e-9);
        assert!(out.orientation[1].abs() < 1e-9);
        assert!((out.orientation[2] - 30.0).abs() < 1e-9);

        assert!(matches!(
            apply_transform(&rz, &q, FrameId::Camera),
            Err(Error::FrameMismatch { .. })
        ));
    }

    #[test]
    fn serde_round_trip_row_major() {
        let t = RigidTransform::from_angles(
            FrameId::Camera,
            FrameId::Mtm,
            [30.0, -10.0, 5.0],
            [1.0, 2.0, 3.0],
        );
        let text = serde_json::to_string(&t).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["rotation"][0][1].as_f64().unwrap(), t.rotation()[(0, 1)]);
        let back: RigidTransform = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"source":"T","target":"M","rotation":[[2,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<RigidTransform>(bad).is_err());
    }

    #[test]
    fn inverse_and_compose() {
        let a = RigidTransform::from_angles(
            FrameId::Tracker,
            FrameId::Mtm,
            [30.0, -10.0, 5.0],
            [1.0, 2.0, 3.0],
        );
        let id = a.then(&a.inverse()).unwrap();
        assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation().norm() < 1e-12);
        assert!(a.then(&a).is_err());
    }

    proptest! {
        #[test]
        fn apply_is_isometry(
            angles in (-180.0f64..180.0, -89.0f64..89.0, -180.0f64..180.0),
            tr in prop::array::uniform3(-20.0f64..20.0),
            a in prop::array::uniform3(-30.0f64..30.0),
            b in prop::array::uniform3(-30.0f64..30.0),
        ) {
            let t = RigidTransform::from_angles(FrameId::Tracker, FrameId::Mtm, [angles.0, angles.1, angles.2], tr);
            let pa = apply_transform(&t, &Pose6Dof::new(a, [0.0; 3]).unwrap(), FrameId::Tracker).unwrap();
            let pb = apply_transform(&t, &Pose6Dof::new(b, [0.0; 3]).unwrap(), FrameId::Tracker).unwrap();
            let before = (Vector3::from(a) - Vector3::from(b)).norm();
            let after = (Vector3::from(pa.position) - Vector3::from(pb.position)).norm();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}

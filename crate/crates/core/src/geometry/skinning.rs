//! Skeleton kinematics and dual-quaternion skinning.

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum joint influences per vertex.
pub const MAX_INFLUENCES: usize = 4;
const WEIGHT_TOLERANCE: f64 = 1e-6;

/// Up to four `(joint, weight)` pairs; unused slots carry zero weight.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SkinInfluences {
    pub joints: [u32; MAX_INFLUENCES],
    pub weights: [f64; MAX_INFLUENCES],
}

impl SkinInfluences {
    pub fn single(joint: u32) -> Self {
        let mut s = Self::default();
        s.joints[0] = joint;
        s.weights[0] = 1.0;
        s
    }

    pub fn from_pairs(pairs: &[(u32, f64)]) -> Result<Self> {
        if pairs.len() > MAX_INFLUENCES {
            return Err(Error::Config(format!("{} influences, at most {MAX_INFLUENCES}", pairs.len())));
        }
        let mut s = Self::default();
        for (i, &(j, w)) in pairs.iter().enumerate() {
            s.joints[i] = j;
            s.weights[i] = w;
        }
        Ok(s)
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("skin weights {:?} do not sum to 1", self.weights)));
        }
        for (j, w) in self.joints.iter().zip(&self.weights) {
            if *w > 0.0 && *j as usize >= joints {
                return Err(Error::Config(format!("joint index {j} out of range ({joints} joints)")));
            }
        }
        Ok(())
    }

    fn dominant(&self) -> usize {
        let mut best = 0;
        for i in 1..MAX_INFLUENCES {
            if self.weights[i] > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl DualQuaternion {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let real = *iso.rotation.quaternion();
        let t = iso.translation.vector;
        let dual = Quaternion::from_parts(0.0, t) * real * 0.5;
        DualQuaternion { real, dual }
    }

    /// Applies the transform after normalizing by the real part.
    fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let n = self.real.norm();
        let (r, d) = (self.real / n, self.dual / n);
        let t = (d * r.conjugate()).vector() * 2.0;
        UnitQuaternion::new_unchecked(r).transform_vector(p) + t
    }
}

/// Blends the influences' dual quaternions and applies the result to every vertex.
pub fn dq_skin(
    vertices: &[[f64; 3]],
    influences: &[SkinInfluences],
    transforms: &[Isometry3<f64>],
) -> Result<Vec<[f64; 3]>> {
    if influences.len() != vertices.len() {
        return Err(Error::Shape(format!("{} vertices but {} skin entries", vertices.len(), influences.len())));
    }
    let dqs: Vec<DualQuaternion> = transforms.iter().map(DualQuaternion::from_isometry).collect();
    vertices
        .par_iter()
        .zip(influences)
        .enumerate()
        .map(|(v, (p, inf))| {
            let pivot = dqs
                .get(inf.joints[inf.dominant()] as usize)
                .ok_or_else(|| Error::Config(format!("vertex {v} references a missing joint")))?;
            let mut acc =
                DualQuaternion { real: Quaternion::new(0.0, 0.0, 0.0, 0.0), dual: Quaternion::new(0.0, 0.0, 0.0, 0.0) };
            for (&j, &w) in inf.joints.iter().zip(&inf.weights) {
                if w == 0.0 {
                    continue;
                }
                let dq = dqs
                    .get(j as usize)
                    .ok_or_else(|| Error::Config(format!("vertex {v} references missing joint {j}")))?;
                let s = if dq.real.dot(&pivot.real) < 0.0 { -w } else { w };
                acc.real += dq.real * s;
                acc.dual += dq.dual * s;
            }
            if !(acc.real.norm() > 1e-12) {
                return Err(Error::DegenerateBlend { vertex: v });
            }
            let out = acc.transform(&Vector3::from(*p));
            Ok([out.x, out.y, out.z])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest transform relative to the parent.
    pub rest: Isometry3<f64>,
}

/// Serialized form of a [`Joint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    name: String,
    parent: Option<usize>,
    translation: [f64; 3],
    /// `[w, x, y, z]`.
    rotation: [f64; 4],
}

/// Joint tree; parents precede their children and joint 0 is the single root.
///
/// Pose vectors hold the root translation followed by one axis-angle triple per
/// joint. Any trailing dofs are ignored by the kinematics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<JointSpec>", into = "Vec<JointSpec>")]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl TryFrom<Vec<JointSpec>> for Skeleton {
    type Error = Error;
    fn try_from(specs: Vec<JointSpec>) -> Result<Self> {
        let joints = specs
            .into_iter()
            .map(|s| {
                let [w, x, y, z] = s.rotation;
                Joint {
                    name: s.name,
                    parent: s.parent,
                    rest: Isometry3::from_parts(
                        Translation3::from(Vector3::from(s.translation)),
                        Unit::new_normalize(Quaternion::new(w, x, y, z)),
                    ),
                }
            })
            .collect();
        Skeleton::new(joints)
    }
}

impl From<Skeleton> for Vec<JointSpec> {
    fn from(s: Skeleton) -> Self {
        s.joints
            .into_iter()
            .map(|j| {
                let q = j.rest.rotation.quaternion();
                JointSpec {
                    name: j.name,
                    parent: j.parent,
                    translation: j.rest.translation.vector.into(),
                    rotation: [q.w, q.i, q.j, q.k],
                }
            })
            .collect()
    }
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Config("skeleton has no joints".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::Config("joint 0 must be the root".into())),
                (_, None) => return Err(Error::Config(format!("second root at joint {i}"))),
                (_, Some(p)) if p >= i => {
                    return Err(Error::Config(format!("joint {i} has parent {p}; parents must come first")))
                }
                _ => {}
            }
        }
        Ok(Skeleton { joints })
    }

    /// A straight chain along `axis` with `spacing` between joints.
    pub fn chain(count: usize, axis: Vector3<f64>, spacing: f64) -> Result<Self> {
        let joints = (0..count)
            .map(|i| Joint {
                name: format!("joint{i}"),
                parent: i.checked_sub(1),
                rest: Isometry3::from_parts(
                    Translation3::from(if i == 0 { Vector3::zeros() } else { axis * spacing }),
                    UnitQuaternion::identity(),
                ),
            })
            .collect();
        Skeleton::new(joints)
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Dofs consumed by [`Skeleton::world_transforms`].
    pub fn pose_dofs(&self) -> usize {
        3 + 3 * self.joints.len()
    }

    /// World transform of every joint under `pose`.
    pub fn world_transforms(&self, pose: &[f64]) -> Result<Vec<Isometry3<f64>>> {
        if pose.len() < self.pose_dofs() {
            return Err(Error::Shape(format!("pose has {} dofs, skeleton needs {}", pose.len(), self.pose_dofs())));
        }
        let mut world: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let aa = Vector3::new(pose[3 + 3 * i], pose[4 + 3 * i], pose[5 + 3 * i]);
            let local = j.rest * UnitQuaternion::from_scaled_axis(aa);
            let w = match j.parent {
                Some(p) => world[p] * local,
                None => Translation3::new(pose[0], pose[1], pose[2]) * local,
            };
            world.push(w);
        }
        Ok(world)
    }

    /// Transforms taking rest-pose geometry to `pose`.
    pub fn skinning_transforms(&self, pose: &[f64]) -> Result<Vec<Isometry3<f64>>> {
        let rest = self.world_transforms(&vec![0.0; self.pose_dofs()])?;
        let posed = self.world_transforms(pose)?;
        Ok(posed.iter().zip(&rest).map(|(p, r)| p * r.inverse()).collect())
    }
}

/// Applies a rigid transform to a point.
pub fn transform_point(iso: &Isometry3<f64>, p: &[f64; 3]) -> [f64; 3] {
    let q = iso.transform_point(&Point3::from(*p));
    [q.x, q.y, q.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_iso(rng: &mut impl Rng) -> Isometry3<f64> {
        let aa = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let t = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        Isometry3::from_parts(Translation3::from(t), UnitQuaternion::from_scaled_axis(aa))
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn identity_leaves_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_points(&mut rng, 20);
        let out = dq_skin(&v, &vec![SkinInfluences::single(0); 20], &[Isometry3::identity()]).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((0..3).all(|k| (a[k] - b[k]).abs() <= 1e-15));
        }
    }

    #[test]
    fn global_rigid_motion_is_exact_for_any_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let iso = random_iso(&mut rng);
        let v = random_points(&mut rng, 100);
        let inf: Vec<SkinInfluences> = (0..100)
            .map(|_| {
                let a = rng.random_range(0.0..1.0);
                SkinInfluences::from_pairs(&[(0, a), (1, 1.0 - a)]).unwrap()
            })
            .collect();
        // the second joint carries the antipodal representation of the same motion
        let out = dq_skin(&v, &inf, &[iso, iso]).unwrap();
        for (p, q) in v.iter().zip(&out) {
            let want = transform_point(&iso, p);
            assert!((0..3).all(|k| (want[k] - q[k]).abs() <= 1e-9));
        }
    }

    #[test]
    fn antipodal_quaternions_blend_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let iso = random_iso(&mut rng);
        let a = DualQuaternion::from_isometry(&iso);
        let neg = DualQuaternion { real: -a.real, dual: -a.dual };
        let p = Vector3::new(0.3, -0.2, 0.9);
        assert!((a.transform(&p) - neg.transform(&p)).norm() < 1e-12);
    }

    #[test]
    fn half_half_translations_average() {
        let (t1, t2) = (Vector3::new(1.0, 0.0, -2.0), Vector3::new(0.0, 3.0, 1.0));
        let isos = [
            Isometry3::from_parts(t1.into(), UnitQuaternion::identity()),
            Isometry3::from_parts(t2.into(), UnitQuaternion::identity()),
        ];
        let v = vec![[0.5, 0.5, 0.5], [-1.0, 2.0, 0.0]];
        let inf = vec![SkinInfluences::from_pairs(&[(0, 0.5), (1, 0.5)]).unwrap(); 2];
        let out = dq_skin(&v, &inf, &isos).unwrap();
        for (p, q) in v.iter().zip(&out) {
            // matrix blending agrees with the dual-quaternion blend for pure translations
            let lbs: Vec<f64> =
                (0..3).map(|k| 0.5 * transform_point(&isos[0], p)[k] + 0.5 * transform_point(&isos[1], p)[k]).collect();
            assert!((0..3).all(|k| (q[k] - lbs[k]).abs() <= 1e-12));
            assert!((0..3).all(|k| (q[k] - p[k] - 0.5 * (t1[k] + t2[k])).abs() <= 1e-12));
        }
    }

    #[test]
    fn cancelling_blend_is_reported() {
        let inf = vec![SkinInfluences::default()];
        let err = dq_skin(&[[0.0; 3]], &inf, &[Isometry3::identity()]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBlend { vertex: 0 }));
    }

    #[test]
    fn skeleton_kinematics() {
        let sk = Skeleton::chain(2, Vector3::z(), 1.0).unwrap();
        assert_eq!(sk.pose_dofs(), 9);
        let zero = sk.skinning_transforms(&[0.0; 9]).unwrap();
        assert!(zero.iter().all(|t| (t.to_homogeneous() - nalgebra::Matrix4::identity()).abs().max() < 1e-15));
        // bend the second joint by 90 degrees about x: the tip at z=2 swings to y=-1, z=1
        let mut pose = [0.0; 9];
        pose[6] = std::f64::consts::FRAC_PI_2;
        let m = sk.skinning_transforms(&pose).unwrap();
        let tip = transform_point(&m[1], &[0.0, 0.0, 2.0]);
        assert!((tip[0]).abs() < 1e-12 && (tip[1] + 1.0).abs() < 1e-12 && (tip[2] - 1.0).abs() < 1e-12);
        // root translation moves everything
        pose = [0.0; 9];
        pose[0] = 2.0;
        let m = sk.skinning_transforms(&pose).unwrap();
        assert!((transform_point(&m[1], &[0.0; 3])[0] - 2.0).abs() < 1e-12);
        assert!(sk.world_transforms(&[0.0; 8]).is_err());
    }

    #[test]
    fn skeleton_validation_and_serde() {
        let mut joints = Skeleton::chain(3, Vector3::y(), 0.5).unwrap().joints().to_vec();
        let sk = Skeleton::new(joints.clone()).unwrap();
        let text = serde_json::to_string(&sk).unwrap();
        let back: Skeleton = serde_json::from_str(&text).unwrap();
        for (a, b) in back.joints().iter().zip(sk.joints()) {
            assert_eq!(a.parent, b.parent);
            assert!((a.rest.to_homogeneous() - b.rest.to_homogeneous()).abs().max() < 1e-15);
        }
        joints[2].parent = Some(2);
        assert!(Skeleton::new(joints.clone()).is_err());
        joints[2].parent = None;
        assert!(Skeleton::new(joints).is_err());
        assert!(SkinInfluences::from_pairs(&[(0, 0.5), (1, 0.4)]).unwrap().validate(2).is_err());
        assert!(SkinInfluences::from_pairs(&[(0, 0.5), (3, 0.5)]).unwrap().validate(2).is_err());
    }
}

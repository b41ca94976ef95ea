use crate::error::{Error, Result};
use crate::geometry::{RotationMatrix, Vec3};
use crate::grasp::{GraspPose, GripperSpec, N_CELLS, N_DEPTHS, N_ROTATIONS};

use super::sdf::SdfScene;

pub const CONTACT_EPS: f64 = 1e-5;
pub const NORMAL_STEP: f64 = 1e-4;
pub const BODY_SAMPLE_STEP: f64 = 0.005;
/// Friction coefficient used for training labels.
pub const LABEL_MU: f64 = 0.8;
/// Gap added on each side of the contacts when choosing a label width.
pub const WIDTH_CLEARANCE: f64 = 0.005;
const MAX_MARCH_STEPS: usize = 256;

/// What the oracle found for one pose, independent of friction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraspOutcome {
    /// Some gripper body sample lies inside material.
    Collision,
    /// A finger closed without touching anything.
    MissingContact,
    /// Both fingers touch; `max_angle` is the larger angle (radians) between
    /// a contact normal and its finger's closing direction.
    Contact { max_angle: f64 },
}

impl GraspOutcome {
    pub fn success(&self, mu: f64) -> bool {
        match *self {
            GraspOutcome::Contact { max_angle } => max_angle <= mu.atan(),
            _ => false,
        }
    }
}

fn body_is_free(scene: &SdfScene, pose: &GraspPose, gripper: &GripperSpec) -> bool {
    let rot = pose.full_rotation();
    let center = pose.center();
    gripper.slabs(pose.width).iter().all(|slab| {
        let c = center + rot.apply(&slab.center);
        if scene.sdf(&c) > slab.half_diagonal() {
            return true;
        }
        slab.samples(BODY_SAMPLE_STEP).iter().all(|l| scene.sdf(&(center + rot.apply(l))) > 0.0)
    })
}

/// Sphere-traces from `start` along `dir` for at most `max_t`; returns the
/// distance travelled to the first surface.
fn march(scene: &SdfScene, start: &Vec3, dir: &Vec3, max_t: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..MAX_MARCH_STEPS {
        if t > max_t {
            return None;
        }
        let d = scene.sdf(&(start + dir * t));
        if d < CONTACT_EPS {
            return Some(t);
        }
        t += d;
    }
    None
}

fn normal_angle(scene: &SdfScene, at: &Vec3, expected: &Vec3) -> f64 {
    let g = scene.gradient(at, NORMAL_STEP);
    let n = g.norm();
    if n < 1e-12 {
        return std::f64::consts::FRAC_PI_2;
    }
    (g.dot(expected) / n).clamp(-1.0, 1.0).acos()
}

fn check_pose(pose: &GraspPose, gripper: &GripperSpec) -> Result<()> {
    let finite = pose.point.iter().all(|v| v.is_finite())
        && pose.rotation.0.iter().all(|v| v.is_finite())
        && pose.width.is_finite();
    if !finite {
        return Err(Error::NonFinite("grasp pose".into()));
    }
    pose.validate(gripper)
}

/// Friction-free part of the antipodal test: body collision, then contacts
/// found by marching inward along the closing axis from both fingers.
pub fn evaluate_grasp(scene: &SdfScene, pose: &GraspPose, gripper: &GripperSpec) -> Result<GraspOutcome> {
    check_pose(pose, gripper)?;
    if !body_is_free(scene, pose, gripper) {
        return Ok(GraspOutcome::Collision);
    }
    let b = pose.closing_axis();
    let g = pose.center();
    let hw = pose.width / 2.0;
    let (Some(t1), Some(t2)) =
        (march(scene, &(g + b * hw), &-b, pose.width), march(scene, &(g - b * hw), &b, pose.width))
    else {
        return Ok(GraspOutcome::MissingContact);
    };
    let c1 = g + b * (hw - t1);
    let c2 = g - b * (hw - t2);
    let a1 = normal_angle(scene, &c1, &b);
    let a2 = normal_angle(scene, &c2, &-b);
    Ok(GraspOutcome::Contact { max_angle: a1.max(a2) })
}

/// Antipodal success test with the default gripper.
pub fn grasp_oracle(scene: &SdfScene, pose: &GraspPose, mu: f64) -> Result<bool> {
    grasp_oracle_with(scene, pose, mu, &GripperSpec::default())
}

pub fn grasp_oracle_with(scene: &SdfScene, pose: &GraspPose, mu: f64, gripper: &GripperSpec) -> Result<bool> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("friction coefficient {mu}")));
    }
    Ok(evaluate_grasp(scene, pose, gripper)?.success(mu))
}

/// Label for one (rotation, depth) cell at one grasp point and direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLabel {
    pub outcome: GraspOutcome,
    pub width: f64,
}

/// Finds the narrowest collision-free opening that clears the contacts and
/// evaluates the oracle there. Widths are scanned upward from the contact
/// span in `BODY_SAMPLE_STEP` increments; the scan is linear because body
/// collision is not monotone in the opening.
pub fn label_cell(
    scene: &SdfScene,
    point: &Vec3,
    rotation: &RotationMatrix,
    rot_idx: usize,
    depth_idx: usize,
    gripper: &GripperSpec,
) -> Result<CellLabel> {
    let w_max = gripper.max_width();
    let mut pose = GraspPose { point: *point, rotation: *rotation, rot_idx, depth_idx, width: w_max, score: 0.0 };
    check_pose(&pose, gripper)?;
    let b = pose.closing_axis();
    let g = pose.center();
    let r = gripper.radius;
    let spans = (march(scene, &(g + b * r), &-b, w_max), march(scene, &(g - b * r), &b, w_max));
    let (Some(t1), Some(t2)) = spans else {
        return Ok(CellLabel { outcome: GraspOutcome::MissingContact, width: w_max });
    };
    let half = (r - t1).max(r - t2).max(0.0) + WIDTH_CLEARANCE;
    let mut w = (2.0 * half).min(w_max);
    loop {
        pose.width = w;
        if body_is_free(scene, &pose, gripper) {
            return Ok(CellLabel { outcome: evaluate_grasp(scene, &pose, gripper)?, width: w });
        }
        if w >= w_max {
            return Ok(CellLabel { outcome: GraspOutcome::Collision, width: w_max });
        }
        w = (w + BODY_SAMPLE_STEP).min(w_max);
    }
}

/// All 48 cell labels for one grasp point and approach rotation.
pub fn label_cells(
    scene: &SdfScene,
    point: &Vec3,
    rotation: &RotationMatrix,
    gripper: &GripperSpec,
) -> Result<Vec<CellLabel>> {
    let mut out = Vec::with_capacity(N_CELLS);
    for rot_idx in 0..N_ROTATIONS {
        for depth_idx in 0..N_DEPTHS {
            out.push(label_cell(scene, point, rotation, rot_idx, depth_idx, gripper)?);
        }
    }
    Ok(out)
}

/// Whether any cell of any listed approach rotation succeeds at `mu`.
pub fn any_cell_succeeds(
    scene: &SdfScene,
    point: &Vec3,
    rotations: &[RotationMatrix],
    mu: f64,
    gripper: &GripperSpec,
) -> Result<bool> {
    for rot in rotations {
        for rot_idx in 0..N_ROTATIONS {
            for depth_idx in 0..N_DEPTHS {
                if label_cell(scene, point, rot, rot_idx, depth_idx, gripper)?.outcome.success(mu) {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::frame_from_direction;
    use crate::scene::sdf::{PrimitiveKind, SdfPrimitive};

    const R: f64 = 0.03;

    fn sphere_on_table() -> SdfScene {
        SdfScene::desk(
            vec![SdfPrimitive::at(PrimitiveKind::Sphere { radius: R }, Vec3::new(0.0, 0.0, 0.1)).unwrap()],
            0,
        )
    }

    /// Top-down pose whose grasp centre is `center`, closing along world x.
    fn top_down(center: Vec3, width: f64) -> GraspPose {
        let rotation = frame_from_direction(&-Vec3::z());
        let depth_idx = 1;
        let mut pose = GraspPose { point: Vec3::zeros(), rotation, rot_idx: 0, depth_idx, width, score: 0.0 };
        pose.point = center - pose.approach() * pose.depth();
        pose
    }

    #[test]
    fn diametral_pinch_succeeds() {
        let s = sphere_on_table();
        let pose = top_down(Vec3::new(0.0, 0.0, 0.1), 0.07);
        // Analytic sphere normals at the two contacts are exactly +-b.
        let b = pose.closing_axis();
        let c1 = Vec3::new(0.0, 0.0, 0.1) + b * R;
        assert!(((c1 - Vec3::new(0.0, 0.0, 0.1)).normalize() - b).norm() < 1e-12);
        assert!(grasp_oracle(&s, &pose, 1.0).unwrap());
        match evaluate_grasp(&s, &pose, &GripperSpec::default()).unwrap() {
            GraspOutcome::Contact { max_angle } => assert!(max_angle < 1e-3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn narrow_width_collides() {
        let s = sphere_on_table();
        let pose = top_down(Vec3::new(0.0, 0.0, 0.1), 0.04);
        assert!(!grasp_oracle(&s, &pose, 1.0).unwrap());
        assert_eq!(evaluate_grasp(&s, &pose, &GripperSpec::default()).unwrap(), GraspOutcome::Collision);
    }

    #[test]
    fn tangent_closing_fails_at_low_friction() {
        let s = sphere_on_table();
        // Closing line passes 2.5 cm off the centre: contact normals are
        // about 56 degrees from the closing axis.
        let b = top_down(Vec3::zeros(), 0.07).closing_axis();
        let off = b.cross(&Vec3::z()).normalize() * 0.025;
        let pose = top_down(Vec3::new(0.0, 0.0, 0.1) + off, 0.07);
        assert!(!grasp_oracle(&s, &pose, 0.2).unwrap());
        match evaluate_grasp(&s, &pose, &GripperSpec::default()).unwrap() {
            GraspOutcome::Contact { max_angle } => {
                let expect = (0.025f64 / R).asin();
                assert!((max_angle - expect).abs() < 1e-3, "{max_angle} vs {expect}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn friction_is_monotone() {
        let s = sphere_on_table();
        for k in 0..10 {
            let off = Vec3::new(0.0, 0.003 * k as f64, 0.0);
            let pose = top_down(Vec3::new(0.0, 0.0, 0.1) + off, 0.08);
            let o = evaluate_grasp(&s, &pose, &GripperSpec::default()).unwrap();
            let mut prev = false;
            for mu in [0.2, 0.4, 0.6, 0.8, 1.0, 1.2] {
                let now = o.success(mu);
                assert!(!prev || now);
                prev = now;
            }
        }
    }

    #[test]
    fn empty_space_has_no_contact() {
        let s = sphere_on_table();
        let pose = top_down(Vec3::new(0.2, 0.2, 0.2), 0.05);
        assert_eq!(evaluate_grasp(&s, &pose, &GripperSpec::default()).unwrap(), GraspOutcome::MissingContact);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = sphere_on_table();
        let mut pose = top_down(Vec3::new(0.0, 0.0, 0.1), 0.07);
        assert!(grasp_oracle(&s, &pose, 0.0).is_err());
        pose.width = 0.2;
        assert!(grasp_oracle(&s, &pose, 1.0).is_err());
        pose.width = 0.07;
        pose.point.x = f64::NAN;
        assert!(matches!(grasp_oracle(&s, &pose, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn label_width_clears_the_sphere() {
        let s = sphere_on_table();
        let top = Vec3::new(0.0, 0.0, 0.1 + R);
        let rot = frame_from_direction(&-Vec3::z());
        // Depth index 2 puts the grasp centre 3 cm below the top: the sphere
        // centre plane.
        let l = label_cell(&s, &top, &rot, 0, 2, &GripperSpec::default()).unwrap();
        assert!((l.width - (2.0 * R + 2.0 * WIDTH_CLEARANCE)).abs() < 1e-4, "{}", l.width);
        assert!(l.outcome.success(LABEL_MU));
        let cells = label_cells(&s, &top, &rot, &GripperSpec::default()).unwrap();
        assert_eq!(cells.len(), N_CELLS);
        assert!(any_cell_succeeds(&s, &top, &[rot], LABEL_MU, &GripperSpec::default()).unwrap());
    }
}

//! Kinematic bicycle model, oriented-rectangle footprints and the collision
//! geometry used by the controller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar vehicle state z = [x, y, heading, v].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64, v: f64) -> Self {
        Self { x, y, heading, v }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.heading, self.v]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { x: a[0], y: a[1], heading: a[2], v: a[3] }
    }
}

/// Control input u = [accel, steer].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub steer: f64,
}

impl ControlInput {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }

    pub const ZERO: ControlInput = ControlInput { accel: 0.0, steer: 0.0 };
}

/// Body dimensions and axle distances.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleGeometry {
    pub length: f64,
    pub width: f64,
    pub front_axle: f64,
    pub rear_axle: f64,
}

impl VehicleGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.length <= 0.0 || self.width <= 0.0 || self.front_axle <= 0.0 || self.rear_axle <= 0.0 {
            return Err(Error::InvalidConfig("vehicle geometry must be positive".into()));
        }
        if self.front_axle + self.rear_axle > self.length {
            return Err(Error::InvalidConfig("axle spacing exceeds vehicle length".into()));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.front_axle + self.rear_axle
    }
}

/// Oriented rectangle { p : A p <= b } with A = [RO^T; -RO^T].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polytope {
    pub a: [[f64; 2]; 4],
    pub b: [f64; 4],
    /// Center and heading kept alongside the halfspace form; the separating
    /// axis test works on the oriented-box parameters directly.
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Polytope {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.a
            .iter()
            .zip(self.b.iter())
            .all(|(row, &b)| row[0] * p[0] + row[1] * p[1] <= b + 1e-12)
    }

    /// The four corner points of the rectangle.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let mut out = [[0.0; 2]; 4];
        for (i, (sx, sy)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .enumerate()
        {
            let lx = sx * self.half_length;
            let ly = sy * self.half_width;
            out[i] = [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
            ];
        }
        out
    }
}

/// Side slip angle beta = arctan(tan(steer) * l_r / (l_f + l_r)).
pub fn side_slip(steer: f64, geom: &VehicleGeometry) -> Result<f64> {
    if steer.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::SingularSteering(steer));
    }
    Ok((steer.tan() * geom.rear_axle / geom.wheelbase()).atan())
}

/// One discrete step of the kinematic bicycle model:
///   x'   = x + v cos(phi + beta) dt
///   y'   = y + v sin(phi + beta) dt
///   phi' = phi + v sin(beta) / l_r dt
///   v'   = v + a dt
pub fn step(z: &VehicleState, u: &ControlInput, geom: &VehicleGeometry, dt: f64) -> VehicleState {
    let beta = (u.steer.tan() * geom.rear_axle / geom.wheelbase()).atan();
    let (s, c) = (z.heading + beta).sin_cos();
    VehicleState {
        x: z.x + z.v * c * dt,
        y: z.y + z.v * s * dt,
        heading: z.heading + z.v * beta.sin() / geom.rear_axle * dt,
        v: z.v + u.accel * dt,
    }
}

/// Jacobians of `step` with respect to state and input, evaluated at (z, u).
/// Used by the controller's linearization.
pub fn step_jacobians(
    z: &VehicleState,
    u: &ControlInput,
    geom: &VehicleGeometry,
    dt: f64,
) -> ([[f64; 4]; 4], [[f64; 2]; 4]) {
    let wb = geom.wheelbase();
    let ratio = geom.rear_axle / wb;
    let tan_d = u.steer.tan();
    let sec2_d = 1.0 + tan_d * tan_d;
    let beta = (tan_d * ratio).atan();
    let dbeta_dd = ratio * sec2_d / (1.0 + (tan_d * ratio) * (tan_d * ratio));
    let (s, c) = (z.heading + beta).sin_cos();

    let a = [
        [1.0, 0.0, -z.v * s * dt, c * dt],
        [0.0, 1.0, z.v * c * dt, s * dt],
        [0.0, 0.0, 1.0, beta.sin() / geom.rear_axle * dt],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let dphi_dd = z.v * beta.cos() * dbeta_dd / geom.rear_axle * dt;
    let b = [
        [0.0, -z.v * s * dbeta_dd * dt],
        [0.0, z.v * c * dbeta_dd * dt],
        [0.0, dphi_dd],
        [dt, 0.0],
    ];
    (a, b)
}

/// Rotation matrix RO(phi) = [[cos, -sin], [sin, cos]].
pub fn rotation(heading: f64) -> [[f64; 2]; 2] {
    let (s, c) = heading.sin_cos();
    [[c, -s], [s, c]]
}

/// Builds the vehicle footprint polytope at state `z`:
/// A = [RO^T; -RO^T], b = [l/2, w/2, l/2, w/2]^T + A [x, y]^T.
pub fn polytope_of(z: &VehicleState, geom: &VehicleGeometry) -> Polytope {
    oriented_box([z.x, z.y], z.heading, geom.length, geom.width)
}

/// Oriented box from center, heading and full dimensions.
pub fn oriented_box(center: [f64; 2], heading: f64, length: f64, width: f64) -> Polytope {
    let ro = rotation(heading);
    // Rows of RO^T are the body axes expressed in world coordinates.
    let rt = [[ro[0][0], ro[1][0]], [ro[0][1], ro[1][1]]];
    let a = [rt[0], rt[1], [-rt[0][0], -rt[0][1]], [-rt[1][0], -rt[1][1]]];
    let half = [length / 2.0, width / 2.0, length / 2.0, width / 2.0];
    let mut b = [0.0; 4];
    for i in 0..4 {
        b[i] = half[i] + a[i][0] * center[0] + a[i][1] * center[1];
    }
    Polytope {
        a,
        b,
        center,
        heading,
        half_length: length / 2.0,
        half_width: width / 2.0,
    }
}

/// Exact separating-axis test between two oriented rectangles. Returns true
/// iff the closed sets overlap (touching counts as overlap).
pub fn polytopes_intersect(p1: &Polytope, p2: &Polytope) -> bool {
    let axes = [
        [p1.heading.cos(), p1.heading.sin()],
        [-p1.heading.sin(), p1.heading.cos()],
        [p2.heading.cos(), p2.heading.sin()],
        [-p2.heading.sin(), p2.heading.cos()],
    ];
    let d = [p2.center[0] - p1.center[0], p2.center[1] - p1.center[1]];
    for axis in axes {
        let proj_d = (d[0] * axis[0] + d[1] * axis[1]).abs();
        let r1 = radius_on_axis(p1, axis);
        let r2 = radius_on_axis(p2, axis);
        if proj_d > r1 + r2 {
            return false;
        }
    }
    true
}

fn radius_on_axis(p: &Polytope, axis: [f64; 2]) -> f64 {
    let (s, c) = p.heading.sin_cos();
    let long = [c, s];
    let lat = [-s, c];
    p.half_length * (long[0] * axis[0] + long[1] * axis[1]).abs()
        + p.half_width * (lat[0] * axis[0] + lat[1] * axis[1]).abs()
}

/// A disc in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Two-disc cover of the vehicle rectangle: discs of radius
/// sqrt((l/4)^2 + (w/2)^2) + margin at body-frame offsets +-l/4 along the
/// heading. The union covers the whole rectangle.
pub fn disc_cover(z: &VehicleState, geom: &VehicleGeometry, margin: f64) -> [Disc; 2] {
    cover_box([z.x, z.y], z.heading, geom.length, geom.width, margin)
}

/// Disc cover of an arbitrary oriented box (used for obstacles as well).
pub fn cover_box(center: [f64; 2], heading: f64, length: f64, width: f64, margin: f64) -> [Disc; 2] {
    let radius = ((length / 4.0).powi(2) + (width / 2.0).powi(2)).sqrt() + margin;
    let (s, c) = heading.sin_cos();
    let off = length / 4.0;
    [
        Disc { center: [center[0] + c * off, center[1] + s * off], radius },
        Disc { center: [center[0] - c * off, center[1] - s * off], radius },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> VehicleGeometry {
        VehicleGeometry { length: 4.5, width: 1.8, front_axle: 1.125, rear_axle: 1.125 }
    }

    #[test]
    fn side_slip_cases() {
        let g = geom();
        assert_eq!(side_slip(0.0, &g).unwrap(), 0.0);
        // Symmetric axles: arctan(tan(s) / 2); oracle value for s = 0.3.
        let b = side_slip(0.3, &g).unwrap();
        assert!((b - 0.15345219489184944).abs() < 1e-15);
        let s = 0.17;
        assert!((side_slip(s, &g).unwrap() - (s.tan() / 2.0).atan()).abs() < 1e-15);
        assert!(side_slip(std::f64::consts::FRAC_PI_2, &g).is_err());
    }

    #[test]
    fn step_cases() {
        let g = geom();
        let z = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let z1 = step(&z, &ControlInput::new(0.0, 0.0), &g, 0.05);
        assert!((z1.x - 0.5).abs() < 1e-12);
        assert_eq!(z1.y, 0.0);
        assert_eq!(z1.heading, 0.0);
        assert_eq!(z1.v, 10.0);

        let z2 = step(&z, &ControlInput::new(2.0, 0.0), &g, 0.05);
        assert!((z2.x - 0.5).abs() < 1e-12);
        assert!((z2.v - 10.1).abs() < 1e-12);

        // Oracle-stepped values for steer = 0.1 (beta = atan(tan(0.1)/2)).
        let z3 = step(&z, &ControlInput::new(0.0, 0.1), &g, 0.05);
        assert!((z3.x - 0.4993719947549082).abs() < 1e-12);
        assert!((z3.y - 0.02505216267119552).abs() < 1e-12);
        assert!((z3.heading - 0.022268589041062683).abs() < 1e-12);
        assert_eq!(z3.v, 10.0);
    }

    #[test]
    fn coasting_preserves_speed_and_heading() {
        let g = geom();
        let mut z = VehicleState::new(2.0, -1.0, 0.3, 13.0);
        for _ in 0..200 {
            z = step(&z, &ControlInput::ZERO, &g, 0.05);
            assert_eq!(z.v, 13.0);
            assert_eq!(z.heading, 0.3);
        }
    }

    #[test]
    fn rotation_cases() {
        let r = rotation(0.0);
        assert_eq!(r, [[1.0, -0.0], [0.0, 1.0]]);
        let r = rotation(std::f64::consts::FRAC_PI_2);
        assert!(r[0][0].abs() < 1e-15 && (r[0][1] + 1.0).abs() < 1e-15);
        assert!((r[1][0] - 1.0).abs() < 1e-15 && r[1][1].abs() < 1e-15);

        // RO(phi) RO(-phi) = I and norm preservation.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let phi: f64 = rng.gen_range(-3.0..3.0);
            let r = rotation(phi);
            let ri = rotation(-phi);
            let prod = [
                [
                    r[0][0] * ri[0][0] + r[0][1] * ri[1][0],
                    r[0][0] * ri[0][1] + r[0][1] * ri[1][1],
                ],
                [
                    r[1][0] * ri[0][0] + r[1][1] * ri[1][0],
                    r[1][0] * ri[0][1] + r[1][1] * ri[1][1],
                ],
            ];
            assert!((prod[0][0] - 1.0).abs() < 1e-12 && (prod[1][1] - 1.0).abs() < 1e-12);
            assert!(prod[0][1].abs() < 1e-12 && prod[1][0].abs() < 1e-12);
            let x = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let rx = [r[0][0] * x[0] + r[0][1] * x[1], r[1][0] * x[0] + r[1][1] * x[1]];
            let n0 = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let n1 = (rx[0] * rx[0] + rx[1] * rx[1]).sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn polytope_axis_aligned_box() {
        let g = geom();
        let p = polytope_of(&VehicleState::new(0.0, 0.0, 0.0, 10.0), &g);
        // Corner membership of the [-2.25, 2.25] x [-0.9, 0.9] box.
        for (x, y, inside) in [
            (2.25, 0.9, true),
            (-2.25, -0.9, true),
            (2.26, 0.0, false),
            (0.0, 0.95, false),
            (0.0, 0.0, true),
        ] {
            assert_eq!(p.contains([x, y]), inside, "point ({x},{y})");
        }

        // Translation equivariance.
        let q = polytope_of(&VehicleState::new(10.0, 0.0, 0.0, 10.0), &g);
        assert!(q.contains([12.25, 0.9]));
        assert!(!q.contains([2.25, 0.0]));
        for i in 0..4 {
            assert!((q.b[i] - (p.b[i] + q.a[i][0] * 10.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn polytope_rotated_quarter_turn() {
        let g = geom();
        let p = polytope_of(
            &VehicleState::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 10.0),
            &g,
        );
        // Long axis now along y: 8 probe points around the box.
        for (x, y, inside) in [
            (0.0, 2.25, true),
            (0.0, -2.25, true),
            (0.9, 0.0, true),
            (-0.9, 0.0, true),
            (0.0, 2.3, false),
            (0.95, 0.0, false),
            (0.89, 2.24, true),
            (0.91, 2.26, false),
        ] {
            assert_eq!(p.contains([x, y]), inside, "point ({x},{y})");
        }
    }

    /// Direct point-in-oriented-rectangle oracle.
    fn in_rect(center: [f64; 2], heading: f64, l: f64, w: f64, p: [f64; 2]) -> bool {
        let dx = p[0] - center[0];
        let dy = p[1] - center[1];
        let (s, c) = heading.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= l / 2.0 + 1e-12 && v.abs() <= w / 2.0 + 1e-12
    }

    #[test]
    fn polytope_membership_matches_oracle() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let z = VehicleState::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-3.0..3.0),
                0.0,
            );
            let p = polytope_of(&z, &g);
            for _ in 0..50 {
                let pt = [
                    z.x + rng.gen_range(-4.0..4.0),
                    z.y + rng.gen_range(-4.0..4.0),
                ];
                assert_eq!(
                    p.contains(pt),
                    in_rect([z.x, z.y], z.heading, g.length, g.width, pt)
                );
            }
        }
    }

    #[test]
    fn intersection_basic_cases() {
        let g = geom();
        let a = polytope_of(&VehicleState::new(0.0, 0.0, 0.0, 0.0), &g);
        assert!(polytopes_intersect(&a, &a));

        let unit1 = oriented_box([0.0, 0.0], 0.0, 1.0, 1.0);
        let unit2 = oriented_box([3.0, 0.0], 0.0, 1.0, 1.0);
        assert!(!polytopes_intersect(&unit1, &unit2));

        // 4.5 x 1.8 rectangles 4.0 m apart overlap since 4.0 < 4.5.
        let b = polytope_of(&VehicleState::new(4.0, 0.0, 0.0, 0.0), &g);
        assert!(polytopes_intersect(&a, &b));
    }

    /// Dense point-sampling oracle: any sampled point inside both rectangles
    /// witnesses an intersection.
    fn sampled_overlap(p1: &Polytope, p2: &Polytope, rng: &mut ChaCha8Rng) -> bool {
        for _ in 0..10_000 {
            let (s, c) = p1.heading.sin_cos();
            let u = rng.gen_range(-p1.half_length..p1.half_length);
            let v = rng.gen_range(-p1.half_width..p1.half_width);
            let pt = [p1.center[0] + c * u - s * v, p1.center[1] + s * u + c * v];
            if p2.contains(pt) {
                return true;
            }
        }
        false
    }

    #[test]
    fn intersection_matches_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..60 {
            let p1 = oriented_box(
                [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                rng.gen_range(-3.0..3.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.5..2.5),
            );
            let p2 = oriented_box(
                [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                rng.gen_range(-3.0..3.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.5..2.5),
            );
            let exact = polytopes_intersect(&p1, &p2);
            let exact_sym = polytopes_intersect(&p2, &p1);
            assert_eq!(exact, exact_sym, "SAT must be symmetric");
            if sampled_overlap(&p1, &p2, &mut rng) {
                // No false negatives on sampled overlaps.
                assert!(exact);
            }
        }
    }

    #[test]
    fn disc_cover_cases() {
        let g = geom();
        let z = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let discs = disc_cover(&z, &g, 0.0);
        assert!((discs[0].radius - 1.440702953422391).abs() < 1e-12);
        assert!((discs[0].center[0] - 1.125).abs() < 1e-12);
        assert!((discs[1].center[0] + 1.125).abs() < 1e-12);
        assert_eq!(discs[0].center[1], 0.0);

        // Every rectangle corner lies inside some disc (corner-distance oracle).
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let z = VehicleState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.0..3.0),
                0.0,
            );
            let discs = disc_cover(&z, &g, 0.0);
            for corner in polytope_of(&z, &g).corners() {
                let covered = discs.iter().any(|d| {
                    let dx = corner[0] - d.center[0];
                    let dy = corner[1] - d.center[1];
                    (dx * dx + dy * dy).sqrt() <= d.radius + 1e-9
                });
                assert!(covered);
            }
        }
    }

    #[test]
    fn disc_separation_implies_no_rectangle_overlap() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut separated_seen = 0;
        for _ in 0..300 {
            let z1 = VehicleState::new(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-3.0..3.0),
                0.0,
            );
            let z2 = VehicleState::new(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-3.0..3.0),
                0.0,
            );
            let d1 = disc_cover(&z1, &g, 0.0);
            let d2 = disc_cover(&z2, &g, 0.0);
            let all_separated = d1.iter().all(|a| {
                d2.iter().all(|b| {
                    let dx = a.center[0] - b.center[0];
                    let dy = a.center[1] - b.center[1];
                    (dx * dx + dy * dy).sqrt() > a.radius + b.radius
                })
            });
            if all_separated {
                separated_seen += 1;
                assert!(!polytopes_intersect(&polytope_of(&z1, &g), &polytope_of(&z2, &g)));
            }
        }
        assert!(separated_seen > 20, "test must exercise the separated branch");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let g = geom();
        let z = VehicleState::new(1.0, -2.0, 0.2, 12.0);
        let u = ControlInput::new(0.7, 0.08);
        let dt = 0.05;
        let (ja, jb) = step_jacobians(&z, &u, &g, dt);
        let h = 1e-6;
        let base = step(&z, &u, &g, dt).as_array();
        for i in 0..4 {
            let mut zp = z.as_array();
            zp[i] += h;
            let fp = step(&VehicleState::from_array(zp), &u, &g, dt).as_array();
            for r in 0..4 {
                let fd = (fp[r] - base[r]) / h;
                assert!((fd - ja[r][i]).abs() < 1e-5, "dA[{r}][{i}]");
            }
        }
        for (i, du) in [(0usize, ControlInput::new(u.accel + h, u.steer)), (1, ControlInput::new(u.accel, u.steer + h))] {
            let fp = step(&z, &du, &g, dt).as_array();
            for r in 0..4 {
                let fd = (fp[r] - base[r]) / h;
                assert!((fd - jb[r][i]).abs() < 1e-5, "dB[{r}][{i}]");
            }
        }
    }

    #[test]
    fn one_step_linearization_error_is_second_order() {
        let g = geom();
        let z0 = VehicleState::new(0.0, 0.0, 0.1, 14.0);
        let u0 = ControlInput::new(0.5, 0.05);
        let dt = 0.05;
        let (ja, jb) = step_jacobians(&z0, &u0, &g, dt);
        let base = step(&z0, &u0, &g, dt).as_array();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let dz = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-1.0..1.0),
            ];
            let du = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.05..0.05)];
            let err = |scale: f64| -> f64 {
                let z = VehicleState::new(
                    z0.x + dz[0] * scale,
                    z0.y + dz[1] * scale,
                    z0.heading + dz[2] * scale,
                    z0.v + dz[3] * scale,
                );
                let u = ControlInput::new(u0.accel + du[0] * scale, u0.steer + du[1] * scale);
                let exact = step(&z, &u, &g, dt).as_array();
                let mut max_err: f64 = 0.0;
                for r in 0..4 {
                    let mut lin = base[r];
                    for c in 0..4 {
                        lin += ja[r][c] * dz[c] * scale;
                    }
                    lin += jb[r][0] * du[0] * scale + jb[r][1] * du[1] * scale;
                    max_err = max_err.max((exact[r] - lin).abs());
                }
                max_err
            };
            let e1 = err(1.0);
            let e2 = err(0.5);
            if e1 > 1e-9 {
                assert!(e1 / e2 >= 3.0, "halving deviation must shrink error >= 3x ({e1} vs {e2})");
            }
        }
    }
}

//! Pinhole camera, rigid-body pose algebra and the differentiable inverse warp.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image, PixelCoords, PointCloud, ValidityMask};
use crate::tensor::Tensor;

/// Points at or behind this depth are treated as behind the camera.
pub const BEHIND_EPS: f64 = 1e-6;
/// Below this angle the exponential map switches to its series expansion.
pub const SMALL_ANGLE: f64 = 1e-6;
/// Slack on the image-bounds test so exact round trips at the border survive
/// floating-point noise.
const BOUND_TOL: f64 = 1e-9;
const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::domain(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("image size must be non-zero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::domain(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Centred principal point with equal focal lengths.
    pub fn centered(f: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(Error::domain(format!(
                "intrinsics are for {}x{} but the data is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Six pose parameters: axis-angle rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6 {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose6 {
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Pose6 {
            rotation,
            translation,
        };
        if !p.is_finite() {
            return Err(Error::domain(format!("pose has non-finite entries: {p:?}")));
        }
        Ok(p)
    }

    pub fn identity() -> Self {
        Pose6 {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(&self.translation).all(|v| v.is_finite())
    }

    /// `[rx, ry, rz, tx, ty, tz]`
    pub fn to_array(&self) -> [f64; 6] {
        let (r, t) = (self.rotation, self.translation);
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Pose6 {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn to_se3(&self) -> Result<Se3> {
        axis_angle_to_se3(self)
    }
}

/// Rigid transform stored as a 4×4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3(Matrix4<f64>);

impl Se3 {
    pub fn identity() -> Self {
        Se3(Matrix4::identity())
    }

    /// Validates the rigid-transform invariants.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        check_rigid(&m)?;
        Ok(Se3(m))
    }

    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Se3(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn compose(&self, rhs: &Se3) -> Se3 {
        Se3(self.0 * rhs.0)
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation().transpose();
        Se3::from_parts(rt, -(rt * self.translation()))
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation() * Vector3::from(p) + self.translation();
        [q.x, q.y, q.z]
    }

    /// Logarithm back to axis-angle and translation.
    pub fn to_pose6(&self) -> Pose6 {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation());
        let w = rot.scaled_axis();
        let t = self.translation();
        Pose6 {
            rotation: [w.x, w.y, w.z],
            translation: [t.x, t.y, t.z],
        }
    }

    /// Row-major 4×4.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[(i, j)];
            }
        }
        out
    }
}

fn check_rigid(m: &Matrix4<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("transform has non-finite entries"));
    }
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::domain(format!("bottom row must be (0,0,0,1), got {bottom:?}")));
    }
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHO_TOL {
        return Err(Error::domain(format!("rotation block is not orthonormal (error {err:.3e})")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::domain(format!("rotation block has determinant {det}")));
    }
    Ok(())
}

/// Coefficients `(sinθ/θ, (1−cosθ)/θ²)` of the exponential map.
fn rodrigues_coeffs(theta2: f64) -> (f64, f64) {
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let th = theta2.sqrt();
        let s = (0.5 * th).sin();
        (th.sin() / th, 2.0 * s * s / theta2)
    }
}

pub fn rotation_from_axis_angle(r: [f64; 3]) -> Matrix3<f64> {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b) = rodrigues_coeffs(theta2);
    let k = Matrix3::new(0.0, -r[2], r[1], r[2], 0.0, -r[0], -r[1], r[0], 0.0);
    Matrix3::identity() + k * a + k * k * b
}

pub fn axis_angle_to_se3(pose: &Pose6) -> Result<Se3> {
    if !pose.is_finite() {
        return Err(Error::domain(format!("pose has non-finite entries: {pose:?}")));
    }
    let r = rotation_from_axis_angle(pose.rotation);
    Ok(Se3::from_parts(r, Vector3::from(pose.translation)))
}

pub fn se3_compose(a: &Matrix4<f64>, b: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    check_rigid(a)?;
    check_rigid(b)?;
    Ok(a * b)
}

pub fn se3_inverse(a: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    Ok(Se3::from_matrix(*a)?.inverse().0)
}

/// Geodesic angle of a rotation matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = 0.5 * (r.trace() - 1.0);
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * w.norm()).atan2(c)
}

pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> Result<(PointCloud, ValidityMask)> {
    k.check_size(depth.height, depth.width)?;
    let (h, w) = (depth.height, depth.width);
    let mut points = Vec::with_capacity(h * w);
    let mut mask = ValidityMask::full(h, w, true);
    for y in 0..h {
        for x in 0..w {
            let z = depth.at(y, x);
            if !(z > 0.0 && z.is_finite()) {
                mask.data[y * w + x] = false;
            }
            points.push([(x as f64 - k.cx) * z / k.fx, (y as f64 - k.cy) * z / k.fy, z]);
        }
    }
    Ok((PointCloud { height: h, width: w, points }, mask))
}

fn in_bounds(u: f64, v: f64, k: &CameraIntrinsics) -> bool {
    u >= -BOUND_TOL
        && v >= -BOUND_TOL
        && u <= k.width as f64 - 1.0 + BOUND_TOL
        && v <= k.height as f64 - 1.0 + BOUND_TOL
}

/// Projects camera-frame points. Points at or behind the camera get NaN
/// coordinates and a false mask entry.
pub fn project(points: &PointCloud, k: &CameraIntrinsics) -> (PixelCoords, ValidityMask) {
    let n = points.points.len();
    let mut coords = PixelCoords {
        height: points.height,
        width: points.width,
        u: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
    };
    let mut mask = ValidityMask::full(points.height, points.width, false);
    for (i, p) in points.points.iter().enumerate() {
        if !(p[2] > BEHIND_EPS) {
            coords.u.push(f64::NAN);
            coords.v.push(f64::NAN);
            continue;
        }
        let u = k.fx * p[0] / p[2] + k.cx;
        let v = k.fy * p[1] / p[2] + k.cy;
        coords.u.push(u);
        coords.v.push(v);
        mask.data[i] = in_bounds(u, v, k);
    }
    (coords, mask)
}

/// Rotation entries `R[i][j]` and translation entries of a `[B,6]` pose
/// tensor, each shaped `[B,1,1,1]`.
pub struct RigidTensors {
    pub r: [[Tensor; 3]; 3],
    pub t: [Tensor; 3],
}

/// Differentiable exponential map over a batch of `[rx,ry,rz,tx,ty,tz]`.
pub fn rigid_from_pose_tensor(pose: &Tensor) -> RigidTensors {
    let b = pose.shape()[0];
    assert_eq!(pose.shape(), &[b, 6]);
    let c: Vec<Tensor> = (0..6).map(|i| pose.narrow(1, i, 1).reshape(&[b, 1, 1, 1])).collect();
    let (rx, ry, rz) = (&c[0], &c[1], &c[2]);
    let theta2 = rx.sqr().add(&ry.sqr()).add(&rz.sqr());
    let small: Vec<bool> = theta2.data().iter().map(|&t| t < SMALL_ANGLE * SMALL_ANGLE).collect();
    let safe = Tensor::select(&small, &Tensor::full(&[b, 1, 1, 1], 1.0), &theta2);
    let th = safe.sqrt();
    let half_sin = th.scale(0.5).sin();
    let a_exact = th.sin().div(&th);
    let b_exact = half_sin.sqr().scale(2.0).div(&safe);
    let a = Tensor::select(&small, &theta2.affine(-1.0 / 6.0, 1.0), &a_exact);
    let bb = Tensor::select(&small, &theta2.affine(-1.0 / 24.0, 0.5), &b_exact);

    let r = [rx, ry, rz];
    let kmat = |i: usize, j: usize| -> Option<Tensor> {
        match (i, j) {
            (0, 1) => Some(rz.neg()),
            (0, 2) => Some(ry.clone()),
            (1, 0) => Some(rz.clone()),
            (1, 2) => Some(rx.neg()),
            (2, 0) => Some(ry.neg()),
            (2, 1) => Some(rx.clone()),
            _ => None,
        }
    };
    let entry = |i: usize, j: usize| -> Tensor {
        let outer = r[i].mul(r[j]);
        let mut e = if i == j {
            bb.mul(&outer.sub(&theta2)).add_scalar(1.0)
        } else {
            bb.mul(&outer)
        };
        if let Some(kij) = kmat(i, j) {
            e = e.add(&a.mul(&kij));
        }
        e
    };
    RigidTensors {
        r: [
            [entry(0, 0), entry(0, 1), entry(0, 2)],
            [entry(1, 0), entry(1, 1), entry(1, 2)],
            [entry(2, 0), entry(2, 1), entry(2, 2)],
        ],
        t: [c[3].clone(), c[4].clone(), c[5].clone()],
    }
}

/// Output of the tensor warp.
pub struct Warped {
    /// `[B,C,H,W]`, zero where invalid.
    pub image: Tensor,
    /// `[B,1,H,W]` constant 0/1 tensor.
    pub mask: Tensor,
    pub valid: Vec<bool>,
}

/// Samples `src` at the reprojection of target pixels with depth `depth`
/// moved by `pose` (target camera to source camera).
pub fn inverse_warp_tensor(
    src: &Tensor,
    depth: &Tensor,
    pose: &Tensor,
    k: &CameraIntrinsics,
) -> Result<Warped> {
    let (b, _, h, w) = src.dims4();
    if depth.dims4() != (b, 1, h, w) {
        return Err(Error::domain(format!(
            "depth shape {:?} does not match source {:?}",
            depth.shape(),
            src.shape()
        )));
    }
    if pose.shape() != [b, 6] {
        return Err(Error::domain(format!("pose shape {:?}, expected [{b}, 6]", pose.shape())));
    }
    k.check_size(h, w)?;
    let mut xn = Vec::with_capacity(h * w);
    let mut yn = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            xn.push((x as f64 - k.cx) / k.fx);
            yn.push((y as f64 - k.cy) / k.fy);
        }
    }
    let xn = Tensor::from_vec(xn, &[1, 1, h, w]);
    let yn = Tensor::from_vec(yn, &[1, 1, h, w]);
    let p = [xn.mul(depth), yn.mul(depth), depth.clone()];
    let rt = rigid_from_pose_tensor(pose);
    let q: Vec<Tensor> = (0..3)
        .map(|i| {
            rt.r[i][0]
                .mul(&p[0])
                .add(&rt.r[i][1].mul(&p[1]))
                .add(&rt.r[i][2].mul(&p[2]))
                .add(&rt.t[i])
        })
        .collect();
    let front: Vec<bool> = q[2].data().iter().map(|&z| z > BEHIND_EPS).collect();
    let z = Tensor::select(&front, &q[2], &Tensor::full(&[b, 1, h, w], 1.0));
    let u = q[0].div(&z).affine(k.fx, k.cx);
    let v = q[1].div(&z).affine(k.fy, k.cy);
    let valid: Vec<bool> = (0..b * h * w)
        .map(|i| front[i] && depth.data()[i] > 0.0 && in_bounds(u.data()[i], v.data()[i], k))
        .collect();
    let mask = Tensor::from_vec(
        valid.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        &[b, 1, h, w],
    );
    let image = Tensor::bilinear_sample(src, &u, &v).mul(&mask);
    Ok(Warped { image, mask, valid })
}

pub fn inverse_warp(
    src: &Image,
    tgt_depth: &DepthMap,
    relpose: &Pose6,
    k: &CameraIntrinsics,
) -> Result<(Image, ValidityMask)> {
    if (src.height, src.width) != (tgt_depth.height, tgt_depth.width) {
        return Err(Error::domain(format!(
            "source image {}x{} and depth {}x{} differ",
            src.height, src.width, tgt_depth.height, tgt_depth.width
        )));
    }
    if !relpose.is_finite() {
        return Err(Error::domain("relative pose has non-finite entries"));
    }
    let pose = Tensor::from_vec(relpose.to_array().to_vec(), &[1, 6]);
    let out = inverse_warp_tensor(&src.to_tensor(), &tgt_depth.to_tensor(), &pose, k)?;
    let image = Image::unbatch(&out.image).remove(0);
    let mask = ValidityMask {
        height: src.height,
        width: src.width,
        data: out.valid,
    };
    Ok((image, mask))
}

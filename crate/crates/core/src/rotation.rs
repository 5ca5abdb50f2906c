//! SO(3) helpers: axis-angle, rotation matrices, the continuous 6-D
//! representation and the geodesic distance.

use gelina_tensor::Scalar;

use crate::error::{Error, Result};

/// Rotation vector: unit axis scaled by the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle<T>(pub [T; 3]);

/// First two columns of a rotation matrix, column after column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D<T>(pub [T; 6]);

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix<T>(pub [[T; 3]; 3]);

/// Minimum angle between the two Rot6D vectors before Gram-Schmidt is refused.
pub const MIN_ROT6D_ANGLE: f64 = 1e-6;

impl<T: Scalar> AxisAngle<T> {
    pub fn angle(&self) -> T {
        norm(&self.0)
    }

    /// Equivalent rotation vector with angle in `[0, π]`.
    pub fn canonical(&self) -> Self {
        let theta = self.angle();
        let two_pi = T::PI() + T::PI();
        let wrapped = theta % two_pi;
        if theta == T::zero() || wrapped == theta && theta <= T::PI() {
            return *self;
        }
        let axis = scale(&self.0, T::one() / theta);
        let (angle, axis) = if wrapped > T::PI() {
            (two_pi - wrapped, scale(&axis, -T::one()))
        } else {
            (wrapped, axis)
        };
        Self(scale(&axis, angle))
    }
}

impl<T: Scalar> RotationMatrix<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self([[o, z, z], [z, o, z], [z, z, o]])
    }

    /// Rotation by `theta` about the z axis.
    pub fn about_z(theta: T) -> Self {
        let (c, s, o, z) = (theta.cos(), theta.sin(), T::one(), T::zero());
        Self([[c, -s, z], [s, c, z], [z, z, o]])
    }

    pub fn column(&self, j: usize) -> [T; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn from_columns(c0: [T; 3], c1: [T; 3], c2: [T; 3]) -> Self {
        Self([
            [c0[0], c1[0], c2[0]],
            [c0[1], c1[1], c2[1]],
            [c0[2], c1[2], c2[2]],
        ])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Self(out)
    }

    pub fn trace(&self) -> T {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Orthonormal with determinant +1 within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let p = self.transpose().mul(self);
        let id = Self::identity();
        let orth = (0..3).all(|i| (0..3).all(|j| (p.0[i][j] - id.0[i][j]).abs().as_f64() <= tol));
        orth && (self.det().as_f64() - 1.0).abs() <= tol
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut m = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        m
    }
}

/// Rodrigues' formula. The zero vector maps to the identity.
pub fn axis_angle_to_matrix<T: Scalar>(aa: AxisAngle<T>) -> RotationMatrix<T> {
    let theta = aa.angle();
    if theta == T::zero() {
        return RotationMatrix::identity();
    }
    let k = scale(&aa.0, T::one() / theta);
    let (s, c) = (theta.sin(), theta.cos());
    let one_c = T::one() - c;
    let skew = [
        [T::zero(), -k[2], k[1]],
        [k[2], T::zero(), -k[0]],
        [-k[1], k[0], T::zero()],
    ];
    let mut out = RotationMatrix::<T>::identity().0;
    for i in 0..3 {
        for j in 0..3 {
            // K² = k kᵀ − I for a unit axis
            let k2 = k[i] * k[j] - if i == j { T::one() } else { T::zero() };
            out[i][j] += s * skew[i][j] + one_c * k2;
        }
    }
    RotationMatrix(out)
}

pub fn matrix_to_rot6d<T: Scalar>(r: &RotationMatrix<T>) -> Rot6D<T> {
    let (a, b) = (r.column(0), r.column(1));
    Rot6D([a[0], a[1], a[2], b[0], b[1], b[2]])
}

/// Gram-Schmidt of the two stored columns; the third column is their cross product.
pub fn rot6d_to_matrix<T: Scalar>(r: &Rot6D<T>) -> Result<RotationMatrix<T>> {
    let (b1, b2, _, _) = gram_schmidt(r)?;
    Ok(RotationMatrix::from_columns(b1, b2, cross(&b1, &b2)))
}

/// Returns `(b1, b2, |a1|, |u2|)`.
fn gram_schmidt<T: Scalar>(r: &Rot6D<T>) -> Result<([T; 3], [T; 3], T, T)> {
    let a1 = [r.0[0], r.0[1], r.0[2]];
    let a2 = [r.0[3], r.0[4], r.0[5]];
    if !r.0.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite Rot6D"));
    }
    let n1 = norm(&a1);
    let n2 = norm(&a2);
    let tiny = T::of(1e-12);
    if n1 <= tiny || n2 <= tiny {
        return Err(Error::DegenerateInput("zero-length Rot6D column"));
    }
    let sin_angle = norm(&cross(&a1, &a2)) / (n1 * n2);
    if sin_angle.as_f64() <= MIN_ROT6D_ANGLE {
        return Err(Error::DegenerateInput("collinear Rot6D columns"));
    }
    let b1 = scale(&a1, T::one() / n1);
    let proj = dot(&b1, &a2);
    let u2 = sub(&a2, &scale(&b1, proj));
    let nu = norm(&u2);
    Ok((b1, scale(&u2, T::one() / nu), n1, nu))
}

/// Angle of `aᵀb`, via the clamped trace formula; always in `[0, π]`.
pub fn geodesic_distance<T: Scalar>(a: &RotationMatrix<T>, b: &RotationMatrix<T>) -> T {
    let tr: T = (0..3)
        .map(|j| dot(&a.column(j), &b.column(j)))
        .sum();
    let x = ((tr - T::one()) / T::of(2.0)).max(-T::one()).min(T::one());
    x.acos()
}

/// Squared geodesic distance between the rotation decoded from `pred` and `target`,
/// with its gradient w.r.t. the six `pred` values. `None` when `pred` is degenerate.
pub fn geodesic_sq_with_grad<T: Scalar>(
    pred: &Rot6D<T>,
    target: &RotationMatrix<T>,
) -> Option<(T, [T; 6])> {
    let (b1, b2, n1, nu) = gram_schmidt(pred).ok()?;
    let b3 = cross(&b1, &b2);
    let (r1, r2, r3) = (target.column(0), target.column(1), target.column(2));
    let tr = dot(&r1, &b1) + dot(&r2, &b2) + dot(&r3, &b3);
    let two = T::of(2.0);
    let x_raw = (tr - T::one()) / two;
    let x = x_raw.max(-T::one()).min(T::one());
    let theta = x.acos();
    let value = theta * theta;

    // d(θ²)/dx = −2θ / sin θ, with the θ → 0 limit −2.
    let dfdx = if theta.as_f64() < 1e-6 {
        -two
    } else {
        -two * theta / theta.sin().max(T::of(1e-6))
    };
    let gtr = if x_raw > T::one() || x_raw < -T::one() {
        T::zero()
    } else {
        dfdx / two
    };
    let g3 = scale(&r3, gtr);
    let mut gb1 = add(&scale(&r1, gtr), &cross(&b2, &g3));
    let gb2 = add(&scale(&r2, gtr), &cross(&g3, &b1));

    // b2 = u2 / |u2|
    let gu2 = scale(&sub(&gb2, &scale(&b2, dot(&b2, &gb2))), T::one() / nu);
    // u2 = a2 − (b1·a2) b1
    let a2 = [pred.0[3], pred.0[4], pred.0[5]];
    let proj = dot(&b1, &a2);
    let ga2 = sub(&gu2, &scale(&b1, dot(&b1, &gu2)));
    gb1 = sub(&gb1, &add(&scale(&gu2, proj), &scale(&a2, dot(&b1, &gu2))));
    // b1 = a1 / |a1|
    let ga1 = scale(&sub(&gb1, &scale(&b1, dot(&b1, &gb1))), T::one() / n1);
    Some((
        value,
        [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]],
    ))
}

pub(crate) fn dot<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm<T: Scalar>(a: &[T; 3]) -> T {
    dot(a, a).sqrt()
}

fn scale<T: Scalar>(a: &[T; 3], s: T) -> [T; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Uniformly distributed rotation from three uniforms in `[0,1)` (Shoemake).
pub fn rotation_from_uniforms<T: Scalar>(u: [f64; 3]) -> RotationMatrix<T> {
    use std::f64::consts::PI;
    let (s1, s2) = ((1.0 - u[0]).sqrt(), u[0].sqrt());
    let (t1, t2) = (2.0 * PI * u[1], 2.0 * PI * u[2]);
    let (w, x, y, z) = (s2 * t2.cos(), s1 * t1.sin(), s1 * t1.cos(), s2 * t2.sin());
    let m = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    RotationMatrix(m.map(|r| r.map(T::of)))
}

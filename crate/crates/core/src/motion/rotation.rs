use num_traits::Float;

use crate::error::{Error, Result};

/// Norm below which a 6D seed vector counts as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

/// Row-major 3x3 matrix.
pub type Mat3<T = f64> = [[T; 3]; 3];
pub type Vec3<T = f64> = [T; 3];

/// Continuous 6D rotation parameterization: two 3-vectors that Gram-Schmidt
/// into the first two columns of a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    pub a: Vec3,
    pub b: Vec3,
}

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D { a: [1.0, 0.0, 0.0], b: [0.0, 1.0, 0.0] };

    pub fn from_slice(v: &[f64]) -> Self {
        Self { a: [v[0], v[1], v[2]], b: [v[3], v[4], v[5]] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.a[0], self.a[1], self.a[2], self.b[0], self.b[1], self.b[2]]
    }

    /// Inverse of `rot6d_to_matrix` on proper rotations: the first two columns.
    pub fn from_matrix(m: &Mat3) -> Self {
        Self { a: [m[0][0], m[1][0], m[2][0]], b: [m[0][1], m[1][1], m[2][1]] }
    }
}

pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Mat3> {
    gram_schmidt(&r.a, &r.b).map(|gs| gs.matrix())
}

#[inline]
pub(crate) fn dot<T: Float>(u: &Vec3<T>, v: &Vec3<T>) -> T {
    u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
}

#[inline]
pub(crate) fn cross<T: Float>(u: &Vec3<T>, v: &Vec3<T>) -> Vec3<T> {
    [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
}

#[inline]
pub(crate) fn matmul3<T: Float>(x: &Mat3<T>, y: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = x[i][0] * y[0][j] + x[i][1] * y[1][j] + x[i][2] * y[2][j];
        }
    }
    out
}

#[inline]
pub(crate) fn matvec3<T: Float>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

/// Intermediate values of the Gram-Schmidt construction, kept for the
/// reverse pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GramSchmidt<T> {
    pub c1: Vec3<T>,
    pub c2: Vec3<T>,
    pub c3: Vec3<T>,
    pub b: Vec3<T>,
    pub norm_a: T,
    pub norm_u: T,
}

pub(crate) fn gram_schmidt<T: Float>(a: &Vec3<T>, b: &Vec3<T>) -> Result<GramSchmidt<T>> {
    let eps = T::from(DEGENERATE_EPS).unwrap();
    let norm_a = dot(a, a).sqrt();
    if !(norm_a >= eps) {
        return Err(Error::DegenerateRotation(format!(
            "|a| = {:e} below {DEGENERATE_EPS:e}",
            norm_a.to_f64().unwrap_or(f64::NAN)
        )));
    }
    let c1 = [a[0] / norm_a, a[1] / norm_a, a[2] / norm_a];
    let proj = dot(b, &c1);
    let u = [b[0] - proj * c1[0], b[1] - proj * c1[1], b[2] - proj * c1[2]];
    let norm_u = dot(&u, &u).sqrt();
    if !(norm_u >= eps) {
        return Err(Error::DegenerateRotation(format!(
            "b is parallel to a (residual {:e})",
            norm_u.to_f64().unwrap_or(f64::NAN)
        )));
    }
    let c2 = [u[0] / norm_u, u[1] / norm_u, u[2] / norm_u];
    let c3 = cross(&c1, &c2);
    Ok(GramSchmidt { c1, c2, c3, b: *b, norm_a, norm_u })
}

impl<T: Float> GramSchmidt<T> {
    pub fn matrix(&self) -> Mat3<T> {
        let mut m = [[T::zero(); 3]; 3];
        for i in 0..3 {
            m[i][0] = self.c1[i];
            m[i][1] = self.c2[i];
            m[i][2] = self.c3[i];
        }
        m
    }

    /// Pulls a gradient on the output matrix back to the 6D inputs `(a, b)`.
    pub fn backward(&self, grad: &Mat3<T>) -> (Vec3<T>, Vec3<T>) {
        let col = |j: usize| [grad[0][j], grad[1][j], grad[2][j]];
        let (mut g1, mut g2, g3) = (col(0), col(1), col(2));

        // c3 = c1 x c2
        let d1 = cross(&self.c2, &g3);
        let d2 = cross(&g3, &self.c1);
        for i in 0..3 {
            g1[i] = g1[i] + d1[i];
            g2[i] = g2[i] + d2[i];
        }

        // c2 = u / |u|
        let s2 = dot(&self.c2, &g2);
        let gu: Vec3<T> = std::array::from_fn(|i| (g2[i] - self.c2[i] * s2) / self.norm_u);

        // u = b - (b.c1) c1
        let s_u = dot(&self.c1, &gu);
        let proj = dot(&self.b, &self.c1);
        let gb: Vec3<T> = std::array::from_fn(|i| gu[i] - self.c1[i] * s_u);
        for i in 0..3 {
            g1[i] = g1[i] - self.b[i] * s_u - gu[i] * proj;
        }

        // c1 = a / |a|
        let s1 = dot(&self.c1, &g1);
        let ga: Vec3<T> = std::array::from_fn(|i| (g1[i] - self.c1[i] * s1) / self.norm_a);
        (ga, gb)
    }
}

//! Gaussian primitive math: rotation, covariance, screen-space projection,
//! density and spherical-harmonic color, each with its vector-Jacobian
//! product.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::*;

/// Primitives closer to the camera than this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Low-pass floor added to the diagonal of every screen-space covariance (px²).
pub const COVARIANCE_FLOOR: f64 = 0.3;
/// Screen covariances with determinant at or below this are culled.
pub const MIN_DETERMINANT: f64 = 1e-12;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Learnable per-primitive parameters in canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    /// N×3
    pub mu_canonical: Tensor,
    /// N×4, (w, x, y, z); not necessarily unit length
    pub rotation: Tensor,
    /// N×3
    pub log_scale: Tensor,
    /// N×1
    pub opacity_logit: Tensor,
    /// N×B×3
    pub sh_coeffs: Tensor,
}

impl GaussianField {
    pub fn count(&self) -> usize {
        self.mu_canonical.shape()[0]
    }

    pub fn sh_bases(&self) -> usize {
        self.sh_coeffs.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        let b = self.sh_coeffs.shape().get(1).copied().unwrap_or(0);
        let expect: [(&str, &Tensor, Vec<usize>); 5] = [
            ("mu_canonical", &self.mu_canonical, vec![n, 3]),
            ("rotation", &self.rotation, vec![n, 4]),
            ("log_scale", &self.log_scale, vec![n, 3]),
            ("opacity_logit", &self.opacity_logit, vec![n, 1]),
            ("sh_coeffs", &self.sh_coeffs, vec![n, b, 3]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "field {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        sh_degree_for(b)?;
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pinhole camera. View space is x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rotation block of the world-to-view transform.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("camera image size must be nonzero".into()));
        }
        let rtr = mat3_mul(&transpose3(&rotation), &rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-9 {
                    return Err(Error::Config("camera rotation block is not orthonormal".into()));
                }
            }
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, with world `up` pointing to the
    /// top of the image. Principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = normalize3(sub3(target, eye)).ok_or_else(|| Error::Config("camera eye equals target".into()))?;
        let right = normalize3(cross3(forward, up))
            .ok_or_else(|| Error::Config("camera up is parallel to view direction".into()))?;
        let down = cross3(forward, right);
        let rotation = [right, down, forward];
        let translation = scale3(mat3_vec(&rotation, eye), -1.0);
        Camera::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn world_to_view(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn to_view(&self, p: Vec3) -> Vec3 {
        add3(mat3_vec(&self.rotation, p), self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        scale3(mat3t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn project(&self, v: Vec3) -> Vec2 {
        [self.fx * v[0] / v[2] + self.cx, self.fy * v[1] / v[2] + self.cy]
    }

    /// Pinhole Jacobian at view-space point `v`.
    pub fn jacobian(&self, v: Vec3) -> [[f64; 3]; 2] {
        let [x, y, z] = v;
        [
            [self.fx / z, 0.0, -self.fx * x / (z * z)],
            [0.0, self.fy / z, -self.fy * y / (z * z)],
        ]
    }
}

/// Unit-normalizing quaternion to rotation matrix.
pub fn quat_to_rotmat(q: Quat) -> Result<Mat3> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!("quaternion {q:?} has no direction")));
    }
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// VJP of `quat_to_rotmat` including the normalization.
pub fn quat_to_rotmat_vjp(q: Quat, g: &Mat3) -> Quat {
    let n = quat_norm(q);
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let gy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let gz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    normalize_vjp(q, [gw, gx, gy, gz])
}

/// VJP of `q ↦ q / |q|`.
pub fn normalize_vjp(q: Quat, g: Quat) -> Quat {
    let n = quat_norm(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let d = u[0] * g[0] + u[1] * g[1] + u[2] * g[2] + u[3] * g[3];
    [
        (g[0] - u[0] * d) / n,
        (g[1] - u[1] * d) / n,
        (g[2] - u[2] * d) / n,
        (g[3] - u[3] * d) / n,
    ]
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_s))`.
pub fn build_covariance(q: Quat, log_s: Vec3) -> Result<Mat3> {
    let r = quat_to_rotmat(q)?;
    let s = [log_s[0].exp(), log_s[1].exp(), log_s[2].exp()];
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = dot3(m[i], m[j]);
            sigma[i][j] = v;
            sigma[j][i] = v;
        }
    }
    Ok(sigma)
}

/// VJP of `build_covariance`, returning `(dq, dlog_s)`.
pub fn build_covariance_vjp(q: Quat, log_s: Vec3, g: &Mat3) -> Result<(Quat, Vec3)> {
    let r = quat_to_rotmat(q)?;
    let s = [log_s[0].exp(), log_s[1].exp(), log_s[2].exp()];
    // Σ = M Mᵀ, M = R S  ⇒  dM = (G + Gᵀ) M
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    let mut gs = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gs[i][j] = g[i][j] + g[j][i];
        }
    }
    let dm = mat3_mul(&gs, &m);
    let mut dr = [[0.0; 3]; 3];
    let mut dlog = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            dr[i][j] = dm[i][j] * s[j];
            dlog[j] += dm[i][j] * r[i][j] * s[j];
        }
    }
    Ok((quat_to_rotmat_vjp(q, &dr), dlog))
}

/// `Σ' = J Wr Σ Wrᵀ Jᵀ + floor·I`, or `None` when the point is behind the
/// near plane.
pub fn project_covariance(sigma: &Mat3, mean_view: Vec3, cam: &Camera) -> Option<Mat2> {
    if mean_view[2] <= NEAR_PLANE {
        return None;
    }
    let t = jw(cam, mean_view);
    let mut out = [[0.0; 2]; 2];
    for a in 0..2 {
        let ts = mat3t_vec(sigma, t[a]);
        for b in 0..2 {
            out[a][b] = dot3(ts, t[b]);
        }
    }
    out[0][0] += COVARIANCE_FLOOR;
    out[1][1] += COVARIANCE_FLOOR;
    // exact symmetry
    out[1][0] = out[0][1];
    Some(out)
}

fn jw(cam: &Camera, mean_view: Vec3) -> [Vec3; 2] {
    let j = cam.jacobian(mean_view);
    // rows of J·Wr are Wrᵀ applied to rows of J
    [mat3t_vec(&cam.rotation, j[0]), mat3t_vec(&cam.rotation, j[1])]
}

/// VJP of `project_covariance` with respect to `(Σ, mean_view)`. `g` is the
/// upstream gradient over all four entries of `Σ'`.
pub fn project_covariance_vjp(sigma: &Mat3, mean_view: Vec3, cam: &Camera, g: &Mat2) -> (Mat3, Vec3) {
    let t = jw(cam, mean_view);
    // dΣ = Tᵀ G T
    let mut dsigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut v = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    v += t[a][i] * g[a][b] * t[b][j];
                }
            }
            dsigma[i][j] = v;
        }
    }
    // dT = (G + Gᵀ) T Σ
    let gs = [[2.0 * g[0][0], g[0][1] + g[1][0]], [g[0][1] + g[1][0], 2.0 * g[1][1]]];
    let ts = [mat3t_vec(sigma, t[0]), mat3t_vec(sigma, t[1])];
    let mut dt = [[0.0; 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            dt[a][k] = gs[a][0] * ts[0][k] + gs[a][1] * ts[1][k];
        }
    }
    // T = J Wr  ⇒  dJ = dT Wrᵀ
    let dj = [mat3_vec(&cam.rotation, dt[0]), mat3_vec(&cam.rotation, dt[1])];
    let [x, y, z] = mean_view;
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let dx = dj[0][2] * (-fx / z2);
    let dy = dj[1][2] * (-fy / z2);
    let dz =
        dj[0][0] * (-fx / z2) + dj[0][2] * (2.0 * fx * x / z3) + dj[1][1] * (-fy / z2) + dj[1][2] * (2.0 * fy * y / z3);
    (dsigma, [dx, dy, dz])
}

pub fn invert2(m: &Mat2) -> Option<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(det > MIN_DETERMINANT) {
        return None;
    }
    let inv = 1.0 / det;
    Some([[m[1][1] * inv, -m[0][1] * inv], [-m[1][0] * inv, m[0][0] * inv]])
}

/// VJP of the 2×2 inverse: `dM = −M⁻ᵀ G M⁻ᵀ`.
pub fn invert2_vjp(inv: &Mat2, g: &Mat2) -> Mat2 {
    let it = [[inv[0][0], inv[1][0]], [inv[0][1], inv[1][1]]];
    let mut tmp = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            tmp[i][j] = it[i][0] * g[0][j] + it[i][1] * g[1][j];
        }
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = -(tmp[i][0] * it[0][j] + tmp[i][1] * it[1][j]);
        }
    }
    out
}

/// Unnormalized Gaussian `exp(−½ dᵀ Σ'⁻¹ d)`.
#[inline]
pub fn eval_density(d: Vec2, conic: &Mat2) -> f64 {
    (-0.5 * quad_form(d, conic)).exp()
}

#[inline]
pub fn quad_form(d: Vec2, m: &Mat2) -> f64 {
    d[0] * (m[0][0] * d[0] + m[0][1] * d[1]) + d[1] * (m[1][0] * d[0] + m[1][1] * d[1])
}

fn sh_degree_for(bases: usize) -> Result<usize> {
    match bases {
        1 => Ok(0),
        4 => Ok(1),
        b => Err(Error::Config(format!(
            "unsupported spherical-harmonic basis count {b} (expected 1 or 4)"
        ))),
    }
}

fn sh_basis(bases: usize, dir: Vec3) -> [f64; 4] {
    let [x, y, z] = dir;
    if bases == 1 {
        [SH_C0, 0.0, 0.0, 0.0]
    } else {
        [SH_C0, -SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    }
}

/// RGB from `coeffs` (B×3, row-major) viewed along unit `dir`.
pub fn eval_sh_color(coeffs: &[f64], dir: Vec3) -> Result<Vec3> {
    let bases = coeffs.len() / 3;
    if !coeffs.len().is_multiple_of(3) {
        return Err(Error::Config("SH coefficient count is not a multiple of 3".into()));
    }
    sh_degree_for(bases)?;
    Ok(sh_color_unclamped(coeffs, dir).map(|c| c.max(0.0)))
}

fn sh_color_unclamped(coeffs: &[f64], dir: Vec3) -> Vec3 {
    let bases = coeffs.len() / 3;
    let basis = sh_basis(bases, dir);
    let mut rgb = [0.5; 3];
    for (k, b) in basis.iter().enumerate().take(bases) {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b * coeffs[k * 3 + c];
        }
    }
    rgb
}

/// VJP of `eval_sh_color`; returns `(dcoeffs, ddir)`.
pub fn eval_sh_color_vjp(coeffs: &[f64], dir: Vec3, g: Vec3) -> (Vec<f64>, Vec3) {
    let bases = coeffs.len() / 3;
    let raw = sh_color_unclamped(coeffs, dir);
    let g = [0, 1, 2].map(|c| if raw[c] > 0.0 { g[c] } else { 0.0 });
    let basis = sh_basis(bases, dir);
    let mut dcoeffs = vec![0.0; coeffs.len()];
    for k in 0..bases {
        for c in 0..3 {
            dcoeffs[k * 3 + c] = basis[k] * g[c];
        }
    }
    let mut ddir = [0.0; 3];
    if bases == 4 {
        for c in 0..3 {
            ddir[1] += -SH_C1 * coeffs[3 + c] * g[c];
            ddir[2] += SH_C1 * coeffs[6 + c] * g[c];
            ddir[0] += -SH_C1 * coeffs[9 + c] * g[c];
        }
    }
    (dcoeffs, ddir)
}

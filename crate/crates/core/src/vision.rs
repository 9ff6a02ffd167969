//! Visual update: triangulation, reprojection Jacobians, the Jacobian-space
//! equivalent model and Schur-complement elimination of landmarks.
//!
//! Stacking all reprojection residuals `r = H_x δX + H_f δξ + n` and projecting
//! onto `[H_x H_f]ᵀ` gives the normal-equation blocks
//!
//! ```text
//! b1 = H_xᵀ r   C1 = H_xᵀ H_x   C2 = H_xᵀ H_f
//! b2 = H_fᵀ r   C3 = H_fᵀ H_f
//! ```
//!
//! Eliminating `δξ` leaves `b1 - C2 C3⁻¹ b2 = (C1 - C2 C3⁻¹ C2ᵀ) δX + n''` with
//! `cov(n'') = (C1 - C2 C3⁻¹ C2ᵀ) u²`. `C3` is block diagonal (one 3×3 block per
//! landmark) so the elimination is a sum of independent per-landmark terms and
//! costs nothing that grows with the length of the run.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geometry::{skew, Transform, Vec3};
use crate::state::{ErrorStateLayout as L, FilterState, KeyframeClone, StateError};

/// Points closer than this to the image plane are not projectable, m.
pub const Z_MIN: f64 = 0.05;
/// χ²(2) 95 % quantile.
pub const CHI2_2_95: f64 = 5.991;
/// Minimum angle between two viewing rays for triangulation.
pub const MIN_PARALLAX_RAD: f64 = std::f64::consts::PI / 180.0;
const MAX_GN_ITERATIONS: usize = 20;
const MAX_STEP_HALVINGS: i32 = 10;
const SEED_DEPTHS: [f64; 5] = [0.5, 1.0, 3.0, 10.0, 30.0];
const C3_MAX_CONDITION: f64 = 1e10;
/// Eigenvalues of `H_eff` below this fraction of the largest are treated as null.
const NULL_EIGEN_FRACTION: f64 = 1e-9;

pub type Mat2x3 = SMatrix<f64, 2, 3>;
pub type Mat2x6 = SMatrix<f64, 2, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("point is behind the camera (depth {0} m)")]
    BehindCamera(f64),
    #[error("track {0} has insufficient parallax")]
    InsufficientParallax(u64),
    #[error("track {0} has fewer than two usable observations")]
    TooFewObservations(u64),
    #[error("keyframe {0} is not in the window")]
    UnknownFrame(u64),
    #[error("landmark {0} is degenerate")]
    DegenerateLandmark(u64),
    #[error("no valid feature tracks")]
    NoValidTracks,
    #[error(transparent)]
    State(#[from] StateError),
}

/// Pinhole camera on undistorted pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { fx: 400.0, fy: 400.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0 }
    }
}

impl CameraModel {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width).contains(&self.cx)
            && (0.0..self.height).contains(&self.cy)
    }

    pub fn project(&self, x_c: &Vec3) -> Result<Vector2<f64>, VisionError> {
        if !(x_c.z > Z_MIN) {
            return Err(VisionError::BehindCamera(x_c.z));
        }
        Ok(Vector2::new(self.fx * x_c.x / x_c.z + self.cx, self.fy * x_c.y / x_c.z + self.cy))
    }

    /// `∂π/∂x_c` at a camera-frame point.
    pub fn projection_jacobian(&self, x_c: &Vec3) -> Mat2x3 {
        let iz = 1.0 / x_c.z;
        Mat2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x_c.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * x_c.y * iz * iz,
        )
    }

    /// Normalized image-plane coordinates `(x/z, y/z, 1)`.
    pub fn unproject(&self, px: &Vector2<f64>) -> Vec3 {
        Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width && px.y < self.height
    }
}

/// Observations `(feature_id, pixel)` of one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub t: f64,
    pub frame_id: u64,
    pub observations: Vec<(u64, Vector2<f64>)>,
}

/// Pixel observations of one feature at successive keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub feature_id: u64,
    pub observations: Vec<(u64, Vector2<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub feature_id: u64,
    pub xi_w: Vec3,
    /// RMS reprojection error after refinement, px.
    pub triangulation_rms: f64,
}

/// Projects a world point through keyframe `clone` and camera extrinsic `t_bc`.
pub fn project(camera: &CameraModel, t_bc: &Transform, clone: &KeyframeClone, xi_w: &Vec3) -> Result<Vector2<f64>, VisionError> {
    camera.project(&clone.camera_pose(t_bc).apply_inverse(xi_w))
}

fn find_clone<'a>(clones: &'a [KeyframeClone], frame_id: u64) -> Result<&'a KeyframeClone, VisionError> {
    clones.iter().find(|c| c.frame_id == frame_id).ok_or(VisionError::UnknownFrame(frame_id))
}

fn reprojection_cost(camera: &CameraModel, poses: &[(Transform, Vector2<f64>)], x: &Vec3) -> Option<f64> {
    let mut cost = 0.0;
    for (pose, z) in poses {
        let px = camera.project(&pose.apply_inverse(x)).ok()?;
        cost += (z - px).norm_squared();
    }
    Some(cost)
}

/// Multi-view DLT followed by Gauss-Newton refinement of the reprojection error.
pub fn triangulate(
    camera: &CameraModel,
    t_bc: &Transform,
    clones: &[KeyframeClone],
    track: &FeatureTrack,
) -> Result<Landmark, VisionError> {
    let id = track.feature_id;
    if track.observations.len() < 2 {
        return Err(VisionError::TooFewObservations(id));
    }
    let poses = track
        .observations
        .iter()
        .map(|(fid, z)| Ok((find_clone(clones, *fid)?.camera_pose(t_bc), *z)))
        .collect::<Result<Vec<_>, VisionError>>()?;

    let rays: Vec<Vec3> = poses
        .iter()
        .map(|(pose, z)| pose.rotation.rotate(&camera.unproject(z)).normalize())
        .collect();
    let mut max_cos_angle = 1.0f64;
    for i in 0..rays.len() {
        for j in (i + 1)..rays.len() {
            max_cos_angle = max_cos_angle.min(rays[i].dot(&rays[j]));
        }
    }
    if max_cos_angle > MIN_PARALLAX_RAD.cos() {
        return Err(VisionError::InsufficientParallax(id));
    }

    // Linear DLT on normalized coordinates: x·P₃ - P₁ = 0, y·P₃ - P₂ = 0.
    let mut a = DMatrix::zeros(2 * poses.len(), 4);
    for (k, (pose, z)) in poses.iter().enumerate() {
        let inv = pose.inverse();
        let rm = inv.rotation.matrix();
        let t = inv.translation;
        let n = camera.unproject(z);
        for (row, coord) in [n.x, n.y].iter().enumerate() {
            for c in 0..3 {
                a[(2 * k + row, c)] = coord * rm[(2, c)] - rm[(row, c)];
            }
            a[(2 * k + row, 3)] = coord * t.z - t[row];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(VisionError::InsufficientParallax(id))?;
    let (min_idx, _) = svd.singular_values.argmin();
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-12 {
        return Err(VisionError::InsufficientParallax(id));
    }
    let dlt = Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    // with little parallax the homogeneous solution can flip through infinity;
    // fall back to seeding along the first ray at a few depths
    let (mut x, mut cost) = std::iter::once(dlt)
        .chain(SEED_DEPTHS.iter().map(|d| poses[0].0.translation + rays[0] * *d))
        .filter_map(|x| reprojection_cost(camera, &poses, &x).map(|c| (x, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(VisionError::BehindCamera(0.0))?;

    for _ in 0..MAX_GN_ITERATIONS {
        if cost < 1e-20 {
            break;
        }
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vec3::zeros();
        for (pose, z) in &poses {
            let x_c = pose.apply_inverse(&x);
            let r = z - camera.project(&x_c)?;
            let j = camera.projection_jacobian(&x_c) * pose.rotation.matrix().transpose();
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(step) = jtj.cholesky().map(|c| c.solve(&jtr)) else { break };
        // backtrack until the cost stops increasing; no descent means a minimum
        let accepted = (0..MAX_STEP_HALVINGS).find_map(|k| {
            let candidate = x + step * 0.5f64.powi(k);
            reprojection_cost(camera, &poses, &candidate).filter(|c| *c <= cost).map(|c| (candidate, c))
        });
        let Some((candidate, c)) = accepted else { break };
        let converged = cost - c <= 1e-12 * cost || (candidate - x).norm() <= 1e-12 * x.norm().max(1.0);
        x = candidate;
        cost = c;
        if converged {
            break;
        }
    }
    for (pose, _) in &poses {
        let depth = pose.apply_inverse(&x).z;
        if !(depth > Z_MIN) {
            return Err(VisionError::BehindCamera(depth));
        }
    }
    Ok(Landmark { feature_id: id, xi_w: x, triangulation_rms: (cost / poses.len() as f64).sqrt() })
}

/// Residual and Jacobians of one observation. `h_clone` spans the keyframe's
/// `[δθ, δp]` columns; `h_camera` spans `[δp_bc, δθ_bc]` when camera
/// extrinsics are estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationJacobian {
    pub clone_index: usize,
    pub residual: Vector2<f64>,
    pub h_clone: Mat2x6,
    pub h_camera: Option<Mat2x6>,
    pub h_f: Mat2x3,
}

impl ObservationJacobian {
    /// Column blocks `(offset, 2×6 block)` that are nonzero in `H_x`.
    fn blocks(&self) -> impl Iterator<Item = (usize, &Mat2x6)> {
        std::iter::once((L::clone_offset(self.clone_index), &self.h_clone))
            .chain(self.h_camera.as_ref().map(|h| (L::CAMERA_TRANSLATION, h)))
    }

    pub fn dense_hx(&self, dim: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(2, dim);
        for (off, blk) in self.blocks() {
            h.fixed_view_mut::<2, 6>(0, off).copy_from(blk);
        }
        h
    }
}

/// Reprojection residual `z - ẑ` with `H_x = ∂ẑ/∂δX` and `H_f = ∂ẑ/∂ξ`.
pub fn residual_and_jacobians(
    camera: &CameraModel,
    filter: &FilterState,
    clone_index: usize,
    xi_w: &Vec3,
    z: &Vector2<f64>,
    estimate_camera_extrinsics: bool,
) -> Result<ObservationJacobian, VisionError> {
    let clone = &filter.clones[clone_index];
    let t_bc = &filter.nominal.t_bc;
    let r_wb_t = clone.r_wb.matrix().transpose();
    let r_bc_t = t_bc.rotation.matrix().transpose();
    let xi_b = r_wb_t * (xi_w - clone.p_wb);
    let x_c = r_bc_t * (xi_b - t_bc.translation);
    let predicted = camera.project(&x_c)?;
    let j_pi = camera.projection_jacobian(&x_c);

    let mut h_clone = Mat2x6::zeros();
    h_clone.fixed_view_mut::<2, 3>(0, 0).copy_from(&(j_pi * r_bc_t * skew(&xi_b) * r_wb_t));
    h_clone.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-j_pi * r_bc_t * r_wb_t));
    let h_camera = estimate_camera_extrinsics.then(|| {
        let mut h = Mat2x6::zeros();
        h.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-j_pi * r_bc_t));
        h.fixed_view_mut::<2, 3>(0, 3).copy_from(&(j_pi * r_bc_t * skew(&(xi_b - t_bc.translation))));
        h
    });
    Ok(ObservationJacobian {
        clone_index,
        residual: z - predicted,
        h_clone,
        h_camera,
        h_f: j_pi * r_bc_t * r_wb_t,
    })
}

/// Normal-equation blocks contributed by a single landmark, restricted to the
/// state columns it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBlocks {
    pub feature_id: u64,
    /// Offsets of the 6-column state blocks observed by this landmark.
    pub cols: Vec<usize>,
    pub c1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub c2: DMatrix<f64>,
    pub c3: Matrix3<f64>,
    pub b2: Vec3,
}

impl LandmarkBlocks {
    fn local_index(&self, off: usize) -> usize {
        6 * self.cols.iter().position(|c| *c == off).expect("column block registered")
    }

    /// Scatters a local row index to the global error-state index.
    fn global_index(&self, local: usize) -> usize {
        self.cols[local / 6] + local % 6
    }
}

/// Jacobian-space equivalent observation model over all landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentResidual {
    pub dim: usize,
    pub landmarks: Vec<LandmarkBlocks>,
    pub u_px: f64,
}

/// Accumulates the blocks observation by observation, never forming the stacked `H`.
pub fn build_equivalent_model(dim: usize, tracks: &[(u64, Vec<ObservationJacobian>)], u_px: f64) -> EquivalentResidual {
    let landmarks = tracks
        .iter()
        .map(|(feature_id, obs)| {
            let mut cols: Vec<usize> = Vec::new();
            for o in obs {
                for (off, _) in o.blocks() {
                    if !cols.contains(&off) {
                        cols.push(off);
                    }
                }
            }
            cols.sort_unstable();
            let k = 6 * cols.len();
            let mut lm = LandmarkBlocks {
                feature_id: *feature_id,
                cols,
                c1: DMatrix::zeros(k, k),
                b1: DVector::zeros(k),
                c2: DMatrix::zeros(k, 3),
                c3: Matrix3::zeros(),
                b2: Vec3::zeros(),
            };
            for o in obs {
                for (oa, ha) in o.blocks() {
                    let ia = lm.local_index(oa);
                    for (ob, hb) in o.blocks() {
                        let ib = lm.local_index(ob);
                        let mut v = lm.c1.fixed_view_mut::<6, 6>(ia, ib);
                        v += ha.transpose() * hb;
                    }
                    let mut b = lm.b1.fixed_rows_mut::<6>(ia);
                    b += ha.transpose() * o.residual;
                    let mut c2 = lm.c2.fixed_view_mut::<6, 3>(ia, 0);
                    c2 += ha.transpose() * o.h_f;
                }
                lm.c3 += o.h_f.transpose() * o.h_f;
                lm.b2 += o.h_f.transpose() * o.residual;
            }
            lm
        })
        .collect();
    EquivalentResidual { dim, landmarks, u_px }
}

impl EquivalentResidual {
    pub fn b1(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.dim);
        for lm in &self.landmarks {
            for i in 0..lm.b1.len() {
                b[lm.global_index(i)] += lm.b1[i];
            }
        }
        b
    }

    pub fn c1(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for lm in &self.landmarks {
            scatter_add(&mut c, lm, &lm.c1);
        }
        c
    }

    /// `C2` as a dense `dim × 3L` matrix, landmarks in order.
    pub fn c2(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.dim, 3 * self.landmarks.len());
        for (j, lm) in self.landmarks.iter().enumerate() {
            for i in 0..lm.c2.nrows() {
                for k in 0..3 {
                    c[(lm.global_index(i), 3 * j + k)] = lm.c2[(i, k)];
                }
            }
        }
        c
    }

    pub fn b2(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.landmarks.len(), self.landmarks.iter().flat_map(|l| l.b2.iter().copied()))
    }

    /// Dense block-diagonal `C3`.
    pub fn c3(&self) -> DMatrix<f64> {
        let n = 3 * self.landmarks.len();
        let mut c = DMatrix::zeros(n, n);
        for (j, lm) in self.landmarks.iter().enumerate() {
            c.fixed_view_mut::<3, 3>(3 * j, 3 * j).copy_from(&lm.c3);
        }
        c
    }
}

fn scatter_add(global: &mut DMatrix<f64>, lm: &LandmarkBlocks, local: &DMatrix<f64>) {
    for (bi, &ri) in lm.cols.iter().enumerate() {
        for (bj, &rj) in lm.cols.iter().enumerate() {
            let mut dst = global.fixed_view_mut::<6, 6>(ri, rj);
            dst += local.fixed_view::<6, 6>(6 * bi, 6 * bj);
        }
    }
}

/// Output of the landmark elimination.
#[derive(Debug, Clone)]
pub struct SchurResult {
    pub h_eff: DMatrix<f64>,
    pub r_eff: DVector<f64>,
    /// `H_eff · u²`.
    pub r_cov: DMatrix<f64>,
    /// Per-landmark `C3⁻¹`, `None` for dropped landmarks.
    pub c3_inverses: Vec<Option<Matrix3<f64>>>,
    pub dropped: Vec<u64>,
}

fn invert_c3(c3: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let cond = |m: &Matrix3<f64>| {
        let e = m.symmetric_eigenvalues();
        if e.min() > 0.0 { e.max() / e.min() } else { f64::INFINITY }
    };
    let mut m = *c3;
    if cond(&m) > C3_MAX_CONDITION {
        m += Matrix3::identity() * (1e-8 * c3.trace() / 3.0);
        if cond(&m) > C3_MAX_CONDITION {
            return None;
        }
    }
    m.cholesky().map(|c| c.inverse())
}

/// `r_eff = b1 - C2 C3⁻¹ b2`, `H_eff = C1 - C2 C3⁻¹ C2ᵀ`, `R_eff = H_eff u²`.
/// Degenerate landmarks are dropped individually.
pub fn schur_eliminate(eq: &EquivalentResidual) -> SchurResult {
    let mut h_eff = DMatrix::zeros(eq.dim, eq.dim);
    let mut r_eff = DVector::zeros(eq.dim);
    let mut c3_inverses = Vec::with_capacity(eq.landmarks.len());
    let mut dropped = Vec::new();
    for lm in &eq.landmarks {
        let Some(inv) = invert_c3(&lm.c3) else {
            dropped.push(lm.feature_id);
            c3_inverses.push(None);
            continue;
        };
        let c2_inv = &lm.c2 * DMatrix::from_column_slice(3, 3, inv.as_slice());
        let reduced = &lm.c1 - &c2_inv * lm.c2.transpose();
        scatter_add(&mut h_eff, lm, &reduced);
        let rr = &lm.b1 - &c2_inv * DVector::from_column_slice(lm.b2.as_slice());
        for i in 0..rr.len() {
            r_eff[lm.global_index(i)] += rr[i];
        }
        c3_inverses.push(Some(inv));
    }
    crate::state::symmetrize(&mut h_eff);
    let r_cov = &h_eff * (eq.u_px * eq.u_px);
    SchurResult { h_eff, r_eff, r_cov, c3_inverses, dropped }
}

/// Landmark corrections `δξ_j = C3_j⁻¹ (b2_j - C2_jᵀ δX)`; `None` for dropped landmarks.
pub fn back_substitute_landmarks(eq: &EquivalentResidual, schur: &SchurResult, delta_x: &DVector<f64>) -> Vec<(u64, Option<Vec3>)> {
    eq.landmarks
        .iter()
        .zip(&schur.c3_inverses)
        .map(|(lm, inv)| {
            let d = inv.map(|inv| {
                let mut c2t_dx = Vec3::zeros();
                for i in 0..lm.c2.nrows() {
                    let g = delta_x[lm.global_index(i)];
                    for k in 0..3 {
                        c2t_dx[k] += lm.c2[(i, k)] * g;
                    }
                }
                inv * (lm.b2 - c2t_dx)
            });
            (lm.feature_id, d)
        })
        .collect()
}

/// Whitened row-space form of the equivalent model: `H_c = Λ^½ Vᵀ`,
/// `r_c = Λ^-½ Vᵀ r_eff`, noise `u² I`. It carries the same information as
/// `(H_eff, r_eff, H_eff u²)` but has a nonsingular innovation matrix.
pub fn compress_equivalent(schur: &SchurResult) -> (DMatrix<f64>, DVector<f64>) {
    let dim = schur.h_eff.nrows();
    let active: Vec<usize> = (0..dim).filter(|&i| schur.h_eff.row(i).iter().any(|v| *v != 0.0)).collect();
    if active.is_empty() {
        return (DMatrix::zeros(0, dim), DVector::zeros(0));
    }
    let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| schur.h_eff[(active[i], active[j])]);
    // SVD rather than SymmetricEigen: the latter loses ~1e-3 relative accuracy
    // on the wide spectra typical here. For a symmetric matrix u_k = ±v_k, and
    // the sign picks out the (numerically) negative eigenvalues.
    let svd = sub.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let max = svd.singular_values.max();
    let keep: Vec<usize> = (0..active.len())
        .filter(|&k| max > 0.0 && svd.singular_values[k] > NULL_EIGEN_FRACTION * max && u.column(k).dot(&vt.row(k).transpose()) > 0.0)
        .collect();
    let mut h = DMatrix::zeros(keep.len(), dim);
    let mut r = DVector::zeros(keep.len());
    for (row, &k) in keep.iter().enumerate() {
        let lambda = svd.singular_values[k];
        let v = vt.row(k).transpose();
        let mut proj = 0.0;
        for (i, &gi) in active.iter().enumerate() {
            h[(row, gi)] = lambda.sqrt() * v[i];
            proj += v[i] * schur.r_eff[gi];
        }
        r[row] = proj / lambda.sqrt();
    }
    (h, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualUpdateOptions {
    /// Pixel noise std, px.
    pub u_px: f64,
    pub estimate_camera_extrinsics: bool,
    /// Per-observation χ² gating of outliers.
    pub gate: bool,
}

impl Default for VisualUpdateOptions {
    fn default() -> Self {
        Self { u_px: 1.0, estimate_camera_extrinsics: false, gate: true }
    }
}

/// Statistics of one visual update, consumed by the reliability score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisualReport {
    pub timestamp: f64,
    pub tracks_total: usize,
    pub tracks_used: usize,
    pub observations_total: usize,
    pub observations_inlier: usize,
    /// Per-coordinate RMS of inlier reprojection residuals before the update, px.
    pub reprojection_rms: f64,
    pub measurement_dim: usize,
    pub applied: bool,
}

impl VisualReport {
    pub fn inlier_ratio(&self) -> f64 {
        if self.observations_total == 0 {
            0.0
        } else {
            self.observations_inlier as f64 / self.observations_total as f64
        }
    }
}

/// A linearized visual measurement, not yet applied.
#[derive(Debug, Clone)]
pub struct PreparedVisual {
    pub landmarks: Vec<Landmark>,
    pub equivalent: EquivalentResidual,
    pub schur: SchurResult,
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
    pub report: VisualReport,
}

fn observation_chi2(filter: &FilterState, o: &ObservationJacobian, u_px: f64) -> f64 {
    let off = L::clone_offset(o.clone_index);
    let p = filter.covariance.fixed_view::<6, 6>(off, off).into_owned();
    let mut s: Matrix2<f64> = o.h_clone * p * o.h_clone.transpose() + Matrix2::identity() * (u_px * u_px);
    if let Some(hc) = &o.h_camera {
        let pc = filter.covariance.fixed_view::<6, 6>(L::CAMERA_TRANSLATION, L::CAMERA_TRANSLATION).into_owned();
        let pcx = filter.covariance.fixed_view::<6, 6>(L::CAMERA_TRANSLATION, off).into_owned();
        let cross = hc * pcx * o.h_clone.transpose();
        s += hc * pc * hc.transpose() + cross + cross.transpose();
    }
    s.try_inverse().map(|si| (o.residual.transpose() * si * o.residual)[0]).unwrap_or(f64::INFINITY)
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, c)| if *c > acc.1 { (i, *c) } else { acc })
}

/// Whole-track test on the residual projected onto the left nullspace of `H_f`.
/// Pose error shared by the track is absorbed by the landmark, so this catches
/// outliers that the per-observation test hides inside a loose pose prior.
fn track_consistent(filter: &FilterState, obs: &[ObservationJacobian], u_px: f64) -> bool {
    let m = 2 * obs.len();
    if m <= 3 {
        return true;
    }
    let eq = build_equivalent_model(filter.dim(), &[(0, obs.to_vec())], u_px);
    let lm = &eq.landmarks[0];
    let mut hf = DMatrix::zeros(m, m);
    let mut hx = DMatrix::zeros(m, lm.c1.nrows());
    let mut r = DVector::zeros(m);
    for (i, o) in obs.iter().enumerate() {
        hf.view_mut((2 * i, 0), (2, 3)).copy_from(&o.h_f);
        for (off, blk) in o.blocks() {
            hx.view_mut((2 * i, lm.local_index(off)), (2, 6)).copy_from(blk);
        }
        r.rows_mut(2 * i, 2).copy_from(&o.residual);
    }
    let q = hf.qr().q();
    let n = q.columns(3, m - 3);
    let h_o = n.transpose() * hx;
    let r_o = n.transpose() * r;
    let k = lm.c1.nrows();
    let p = DMatrix::from_fn(k, k, |i, j| filter.covariance[(lm.global_index(i), lm.global_index(j))]);
    let s = &h_o * p * h_o.transpose() + DMatrix::identity(m - 3, m - 3) * (u_px * u_px);
    let Some(chol) = s.cholesky() else { return false };
    let chi2 = r_o.dot(&chol.solve(&r_o));
    let dof = (m - 3) as f64;
    chi2 <= ChiSquared::new(dof).map(|d| d.inverse_cdf(0.95)).unwrap_or(f64::INFINITY)
}

/// Triangulates one track and linearizes its observations, dropping the worst
/// gated observation and re-triangulating until every survivor passes both the
/// per-observation and the whole-track test.
fn linearize_track(
    camera: &CameraModel,
    filter: &FilterState,
    track: &FeatureTrack,
    options: &VisualUpdateOptions,
) -> Result<(Landmark, Vec<ObservationJacobian>, usize), VisionError> {
    let mut track = track.clone();
    let mut rejected = 0;
    loop {
        let lm = triangulate(camera, &filter.nominal.t_bc, &filter.clones, &track)?;
        let obs = track
            .observations
            .iter()
            .map(|(fid, z)| {
                let k = filter.clone_index(*fid).ok_or(VisionError::UnknownFrame(*fid))?;
                residual_and_jacobians(camera, filter, k, &lm.xi_w, z, options.estimate_camera_extrinsics)
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !options.gate {
            return Ok((lm, obs, rejected));
        }
        let chi2: Vec<f64> = obs.iter().map(|o| observation_chi2(filter, o, options.u_px)).collect();
        let worst = if argmax(&chi2).1 > CHI2_2_95 {
            argmax(&chi2).0
        } else if !track_consistent(filter, &obs, options.u_px) {
            argmax(&obs.iter().map(|o| o.residual.norm_squared()).collect::<Vec<_>>()).0
        } else {
            return Ok((lm, obs, rejected));
        };
        track.observations.remove(worst);
        rejected += 1;
        if track.observations.len() < 2 {
            return Err(VisionError::TooFewObservations(track.feature_id));
        }
    }
}

impl PreparedVisual {
    pub fn new(
        filter: &FilterState,
        tracks: &[FeatureTrack],
        camera: &CameraModel,
        options: &VisualUpdateOptions,
        timestamp: f64,
    ) -> Result<Self, VisionError> {
        let mut report = VisualReport { timestamp, tracks_total: tracks.len(), ..Default::default() };
        let mut landmarks = Vec::new();
        let mut linearized = Vec::new();
        let mut sq_sum = 0.0;
        for track in tracks {
            report.observations_total += track.observations.len();
            let Ok((lm, obs, _)) = linearize_track(camera, filter, track, options) else { continue };
            report.observations_inlier += obs.len();
            sq_sum += obs.iter().map(|o| o.residual.norm_squared()).sum::<f64>();
            linearized.push((lm.feature_id, obs));
            landmarks.push(lm);
        }
        if linearized.is_empty() {
            return Err(VisionError::NoValidTracks);
        }
        report.tracks_used = linearized.len();
        report.reprojection_rms = (sq_sum / (2 * report.observations_inlier) as f64).sqrt();
        let equivalent = build_equivalent_model(filter.dim(), &linearized, options.u_px);
        let schur = schur_eliminate(&equivalent);
        let (h, r) = compress_equivalent(&schur);
        report.measurement_dim = h.nrows();
        Ok(Self { landmarks, equivalent, schur, h, r, report })
    }

    /// EKF update with equivalent noise `scale · u² I`. Returns the correction.
    pub fn apply(&mut self, filter: &mut FilterState, scale: f64) -> Result<DVector<f64>, VisionError> {
        if self.h.nrows() == 0 {
            return Ok(DVector::zeros(filter.dim()));
        }
        let u2 = self.equivalent.u_px * self.equivalent.u_px;
        let cov = DMatrix::identity(self.h.nrows(), self.h.nrows()) * (u2 * scale);
        let out = filter.ekf_update(&self.h, &self.r, &cov)?;
        self.report.applied = true;
        Ok(out.correction)
    }
}

/// Full visual update: triangulate, gate, build the equivalent model, eliminate
/// landmarks and apply the EKF update with covariance scaled by `aware_scale`.
pub fn visual_update(
    filter: &mut FilterState,
    tracks: &[FeatureTrack],
    camera: &CameraModel,
    aware_scale: f64,
    options: &VisualUpdateOptions,
) -> Result<VisualReport, VisionError> {
    let mut prepared = PreparedVisual::new(filter, tracks, camera, options, filter.nominal.timestamp)?;
    prepared.apply(filter, aware_scale)?;
    Ok(prepared.report)
}

/// Per-coordinate RMS reprojection error of landmarks over their tracks
/// under the current state.
pub fn reprojection_rms(camera: &CameraModel, filter: &FilterState, landmarks: &HashMap<u64, Vec3>, tracks: &[FeatureTrack]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in tracks {
        let Some(xi) = landmarks.get(&t.feature_id) else { continue };
        for (fid, z) in &t.observations {
            let Some(k) = filter.clone_index(*fid) else { continue };
            if let Ok(px) = project(camera, &filter.nominal.t_bc, &filter.clones[k], xi) {
                sum += (z - px).norm_squared();
                n += 1;
            }
        }
    }
    if n == 0 { 0.0 } else { (sum / (2 * n) as f64).sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, Transform};
    use crate::state::{NominalState, BASE_DIM};

    /// Camera looking along world +x from the origin, body = camera mounting of the simulator.
    fn forward_camera() -> Transform {
        let r_bc = Rotation::from_matrix_unchecked(Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
        Transform::new(r_bc, Vec3::zeros())
    }

    fn clone_at(id: u64, p: Vec3) -> KeyframeClone {
        KeyframeClone { frame_id: id, timestamp: 0.0, r_wb: Rotation::identity(), p_wb: p }
    }

    #[test]
    fn principal_point_on_optical_axis() {
        let cam = CameraModel::default();
        let px = cam.project(&Vec3::new(0.0, 0.0, 3.0)).unwrap();
        assert_eq!(px, Vector2::new(cam.cx, cam.cy));
    }

    #[test]
    fn pinhole_plug_in() {
        let cam = CameraModel { fx: 400.0, fy: 400.0, cx: 320.0, cy: 320.0, width: 640.0, height: 640.0 };
        let clone = clone_at(0, Vec3::zeros());
        let px = project(&cam, &Transform::identity(), &clone, &Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((px - Vector2::new(360.0, 320.0)).norm() < 1e-12);
        assert!(matches!(
            project(&cam, &Transform::identity(), &clone, &Vec3::new(0.0, 0.0, -1.0)),
            Err(VisionError::BehindCamera(_))
        ));
    }

    #[test]
    fn two_view_noiseless_triangulation() {
        let cam = CameraModel::default();
        let t_bc = forward_camera();
        let clones = vec![clone_at(0, Vec3::zeros()), clone_at(1, Vec3::new(0.0, 0.2, 0.0))];
        let xi = Vec3::new(2.0, 0.1, -0.05);
        let track = FeatureTrack {
            feature_id: 3,
            observations: clones.iter().map(|c| (c.frame_id, project(&cam, &t_bc, c, &xi).unwrap())).collect(),
        };
        let lm = triangulate(&cam, &t_bc, &clones, &track).unwrap();
        assert!((lm.xi_w - xi).norm() < 1e-8);
    }

    #[test]
    fn collinear_centres_have_no_parallax() {
        let cam = CameraModel::default();
        let t_bc = forward_camera();
        let clones = vec![clone_at(0, Vec3::zeros()), clone_at(1, Vec3::new(0.5, 0.0, 0.0))];
        let xi = Vec3::new(3.0, 0.0, 0.0);
        let track = FeatureTrack {
            feature_id: 1,
            observations: clones.iter().map(|c| (c.frame_id, project(&cam, &t_bc, c, &xi).unwrap())).collect(),
        };
        assert_eq!(triangulate(&cam, &t_bc, &clones, &track), Err(VisionError::InsufficientParallax(1)));
    }

    #[test]
    fn first_order_pinhole_translation() {
        // Identity body pose and camera mounting: camera x = world x.
        let cam = CameraModel::default();
        let nominal = NominalState::default();
        let mut f = FilterState::new(nominal, DMatrix::identity(BASE_DIM, BASE_DIM), 10);
        f.augment_keyframe(0).unwrap();
        let xi = Vec3::new(0.2, -0.1, 2.0);
        let eps = 1e-6;
        // measurement taken from a keyframe displaced by eps along camera x
        let mut moved = f.clones[0].clone();
        moved.p_wb.x += eps;
        let z = project(&cam, &f.nominal.t_bc, &moved, &xi).unwrap();
        let o = residual_and_jacobians(&cam, &f, 0, &xi, &z, false).unwrap();
        assert!((o.residual.x - (-cam.fx * eps / xi.z)).abs() < 1e-9);
    }

    #[test]
    fn single_observation_blocks_are_outer_products() {
        let cam = CameraModel::default();
        let mut f = FilterState::new(NominalState::default(), DMatrix::identity(BASE_DIM, BASE_DIM), 10);
        f.augment_keyframe(0).unwrap();
        let o = residual_and_jacobians(&cam, &f, 0, &Vec3::new(0.3, 0.2, 4.0), &Vector2::new(300.0, 250.0), true).unwrap();
        let eq = build_equivalent_model(f.dim(), &[(0, vec![o.clone()])], 1.0);
        let hx = o.dense_hx(f.dim());
        let hf = DMatrix::from_column_slice(2, 3, o.h_f.as_slice());
        let r = DVector::from_column_slice(o.residual.as_slice());
        assert!((eq.c1() - hx.transpose() * &hx).amax() < 1e-12);
        assert!((eq.b1() - hx.transpose() * &r).amax() < 1e-12);
        assert!((eq.c2() - hx.transpose() * &hf).amax() < 1e-12);
        assert!((eq.c3() - hf.transpose() * &hf).amax() < 1e-12);
        assert!((eq.b2() - hf.transpose() * &r).amax() < 1e-12);
    }

    #[test]
    fn decoupled_landmarks_pass_through() {
        let eq = EquivalentResidual {
            dim: BASE_DIM + 6,
            landmarks: vec![LandmarkBlocks {
                feature_id: 0,
                cols: vec![BASE_DIM],
                c1: DMatrix::identity(6, 6) * 2.0,
                b1: DVector::from_element(6, 0.5),
                c2: DMatrix::zeros(6, 3),
                c3: Matrix3::identity(),
                b2: Vec3::new(1.0, 2.0, 3.0),
            }],
            u_px: 1.5,
        };
        let s = schur_eliminate(&eq);
        assert!((&s.h_eff - eq.c1()).amax() < 1e-15);
        assert!((&s.r_eff - eq.b1()).amax() < 1e-15);
        assert!((&s.r_cov - eq.c1() * 2.25).amax() < 1e-12);
    }

    #[test]
    fn degenerate_landmark_is_dropped_alone() {
        let mk = |id, c3| LandmarkBlocks {
            feature_id: id,
            cols: vec![BASE_DIM],
            c1: DMatrix::identity(6, 6),
            b1: DVector::zeros(6),
            c2: DMatrix::zeros(6, 3),
            c3,
            b2: Vec3::zeros(),
        };
        let eq = EquivalentResidual {
            dim: BASE_DIM + 6,
            landmarks: vec![mk(1, Matrix3::identity()), mk(2, Matrix3::zeros()), mk(3, Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)))],
            u_px: 1.0,
        };
        let s = schur_eliminate(&eq);
        // rank-deficient but damped blocks survive, an all-zero block does not
        assert_eq!(s.dropped, vec![2]);
        assert!((s.h_eff.view((BASE_DIM, BASE_DIM), (6, 6)) - DMatrix::<f64>::identity(6, 6) * 2.0).amax() < 1e-15);
    }

    #[test]
    fn back_substitution_trivial_cases() {
        let c2 = DMatrix::from_fn(6, 3, |i, j| (i + 2 * j) as f64 * 0.1);
        let c3 = Matrix3::new(4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0);
        let lm = LandmarkBlocks {
            feature_id: 9,
            cols: vec![BASE_DIM],
            c1: DMatrix::identity(6, 6),
            b1: DVector::zeros(6),
            c2: c2.clone(),
            c3,
            b2: Vec3::zeros(),
        };
        let mut eq = EquivalentResidual { dim: BASE_DIM + 6, landmarks: vec![lm], u_px: 1.0 };
        let s = schur_eliminate(&eq);
        let zero = back_substitute_landmarks(&eq, &s, &DVector::zeros(BASE_DIM + 6));
        assert_eq!(zero[0].1.unwrap(), Vec3::zeros());

        eq.landmarks[0].b2 = Vec3::new(1.0, -1.0, 0.5);
        let s = schur_eliminate(&eq);
        let dx = DVector::from_fn(BASE_DIM + 6, |i, _| 0.01 * i as f64);
        let got = back_substitute_landmarks(&eq, &s, &dx)[0].1.unwrap();
        let local_dx = dx.rows(BASE_DIM, 6).into_owned();
        let c2t_dx = c2.transpose() * local_dx;
        let expected = c3.try_inverse().unwrap() * (eq.landmarks[0].b2 - Vec3::from_column_slice(c2t_dx.as_slice()));
        assert!((got - expected).norm() < 1e-12);
    }
}

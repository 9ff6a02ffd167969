#![allow(dead_code)]

use avio::geometry::{exp_so3, skew, vee, Mat3, Rotation, Transform, Vec3};
use avio::propagation::ImuSample;
use avio::state::{FilterState, KeyframeClone, NominalState, BASE_DIM, CORE_DIM};
use avio::vision::{
    build_equivalent_model, compress_equivalent, project, residual_and_jacobians, schur_eliminate, CameraModel,
    FeatureTrack, ObservationJacobian,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(randn(rng), randn(rng), randn(rng)) * scale
}

pub fn random_rotation(rng: &mut ChaCha8Rng, scale: f64) -> Rotation {
    exp_so3(&rand_vec(rng, scale))
}

/// Random symmetric positive-definite matrix with correlated entries.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| randn(rng) * scale);
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * (0.1 * scale * scale)
}

/// Camera whose optical axis is body +x, image x is body +y, image y is body +z.
pub fn forward_camera() -> Transform {
    let r_bc = Rotation::from_matrix_unchecked(Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
    Transform::new(r_bc, Vec3::new(0.1, 0.0, 0.05))
}

pub fn random_nominal(rng: &mut ChaCha8Rng) -> NominalState {
    let mut s = NominalState::default();
    s.p_wb = rand_vec(rng, 2.0);
    s.v_wb = rand_vec(rng, 0.5);
    s.r_wb = random_rotation(rng, 1.0);
    s.b_a = rand_vec(rng, 0.05);
    s.b_g = rand_vec(rng, 0.01);
    s.t_bc = Transform::new(forward_camera().rotation * random_rotation(rng, 0.05), rand_vec(rng, 0.1));
    s.t_bd = Transform::new(random_rotation(rng, 0.1), rand_vec(rng, 0.3));
    s
}

/// A window of keyframes moving sideways in front of a cloud of landmarks,
/// with exact pixel observations of every landmark in every keyframe.
pub struct VisualScene {
    pub camera: CameraModel,
    pub filter: FilterState,
    pub landmarks: Vec<Vec3>,
    pub tracks: Vec<FeatureTrack>,
}

pub fn visual_scene(rng: &mut ChaCha8Rng, num_clones: usize, num_landmarks: usize) -> VisualScene {
    let camera = CameraModel::default();
    let mut nominal = NominalState::default();
    nominal.t_bc = forward_camera();
    let mut cov = DMatrix::zeros(BASE_DIM, BASE_DIM);
    cov.view_mut((0, 0), (BASE_DIM, BASE_DIM)).copy_from(&random_spd(rng, BASE_DIM, 0.05));
    let mut filter = FilterState::new(nominal, cov, num_clones.max(1));
    for k in 0..num_clones {
        filter.nominal.p_wb = Vec3::new(0.05 * randn(rng), 0.25 * k as f64, 0.1 * randn(rng));
        filter.nominal.r_wb = random_rotation(rng, 0.05);
        filter.augment_keyframe(k as u64).unwrap();
    }
    // keyframe augmentation copies correlations exactly; add a little
    // independent uncertainty so clones are not perfectly correlated
    let n = filter.dim();
    filter.covariance += random_spd(rng, n, 0.01);

    let mut landmarks = Vec::new();
    let mut tracks = Vec::new();
    while landmarks.len() < num_landmarks {
        let xi = Vec3::new(
            rng.gen_range(3.0..7.0),
            rng.gen_range(-2.0..(0.25 * num_clones as f64 + 2.0)),
            rng.gen_range(-1.5..1.5),
        );
        let obs: Option<Vec<(u64, Vector2<f64>)>> = filter
            .clones
            .iter()
            .map(|c: &KeyframeClone| {
                let px = project(&camera, &filter.nominal.t_bc, c, &xi).ok()?;
                camera.contains(&px).then_some((c.frame_id, px))
            })
            .collect();
        if let Some(observations) = obs {
            tracks.push(FeatureTrack { feature_id: landmarks.len() as u64, observations });
            landmarks.push(xi);
        }
    }
    VisualScene { camera, filter, landmarks, tracks }
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Inverse left Jacobian of SO(3).
pub fn left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let w = skew(phi);
    if theta < 1e-8 {
        return Mat3::identity() - 0.5 * w;
    }
    let c = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() - 0.5 * w + c * w * w
}

/// Exact time derivative of the core error state `[δp δv δθ δb_a δb_g]` for
/// true state `x̂ ⊕ δx`, noise-free, from the continuous kinematics.
pub fn error_dynamics(nominal: &NominalState, imu: &ImuSample, dx: &DVector<f64>) -> DVector<f64> {
    let d = |i: usize| Vec3::new(dx[i], dx[i + 1], dx[i + 2]);
    let r_hat = *nominal.r_wb.matrix();
    let r_true = exp_so3(&d(6)).matrix() * r_hat;
    let (ba_true, bg_true) = (nominal.b_a + d(9), nominal.b_g + d(12));
    let mut out = DVector::zeros(CORE_DIM);
    out.rows_mut(0, 3).copy_from(&d(3));
    let dv = r_true * (imu.accel - ba_true) - r_hat * (imu.accel - nominal.b_a);
    out.rows_mut(3, 3).copy_from(&dv);
    // d(ΔR)/dt ΔRᵀ with ΔR = R Rˆᵀ
    let w_true = skew(&(imu.gyro - bg_true));
    let w_hat = skew(&(imu.gyro - nominal.b_g));
    let delta = r_true * r_hat.transpose();
    let ddelta = r_true * w_true * r_hat.transpose() - r_true * w_hat * r_hat.transpose();
    let dtheta = left_jacobian_inv(&d(6)) * vee(&(ddelta * delta.transpose()));
    out.rows_mut(6, 3).copy_from(&dtheta);
    out
}

/// Linearizes every track at a perturbed landmark estimate with noisy pixels.
pub fn linearize(scene: &VisualScene, rng: &mut ChaCha8Rng, u_px: f64, camera_extrinsics: bool) -> Vec<(u64, Vec<ObservationJacobian>)> {
    scene
        .tracks
        .iter()
        .map(|t| {
            let xi = scene.landmarks[t.feature_id as usize] + rand_vec(rng, 0.02);
            let obs = t
                .observations
                .iter()
                .map(|(fid, z)| {
                    let k = scene.filter.clone_index(*fid).unwrap();
                    let noisy = z + Vector2::new(randn(rng), randn(rng)) * u_px;
                    residual_and_jacobians(&scene.camera, &scene.filter, k, &xi, &noisy, camera_extrinsics).unwrap()
                })
                .collect();
            (t.feature_id, obs)
        })
        .collect()
}

/// Dense stacked `(H_x, H_f, r)` over all observations, landmarks in order.
pub fn stack(dim: usize, lin: &[(u64, Vec<ObservationJacobian>)]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let m: usize = lin.iter().map(|(_, o)| 2 * o.len()).sum();
    let mut hx = DMatrix::zeros(m, dim);
    let mut hf = DMatrix::zeros(m, 3 * lin.len());
    let mut r = DVector::zeros(m);
    let mut row = 0;
    for (j, (_, obs)) in lin.iter().enumerate() {
        for o in obs {
            hx.rows_mut(row, 2).copy_from(&o.dense_hx(dim));
            hf.view_mut((row, 3 * j), (2, 3)).copy_from(&o.h_f);
            r.rows_mut(row, 2).copy_from(&o.residual);
            row += 2;
        }
    }
    (hx, hf, r)
}

/// Correction of the landmark-free update through the Schur-reduced,
/// compressed model, and the filter after it.
pub fn schur_correction(filter: &FilterState, lin: &[(u64, Vec<ObservationJacobian>)], u_px: f64) -> (DVector<f64>, FilterState) {
    let s = schur_eliminate(&build_equivalent_model(filter.dim(), lin, u_px));
    let (h_c, r_c) = compress_equivalent(&s);
    let mut f = filter.clone();
    let noise = DMatrix::identity(h_c.nrows(), h_c.nrows()) * (u_px * u_px);
    let dx = f.ekf_update(&h_c, &r_c, &noise).unwrap().correction;
    (dx, f)
}

/// Reference correction from projecting each landmark's rows onto the left
/// nullspace of its `H_f` (full QR).
pub fn nullspace_correction(filter: &FilterState, lin: &[(u64, Vec<ObservationJacobian>)], u_px: f64) -> (DVector<f64>, FilterState) {
    let dim = filter.dim();
    let mut rows_h = Vec::new();
    let mut rows_r = Vec::new();
    for one in lin {
        let (hx, hf, r) = stack(dim, std::slice::from_ref(one));
        let m = hf.nrows();
        let mut padded = DMatrix::zeros(m, m);
        padded.columns_mut(0, 3).copy_from(&hf);
        let q = padded.qr().q();
        let n = q.columns(3, m - 3).into_owned();
        rows_h.push(n.transpose() * hx);
        rows_r.push(n.transpose() * r);
    }
    let total: usize = rows_h.iter().map(|h| h.nrows()).sum();
    let mut h_o = DMatrix::zeros(total, dim);
    let mut r_o = DVector::zeros(total);
    let mut row = 0;
    for (h, r) in rows_h.iter().zip(&rows_r) {
        h_o.rows_mut(row, h.nrows()).copy_from(h);
        r_o.rows_mut(row, r.len()).copy_from(r);
        row += h.nrows();
    }
    let mut f = filter.clone();
    let noise = DMatrix::identity(total, total) * (u_px * u_px);
    let dx = f.ekf_update(&h_o, &r_o, &noise).unwrap().correction;
    (dx, f)
}

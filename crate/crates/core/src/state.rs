//! Filter state: nominal values, error-state covariance and the keyframe window.
//!
//! Error-state layout (all blocks are 3-vectors):
//!
//! ```text
//!  0..3    δp        world position
//!  3..6    δv        world velocity
//!  6..9    δθ        body attitude (left perturbation)
//!  9..12   δb_a      accelerometer bias
//! 12..15   δb_g      gyroscope bias
//! 15..18   δp_bc     camera lever arm
//! 18..21   δθ_bc     camera mounting rotation
//! 21..24   δp_bD     DVL lever arm
//! 24..27   δθ_bD     DVL mounting rotation
//! 27+6k    δθ_k      keyframe k attitude
//! 30+6k    δp_k      keyframe k position
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::geometry::{perturb, Rotation, Transform, Vec3};

/// Standard gravity magnitude, m/s².
pub const GRAVITY: f64 = 9.80665;
/// Dimension of the error state without keyframe clones.
pub const BASE_DIM: usize = 27;
/// Dimension of the IMU-driven part (position, velocity, attitude, biases).
pub const CORE_DIM: usize = 15;
pub const CLONE_DIM: usize = 6;
pub const DEFAULT_MAX_CLONES: usize = 10;

/// Innovation matrices with a larger condition number are rejected.
const MAX_INNOVATION_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("keyframe window is full ({0} clones)")]
    WindowFull(usize),
    #[error("unknown keyframe {0}")]
    UnknownFrame(u64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("innovation matrix is singular (condition number {condition:e})")]
    SingularInnovation { condition: f64 },
}

/// Named 3-dimensional blocks of the error state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Position,
    Velocity,
    Attitude,
    AccelBias,
    GyroBias,
    CameraTranslation,
    CameraRotation,
    DvlTranslation,
    DvlRotation,
    CloneRotation(usize),
    ClonePosition(usize),
}

/// Block offsets for a window holding `num_clones` keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorStateLayout {
    pub num_clones: usize,
}

impl ErrorStateLayout {
    pub const POSITION: usize = 0;
    pub const VELOCITY: usize = 3;
    pub const ATTITUDE: usize = 6;
    pub const ACCEL_BIAS: usize = 9;
    pub const GYRO_BIAS: usize = 12;
    pub const CAMERA_TRANSLATION: usize = 15;
    pub const CAMERA_ROTATION: usize = 18;
    pub const DVL_TRANSLATION: usize = 21;
    pub const DVL_ROTATION: usize = 24;

    pub fn new(num_clones: usize) -> Self {
        Self { num_clones }
    }

    pub fn dim(&self) -> usize {
        BASE_DIM + CLONE_DIM * self.num_clones
    }

    /// First column of clone `k` (its rotation block; position follows at +3).
    pub fn clone_offset(k: usize) -> usize {
        BASE_DIM + CLONE_DIM * k
    }

    pub fn offset(&self, block: Block) -> Option<usize> {
        let off = match block {
            Block::Position => Self::POSITION,
            Block::Velocity => Self::VELOCITY,
            Block::Attitude => Self::ATTITUDE,
            Block::AccelBias => Self::ACCEL_BIAS,
            Block::GyroBias => Self::GYRO_BIAS,
            Block::CameraTranslation => Self::CAMERA_TRANSLATION,
            Block::CameraRotation => Self::CAMERA_ROTATION,
            Block::DvlTranslation => Self::DVL_TRANSLATION,
            Block::DvlRotation => Self::DVL_ROTATION,
            Block::CloneRotation(k) if k < self.num_clones => Self::clone_offset(k),
            Block::ClonePosition(k) if k < self.num_clones => Self::clone_offset(k) + 3,
            _ => return None,
        };
        Some(off)
    }

    /// Reads a named block out of an error vector.
    pub fn block(&self, delta: &DVector<f64>, block: Block) -> Option<Vec3> {
        let off = self.offset(block)?;
        (delta.len() == self.dim()).then(|| delta.fixed_rows::<3>(off).into_owned())
    }

    pub fn set_block(&self, delta: &mut DVector<f64>, block: Block, value: &Vec3) -> Option<()> {
        let off = self.offset(block)?;
        if delta.len() != self.dim() {
            return None;
        }
        delta.fixed_rows_mut::<3>(off).copy_from(value);
        Some(())
    }
}

/// Nominal (best-estimate) state of the vehicle and sensor extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalState {
    pub timestamp: f64,
    pub p_wb: Vec3,
    pub v_wb: Vec3,
    pub r_wb: Rotation,
    pub b_a: Vec3,
    pub b_g: Vec3,
    /// Camera-to-body transform.
    pub t_bc: Transform,
    /// DVL-to-body transform.
    pub t_bd: Transform,
    /// Fixed gravity vector in the world frame (z down).
    pub gravity_w: Vec3,
}

impl Default for NominalState {
    fn default() -> Self {
        Self {
            timestamp: 0.0,
            p_wb: Vec3::zeros(),
            v_wb: Vec3::zeros(),
            r_wb: Rotation::identity(),
            b_a: Vec3::zeros(),
            b_g: Vec3::zeros(),
            t_bc: Transform::identity(),
            t_bd: Transform::identity(),
            gravity_w: Vec3::new(0.0, 0.0, GRAVITY),
        }
    }
}

/// Frozen copy of the body pose at a keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeClone {
    pub frame_id: u64,
    pub timestamp: f64,
    pub r_wb: Rotation,
    pub p_wb: Vec3,
}

impl KeyframeClone {
    /// Camera-to-world pose of this keyframe under the camera extrinsic `t_bc`.
    pub fn camera_pose(&self, t_bc: &Transform) -> Transform {
        Transform::new(self.r_wb, self.p_wb).compose(t_bc)
    }
}

/// Result of a successful [`FilterState::ekf_update`].
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub correction: DVector<f64>,
    pub mahalanobis: f64,
}

/// Nominal state, keyframe window and error-state covariance, kept consistent
/// with [`ErrorStateLayout`]. Only one owner mutates it.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub nominal: NominalState,
    pub clones: Vec<KeyframeClone>,
    pub covariance: DMatrix<f64>,
    pub max_clones: usize,
}

impl FilterState {
    pub fn new(nominal: NominalState, covariance: DMatrix<f64>, max_clones: usize) -> Self {
        assert_eq!(covariance.nrows(), BASE_DIM, "initial covariance must be {BASE_DIM}x{BASE_DIM}");
        assert_eq!(covariance.ncols(), BASE_DIM);
        Self { nominal, clones: Vec::new(), covariance, max_clones }
    }

    pub fn layout(&self) -> ErrorStateLayout {
        ErrorStateLayout::new(self.clones.len())
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn clone_index(&self, frame_id: u64) -> Option<usize> {
        self.clones.iter().position(|c| c.frame_id == frame_id)
    }

    /// Appends a clone of the current pose. The covariance grows through the
    /// exact clone Jacobian, so the new rows copy the live attitude/position rows.
    pub fn augment_keyframe(&mut self, frame_id: u64) -> Result<(), StateError> {
        if self.clones.len() >= self.max_clones {
            return Err(StateError::WindowFull(self.max_clones));
        }
        let n = self.dim();
        let mut p = DMatrix::zeros(n + CLONE_DIM, n + CLONE_DIM);
        p.view_mut((0, 0), (n, n)).copy_from(&self.covariance);
        // rows of J P with J selecting [δθ; δp]
        let sources = [ErrorStateLayout::ATTITUDE, ErrorStateLayout::POSITION];
        for (i, &src) in sources.iter().enumerate() {
            let dst = n + 3 * i;
            let rows = self.covariance.rows(src, 3).into_owned();
            p.view_mut((dst, 0), (3, n)).copy_from(&rows);
            p.view_mut((0, dst), (n, 3)).copy_from(&rows.transpose());
        }
        for (i, &si) in sources.iter().enumerate() {
            for (j, &sj) in sources.iter().enumerate() {
                let blk = self.covariance.view((si, sj), (3, 3)).into_owned();
                p.view_mut((n + 3 * i, n + 3 * j), (3, 3)).copy_from(&blk);
            }
        }
        self.covariance = p;
        self.clones.push(KeyframeClone {
            frame_id,
            timestamp: self.nominal.timestamp,
            r_wb: self.nominal.r_wb,
            p_wb: self.nominal.p_wb,
        });
        Ok(())
    }

    /// Drops a clone and its covariance rows/columns.
    pub fn marginalize_keyframe(&mut self, frame_id: u64) -> Result<(), StateError> {
        let k = self.clone_index(frame_id).ok_or(StateError::UnknownFrame(frame_id))?;
        let start = ErrorStateLayout::clone_offset(k);
        let cov = std::mem::replace(&mut self.covariance, DMatrix::zeros(0, 0));
        self.covariance = cov.remove_rows(start, CLONE_DIM).remove_columns(start, CLONE_DIM);
        self.clones.remove(k);
        Ok(())
    }

    /// Applies an error-state correction to the nominal state.
    pub fn inject_error(&mut self, delta: &DVector<f64>) -> Result<(), StateError> {
        let layout = self.layout();
        if delta.len() != layout.dim() {
            return Err(StateError::DimensionMismatch { expected: layout.dim(), got: delta.len() });
        }
        let blk = |off: usize| -> Vec3 { delta.fixed_rows::<3>(off).into_owned() };
        let s = &mut self.nominal;
        s.p_wb += blk(ErrorStateLayout::POSITION);
        s.v_wb += blk(ErrorStateLayout::VELOCITY);
        s.r_wb = perturb(&s.r_wb, &blk(ErrorStateLayout::ATTITUDE));
        s.b_a += blk(ErrorStateLayout::ACCEL_BIAS);
        s.b_g += blk(ErrorStateLayout::GYRO_BIAS);
        s.t_bc.translation += blk(ErrorStateLayout::CAMERA_TRANSLATION);
        s.t_bc.rotation = perturb(&s.t_bc.rotation, &blk(ErrorStateLayout::CAMERA_ROTATION));
        s.t_bd.translation += blk(ErrorStateLayout::DVL_TRANSLATION);
        s.t_bd.rotation = perturb(&s.t_bd.rotation, &blk(ErrorStateLayout::DVL_ROTATION));
        for rot in [&mut s.r_wb, &mut s.t_bc.rotation, &mut s.t_bd.rotation] {
            rot.renormalize();
        }
        for (k, c) in self.clones.iter_mut().enumerate() {
            let off = ErrorStateLayout::clone_offset(k);
            c.r_wb = perturb(&c.r_wb, &blk(off));
            c.r_wb.renormalize();
            c.p_wb += blk(off + 3);
        }
        Ok(())
    }

    /// Standard EKF update of the error state with a Joseph-form covariance.
    ///
    /// `h` is `∂h/∂δx` and `r = z - h(x̂)`, so the correction is `K r`.
    pub fn ekf_update(
        &mut self,
        h: &DMatrix<f64>,
        r: &DVector<f64>,
        r_meas: &DMatrix<f64>,
    ) -> Result<UpdateOutcome, StateError> {
        let n = self.dim();
        if h.ncols() != n {
            return Err(StateError::DimensionMismatch { expected: n, got: h.ncols() });
        }
        let m = h.nrows();
        if r.len() != m {
            return Err(StateError::DimensionMismatch { expected: m, got: r.len() });
        }
        if r_meas.nrows() != m || r_meas.ncols() != m {
            return Err(StateError::DimensionMismatch { expected: m, got: r_meas.nrows() });
        }
        let ph_t = &self.covariance * h.transpose();
        let mut s = h * &ph_t + r_meas;
        symmetrize(&mut s);
        let condition = condition_number(&s);
        if !(condition <= MAX_INNOVATION_CONDITION) {
            return Err(StateError::SingularInnovation { condition });
        }
        let chol = Cholesky::new(s.clone()).ok_or(StateError::SingularInnovation { condition })?;
        // K = P Hᵀ S⁻¹  <=>  S Kᵀ = H P
        let k = chol.solve(&ph_t.transpose()).transpose();
        let correction = &k * r;
        let mahalanobis = r.dot(&chol.solve(r));

        let mut ikh = DMatrix::<f64>::identity(n, n);
        ikh -= &k * h;
        let mut p = &ikh * &self.covariance * ikh.transpose() + &k * r_meas * k.transpose();
        symmetrize(&mut p);
        self.covariance = p;
        self.inject_error(&correction)?;
        Ok(UpdateOutcome { correction, mahalanobis })
    }

    /// Marginal standard deviation of a named block.
    pub fn block_std(&self, block: Block) -> Option<Vec3> {
        let off = self.layout().offset(block)?;
        Some(Vec3::new(
            self.covariance[(off, off)].max(0.0).sqrt(),
            self.covariance[(off + 1, off + 1)].max(0.0).sqrt(),
            self.covariance[(off + 2, off + 2)].max(0.0).sqrt(),
        ))
    }

    /// Zeros all covariance rows/columns of a block, freezing its estimate.
    pub fn freeze_block(&mut self, block: Block) {
        if let Some(off) = self.layout().offset(block) {
            self.covariance.rows_mut(off, 3).fill(0.0);
            self.covariance.columns_mut(off, 3).fill(0.0);
        }
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite if not positive definite.
pub fn condition_number(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(s.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || !max.is_finite() {
        return f64::INFINITY;
    }
    max / min
}

pub fn min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(s.clone()).eigenvalues.min()
}

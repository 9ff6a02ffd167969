//! Trajectory association, rigid/similarity alignment and absolute
//! trajectory error.

use nalgebra::{Matrix3, SVD};
use thiserror::Error;

use crate::geometry::{Rotation, Vec3};

/// Default association tolerance, s.
pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no estimate sample lies within {max_dt} s of a ground-truth sample")]
    NoOverlap { max_dt: f64 },
    #[error("alignment needs at least 3 non-collinear points")]
    DegenerateGeometry,
    #[error("trajectory timestamps must be strictly increasing (index {0})")]
    UnsortedTimestamps(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub t: f64,
    pub p: Vec3,
    pub r: Rotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// `(estimate position, ground-truth position, dt)` per pair.
    pub pairs: Vec<(Vec3, Vec3, f64)>,
    pub unpaired: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub scale: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self { rotation: Rotation::identity(), translation: Vec3::zeros(), scale: 1.0 }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale * self.rotation.rotate(x) + self.translation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub std: f64,
    pub errors: Vec<f64>,
}

fn check_sorted(poses: &[Pose]) -> Result<(), EvalError> {
    match poses.windows(2).position(|w| w[1].t <= w[0].t) {
        Some(i) => Err(EvalError::UnsortedTimestamps(i + 1)),
        None => Ok(()),
    }
}

/// Pairs every estimate sample with the nearest ground-truth sample within
/// `max_dt`; estimates without a partner are counted in `unpaired`.
pub fn associate(est: &[Pose], gt: &[Pose], max_dt: f64) -> Result<Association, EvalError> {
    check_sorted(est)?;
    check_sorted(gt)?;
    let mut pairs = Vec::with_capacity(est.len());
    let mut j = 0;
    for e in est {
        while j + 1 < gt.len() && (gt[j + 1].t - e.t).abs() <= (gt[j].t - e.t).abs() {
            j += 1;
        }
        match gt.get(j) {
            Some(g) if (g.t - e.t).abs() <= max_dt => pairs.push((e.p, g.p, g.t - e.t)),
            _ => {}
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap { max_dt });
    }
    let unpaired = est.len() - pairs.len();
    Ok(Association { pairs, unpaired })
}

/// Least-squares `(R, t, s)` minimising `Σ‖gt − (s R est + t)‖²`; `s = 1`
/// unless `with_scale`.
pub fn umeyama_align(est: &[Vec3], gt: &[Vec3], with_scale: bool) -> Result<Alignment, EvalError> {
    let n = est.len().min(gt.len());
    if n < 3 {
        return Err(EvalError::DegenerateGeometry);
    }
    let nf = n as f64;
    let mu_e = est[..n].iter().sum::<Vec3>() / nf;
    let mu_g = gt[..n].iter().sum::<Vec3>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    let mut scatter = Matrix3::zeros();
    for (e, g) in est[..n].iter().zip(&gt[..n]) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
        scatter += de * de.transpose();
    }
    cov /= nf;
    var_e /= nf;
    // collinear (or coincident) estimate points leave the rotation undetermined
    let spread = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(EvalError::DegenerateGeometry);
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_e
    } else {
        1.0
    };
    let rotation = Rotation::from_matrix_unchecked(r);
    let translation = mu_g - scale * rotation.rotate(&mu_e);
    Ok(Alignment { rotation, translation, scale })
}

/// RMSE and population std of the translational error after applying
/// `alignment` to the estimate positions.
pub fn ate_rmse(pairs: &[(Vec3, Vec3, f64)], alignment: &Alignment) -> AteResult {
    let errors: Vec<f64> = pairs.iter().map(|(e, g, _)| (g - alignment.apply(e)).norm()).collect();
    if errors.is_empty() {
        return AteResult { rmse: 0.0, std: 0.0, errors };
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    AteResult { rmse: mean_sq.sqrt(), std: var.sqrt(), errors }
}

/// Associate, align and score in one call.
pub fn evaluate(est: &[Pose], gt: &[Pose], max_dt: f64, with_scale: bool) -> Result<(AteResult, Association), EvalError> {
    let assoc = associate(est, gt, max_dt)?;
    let (e, g): (Vec<Vec3>, Vec<Vec3>) = assoc.pairs.iter().map(|(e, g, _)| (*e, *g)).unzip();
    let alignment = umeyama_align(&e, &g, with_scale)?;
    Ok((ate_rmse(&assoc.pairs, &alignment), assoc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(ts: &[f64]) -> Vec<Pose> {
        ts.iter()
            .map(|&t| Pose { t, p: Vec3::new(t, (2.0 * t).sin(), 0.1 * t * t), r: Rotation::identity() })
            .collect()
    }

    #[test]
    fn identical_grids_pair_everything() {
        let ts: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let a = associate(&traj(&ts), &traj(&ts), DEFAULT_MAX_DT).unwrap();
        assert_eq!((a.pairs.len(), a.unpaired), (50, 0));
    }

    #[test]
    fn offset_grid_pairs_with_the_offset() {
        let gt: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let est: Vec<f64> = gt.iter().map(|t| t + 0.005).collect();
        let a = associate(&traj(&est), &traj(&gt), DEFAULT_MAX_DT).unwrap();
        assert_eq!(a.pairs.len(), 50);
        assert!(a.pairs.iter().all(|p| (p.2 + 0.005).abs() < 1e-12));
    }

    #[test]
    fn disjoint_ranges_do_not_overlap() {
        let a = traj(&[0.0, 1.0, 2.0]);
        let b = traj(&[10.0, 11.0]);
        assert_eq!(associate(&a, &b, DEFAULT_MAX_DT), Err(EvalError::NoOverlap { max_dt: DEFAULT_MAX_DT }));
    }

    #[test]
    fn identity_alignment() {
        let p: Vec<Vec3> = traj(&[0.0, 0.5, 1.0, 1.5]).iter().map(|x| x.p).collect();
        let a = umeyama_align(&p, &p, true).unwrap();
        assert!(a.rotation.angle_to(&Rotation::identity()) < 1e-12);
        assert!(a.translation.norm() < 1e-12);
        assert!((a.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let p: Vec<Vec3> = (0..10).map(|k| Vec3::new(k as f64, 2.0 * k as f64, 0.0)).collect();
        assert_eq!(umeyama_align(&p, &p, false), Err(EvalError::DegenerateGeometry));
    }

    #[test]
    fn similarity_recovers_scale() {
        let est: Vec<Vec3> = traj(&[0.0, 0.5, 1.0, 1.5, 2.0]).iter().map(|x| x.p).collect();
        let r = Rotation::from_euler_zyx(0.2, -0.1, 1.0);
        let gt: Vec<Vec3> = est.iter().map(|x| 2.5 * r.rotate(x) + Vec3::new(1.0, 2.0, 3.0)).collect();
        let a = umeyama_align(&est, &gt, true).unwrap();
        assert!((a.scale - 2.5).abs() < 1e-10);
        assert!(a.rotation.angle_to(&r) < 1e-10);
    }

    #[test]
    fn constant_offset_without_alignment() {
        let pairs: Vec<_> = (0..5).map(|k| (Vec3::new(k as f64, 0.0, 0.0), Vec3::new(k as f64, 1.0, 0.0), 0.0)).collect();
        let r = ate_rmse(&pairs, &Alignment::identity());
        assert!((r.rmse - 1.0).abs() < 1e-15 && r.std.abs() < 1e-15);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let a = traj(&[0.0, 2.0, 1.0]);
        assert_eq!(associate(&a, &a, 0.1), Err(EvalError::UnsortedTimestamps(2)));
    }
}

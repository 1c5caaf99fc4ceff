//! Training objectives: supervised pose+bone loss, the adversarial
//! real/fake-projection losses, the lift-project-lift cycle loss and the
//! joint objective combining them.
//!
//! Every term is reduced as a mean over the batch.

use crate::autodiff::{NodeId, Tape, TapeError};
use crate::geometry::{self, diff, CameraModel, Pose2D, Pose3D, SkeletonTopology, ViewRotation};
use crate::nn::{DiscPass, Discriminator, HeadKind, LifterNetwork, LifterPass, NetMode};
use crate::real::Real;
use rand_chacha::ChaCha8Rng;

/// Relative weights of the self-supervised terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<R: Real> {
    /// Weight of the self-supervised term in the joint objective.
    pub lambda_joint: R,
    /// Weight of the 2D cycle term.
    pub lambda_2d: R,
    /// Weight of the 3D cycle term.
    pub lambda_3d: R,
}

impl<R: Real> Default for LossWeights<R> {
    fn default() -> Self {
        LossWeights {
            lambda_joint: R::from_f64(0.1),
            lambda_2d: R::from_f64(10.0),
            lambda_3d: R::from_f64(0.1),
        }
    }
}

impl<R: Real> LossWeights<R> {
    pub fn validate(&self) -> Result<(), TapeError> {
        for (name, v) in [
            ("lambda_joint", self.lambda_joint),
            ("lambda_2d", self.lambda_2d),
            ("lambda_3d", self.lambda_3d),
        ] {
            if v < R::zero() || !v.is_finite() {
                return Err(TapeError::InvalidArg {
                    op: "loss_weights",
                    detail: format!("{} = {} must be a finite non-negative number", name, v),
                });
            }
        }
        Ok(())
    }
}

/// Which self-supervised objective accompanies the supervised loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslKind {
    None,
    Adversary,
    Cycle,
}

fn batch_mean<R: Real>(tape: &mut Tape<R>, x: NodeId) -> NodeId {
    let (rows, _) = tape.dims(x);
    let total = tape.sum_all(x);
    tape.scale(total, R::one() / R::from_usize(rows))
}

/// Constant matrix turning a flat B x 3J pose batch into B x 3(J-1) bone
/// vectors (child minus parent, in `topo.bones()` order).
fn bone_matrix<R: Real>(topo: &SkeletonTopology) -> Vec<R> {
    let j = topo.joint_count();
    let bones = topo.bones();
    let cols = 3 * bones.len();
    let mut m = vec![R::zero(); (3 * j) * cols];
    for (k, &(child, parent)) in bones.iter().enumerate() {
        for d in 0..3 {
            m[(child * 3 + d) * cols + (k * 3 + d)] += R::one();
            m[(parent * 3 + d) * cols + (k * 3 + d)] -= R::one();
        }
    }
    m
}

/// Supervised loss: squared pose error plus squared bone-vector error,
/// averaged over the batch.
pub fn fsl_loss<R: Real>(
    tape: &mut Tape<R>,
    pred: NodeId,
    gt: NodeId,
    topo: &SkeletonTopology,
) -> Result<NodeId, TapeError> {
    let (pr, pc) = tape.dims(pred);
    let (gr, gc) = tape.dims(gt);
    if (pr, pc) != (gr, gc) || pc != 3 * topo.joint_count() {
        return Err(TapeError::ShapeMismatch {
            op: "fsl_loss",
            detail: format!(
                "pred {}x{}, gt {}x{}, expected width {}",
                pr,
                pc,
                gr,
                gc,
                3 * topo.joint_count()
            ),
        });
    }
    let d = tape.sub(pred, gt)?;
    let sq = tape.mul(d, d)?;
    let pose_term = batch_mean(tape, sq);
    if topo.joint_count() == 1 {
        return Ok(pose_term);
    }
    let bm = bone_matrix::<R>(topo);
    let cols = 3 * (topo.joint_count() - 1);
    let w = tape.constant(3 * topo.joint_count(), cols, bm);
    let bd = tape.linear(d, w, None)?;
    let bsq = tape.mul(bd, bd)?;
    let bone_term = batch_mean(tape, bsq);
    tape.add(pose_term, bone_term)
}

fn check_scores<R: Real>(tape: &Tape<R>, scores: NodeId, op: &'static str) -> Result<(), TapeError> {
    for &s in tape.value(scores) {
        if !(s > R::zero() && s < R::one()) {
            return Err(TapeError::InvalidArg {
                op,
                detail: format!("score {} outside the open interval (0,1)", s),
            });
        }
    }
    Ok(())
}

/// Discriminator objective: the negation of
/// `E[log D(real)] + E[log(1 - D(fake))]`, to be minimized.
pub fn adv_loss_discriminator<R: Real>(
    tape: &mut Tape<R>,
    real_scores: NodeId,
    fake_scores: NodeId,
) -> Result<NodeId, TapeError> {
    check_scores(tape, real_scores, "adv_loss")?;
    check_scores(tape, fake_scores, "adv_loss")?;
    let log_real = tape.log(real_scores);
    let real_term = batch_mean(tape, log_real);
    let (rows, cols) = tape.dims(fake_scores);
    let ones = tape.constant(rows, cols, vec![R::one(); rows * cols]);
    let one_minus = tape.sub(ones, fake_scores)?;
    let log_fake = tape.log(one_minus);
    let fake_term = batch_mean(tape, log_fake);
    let value = tape.add(real_term, fake_term)?;
    Ok(tape.scale(value, -R::one()))
}

/// Non-saturating generator objective `E[-log D(fake)]`, to be minimized by
/// the lifter's shared extractor and SSL head.
pub fn adv_loss_generator<R: Real>(tape: &mut Tape<R>, fake_scores: NodeId) -> Result<NodeId, TapeError> {
    check_scores(tape, fake_scores, "adv_loss")?;
    let log_fake = tape.log(fake_scores);
    let mean = batch_mean(tape, log_fake);
    Ok(tape.scale(mean, -R::one()))
}

/// Intermediates of one cycle-loss evaluation.
pub struct CycleArtifacts<R: Real> {
    /// Lifted 3D pose batch (original frame, root-relative mm).
    pub lifted: NodeId,
    /// Random view per batch row.
    pub views: Vec<ViewRotation<R>>,
    /// Projection of the lifted batch into the random views, normalized.
    pub fake2d: NodeId,
    /// Lift of the fake 2D batch, still in the rotated frame.
    pub relifted: NodeId,
    /// Re-lifted batch carried back to the original frame.
    pub relifted_back: NodeId,
    /// Re-projection of the carried-back batch into the original view.
    pub reprojected: NodeId,
    pub adv_term: R,
    pub term_2d: R,
    pub term_3d: R,
}

/// Lift-project-lift consistency loss: generator adversarial term plus
/// weighted 2D and 3D round-trip errors. The 3D round trip is compared in
/// the original camera frame, after undoing the sampled rotation.
#[allow(clippy::too_many_arguments)]
pub fn cycle_loss<R: Real>(
    tape: &mut Tape<R>,
    x: NodeId,
    lifter: &mut LifterNetwork<R>,
    pass: &LifterPass,
    disc: &mut Discriminator<R>,
    dpass: &DiscPass,
    cam: &CameraModel<R>,
    mode: NetMode,
    rng: &mut ChaCha8Rng,
    weights: &LossWeights<R>,
) -> Result<(NodeId, CycleArtifacts<R>), TapeError> {
    weights.validate()?;
    let (rows, _) = tape.dims(x);
    let joints = lifter.config.joints;
    let root = lifter.config.root_joint;

    let feat = lifter.features(tape, pass, x, mode, rng)?;
    let lifted = lifter.head(tape, pass, feat, HeadKind::Ssl, mode, rng)?;

    let views: Vec<ViewRotation<R>> = (0..rows).map(|_| geometry::sample_random_view(rng)).collect();
    let rots: Vec<[[R; 3]; 3]> = views.iter().map(|v| v.matrix()).collect();
    let fake2d = diff::reproject(tape, lifted, &rots, cam, joints, root)?;

    let scores = disc.score(tape, dpass, fake2d, mode, rng)?;
    let adv = adv_loss_generator(tape, scores)?;

    let feat2 = lifter.features(tape, pass, fake2d, mode, rng)?;
    let relifted = lifter.head(tape, pass, feat2, HeadKind::Ssl, mode, rng)?;
    let inv_rots: Vec<[[R; 3]; 3]> = views.iter().map(|v| v.matrix_inv()).collect();
    let relifted_back = tape.rotate_joints(relifted, &inv_rots)?;

    let projected = diff::project(tape, relifted_back, cam, joints, root)?;
    let reprojected = diff::normalize2d(tape, projected, joints, root)?;

    let d2 = tape.sub(x, reprojected)?;
    let d2sq = tape.mul(d2, d2)?;
    let term2d = batch_mean(tape, d2sq);

    let d3 = tape.sub(lifted, relifted_back)?;
    let d3sq = tape.mul(d3, d3)?;
    let term3d = batch_mean(tape, d3sq);

    let w2 = tape.scale(term2d, weights.lambda_2d);
    let w3 = tape.scale(term3d, weights.lambda_3d);
    let partial = tape.add(adv, w2)?;
    let total = tape.add(partial, w3)?;

    let artifacts = CycleArtifacts {
        lifted,
        views,
        fake2d,
        relifted,
        relifted_back,
        reprojected,
        adv_term: tape.scalar_value(adv),
        term_2d: tape.scalar_value(term2d),
        term_3d: tape.scalar_value(term3d),
    };
    Ok((total, artifacts))
}

/// Adversary-only self-supervised loss: lift, reproject into a random view
/// per row, and take the non-saturating generator loss on the scores.
#[allow(clippy::too_many_arguments)]
pub fn adversary_ssl_loss<R: Real>(
    tape: &mut Tape<R>,
    x: NodeId,
    lifter: &mut LifterNetwork<R>,
    pass: &LifterPass,
    disc: &mut Discriminator<R>,
    dpass: &DiscPass,
    cam: &CameraModel<R>,
    mode: NetMode,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, NodeId), TapeError> {
    let (rows, _) = tape.dims(x);
    let joints = lifter.config.joints;
    let root = lifter.config.root_joint;
    let feat = lifter.features(tape, pass, x, mode, rng)?;
    let lifted = lifter.head(tape, pass, feat, HeadKind::Ssl, mode, rng)?;
    let rots: Vec<[[R; 3]; 3]> = (0..rows)
        .map(|_| geometry::sample_random_view::<R>(rng).matrix())
        .collect();
    let fake2d = diff::reproject(tape, lifted, &rots, cam, joints, root)?;
    let scores = disc.score(tape, dpass, fake2d, mode, rng)?;
    let loss = adv_loss_generator(tape, scores)?;
    Ok((loss, fake2d))
}

/// Terms of one joint-objective evaluation.
pub struct JointTerms<R: Real> {
    pub fsl: NodeId,
    pub ssl: Option<NodeId>,
    pub combined: NodeId,
    /// Fake 2D batch fed to the discriminator, when an SSL term ran.
    pub fake2d: Option<NodeId>,
    pub cycle: Option<CycleArtifacts<R>>,
}

/// Supervised term plus `lambda_joint` times the chosen self-supervised
/// term, sharing one extractor forward per head path.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective<R: Real>(
    tape: &mut Tape<R>,
    x: NodeId,
    gt: NodeId,
    lifter: &mut LifterNetwork<R>,
    pass: &LifterPass,
    disc: &mut Discriminator<R>,
    dpass: &DiscPass,
    topo: &SkeletonTopology,
    cam: &CameraModel<R>,
    mode: NetMode,
    rng: &mut ChaCha8Rng,
    weights: &LossWeights<R>,
    ssl: SslKind,
) -> Result<JointTerms<R>, TapeError> {
    weights.validate()?;
    let feat = lifter.features(tape, pass, x, mode, rng)?;
    let pred = lifter.head(tape, pass, feat, HeadKind::Fsl, mode, rng)?;
    let fsl = fsl_loss(tape, pred, gt, topo)?;
    let (ssl_term, fake2d, cycle) = match ssl {
        SslKind::None => (None, None, None),
        SslKind::Adversary => {
            let (loss, fake2d) = adversary_ssl_loss(tape, x, lifter, pass, disc, dpass, cam, mode, rng)?;
            (Some(loss), Some(fake2d), None)
        }
        SslKind::Cycle => {
            let (loss, art) = cycle_loss(tape, x, lifter, pass, disc, dpass, cam, mode, rng, weights)?;
            (Some(loss), Some(art.fake2d), Some(art))
        }
    };
    let combined = match ssl_term {
        None => fsl,
        Some(s) => {
            let weighted = tape.scale(s, weights.lambda_joint);
            tape.add(fsl, weighted)?
        }
    };
    Ok(JointTerms { fsl, ssl: ssl_term, combined, fake2d, cycle })
}

/// Tape-free cycle terms for an arbitrary lift function, used to validate
/// the round trip against ground truth: returns (2D term, 3D term) for one
/// instance and one sampled view.
pub fn cycle_terms<R: Real>(
    x: &Pose2D<R>,
    lift: &mut dyn FnMut(&Pose2D<R>) -> Pose3D<R>,
    cam: &CameraModel<R>,
    view: &ViewRotation<R>,
    root: usize,
) -> Result<(R, R), geometry::GeometryError> {
    let lifted = lift(x).root_centered(root);
    let fake2d = geometry::reproject_random(&lifted, view, cam, root)?;
    let relifted = lift(&fake2d).root_centered(root);
    let back = geometry::inverse_rotate(&relifted, view);
    let reprojected = geometry::normalize2d(&geometry::project(&back, cam, root)?, root)?;
    let mut t2 = R::zero();
    for (a, b) in x.joints.iter().zip(&reprojected.joints) {
        for d in 0..2 {
            let e = a[d] - b[d];
            t2 += e * e;
        }
    }
    let mut t3 = R::zero();
    for (a, b) in lifted.joints.iter().zip(&back.joints) {
        for d in 0..3 {
            let e = a[d] - b[d];
            t3 += e * e;
        }
    }
    Ok((t2, t3))
}

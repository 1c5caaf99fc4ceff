//! Source-scenario training: supervised-only baseline training and joint
//! supervised + self-supervised training with alternating
//! lifter/discriminator updates, horizontal-flip augmentation, and
//! per-epoch loss logging.

use crate::autodiff::{Tape, TapeError};
use crate::geometry::{self, diff, CameraModel, GeometryError, Pose2D, Pose3D, SkeletonTopology};
use crate::losses::{self, LossWeights, SslKind};
use crate::nn::{
    build_discriminator, build_lifter, ArchConfig, Discriminator, HeadKind, LifterNetwork, NetMode,
    NnError, ParamGroup,
};
use crate::optimizer::{adam_step, clip_grads, lr_at, AdamState, LrSchedule};
use crate::real::Real;
use crate::synthdata::Dataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// All lifter parameter groups, in the canonical update order.
pub const LIFTER_GROUPS: [ParamGroup; 3] =
    [ParamGroup::Extractor, ParamGroup::FslHead, ParamGroup::SslHead];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f32,
    /// Per-epoch exponential learning-rate decay factor.
    pub gamma: f32,
    pub weights: LossWeights<f32>,
    pub ssl: SslKind,
    pub seed: u64,
    pub flip_augment: bool,
    /// Optional global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
    /// Discriminator learning rate; `None` follows the lifter schedule.
    /// The discriminator loss lives on a unit scale while the supervised
    /// loss lives on a squared-mm scale, so aggressive lifter rates need a
    /// separate, smaller rate here.
    pub disc_lr: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            initial_lr: 2e-4,
            gamma: 0.96,
            weights: LossWeights::default(),
            ssl: SslKind::None,
            seed: 0,
            flip_augment: true,
            clip_norm: None,
            disc_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config(format!("epochs {} < 1", self.epochs)));
        }
        // batchnorm needs at least two rows per batch
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch size {} < 2", self.batch_size)));
        }
        if !(self.initial_lr > 0.0) {
            return Err(TrainError::Config(format!("initial lr {}", self.initial_lr)));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Mean losses of one epoch; `ssl` and `disc` are zero when the epoch ran
/// without a self-supervised term.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub fsl: f64,
    pub ssl: f64,
    pub disc: f64,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub lifter: LifterNetwork<f32>,
    pub disc: Option<Discriminator<f32>>,
    pub report: TrainReport,
}

/// Render the per-epoch loss curves as a TSV log.
pub fn render_train_log(report: &TrainReport) -> String {
    let mut out = String::from("epoch\tlr\tfsl\tssl\tdisc\tcombined\n");
    for r in &report.epochs {
        out.push_str(&format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.epoch, r.lr, r.fsl, r.ssl, r.disc, r.combined
        ));
    }
    out
}

/// Flip each (2D, 3D) pair independently with probability `prob`, keeping
/// the pair projection-consistent.
pub fn augment_flip<R: Real>(
    xs: &mut [Pose2D<R>],
    gts: &mut [Pose3D<R>],
    topo: &SkeletonTopology,
    prob: f64,
    rng: &mut ChaCha8Rng,
) {
    for (x, gt) in xs.iter_mut().zip(gts.iter_mut()) {
        let u = f64::sample_uniform(rng, 0.0, 1.0);
        if u < prob {
            *x = geometry::hflip2d(x, topo);
            *gt = geometry::hflip3d(gt, topo);
        }
    }
}

/// One flattened training mini-batch.
struct Batch {
    x: Vec<f32>,
    gt: Vec<f32>,
    rows: usize,
}

fn assemble_batch(
    ds: &Dataset,
    indices: &[usize],
    flip_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let mut xs: Vec<Pose2D<f32>> = indices.iter().map(|&i| ds.pose2d(i)).collect();
    let mut gts: Vec<Pose3D<f32>> = indices.iter().map(|&i| ds.pose3d(i)).collect();
    if flip_prob > 0.0 {
        augment_flip(&mut xs, &mut gts, &ds.topo, flip_prob, rng);
    }
    let mut x = Vec::with_capacity(indices.len() * 2 * ds.joint_count());
    let mut gt = Vec::with_capacity(indices.len() * 3 * ds.joint_count());
    for (a, b) in xs.iter().zip(&gts) {
        x.extend(a.flatten());
        gt.extend(b.flatten());
    }
    Batch { x, gt, rows: indices.len() }
}

/// One discriminator ascent step on the real-vs-reprojected objective.
/// Only the discriminator parameters move.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    lifter: &mut LifterNetwork<f32>,
    disc: &mut Discriminator<f32>,
    x: &[f32],
    rows: usize,
    cam: &CameraModel<f32>,
    mode: NetMode,
    adam: &mut AdamState<f32>,
    lr: f32,
    clip_norm: Option<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let joints = lifter.config.joints;
    let root = lifter.config.root_joint;
    let mut tape: Tape<f32> = Tape::new();
    let pass = lifter.begin(&mut tape);
    let dpass = disc.begin(&mut tape);
    let xn = tape.constant(rows, 2 * joints, x.to_vec());
    let feat = lifter.features(&mut tape, &pass, xn, mode, rng)?;
    let lifted = lifter.head(&mut tape, &pass, feat, HeadKind::Ssl, mode, rng)?;
    let rots: Vec<[[f32; 3]; 3]> =
        (0..rows).map(|_| geometry::sample_random_view::<f32>(rng).matrix()).collect();
    let fake2d = diff::reproject(&mut tape, lifted, &rots, cam, joints, root)?;
    let real_scores = disc.score(&mut tape, &dpass, xn, mode, rng)?;
    let fake_scores = disc.score(&mut tape, &dpass, fake2d, mode, rng)?;
    let loss = losses::adv_loss_discriminator(&mut tape, real_scores, fake_scores)?;
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> =
        dpass.ids().iter().map(|&id| tape.grad(id).to_vec()).collect();
    clip_grads(&mut grads, clip_norm);
    let slices: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
    let mut params = disc.tensors_mut();
    adam_step(&mut params, &slices, adam, lr)?;
    Ok(tape.scalar_value(loss) as f64)
}

/// One lifter descent step on the combined objective. Only the lifter
/// parameters move; the discriminator is read-only here.
#[allow(clippy::too_many_arguments)]
pub fn lifter_step(
    lifter: &mut LifterNetwork<f32>,
    disc: &mut Discriminator<f32>,
    x: &[f32],
    gt: &[f32],
    rows: usize,
    topo: &SkeletonTopology,
    cam: &CameraModel<f32>,
    mode: NetMode,
    weights: &LossWeights<f32>,
    ssl: SslKind,
    adam: &mut AdamState<f32>,
    lr: f32,
    clip_norm: Option<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64), TrainError> {
    let joints = lifter.config.joints;
    let mut tape: Tape<f32> = Tape::new();
    let pass = lifter.begin(&mut tape);
    let dpass = disc.begin(&mut tape);
    let xn = tape.constant(rows, 2 * joints, x.to_vec());
    let gtn = tape.constant(rows, 3 * joints, gt.to_vec());
    let terms = losses::joint_objective(
        &mut tape, xn, gtn, lifter, &pass, disc, &dpass, topo, cam, mode, rng, weights, ssl,
    )?;
    tape.backward(terms.combined)?;
    let mut grads: Vec<Vec<f32>> = Vec::new();
    for g in LIFTER_GROUPS {
        for id in pass.group_ids(g) {
            grads.push(tape.grad(id).to_vec());
        }
    }
    clip_grads(&mut grads, clip_norm);
    let slices: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
    let mut params = lifter.tensors_for_groups_mut(&LIFTER_GROUPS);
    adam_step(&mut params, &slices, adam, lr)?;
    let fsl = tape.scalar_value(terms.fsl) as f64;
    let ssl_v = terms.ssl.map(|s| tape.scalar_value(s) as f64).unwrap_or(0.0);
    let combined = tape.scalar_value(terms.combined) as f64;
    Ok((fsl, ssl_v, combined))
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn train_core(
    ds: &Dataset,
    arch: &ArchConfig,
    config: &TrainConfig,
    ssl: SslKind,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if ds.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    if arch.joints != ds.joint_count() {
        return Err(TrainError::Config(format!(
            "model expects {} joints, dataset has {}",
            arch.joints,
            ds.joint_count()
        )));
    }
    let start = std::time::Instant::now();
    // independent init streams keep the lifter trajectory identical whether
    // or not a discriminator exists
    let mut lifter = build_lifter::<f32>(arch, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let mut disc =
        build_discriminator::<f32>(arch, &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let lifter_sizes: Vec<usize> =
        lifter.tensors_for_groups_mut(&LIFTER_GROUPS).iter().map(|t| t.numel()).collect();
    let mut lifter_adam = AdamState::<f32>::new(&lifter_sizes);
    let disc_sizes: Vec<usize> = disc.tensors_mut().iter().map(|t| t.numel()).collect();
    let mut disc_adam = AdamState::<f32>::new(&disc_sizes);
    let schedule = LrSchedule::new(config.initial_lr, config.gamma)?;
    let flip_prob = if config.flip_augment { 0.5 } else { 0.0 };
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(&schedule, epoch as u64);
        indices.shuffle(&mut rng);
        let (mut fsl_sum, mut ssl_sum, mut disc_sum, mut comb_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = assemble_batch(ds, chunk, flip_prob, &mut rng);
            if ssl != SslKind::None {
                disc_sum += discriminator_step(
                    &mut lifter,
                    &mut disc,
                    &batch.x,
                    batch.rows,
                    &ds.cam,
                    NetMode::Train,
                    &mut disc_adam,
                    config.disc_lr.unwrap_or(lr),
                    config.clip_norm,
                    &mut rng,
                )?;
            }
            let (fsl, ssl_v, comb) = lifter_step(
                &mut lifter,
                &mut disc,
                &batch.x,
                &batch.gt,
                batch.rows,
                &ds.topo,
                &ds.cam,
                NetMode::Train,
                &config.weights,
                ssl,
                &mut lifter_adam,
                lr,
                config.clip_norm,
                &mut rng,
            )?;
            fsl_sum += fsl;
            ssl_sum += ssl_v;
            comb_sum += comb;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        epochs.push(EpochRecord {
            epoch,
            lr,
            fsl: fsl_sum / n,
            ssl: ssl_sum / n,
            disc: disc_sum / n,
            combined: comb_sum / n,
        });
    }
    Ok(TrainOutcome {
        lifter,
        disc: if ssl == SslKind::None { None } else { Some(disc) },
        report: TrainReport { epochs, wall_time_s: start.elapsed().as_secs_f64() },
    })
}

/// Supervised-only training; the returned model carries no usable SSL head
/// or discriminator.
pub fn train_baseline(
    ds: &Dataset,
    arch: &ArchConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_core(ds, arch, config, SslKind::None)
}

/// Joint supervised + self-supervised training with one discriminator
/// update then one lifter update per batch. A zero SSL weight degenerates
/// to the baseline trajectory: the SSL and discriminator updates are
/// skipped entirely.
pub fn train_joint(
    ds: &Dataset,
    arch: &ArchConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if config.ssl == SslKind::None {
        return Err(TrainError::Config("joint training needs an SSL kind".into()));
    }
    let effective = if config.weights.lambda_joint == 0.0 { SslKind::None } else { config.ssl };
    train_core(ds, arch, config, effective)
}

//! Inference-stage optimization: adapt the feature extractor, the
//! self-supervised head and the discriminator on each unlabeled target
//! instance before predicting, either from a fresh checkpoint copy per
//! instance (vanilla) or carrying the adapted state across the stream
//! (online).

use crate::autodiff::{Tape, TapeError};
use crate::geometry::{self, CameraModel, GeometryError, Pose2D, Pose3D, SkeletonTopology};
use crate::losses::{self, LossWeights, SslKind};
use crate::nn::{
    restore_discriminator, restore_lifter, snapshot_discriminator, snapshot_lifter, Discriminator,
    HeadKind, LifterNetwork, NetMode, NnError, ParamGroup, ParamSnapshot,
};
use crate::optimizer::{adam_step, AdamState};
use crate::train::{self, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Parameter groups adapted at inference (the supervised head stays
/// frozen).
pub const ADAPTED_GROUPS: [ParamGroup; 2] = [ParamGroup::Extractor, ParamGroup::SslHead];

#[derive(Debug, Error)]
pub enum IsoError {
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsoMode {
    /// Reset to the checkpoint before every adapted instance.
    Vanilla,
    /// Carry adapted parameters and optimizer state across the stream.
    Online,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsoConfig {
    pub mode: IsoMode,
    /// Adaptation iterations per instance.
    pub t: usize,
    /// Adaptation learning rate.
    pub alpha: f32,
    /// Rows in the per-instance mini-batch; half are flipped copies.
    pub copies: usize,
    /// Adapt only every `skip`-th instance (1-based: the 1st, skip+1-th, ...).
    pub skip: usize,
    pub ssl: SslKind,
    pub weights: LossWeights<f32>,
    pub seed: u64,
}

impl IsoConfig {
    pub fn vanilla(ssl: SslKind) -> Self {
        IsoConfig {
            mode: IsoMode::Vanilla,
            t: 10,
            alpha: 2e-5,
            copies: 32,
            skip: 1,
            ssl,
            weights: LossWeights::default(),
            seed: 0,
        }
    }

    pub fn online(ssl: SslKind) -> Self {
        IsoConfig { mode: IsoMode::Online, t: 1, ..IsoConfig::vanilla(ssl) }
    }

    pub fn validate(&self) -> Result<(), IsoError> {
        if self.copies < 2 {
            return Err(IsoError::Config(format!("copies {} < 2", self.copies)));
        }
        if self.skip < 1 {
            return Err(IsoError::Config(format!("skip {} < 1", self.skip)));
        }
        if !(self.alpha >= 0.0) {
            return Err(IsoError::Config(format!("alpha {}", self.alpha)));
        }
        if self.ssl == SslKind::None {
            return Err(IsoError::Config("adaptation needs a self-supervised objective".into()));
        }
        self.weights.validate().map_err(IsoError::Tape)?;
        Ok(())
    }
}

/// Per-instance mini-batch: `copies` rows, the first half exact copies of
/// `x`, the second half horizontally flipped.
pub fn build_iso_batch(x: &Pose2D<f32>, topo: &SkeletonTopology, copies: usize) -> Vec<f32> {
    let flipped = geometry::hflip2d(x, topo);
    let plain = copies - copies / 2;
    let mut out = Vec::with_capacity(copies * 2 * x.joints.len());
    for i in 0..copies {
        let src = if i < plain { x } else { &flipped };
        out.extend(src.flatten());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTiming {
    pub index: usize,
    pub adapted: bool,
    pub seconds: f64,
}

pub fn render_timing(timings: &[InstanceTiming]) -> String {
    let mut out = String::from("instance\tadapted\tseconds\n");
    for t in timings {
        out.push_str(&format!("{}\t{}\t{:.6}\n", t.index, t.adapted as u8, t.seconds));
    }
    out
}

/// Adaptation engine around a jointly trained lifter + discriminator.
pub struct IsoEngine {
    pub lifter: LifterNetwork<f32>,
    pub disc: Discriminator<f32>,
    pub topo: SkeletonTopology,
    pub cam: CameraModel<f32>,
    pub config: IsoConfig,
    ckpt_lifter: ParamSnapshot<f32>,
    ckpt_disc: ParamSnapshot<f32>,
    lifter_adam: AdamState<f32>,
    disc_adam: AdamState<f32>,
    rng: ChaCha8Rng,
    instance: usize,
}

impl IsoEngine {
    pub fn new(
        mut lifter: LifterNetwork<f32>,
        mut disc: Discriminator<f32>,
        topo: SkeletonTopology,
        cam: CameraModel<f32>,
        config: IsoConfig,
    ) -> Result<Self, IsoError> {
        config.validate()?;
        if topo.joint_count() != lifter.config.joints {
            return Err(IsoError::Incompatible(format!(
                "model expects {} joints, topology has {}",
                lifter.config.joints,
                topo.joint_count()
            )));
        }
        let ckpt_lifter = snapshot_lifter(&lifter);
        let ckpt_disc = snapshot_discriminator(&disc);
        let lifter_sizes: Vec<usize> =
            lifter.tensors_for_groups_mut(&ADAPTED_GROUPS).iter().map(|t| t.numel()).collect();
        let disc_sizes: Vec<usize> = disc.tensors_mut().iter().map(|t| t.numel()).collect();
        let seed = config.seed;
        Ok(IsoEngine {
            lifter,
            disc,
            topo,
            cam,
            config,
            ckpt_lifter,
            ckpt_disc,
            lifter_adam: AdamState::new(&lifter_sizes),
            disc_adam: AdamState::new(&disc_sizes),
            rng: ChaCha8Rng::seed_from_u64(seed),
            instance: 0,
        })
    }

    /// Build from a loaded checkpoint; a supervised-only checkpoint has no
    /// adaptable head and is rejected.
    pub fn from_checkpoint(
        ckpt: crate::checkpoint::Checkpoint,
        config: IsoConfig,
    ) -> Result<Self, IsoError> {
        let Some(disc) = ckpt.disc else {
            return Err(IsoError::Incompatible(
                "checkpoint was trained without a self-supervised head".into(),
            ));
        };
        let cam = CameraModel::default();
        IsoEngine::new(ckpt.lifter, disc, ckpt.topo, cam, config)
    }

    fn reset_to_checkpoint(&mut self) -> Result<(), IsoError> {
        restore_lifter(&mut self.lifter, &self.ckpt_lifter)?;
        restore_discriminator(&mut self.disc, &self.ckpt_disc)?;
        let lifter_sizes: Vec<usize> =
            self.lifter.tensors_for_groups_mut(&ADAPTED_GROUPS).iter().map(|t| t.numel()).collect();
        self.lifter_adam = AdamState::new(&lifter_sizes);
        let disc_sizes: Vec<usize> = self.disc.tensors_mut().iter().map(|t| t.numel()).collect();
        self.disc_adam = AdamState::new(&disc_sizes);
        Ok(())
    }

    /// One adaptation iteration on the instance batch: for the adversarial
    /// objective, a discriminator ascent step, then self-supervised descent
    /// on extractor + SSL head. The consistency objective never touches the
    /// discriminator, so it skips the ascent step.
    fn adapt_iteration(&mut self, batch: &[f32], rng: &mut ChaCha8Rng) -> Result<(), IsoError> {
        let rows = self.config.copies;
        if self.config.ssl == SslKind::Adversary {
            train::discriminator_step(
                &mut self.lifter,
                &mut self.disc,
                batch,
                rows,
                &self.cam,
                NetMode::FrozenBn,
                &mut self.disc_adam,
                self.config.alpha,
                None,
                rng,
            )?;
        }
        let joints = self.lifter.config.joints;
        let mut tape: Tape<f32> = Tape::new();
        let pass = self.lifter.begin(&mut tape);
        let dpass = self.disc.begin(&mut tape);
        let xn = tape.constant(rows, 2 * joints, batch.to_vec());
        let loss = match self.config.ssl {
            SslKind::Adversary => {
                let (loss, _) = losses::adversary_ssl_loss(
                    &mut tape,
                    xn,
                    &mut self.lifter,
                    &pass,
                    &mut self.disc,
                    &dpass,
                    &self.cam,
                    NetMode::FrozenBn,
                    rng,
                )?;
                loss
            }
            SslKind::Cycle => {
                let (loss, _) = losses::cycle_loss(
                    &mut tape,
                    xn,
                    &mut self.lifter,
                    &pass,
                    &mut self.disc,
                    &dpass,
                    &self.cam,
                    NetMode::FrozenBn,
                    rng,
                    &self.config.weights,
                )?;
                loss
            }
            SslKind::None => unreachable!("rejected by validate"),
        };
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = ADAPTED_GROUPS
            .iter()
            .flat_map(|&g| pass.group_ids(g))
            .map(|id| tape.grad(id).to_vec())
            .collect();
        let slices: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut params = self.lifter.tensors_for_groups_mut(&ADAPTED_GROUPS);
        adam_step(&mut params, &slices, &mut self.lifter_adam, self.config.alpha)?;
        Ok(())
    }

    /// Flip-averaged supervised-head prediction with the current
    /// parameters.
    pub fn predict(&mut self, x: &Pose2D<f32>) -> Result<Pose3D<f32>, IsoError> {
        let joints = self.lifter.config.joints;
        // prediction is deterministic: Eval mode draws nothing from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flipped = geometry::hflip2d(x, &self.topo);
        let mut tape: Tape<f32> = Tape::new();
        let xn = tape.constant(1, 2 * joints, x.flatten());
        let (y1, _) = self.lifter.forward(&mut tape, xn, HeadKind::Fsl, NetMode::Eval, &mut rng)?;
        let fx = tape.constant(1, 2 * joints, flipped.flatten());
        let (y2, _) = self.lifter.forward(&mut tape, fx, HeadKind::Fsl, NetMode::Eval, &mut rng)?;
        let p1 = Pose3D::from_flat(tape.value(y1));
        let p2 = geometry::hflip3d(&Pose3D::from_flat(tape.value(y2)), &self.topo);
        Ok(Pose3D {
            joints: p1
                .joints
                .iter()
                .zip(&p2.joints)
                .map(|(a, b)| [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5, (a[2] + b[2]) * 0.5])
                .collect(),
        })
    }

    /// Adapt on one instance (per the configured mode) and predict its 3D
    /// pose.
    pub fn infer_one(&mut self, x: &Pose2D<f32>) -> Result<Pose3D<f32>, IsoError> {
        // a zero iteration count or zero step size makes adaptation a no-op
        let adapt =
            self.instance % self.config.skip == 0 && self.config.t > 0 && self.config.alpha > 0.0;
        self.instance += 1;
        if !adapt {
            return Ok(self.predict(x)?);
        }
        if self.config.mode == IsoMode::Vanilla {
            self.reset_to_checkpoint()?;
        }
        // vanilla instances are independent: the adaptation stream restarts
        // from the run seed for every instance, so the result depends only
        // on x and the checkpoint
        let mut rng = match self.config.mode {
            IsoMode::Vanilla => ChaCha8Rng::seed_from_u64(self.config.seed),
            IsoMode::Online => self.rng.clone(),
        };
        let batch = build_iso_batch(x, &self.topo, self.config.copies);
        for _ in 0..self.config.t {
            self.adapt_iteration(&batch, &mut rng)?;
        }
        if self.config.mode == IsoMode::Online {
            self.rng = rng;
        }
        let pred = self.predict(x)?;
        if self.config.mode == IsoMode::Vanilla {
            self.reset_to_checkpoint()?;
        }
        Ok(pred)
    }

    /// Run a stream of instances in order, honoring the skip setting, and
    /// record per-instance wall time.
    pub fn infer_sequence(
        &mut self,
        xs: &[Pose2D<f32>],
    ) -> Result<(Vec<Pose3D<f32>>, Vec<InstanceTiming>), IsoError> {
        let mut preds = Vec::with_capacity(xs.len());
        let mut timings = Vec::with_capacity(xs.len());
        for (i, x) in xs.iter().enumerate() {
            let adapted = self.instance % self.config.skip == 0
                && self.config.t > 0
                && self.config.alpha > 0.0;
            let start = std::time::Instant::now();
            preds.push(self.infer_one(x)?);
            timings.push(InstanceTiming { index: i, adapted, seconds: start.elapsed().as_secs_f64() });
        }
        Ok((preds, timings))
    }

    /// Number of instances consumed so far.
    pub fn instances_seen(&self) -> usize {
        self.instance
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;
    use crate::synthdata::{desk_source, desk_target, make_dataset, Dataset};
    use crate::train::{train_joint, TrainConfig};

    fn toy_setup() -> (Dataset, LifterNetwork<f32>, Discriminator<f32>) {
        let topo = SkeletonTopology::default_16();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 96, 21), &topo, &cam).unwrap();
        let arch = ArchConfig {
            width: 16,
            shared_blocks: 1,
            head_blocks: 1,
            disc_blocks: 1,
            dropout: 0.0,
            ..ArchConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            initial_lr: 1e-2,
            gamma: 1.0,
            ssl: SslKind::Adversary,
            disc_lr: Some(2e-3),
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train_joint(&ds, &arch, &cfg).unwrap();
        (ds, out.lifter, out.disc.unwrap())
    }

    fn target_stream(n: usize) -> Vec<Pose2D<f32>> {
        let topo = SkeletonTopology::default_16();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_target(&topo, n, 33), &topo, &cam).unwrap();
        (0..n).map(|i| ds.pose2d(i)).collect()
    }

    fn engine(mode: IsoMode, t: usize, skip: usize) -> IsoEngine {
        let (ds, lifter, disc) = toy_setup();
        let mut config = match mode {
            IsoMode::Vanilla => IsoConfig::vanilla(SslKind::Adversary),
            IsoMode::Online => IsoConfig::online(SslKind::Adversary),
        };
        config.t = t;
        config.skip = skip;
        config.copies = 8;
        config.alpha = 1e-3;
        IsoEngine::new(lifter, disc, ds.topo.clone(), ds.cam, config).unwrap()
    }

    fn bits(pose: &Pose3D<f32>) -> Vec<u32> {
        pose.joints.iter().flat_map(|j| j.iter().map(|v| v.to_bits())).collect()
    }

    fn lifter_bits(l: &LifterNetwork<f32>) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for g in [ParamGroup::Extractor, ParamGroup::FslHead, ParamGroup::SslHead] {
            for t in l.group_tensors(g) {
                out.extend(t.data().iter().map(|v| v.to_bits()));
            }
        }
        for s in l.bn_states() {
            out.extend(s.running_mean.iter().map(|v| v.to_bits()));
            out.extend(s.running_var.iter().map(|v| v.to_bits()));
        }
        out
    }

    #[test]
    fn batch_construction() {
        let xs = target_stream(1);
        let topo = SkeletonTopology::default_16();
        let b = build_iso_batch(&xs[0], &topo, 2);
        let expect: Vec<f32> = xs[0]
            .flatten()
            .into_iter()
            .chain(geometry::hflip2d(&xs[0], &topo).flatten())
            .collect();
        assert_eq!(b, expect);
        // all rows stay normalized
        let b8 = build_iso_batch(&xs[0], &topo, 8);
        let root = topo.root();
        for row in b8.chunks(32) {
            let p = Pose2D::from_flat(row);
            let mut mean = 0.0f64;
            for (j, q) in p.joints.iter().enumerate() {
                if j != root {
                    mean += ((q[0] as f64).powi(2) + (q[1] as f64).powi(2)).sqrt();
                }
            }
            assert!((mean / 15.0 - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn config_gates() {
        assert!(IsoConfig { copies: 1, ..IsoConfig::vanilla(SslKind::Adversary) }.validate().is_err());
        assert!(IsoConfig { skip: 0, ..IsoConfig::vanilla(SslKind::Adversary) }.validate().is_err());
        assert!(IsoConfig::vanilla(SslKind::None).validate().is_err());
        assert_eq!(IsoConfig::vanilla(SslKind::Cycle).t, 10);
        assert_eq!(IsoConfig::online(SslKind::Cycle).t, 1);
    }

    #[test]
    fn t_zero_is_noop() {
        let mut adapted = engine(IsoMode::Vanilla, 0, 1);
        let mut plain = engine(IsoMode::Vanilla, 0, 1);
        let xs = target_stream(3);
        for x in &xs {
            let a = adapted.infer_one(x).unwrap();
            let b = plain.predict(x).unwrap();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn vanilla_leaves_no_trace() {
        let mut eng = engine(IsoMode::Vanilla, 3, 1);
        let xs = target_stream(2);
        let before = lifter_bits(&eng.lifter);
        let p_before = eng.predict(&xs[1]).unwrap();
        let adapted_pred = eng.infer_one(&xs[0]).unwrap();
        let after = lifter_bits(&eng.lifter);
        assert_eq!(before, after, "vanilla adaptation must restore the checkpoint");
        let p_after = eng.predict(&xs[1]).unwrap();
        assert_eq!(bits(&p_before), bits(&p_after));
        // and the adaptation did something for its own instance
        let unadapted = eng.predict(&xs[0]).unwrap();
        assert_ne!(bits(&adapted_pred), bits(&unadapted));
    }

    #[test]
    fn vanilla_is_permutation_invariant() {
        let mut eng = engine(IsoMode::Vanilla, 2, 1);
        let xs = target_stream(4);
        let (preds, _) = eng.infer_sequence(&xs).unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffled: Vec<Pose2D<f32>> = perm.iter().map(|&i| xs[i].clone()).collect();
        let mut eng2 = engine(IsoMode::Vanilla, 2, 1);
        let (preds2, _) = eng2.infer_sequence(&shuffled).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(bits(&preds[i]), bits(&preds2[k]), "instance {}", i);
        }
    }

    #[test]
    fn online_carries_state() {
        let mut eng = engine(IsoMode::Online, 1, 1);
        let xs = target_stream(3);
        let s0 = lifter_bits(&eng.lifter);
        eng.infer_one(&xs[0]).unwrap();
        let s1 = lifter_bits(&eng.lifter);
        eng.infer_one(&xs[1]).unwrap();
        let s2 = lifter_bits(&eng.lifter);
        assert_ne!(s0, s1);
        assert_ne!(s1, s2);
        // online and vanilla disagree on a later instance
        let mut van = engine(IsoMode::Vanilla, 1, 1);
        van.config.alpha = eng.config.alpha;
        let (vp, _) = van.infer_sequence(&xs).unwrap();
        let mut onl = engine(IsoMode::Online, 1, 1);
        let (op, _) = onl.infer_sequence(&xs).unwrap();
        assert_ne!(bits(&vp[2]), bits(&op[2]));
    }

    #[test]
    fn frozen_groups_never_move() {
        for mode in [IsoMode::Vanilla, IsoMode::Online] {
            let mut eng = engine(mode, 2, 1);
            let theta_f: Vec<u32> = eng
                .lifter
                .group_tensors(ParamGroup::FslHead)
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect();
            let bn: Vec<u32> = eng
                .lifter
                .bn_states()
                .iter()
                .flat_map(|s| {
                    s.running_mean
                        .iter()
                        .chain(s.running_var.iter())
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect();
            for x in target_stream(2) {
                eng.infer_one(&x).unwrap();
            }
            let theta_f_after: Vec<u32> = eng
                .lifter
                .group_tensors(ParamGroup::FslHead)
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect();
            let bn_after: Vec<u32> = eng
                .lifter
                .bn_states()
                .iter()
                .flat_map(|s| {
                    s.running_mean
                        .iter()
                        .chain(s.running_var.iter())
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect();
            assert_eq!(theta_f, theta_f_after, "{:?}", mode);
            assert_eq!(bn, bn_after, "{:?}", mode);
        }
    }

    #[test]
    fn skip_counts_adaptations() {
        let mut eng = engine(IsoMode::Online, 1, 10);
        let xs = target_stream(95);
        let (_, timings) = eng.infer_sequence(&xs).unwrap();
        let adapted = timings.iter().filter(|t| t.adapted).count();
        assert_eq!(adapted, 10);
        assert!(timings[0].adapted && timings[10].adapted && !timings[1].adapted);
    }

    #[test]
    fn baseline_checkpoint_rejected() {
        let topo = SkeletonTopology::default_16();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 32, 9), &topo, &cam).unwrap();
        let arch = ArchConfig {
            width: 8,
            shared_blocks: 1,
            head_blocks: 1,
            disc_blocks: 1,
            dropout: 0.0,
            ..ArchConfig::default()
        };
        let cfg = TrainConfig { epochs: 1, batch_size: 16, ..TrainConfig::default() };
        let out = crate::train::train_baseline(&ds, &arch, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let meta = crate::checkpoint::CheckpointMeta { epoch: 1, seed: 0, ssl: SslKind::None };
        crate::checkpoint::save_checkpoint(&path, &out.lifter, None, &topo, &meta).unwrap();
        let ckpt = crate::checkpoint::load_checkpoint(&path).unwrap();
        match IsoEngine::from_checkpoint(ckpt, IsoConfig::vanilla(SslKind::Adversary)) {
            Err(IsoError::Incompatible(_)) => {}
            other => panic!("expected incompatible-checkpoint error, got {:?}", other.err()),
        }
    }

    #[test]
    fn timing_report_renders() {
        let t = vec![
            InstanceTiming { index: 0, adapted: true, seconds: 0.5 },
            InstanceTiming { index: 1, adapted: false, seconds: 0.1 },
        ];
        let tsv = render_timing(&t);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "instance\tadapted\tseconds");
        assert_eq!(lines[1], "0\t1\t0.500000");
        assert_eq!(lines[2], "1\t0\t0.100000");
    }
}

//! Network definitions: residual blocks, the two-headed lifter (shared
//! extractor + FSL/SSL heads) and the 2D pose discriminator, plus parameter
//! snapshot/restore.
//!
//! A forward pass first binds every parameter tensor onto the tape
//! ([`LifterNetwork::begin`] / [`Discriminator::begin`]), so one tape can
//! route several losses through the same bound parameters and gradients
//! accumulate in a single backward pass.

use crate::autodiff::{BnMode, BnState, Mode, NodeId, Tape, TapeError, Tensor};
use crate::geometry::diff;
use crate::real::Real;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture config: {0}")]
    Config(String),
    #[error("snapshot does not match the network: {0}")]
    SnapshotMismatch(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Dropout/batchnorm behavior of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetMode {
    /// Batch statistics, running-stat updates, active dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
    /// Running statistics with affine gradients blocked, no dropout;
    /// the inference-stage adaptation mode.
    FrozenBn,
}

impl NetMode {
    fn bn(self) -> BnMode {
        match self {
            NetMode::Train => BnMode::Train,
            NetMode::Eval => BnMode::Eval,
            NetMode::FrozenBn => BnMode::Frozen,
        }
    }

    fn dropout(self) -> Mode {
        match self {
            NetMode::Train => Mode::Train,
            _ => Mode::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Fsl,
    Ssl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    FslHead,
    SslHead,
}

/// Architecture hyperparameters shared by builder, checkpoints and loaders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub joints: usize,
    pub width: usize,
    /// Number of shared residual blocks in the feature extractor.
    pub shared_blocks: usize,
    pub head_blocks: usize,
    pub disc_blocks: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub root_joint: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            joints: 16,
            width: 1024,
            shared_blocks: 3,
            head_blocks: 1,
            disc_blocks: 3,
            dropout: 0.5,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            root_joint: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.joints < 2 {
            return Err(NnError::Config(format!("joints {} < 2", self.joints)));
        }
        if self.width < 1 {
            return Err(NnError::Config("width must be at least 1".into()));
        }
        if self.root_joint >= self.joints {
            return Err(NnError::Config(format!(
                "root joint {} out of range for {} joints",
                self.root_joint, self.joints
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return Err(NnError::Config(format!("leaky slope {} not in (0,1)", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        2 * self.joints
    }

    pub fn output_width(&self) -> usize {
        3 * self.joints
    }
}

fn linear_param_count(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

fn block_param_count(width: usize, with_bn: bool) -> usize {
    let lin = 2 * linear_param_count(width, width);
    if with_bn {
        lin + 2 * 2 * width
    } else {
        lin
    }
}

/// Closed-form parameter count of the shared extractor.
pub fn extractor_param_count(cfg: &ArchConfig) -> usize {
    linear_param_count(cfg.input_width(), cfg.width) + cfg.shared_blocks * block_param_count(cfg.width, true)
}

/// Closed-form parameter count of one head.
pub fn head_param_count(cfg: &ArchConfig) -> usize {
    cfg.head_blocks * block_param_count(cfg.width, true) + linear_param_count(cfg.width, cfg.output_width())
}

/// Closed-form parameter count of the discriminator.
pub fn discriminator_param_count(cfg: &ArchConfig) -> usize {
    linear_param_count(cfg.input_width(), cfg.width)
        + cfg.disc_blocks * block_param_count(cfg.width, false)
        + linear_param_count(cfg.width, 1)
}

// ---- layers ----

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<R: Real> {
    pub w: Tensor<R>,
    pub b: Tensor<R>,
}

impl<R: Real> LinearLayer<R> {
    /// Zero-mean normal weights with variance 2/fan_in, zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let data: Vec<R> = (0..fan_in * fan_out)
            .map(|_| R::sample_normal(rng) * R::from_f64(std))
            .collect();
        LinearLayer {
            w: Tensor::new(vec![fan_in, fan_out], data).unwrap().with_grad(true),
            b: Tensor::zeros(vec![fan_out]).with_grad(true),
        }
    }

    fn tensors(&self) -> Vec<&Tensor<R>> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<R: Real> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub state: BnState<R>,
}

impl<R: Real> BatchNormLayer<R> {
    fn init(width: usize, cfg: &ArchConfig) -> Self {
        let mut gamma = Tensor::zeros(vec![width]).with_grad(true);
        for v in gamma.data_mut() {
            *v = R::one();
        }
        BatchNormLayer {
            gamma,
            beta: Tensor::zeros(vec![width]).with_grad(true),
            state: BnState::new(width, R::from_f64(cfg.bn_momentum), R::from_f64(cfg.bn_eps)),
        }
    }
}

/// Two linear layers with optional batchnorm, leaky ReLU, dropout and an
/// additive skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<R: Real> {
    pub lin1: LinearLayer<R>,
    pub bn1: Option<BatchNormLayer<R>>,
    pub lin2: LinearLayer<R>,
    pub bn2: Option<BatchNormLayer<R>>,
    dropout: R,
    slope: R,
}

pub struct BlockBind {
    lin1: (NodeId, NodeId),
    bn1: Option<(NodeId, NodeId)>,
    lin2: (NodeId, NodeId),
    bn2: Option<(NodeId, NodeId)>,
}

impl<R: Real> ResidualBlock<R> {
    fn init(width: usize, with_bn: bool, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            lin1: LinearLayer::init(width, width, rng),
            bn1: with_bn.then(|| BatchNormLayer::init(width, cfg)),
            lin2: LinearLayer::init(width, width, rng),
            bn2: with_bn.then(|| BatchNormLayer::init(width, cfg)),
            dropout: R::from_f64(cfg.dropout),
            slope: R::from_f64(cfg.leaky_slope),
        }
    }

    fn tensors(&self) -> Vec<&Tensor<R>> {
        let mut out = self.lin1.tensors();
        if let Some(bn) = &self.bn1 {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out.extend(self.lin2.tensors());
        if let Some(bn) = &self.bn2 {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = self.lin1.tensors_mut();
        if let Some(bn) = &mut self.bn1 {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.extend(self.lin2.tensors_mut());
        if let Some(bn) = &mut self.bn2 {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    fn states_mut(&mut self) -> Vec<&mut BnState<R>> {
        let mut out = Vec::new();
        if let Some(bn) = &mut self.bn1 {
            out.push(&mut bn.state);
        }
        if let Some(bn) = &mut self.bn2 {
            out.push(&mut bn.state);
        }
        out
    }

    fn states(&self) -> Vec<&BnState<R>> {
        let mut out = Vec::new();
        if let Some(bn) = &self.bn1 {
            out.push(&bn.state);
        }
        if let Some(bn) = &self.bn2 {
            out.push(&bn.state);
        }
        out
    }

    fn bind(&self, tape: &mut Tape<R>) -> BlockBind {
        BlockBind {
            lin1: (tape.leaf_tensor(&self.lin1.w), tape.leaf_tensor(&self.lin1.b)),
            bn1: self.bn1.as_ref().map(|bn| (tape.leaf_tensor(&bn.gamma), tape.leaf_tensor(&bn.beta))),
            lin2: (tape.leaf_tensor(&self.lin2.w), tape.leaf_tensor(&self.lin2.b)),
            bn2: self.bn2.as_ref().map(|bn| (tape.leaf_tensor(&bn.gamma), tape.leaf_tensor(&bn.beta))),
        }
    }

    fn bind_ids(bind: &BlockBind) -> Vec<NodeId> {
        let mut out = vec![bind.lin1.0, bind.lin1.1];
        if let Some((g, b)) = bind.bn1 {
            out.push(g);
            out.push(b);
        }
        out.push(bind.lin2.0);
        out.push(bind.lin2.1);
        if let Some((g, b)) = bind.bn2 {
            out.push(g);
            out.push(b);
        }
        out
    }

    fn forward(
        &mut self,
        tape: &mut Tape<R>,
        bind: &BlockBind,
        x: NodeId,
        mode: NetMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TapeError> {
        let mut h = tape.linear(x, bind.lin1.0, Some(bind.lin1.1))?;
        if let (Some(bn), Some((g, b))) = (&mut self.bn1, bind.bn1) {
            h = tape.batchnorm(h, g, b, &mut bn.state, mode.bn())?;
        }
        h = tape.leaky_relu(h, self.slope)?;
        h = tape.dropout(h, self.dropout, mode.dropout(), rng)?;
        h = tape.linear(h, bind.lin2.0, Some(bind.lin2.1))?;
        if let (Some(bn), Some((g, b))) = (&mut self.bn2, bind.bn2) {
            h = tape.batchnorm(h, g, b, &mut bn.state, mode.bn())?;
        }
        h = tape.leaky_relu(h, self.slope)?;
        h = tape.dropout(h, self.dropout, mode.dropout(), rng)?;
        tape.add(x, h)
    }
}

// ---- lifter ----

struct Head<R: Real> {
    blocks: Vec<ResidualBlock<R>>,
    out: LinearLayer<R>,
}

pub struct HeadBind {
    blocks: Vec<BlockBind>,
    out: (NodeId, NodeId),
}

impl<R: Real> Head<R> {
    fn init(cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        Head {
            blocks: (0..cfg.head_blocks).map(|_| ResidualBlock::init(cfg.width, true, cfg, rng)).collect(),
            out: LinearLayer::init(cfg.width, cfg.output_width(), rng),
        }
    }

    fn tensors(&self) -> Vec<&Tensor<R>> {
        let mut out: Vec<&Tensor<R>> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.extend(self.out.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out: Vec<&mut Tensor<R>> = Vec::new();
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend(self.out.tensors_mut());
        out
    }

    fn bind(&self, tape: &mut Tape<R>) -> HeadBind {
        HeadBind {
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            out: (tape.leaf_tensor(&self.out.w), tape.leaf_tensor(&self.out.b)),
        }
    }
}

/// Two-headed lifter: shared extractor, FSL head and SSL head. Both heads
/// produce root-relative B x 3J predictions in millimeters.
pub struct LifterNetwork<R: Real> {
    pub config: ArchConfig,
    input: LinearLayer<R>,
    extractor: Vec<ResidualBlock<R>>,
    fsl: Head<R>,
    ssl: Head<R>,
}

/// Parameter bindings of one lifter forward pass.
pub struct LifterPass {
    input: (NodeId, NodeId),
    extractor: Vec<BlockBind>,
    fsl: HeadBind,
    ssl: HeadBind,
}

impl LifterPass {
    /// Bound parameter node ids of a group, aligned with
    /// [`LifterNetwork::group_tensors`].
    pub fn group_ids(&self, group: ParamGroup) -> Vec<NodeId> {
        match group {
            ParamGroup::Extractor => {
                let mut out = vec![self.input.0, self.input.1];
                for b in &self.extractor {
                    out.extend(ResidualBlock::<f32>::bind_ids(b));
                }
                out
            }
            ParamGroup::FslHead | ParamGroup::SslHead => {
                let h = if group == ParamGroup::FslHead { &self.fsl } else { &self.ssl };
                let mut out: Vec<NodeId> = h.blocks.iter().flat_map(ResidualBlock::<f32>::bind_ids).collect();
                out.push(h.out.0);
                out.push(h.out.1);
                out
            }
        }
    }
}

/// Build a lifter with the given architecture; weights are drawn zero-mean
/// normal with variance 2/fan_in, biases zero.
pub fn build_lifter<R: Real>(config: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<LifterNetwork<R>, NnError> {
    config.validate()?;
    Ok(LifterNetwork {
        config: *config,
        input: LinearLayer::init(config.input_width(), config.width, rng),
        extractor: (0..config.shared_blocks)
            .map(|_| ResidualBlock::init(config.width, true, config, rng))
            .collect(),
        fsl: Head::init(config, rng),
        ssl: Head::init(config, rng),
    })
}

impl<R: Real> LifterNetwork<R> {
    pub fn group_tensors(&self, group: ParamGroup) -> Vec<&Tensor<R>> {
        match group {
            ParamGroup::Extractor => {
                let mut out = self.input.tensors();
                out.extend(self.extractor.iter().flat_map(|b| b.tensors()));
                out
            }
            ParamGroup::FslHead => self.fsl.tensors(),
            ParamGroup::SslHead => self.ssl.tensors(),
        }
    }

    pub fn group_tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor<R>> {
        match group {
            ParamGroup::Extractor => {
                let mut out = self.input.tensors_mut();
                for b in self.extractor.iter_mut() {
                    out.extend(b.tensors_mut());
                }
                out
            }
            ParamGroup::FslHead => self.fsl.tensors_mut(),
            ParamGroup::SslHead => self.ssl.tensors_mut(),
        }
    }

    /// Mutable tensors for a set of groups, always emitted in the fixed
    /// order extractor, FSL head, SSL head (matching concatenated
    /// [`LifterNetwork::group_tensors`] calls in that order).
    pub fn tensors_for_groups_mut(&mut self, groups: &[ParamGroup]) -> Vec<&mut Tensor<R>> {
        let mut out = Vec::new();
        if groups.contains(&ParamGroup::Extractor) {
            out.extend(self.input.tensors_mut());
            for b in self.extractor.iter_mut() {
                out.extend(b.tensors_mut());
            }
        }
        if groups.contains(&ParamGroup::FslHead) {
            out.extend(self.fsl.tensors_mut());
        }
        if groups.contains(&ParamGroup::SslHead) {
            out.extend(self.ssl.tensors_mut());
        }
        out
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.group_tensors(group).iter().map(|t| t.numel()).sum()
    }

    /// Bind all parameters onto the tape.
    pub fn begin(&self, tape: &mut Tape<R>) -> LifterPass {
        LifterPass {
            input: (tape.leaf_tensor(&self.input.w), tape.leaf_tensor(&self.input.b)),
            extractor: self.extractor.iter().map(|b| b.bind(tape)).collect(),
            fsl: self.fsl.bind(tape),
            ssl: self.ssl.bind(tape),
        }
    }

    /// Shared-extractor features for a B x 2J input node.
    pub fn features(
        &mut self,
        tape: &mut Tape<R>,
        pass: &LifterPass,
        x: NodeId,
        mode: NetMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TapeError> {
        let (rows, cols) = tape.dims(x);
        if cols != self.config.input_width() {
            return Err(TapeError::ShapeMismatch {
                op: "lifter",
                detail: format!(
                    "input is {}x{} but the lifter expects width {}",
                    rows,
                    cols,
                    self.config.input_width()
                ),
            });
        }
        let mut h = tape.linear(x, pass.input.0, Some(pass.input.1))?;
        for (block, bind) in self.extractor.iter_mut().zip(&pass.extractor) {
            h = block.forward(tape, bind, h, mode, rng)?;
        }
        Ok(h)
    }

    /// Head on top of extractor features; output is root-centered.
    pub fn head(
        &mut self,
        tape: &mut Tape<R>,
        pass: &LifterPass,
        features: NodeId,
        head: HeadKind,
        mode: NetMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TapeError> {
        let (net_head, bind) = match head {
            HeadKind::Fsl => (&mut self.fsl, &pass.fsl),
            HeadKind::Ssl => (&mut self.ssl, &pass.ssl),
        };
        let mut h = features;
        for (block, b) in net_head.blocks.iter_mut().zip(&bind.blocks) {
            h = block.forward(tape, b, h, mode, rng)?;
        }
        let raw = tape.linear(h, bind.out.0, Some(bind.out.1))?;
        diff::root_center_3d(tape, raw, self.config.joints, self.config.root_joint)
    }

    /// Convenience full forward: bind, extract, head.
    pub fn forward(
        &mut self,
        tape: &mut Tape<R>,
        x: NodeId,
        head: HeadKind,
        mode: NetMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, LifterPass), TapeError> {
        let pass = self.begin(tape);
        let feat = self.features(tape, &pass, x, mode, rng)?;
        let out = self.head(tape, &pass, feat, head, mode, rng)?;
        Ok((out, pass))
    }

    pub fn bn_states(&self) -> Vec<&BnState<R>> {
        let mut out: Vec<&BnState<R>> = self.extractor.iter().flat_map(|b| b.states()).collect();
        for h in [&self.fsl, &self.ssl] {
            for b in &h.blocks {
                out.extend(b.states());
            }
        }
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<&mut BnState<R>> {
        let mut out: Vec<&mut BnState<R>> = Vec::new();
        for b in self.extractor.iter_mut() {
            out.extend(b.states_mut());
        }
        for h in [&mut self.fsl, &mut self.ssl] {
            for b in h.blocks.iter_mut() {
                out.extend(b.states_mut());
            }
        }
        out
    }

    fn all_tensors(&self) -> Vec<&Tensor<R>> {
        let mut out = self.group_tensors(ParamGroup::Extractor);
        out.extend(self.group_tensors(ParamGroup::FslHead));
        out.extend(self.group_tensors(ParamGroup::SslHead));
        out
    }

    fn all_tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        // Collect raw pointers group by group to sidestep aliasing of &mut self.
        let mut out = Vec::new();
        let mut ext = self.input.tensors_mut();
        out.append(&mut ext);
        for b in self.extractor.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend(self.fsl.tensors_mut());
        out.extend(self.ssl.tensors_mut());
        out
    }

    /// Batchnorm states belonging to one parameter group, in bind order.
    pub fn group_bn_states(&self, group: ParamGroup) -> Vec<&BnState<R>> {
        match group {
            ParamGroup::Extractor => self.extractor.iter().flat_map(|b| b.states()).collect(),
            ParamGroup::FslHead => self.fsl.blocks.iter().flat_map(|b| b.states()).collect(),
            ParamGroup::SslHead => self.ssl.blocks.iter().flat_map(|b| b.states()).collect(),
        }
    }

    pub fn group_bn_states_mut(&mut self, group: ParamGroup) -> Vec<&mut BnState<R>> {
        let mut out = Vec::new();
        let blocks: &mut [ResidualBlock<R>] = match group {
            ParamGroup::Extractor => &mut self.extractor,
            ParamGroup::FslHead => &mut self.fsl.blocks,
            ParamGroup::SslHead => &mut self.ssl.blocks,
        };
        for b in blocks.iter_mut() {
            out.extend(b.states_mut());
        }
        out
    }

    fn group_tag(group: ParamGroup) -> &'static str {
        match group {
            ParamGroup::Extractor => "theta_e",
            ParamGroup::FslHead => "theta_f",
            ParamGroup::SslHead => "theta_s",
        }
    }

    /// Canonical (name, shape, data) entries of parameters and running
    /// statistics of the given groups, for checkpointing.
    pub fn entries_for(&self, groups: &[ParamGroup]) -> Vec<(String, Vec<usize>, Vec<R>)> {
        let mut out = Vec::new();
        for &g in groups {
            let tag = Self::group_tag(g);
            for (i, t) in self.group_tensors(g).iter().enumerate() {
                out.push((format!("lifter/{}/p{:03}", tag, i), t.shape().to_vec(), t.data().to_vec()));
            }
            for (i, st) in self.group_bn_states(g).iter().enumerate() {
                out.push((
                    format!("lifter/{}/bn{:02}/mean", tag, i),
                    vec![st.running_mean.len()],
                    st.running_mean.clone(),
                ));
                out.push((
                    format!("lifter/{}/bn{:02}/var", tag, i),
                    vec![st.running_var.len()],
                    st.running_var.clone(),
                ));
            }
        }
        out
    }

    pub fn entries(&self) -> Vec<(String, Vec<usize>, Vec<R>)> {
        self.entries_for(&[ParamGroup::Extractor, ParamGroup::FslHead, ParamGroup::SslHead])
    }

    /// Load entries produced by [`LifterNetwork::entries_for`] into the
    /// given groups of this network.
    pub fn load_entries(
        &mut self,
        groups: &[ParamGroup],
        lookup: &mut impl FnMut(&str) -> Option<(Vec<usize>, Vec<R>)>,
    ) -> Result<(), NnError> {
        for &g in groups {
            let tag = Self::group_tag(g);
            let fetch = |lookup: &mut dyn FnMut(&str) -> Option<(Vec<usize>, Vec<R>)>,
                         name: String,
                         shape: &[usize]|
             -> Result<Vec<R>, NnError> {
                let (got_shape, data) = lookup(&name)
                    .ok_or_else(|| NnError::SnapshotMismatch(format!("missing entry {}", name)))?;
                if got_shape != shape {
                    return Err(NnError::SnapshotMismatch(format!(
                        "entry {} has shape {:?}, expected {:?}",
                        name, got_shape, shape
                    )));
                }
                Ok(data)
            };
            let names: Vec<(String, Vec<usize>)> = self
                .group_tensors(g)
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("lifter/{}/p{:03}", tag, i), t.shape().to_vec()))
                .collect();
            for ((name, shape), t) in names.into_iter().zip(self.group_tensors_mut(g)) {
                let data = fetch(lookup, name, &shape)?;
                t.data_mut().copy_from_slice(&data);
            }
            let widths: Vec<usize> =
                self.group_bn_states(g).iter().map(|s| s.running_mean.len()).collect();
            for (i, st) in self.group_bn_states_mut(g).into_iter().enumerate() {
                let mean = fetch(lookup, format!("lifter/{}/bn{:02}/mean", tag, i), &[widths[i]])?;
                let var = fetch(lookup, format!("lifter/{}/bn{:02}/var", tag, i), &[widths[i]])?;
                st.running_mean.copy_from_slice(&mean);
                st.running_var.copy_from_slice(&var);
            }
        }
        Ok(())
    }
}

// ---- discriminator ----

/// Real/fake 2D-pose classifier: input linear, residual blocks without
/// batchnorm, scalar output through a sigmoid. Scores are clamped a hair
/// inside (0,1) so downstream log terms stay finite in 32-bit runs.
pub struct Discriminator<R: Real> {
    pub config: ArchConfig,
    input: LinearLayer<R>,
    blocks: Vec<ResidualBlock<R>>,
    out: LinearLayer<R>,
}

pub struct DiscPass {
    input: (NodeId, NodeId),
    blocks: Vec<BlockBind>,
    out: (NodeId, NodeId),
}

impl DiscPass {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.input.0, self.input.1];
        for b in &self.blocks {
            out.extend(ResidualBlock::<f32>::bind_ids(b));
        }
        out.push(self.out.0);
        out.push(self.out.1);
        out
    }
}

pub fn build_discriminator<R: Real>(config: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Discriminator<R>, NnError> {
    config.validate()?;
    Ok(Discriminator {
        config: *config,
        input: LinearLayer::init(config.input_width(), config.width, rng),
        blocks: (0..config.disc_blocks)
            .map(|_| ResidualBlock::init(config.width, false, config, rng))
            .collect(),
        out: LinearLayer::init(config.width, 1, rng),
    })
}

pub const SCORE_MARGIN: f64 = 1e-6;

impl<R: Real> Discriminator<R> {
    pub fn begin(&self, tape: &mut Tape<R>) -> DiscPass {
        DiscPass {
            input: (tape.leaf_tensor(&self.input.w), tape.leaf_tensor(&self.input.b)),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            out: (tape.leaf_tensor(&self.out.w), tape.leaf_tensor(&self.out.b)),
        }
    }

    /// Per-row score in (0,1) for a B x 2J batch of normalized 2D poses.
    pub fn score(
        &mut self,
        tape: &mut Tape<R>,
        pass: &DiscPass,
        x: NodeId,
        mode: NetMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TapeError> {
        let (rows, cols) = tape.dims(x);
        if cols != self.config.input_width() {
            return Err(TapeError::ShapeMismatch {
                op: "discriminator",
                detail: format!(
                    "input is {}x{} but the discriminator expects width {}",
                    rows,
                    cols,
                    self.config.input_width()
                ),
            });
        }
        let mut h = tape.linear(x, pass.input.0, Some(pass.input.1))?;
        for (block, bind) in self.blocks.iter_mut().zip(&pass.blocks) {
            h = block.forward(tape, bind, h, mode, rng)?;
        }
        let logits = tape.linear(h, pass.out.0, Some(pass.out.1))?;
        let s = tape.sigmoid(logits);
        let m = R::from_f64(SCORE_MARGIN);
        Ok(tape.clamp(s, m, R::one() - m))
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<R>,
        x: NodeId,
        mode: NetMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, DiscPass), TapeError> {
        let pass = self.begin(tape);
        let out = self.score(tape, &pass, x, mode, rng)?;
        Ok((out, pass))
    }

    pub fn tensors(&self) -> Vec<&Tensor<R>> {
        let mut out = self.input.tensors();
        out.extend(self.blocks.iter().flat_map(|b| b.tensors()));
        out.extend(self.out.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = self.input.tensors_mut();
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend(self.out.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn entries(&self) -> Vec<(String, Vec<usize>, Vec<R>)> {
        self.tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("disc/theta_d/p{:03}", i), t.shape().to_vec(), t.data().to_vec()))
            .collect()
    }

    pub fn load_entries(
        &mut self,
        lookup: &mut impl FnMut(&str) -> Option<(Vec<usize>, Vec<R>)>,
    ) -> Result<(), NnError> {
        let names: Vec<String> = self.entries().into_iter().map(|(n, _, _)| n).collect();
        let mut targets = self.tensors_mut();
        for (name, t) in names.iter().zip(targets.iter_mut()) {
            let (shape, data) = lookup(name)
                .ok_or_else(|| NnError::SnapshotMismatch(format!("missing entry {}", name)))?;
            if shape != t.shape() {
                return Err(NnError::SnapshotMismatch(format!(
                    "entry {} has shape {:?}, expected {:?}",
                    name,
                    shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }
}

// ---- snapshots ----

/// Deep copy of parameters and running statistics; restoring makes the
/// network bit-identical to snapshot time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot<R: Real> {
    params: Vec<Vec<R>>,
    stats: Vec<(Vec<R>, Vec<R>)>,
}

pub fn snapshot_lifter<R: Real>(net: &LifterNetwork<R>) -> ParamSnapshot<R> {
    ParamSnapshot {
        params: net.all_tensors().iter().map(|t| t.data().to_vec()).collect(),
        stats: net
            .bn_states()
            .iter()
            .map(|s| (s.running_mean.clone(), s.running_var.clone()))
            .collect(),
    }
}

pub fn restore_lifter<R: Real>(net: &mut LifterNetwork<R>, snap: &ParamSnapshot<R>) -> Result<(), NnError> {
    {
        let mut targets = net.all_tensors_mut();
        if targets.len() != snap.params.len() {
            return Err(NnError::SnapshotMismatch(format!(
                "{} tensors vs {} snapshot entries",
                targets.len(),
                snap.params.len()
            )));
        }
        for (t, src) in targets.iter_mut().zip(&snap.params) {
            if t.numel() != src.len() {
                return Err(NnError::SnapshotMismatch("tensor size mismatch".into()));
            }
            t.data_mut().copy_from_slice(src);
        }
    }
    let states = net.bn_states_mut();
    if states.len() != snap.stats.len() {
        return Err(NnError::SnapshotMismatch("batchnorm layer count mismatch".into()));
    }
    for (st, (mean, var)) in states.into_iter().zip(&snap.stats) {
        st.running_mean.copy_from_slice(mean);
        st.running_var.copy_from_slice(var);
    }
    Ok(())
}

pub fn snapshot_discriminator<R: Real>(d: &Discriminator<R>) -> ParamSnapshot<R> {
    ParamSnapshot {
        params: d.tensors().iter().map(|t| t.data().to_vec()).collect(),
        stats: Vec::new(),
    }
}

pub fn restore_discriminator<R: Real>(d: &mut Discriminator<R>, snap: &ParamSnapshot<R>) -> Result<(), NnError> {
    let mut targets = d.tensors_mut();
    if targets.len() != snap.params.len() {
        return Err(NnError::SnapshotMismatch(format!(
            "{} tensors vs {} snapshot entries",
            targets.len(),
            snap.params.len()
        )));
    }
    for (t, src) in targets.iter_mut().zip(&snap.params) {
        if t.numel() != src.len() {
            return Err(NnError::SnapshotMismatch("tensor size mismatch".into()));
        }
        t.data_mut().copy_from_slice(src);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> ArchConfig {
        ArchConfig { joints: 4, width: 8, ..ArchConfig::default() }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn default_extractor_param_count_matches_formula() {
        let cfg = ArchConfig::default();
        let expected = (32 * 1024 + 1024) + 3 * (2 * (1024 * 1024 + 1024) + 2 * 2 * 1024);
        assert_eq!(extractor_param_count(&cfg), expected);
        let net = build_lifter::<f32>(&cfg, &mut rng(0)).unwrap();
        assert_eq!(net.param_count(ParamGroup::Extractor), expected);
    }

    #[test]
    fn param_count_formula_matches_enumeration_for_varied_configs() {
        for cfg in [
            small_cfg(),
            ArchConfig { joints: 14, width: 64, shared_blocks: 2, ..ArchConfig::default() },
            ArchConfig { joints: 16, width: 128, head_blocks: 2, ..ArchConfig::default() },
        ] {
            let net = build_lifter::<f32>(&cfg, &mut rng(1)).unwrap();
            assert_eq!(net.param_count(ParamGroup::Extractor), extractor_param_count(&cfg));
            assert_eq!(net.param_count(ParamGroup::FslHead), head_param_count(&cfg));
            assert_eq!(net.param_count(ParamGroup::SslHead), head_param_count(&cfg));
            let d = build_discriminator::<f32>(&cfg, &mut rng(2)).unwrap();
            assert_eq!(d.param_count(), discriminator_param_count(&cfg));
        }
    }

    #[test]
    fn same_seed_builds_identical_networks() {
        let cfg = small_cfg();
        let a = build_lifter::<f32>(&cfg, &mut rng(9)).unwrap();
        let b = build_lifter::<f32>(&cfg, &mut rng(9)).unwrap();
        for (x, y) in a.all_tensors().iter().zip(b.all_tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn width_one_config_builds_and_runs() {
        let cfg = ArchConfig { joints: 2, width: 1, ..ArchConfig::default() };
        let mut net = build_lifter::<f32>(&cfg, &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(2, 4, vec![0.1; 8], false);
        let mut r = rng(4);
        let (out, _) = net.forward(&mut tape, x, HeadKind::Fsl, NetMode::Eval, &mut r).unwrap();
        assert_eq!(tape.dims(out), (2, 6));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(build_lifter::<f32>(&ArchConfig { joints: 1, ..small_cfg() }, &mut rng(0)).is_err());
        assert!(build_lifter::<f32>(&ArchConfig { width: 0, ..small_cfg() }, &mut rng(0)).is_err());
    }

    #[test]
    fn zeroed_output_layer_gives_zero_pose() {
        let cfg = small_cfg();
        let mut net = build_lifter::<f32>(&cfg, &mut rng(5)).unwrap();
        for t in net.fsl.out.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(1, 8, vec![0.3; 8], false);
        let mut r = rng(6);
        let (out, _) = net.forward(&mut tape, x, HeadKind::Fsl, NetMode::Eval, &mut r).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_identical_rows_give_identical_outputs() {
        let cfg = small_cfg();
        let mut net = build_lifter::<f32>(&cfg, &mut rng(7)).unwrap();
        let mut tape = Tape::new();
        let row = vec![0.1, -0.4, 0.2, 0.9, -0.3, 0.5, 0.7, -0.2];
        let mut data = row.clone();
        data.extend(&row);
        let x = tape.leaf(2, 8, data, false);
        let mut r = rng(8);
        let (out, _) = net.forward(&mut tape, x, HeadKind::Fsl, NetMode::Eval, &mut r).unwrap();
        let v = tape.value(out);
        assert_eq!(&v[..12], &v[12..]);
    }

    #[test]
    fn head_outputs_are_root_centered() {
        let cfg = small_cfg();
        let mut net = build_lifter::<f32>(&cfg, &mut rng(12)).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(1, 8, vec![0.4; 8], false);
        let mut r = rng(13);
        let (out, _) = net.forward(&mut tape, x, HeadKind::Ssl, NetMode::Eval, &mut r).unwrap();
        let v = tape.value(out);
        assert_eq!(&v[0..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn lifter_rejects_wrong_input_width() {
        let cfg = small_cfg();
        let mut net = build_lifter::<f32>(&cfg, &mut rng(10)).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(1, 6, vec![0.0; 6], false);
        let mut r = rng(11);
        assert!(net.forward(&mut tape, x, HeadKind::Fsl, NetMode::Eval, &mut r).is_err());
    }

    #[test]
    fn residual_block_is_identity_when_zeroed() {
        let cfg = small_cfg();
        let mut block = ResidualBlock::<f32>::init(8, true, &cfg, &mut rng(20));
        for t in block.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        // restore neutral BN affine
        for bn in [block.bn1.as_mut().unwrap(), block.bn2.as_mut().unwrap()] {
            for v in bn.gamma.data_mut() {
                *v = 1.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(1, 8, vec![0.5, -0.5, 1.0, 2.0, -1.0, 0.25, 0.0, 3.0], false);
        let bind = block.bind(&mut tape);
        let mut r = rng(21);
        let y = block.forward(&mut tape, &bind, x, NetMode::Eval, &mut r).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn discriminator_zero_output_layer_scores_half() {
        let cfg = small_cfg();
        let mut d = build_discriminator::<f32>(&cfg, &mut rng(30)).unwrap();
        for t in d.out.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(3, 8, vec![0.2; 24], false);
        let mut r = rng(31);
        let (s, _) = d.forward(&mut tape, x, NetMode::Eval, &mut r).unwrap();
        for &v in tape.value(s) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn discriminator_scores_stay_in_open_interval() {
        let cfg = small_cfg();
        let mut d = build_discriminator::<f32>(&cfg, &mut rng(32)).unwrap();
        let mut r = rng(33);
        let n = 10_000;
        let data: Vec<f32> = (0..n * 8).map(|_| f32::sample_normal(&mut r) * 10.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(n, 8, data, false);
        let (s, _) = d.forward(&mut tape, x, NetMode::Eval, &mut r).unwrap();
        for &v in tape.value(s) {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn discriminator_has_no_batchnorm() {
        let cfg = small_cfg();
        let d = build_discriminator::<f32>(&cfg, &mut rng(34)).unwrap();
        assert!(d.blocks.iter().all(|b| b.bn1.is_none() && b.bn2.is_none()));
    }

    #[test]
    fn snapshot_restore_round_trip_no_aliasing() {
        let cfg = small_cfg();
        let mut net = build_lifter::<f32>(&cfg, &mut rng(40)).unwrap();
        // give running stats a nontrivial value
        for st in net.bn_states_mut() {
            for v in st.running_mean.iter_mut() {
                *v = 0.25;
            }
        }
        let forward = |net: &mut LifterNetwork<f32>| {
            let mut tape = Tape::new();
            let x = tape.leaf(1, 8, vec![0.7; 8], false);
            let mut r = rng(41);
            let (out, _) = net.forward(&mut tape, x, HeadKind::Fsl, NetMode::Eval, &mut r).unwrap();
            tape.value(out).to_vec()
        };
        let before = forward(&mut net);
        let snap = snapshot_lifter(&net);
        for t in net.all_tensors_mut() {
            for v in t.data_mut() {
                *v += 1.5;
            }
        }
        assert_ne!(forward(&mut net), before);
        restore_lifter(&mut net, &snap).unwrap();
        assert_eq!(forward(&mut net), before);
        // snapshot is unchanged by later mutation
        for t in net.all_tensors_mut() {
            for v in t.data_mut() {
                *v = 99.0;
            }
        }
        let mut net2 = build_lifter::<f32>(&cfg, &mut rng(40)).unwrap();
        for st in net2.bn_states_mut() {
            for v in st.running_mean.iter_mut() {
                *v = 0.25;
            }
        }
        restore_lifter(&mut net2, &snap).unwrap();
        assert_eq!(forward(&mut net2), before);
    }

    #[test]
    fn snapshot_preserves_running_statistics() {
        let cfg = small_cfg();
        let mut net = build_lifter::<f32>(&cfg, &mut rng(42)).unwrap();
        for st in net.bn_states_mut() {
            st.running_mean[0] = 3.25;
            st.running_var[0] = 0.125;
        }
        let snap = snapshot_lifter(&net);
        for st in net.bn_states_mut() {
            st.running_mean[0] = 0.0;
            st.running_var[0] = 1.0;
        }
        restore_lifter(&mut net, &snap).unwrap();
        assert_eq!(net.bn_states()[0].running_mean[0], 3.25);
        assert_eq!(net.bn_states()[0].running_var[0], 0.125);
    }

    #[test]
    fn snapshot_architecture_mismatch_rejected() {
        let mut a = build_lifter::<f32>(&small_cfg(), &mut rng(50)).unwrap();
        let other = build_lifter::<f32>(
            &ArchConfig { width: 16, ..small_cfg() },
            &mut rng(51),
        )
        .unwrap();
        let snap = snapshot_lifter(&other);
        assert!(restore_lifter(&mut a, &snap).is_err());
    }

    #[test]
    fn lifter_grad_check_through_fsl_head() {
        // f64 reference mode, small net, eval mode (deterministic dropout).
        // Running stats are only touched in train mode, so the eval forward
        // is a fixed function of the parameters.
        let cfg = ArchConfig { joints: 3, width: 6, shared_blocks: 1, ..ArchConfig::default() };
        let target: Vec<f64> = (0..9).map(|i| (i as f64) * 0.1).collect();
        let mut net = build_lifter::<f64>(&cfg, &mut rng(60)).unwrap();
        let loss_of = |net: &mut LifterNetwork<f64>, tape: &mut Tape<f64>| {
            let x = tape.leaf(1, 6, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2], false);
            let mut r = rng(61);
            let (out, pass) = net.forward(tape, x, HeadKind::Fsl, NetMode::Eval, &mut r).unwrap();
            let t = tape.leaf(1, 9, target.clone(), false);
            let d = tape.sub(out, t).unwrap();
            let sq = tape.mul(d, d).unwrap();
            (tape.sum_all(sq), pass)
        };
        let mut tape = Tape::new();
        let (loss, pass) = loss_of(&mut net, &mut tape);
        tape.backward(loss).unwrap();
        let mut analytic: Vec<Vec<f64>> = Vec::new();
        for g in [ParamGroup::Extractor, ParamGroup::FslHead] {
            for id in pass.group_ids(g) {
                analytic.push(tape.grad(id).to_vec());
            }
        }
        // finite differences on a spread of parameter coordinates
        let h = 1e-5;
        let split = net.group_tensors(ParamGroup::Extractor).len();
        let perturb = |net: &mut LifterNetwork<f64>, ti: usize, idx: usize, delta: f64| {
            let group = if ti < split { ParamGroup::Extractor } else { ParamGroup::FslHead };
            let local = if ti < split { ti } else { ti - split };
            net.group_tensors_mut(group)[local].data_mut()[idx] += delta;
        };
        let eval_loss = |net: &mut LifterNetwork<f64>| {
            let mut t2 = Tape::new();
            let (l, _) = loss_of(net, &mut t2);
            t2.scalar_value(l)
        };
        let mut max_err: f64 = 0.0;
        for ti in 0..analytic.len() {
            let numel = analytic[ti].len();
            let samples = numel.min(4);
            for k in 0..samples {
                let idx = k * numel / samples;
                perturb(&mut net, ti, idx, h);
                let lp = eval_loss(&mut net);
                perturb(&mut net, ti, idx, -2.0 * h);
                let lm = eval_loss(&mut net);
                perturb(&mut net, ti, idx, h);
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic[ti][idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                max_err = max_err.max((a - numeric).abs() / denom);
            }
        }
        assert!(max_err < 1e-3, "relative error {}", max_err);
    }
}

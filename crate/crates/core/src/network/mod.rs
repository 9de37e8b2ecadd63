//! ResNet-family networks built from an [`ArchitectureSpec`].
//!
//! Every residual block computes `G(x) = shortcut(x) + R(branches)`, where
//! `R` is the plain branch (or branch sum) for an unregularized network and
//! the configured regularizer unit otherwise. Shortcuts are parameter-free:
//! strided subsampling plus zero channel padding where the shape changes.

mod layers;
mod spec;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use layers::{run_layers, BatchNorm2d, Conv2d, Layer, Linear};
pub use spec::{count_blocks, ArchitectureSpec, BlockKind, Family, Insertion};

use crate::autograd::{ParamStore, StatUpdate, Tape, Targets, Var};
use crate::error::Result;
use crate::regularizers::{
    DecaySchedule, Draws, FrozenDraw, Phase, RegularizerKind, StreamKey, UnitRng,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    /// Position `l` in `1..=L`, in forward order.
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub branches: Vec<Vec<Layer>>,
    pub post_relu: bool,
    pub insertion: Insertion,
}

impl ResidualBlock {
    /// Layer sequence of the first branch followed by `add` and the optional
    /// trailing ReLU, e.g. `Conv-BN-ReLU-Conv-BN-add-ReLU`.
    pub fn caption(&self) -> String {
        let mut parts: Vec<&str> = self.branches[0].iter().map(Layer::tag).collect();
        parts.push("add");
        if self.post_relu {
            parts.push("ReLU");
        }
        parts.join("-")
    }
}

/// Sets how the regularizer is attached to a two-branch block. Blocks with
/// a single branch ignore the insertion type and wrap that branch.
pub fn insert_regularizer(block: &mut ResidualBlock, insertion: Insertion) {
    block.insertion = insertion;
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ArchitectureSpec,
    pub params: ParamStore,
    pub stem: Vec<Layer>,
    pub blocks: Vec<ResidualBlock>,
    pub head: Vec<Layer>,
    pub classifier: Linear,
    pub schedule: DecaySchedule,
}

/// Recorded gate draw of one regularizer unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateRecord {
    pub block: usize,
    pub branch: usize,
    pub gate: bool,
}

/// Replacement values for regularizer draws, for tests and gradient checks.
#[derive(Clone, Debug, Default)]
pub struct FrozenDraws {
    /// Applied to every unit without a specific entry.
    pub all: Option<FrozenDraw>,
    /// Keyed by `(block index, branch index)`.
    pub units: HashMap<(usize, usize), FrozenDraw>,
}

impl FrozenDraws {
    pub fn all(draw: FrozenDraw) -> Self {
        Self {
            all: Some(draw),
            units: HashMap::new(),
        }
    }

    fn lookup(&self, block: usize, branch: usize) -> Option<FrozenDraw> {
        self.units.get(&(block, branch)).copied().or(self.all)
    }
}

/// Per-call forward state: phase, the coordinates of the random streams and
/// optional frozen draws.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub phase: Phase,
    pub seed: u64,
    pub replica: u32,
    pub step: u64,
    pub frozen: FrozenDraws,
    /// Phase for BN layers when it should differ from the regularizer phase.
    pub layer_phase: Option<Phase>,
    streams_opened: usize,
    gates: Vec<GateRecord>,
}

impl ForwardCtx {
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            phase: Phase::Train,
            seed,
            replica: 0,
            step,
            frozen: FrozenDraws::default(),
            layer_phase: None,
            streams_opened: 0,
            gates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            phase: Phase::Eval,
            ..Self::train(0, 0)
        }
    }

    pub fn frozen(draws: FrozenDraws) -> Self {
        Self {
            frozen: draws,
            ..Self::train(0, 0)
        }
    }

    pub fn with_replica(mut self, replica: u32) -> Self {
        self.replica = replica;
        self
    }

    /// Runs BN layers in `phase` regardless of the regularizer phase.
    pub fn with_layer_phase(mut self, phase: Phase) -> Self {
        self.layer_phase = Some(phase);
        self
    }

    fn layers_phase(&self) -> Phase {
        self.layer_phase.unwrap_or(self.phase)
    }

    /// Number of regularizer random streams opened so far.
    pub fn streams_opened(&self) -> usize {
        self.streams_opened
    }

    pub fn gates(&self) -> &[GateRecord] {
        &self.gates
    }

    fn unit_rng(&mut self, block: usize, branch: usize) -> UnitRng {
        self.streams_opened += 1;
        UnitRng::for_key(StreamKey {
            seed: self.seed,
            replica: self.replica,
            step: self.step,
            block: block as u32,
            branch: branch as u32,
        })
    }
}

fn conv(store: &mut ParamStore, name: &str, i: usize, o: usize, k: usize, stride: usize, groups: usize) -> Layer {
    Layer::Conv(Conv2d::new(store, name, i, o, k, stride, groups))
}

fn bn(store: &mut ParamStore, spec: &ArchitectureSpec, name: &str, c: usize) -> Layer {
    Layer::BatchNorm(BatchNorm2d::new(store, name, c, spec.bn_eps, spec.bn_momentum))
}

/// Lays out one residual branch following the family's block caption.
fn branch_layers(
    spec: &ArchitectureSpec,
    store: &mut ParamStore,
    name: &str,
    in_c: usize,
    inner: usize,
    out_c: usize,
    stride: usize,
) -> Vec<Layer> {
    let groups = match spec.family {
        Family::ResNeXt2 | Family::ResNeXt3 => spec.cardinality,
        _ => 1,
    };
    let n = |i: usize| format!("{name}.{i}");
    let mut layers = match (spec.family, spec.block) {
        (Family::ResNet | Family::ResNeXt2 | Family::ResNeXt3, BlockKind::Basic) => vec![
            conv(store, &n(0), in_c, out_c, 3, stride, 1),
            bn(store, spec, &n(1), out_c),
            Layer::Relu,
            conv(store, &n(3), out_c, out_c, 3, 1, groups),
            bn(store, spec, &n(4), out_c),
        ],
        (Family::ResNet | Family::ResNeXt2 | Family::ResNeXt3, BlockKind::Bottleneck) => vec![
            conv(store, &n(0), in_c, inner, 1, 1, 1),
            bn(store, spec, &n(1), inner),
            Layer::Relu,
            conv(store, &n(3), inner, inner, 3, stride, groups),
            bn(store, spec, &n(4), inner),
            Layer::Relu,
            conv(store, &n(6), inner, out_c, 1, 1, 1),
            bn(store, spec, &n(7), out_c),
        ],
        (Family::PyramidNet, BlockKind::Basic) => vec![
            bn(store, spec, &n(0), in_c),
            conv(store, &n(1), in_c, out_c, 3, stride, 1),
            bn(store, spec, &n(2), out_c),
            Layer::Relu,
            conv(store, &n(4), out_c, out_c, 3, 1, 1),
            bn(store, spec, &n(5), out_c),
        ],
        (Family::PyramidNet, BlockKind::Bottleneck) => vec![
            bn(store, spec, &n(0), in_c),
            conv(store, &n(1), in_c, inner, 1, 1, 1),
            bn(store, spec, &n(2), inner),
            Layer::Relu,
            conv(store, &n(4), inner, inner, 3, stride, 1),
            bn(store, spec, &n(5), inner),
            Layer::Relu,
            conv(store, &n(7), inner, out_c, 1, 1, 1),
            bn(store, spec, &n(8), out_c),
        ],
        (Family::WideResNet, BlockKind::Basic) => vec![
            bn(store, spec, &n(0), in_c),
            Layer::Relu,
            conv(store, &n(2), in_c, out_c, 3, stride, 1),
            bn(store, spec, &n(3), out_c),
            Layer::Relu,
            conv(store, &n(5), out_c, out_c, 3, 1, 1),
        ],
        (Family::WideResNet, BlockKind::Bottleneck) => vec![
            bn(store, spec, &n(0), in_c),
            Layer::Relu,
            conv(store, &n(2), in_c, inner, 1, 1, 1),
            bn(store, spec, &n(3), inner),
            Layer::Relu,
            conv(store, &n(5), inner, inner, 3, stride, 1),
            bn(store, spec, &n(6), inner),
            Layer::Relu,
            conv(store, &n(8), inner, out_c, 1, 1, 1),
        ],
    };
    if spec.bn_end && !matches!(layers.last(), Some(Layer::BatchNorm(_))) {
        let idx = layers.len();
        layers.push(bn(store, spec, &n(idx), out_c));
    }
    layers
}

/// Builds the network described by `spec`. Convolution and classifier
/// weights start at zero; call [`init_parameters`] before training.
pub fn build_network(spec: &ArchitectureSpec) -> Result<Network> {
    spec.validate()?;
    let per_stage = spec.blocks_per_stage()?;
    let total = per_stage * spec.stages;
    let schedule = DecaySchedule::new(total, spec.regularizer.p_last)?;
    let mut store = ParamStore::new();
    let (in_c, _, _) = spec.input_shape;
    let base = spec.base_width;

    let mut stem = vec![
        conv(&mut store, "stem.0", in_c, base, 3, 1, 1),
        bn(&mut store, spec, "stem.1", base),
    ];
    if !spec.family.pre_activation() {
        stem.push(Layer::Relu);
    }

    let expansion = match spec.block {
        BlockKind::Basic => 1,
        BlockKind::Bottleneck => 4,
    };
    let branch_count = if spec.family == Family::ResNeXt3 { 2 } else { 1 };
    let post_relu = matches!(spec.family, Family::ResNet | Family::ResNeXt2 | Family::ResNeXt3)
        && !spec.erase_relu;

    let mut blocks = Vec::with_capacity(total);
    let mut channels = base;
    for stage in 0..spec.stages {
        for i in 0..per_stage {
            let index = stage * per_stage + i + 1;
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let inner = match spec.family {
                Family::PyramidNet => base + spec.pyramid_alpha * index / total,
                _ => (base << stage) * spec.widen_factor,
            };
            let out_c = inner * expansion;
            let branches = (0..branch_count)
                .map(|b| {
                    let name = format!("block{index}.branch{b}");
                    branch_layers(spec, &mut store, &name, channels, inner, out_c, stride)
                })
                .collect();
            blocks.push(ResidualBlock {
                index,
                in_channels: channels,
                out_channels: out_c,
                stride,
                branches,
                post_relu,
                insertion: spec.insertion,
            });
            channels = out_c;
        }
    }

    let mut head = Vec::new();
    if spec.family.pre_activation() {
        head.push(bn(&mut store, spec, "head.0", channels));
        head.push(Layer::Relu);
    }
    let classifier = Linear::new(&mut store, "classifier", channels, spec.num_classes);

    Ok(Network {
        spec: spec.clone(),
        params: store,
        stem,
        blocks,
        head,
        classifier,
        schedule,
    })
}

fn all_layers(net: &Network) -> impl Iterator<Item = &Layer> {
    net.stem
        .iter()
        .chain(net.blocks.iter().flat_map(|b| b.branches.iter().flatten()))
        .chain(net.head.iter())
}

/// MSRA initialization: convolution weights ~ N(0, 2 / (out_channels *
/// kernel_h * kernel_w)); BN scale 1, shift 0, running mean 0, running
/// variance 1; classifier weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
/// zero bias.
pub fn init_parameters(net: &mut Network, rng: &mut impl Rng) {
    let layers: Vec<Layer> = all_layers(net).cloned().collect();
    for layer in &layers {
        match layer {
            Layer::Conv(c) => {
                let w = &mut net.params.get_mut(c.weight).value;
                let shape = w.shape().to_vec();
                let fan_out = (shape[0] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
                w.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            }
            Layer::BatchNorm(b) => {
                net.params.get_mut(b.gamma).value.fill(1.0);
                net.params.get_mut(b.shift).value.fill(0.0);
                net.params.get_mut(b.running_mean).value.fill(0.0);
                net.params.get_mut(b.running_var).value.fill(1.0);
            }
            Layer::Relu => {}
        }
    }
    let w = &mut net.params.get_mut(net.classifier.weight).value;
    let bound = 1.0 / (w.shape()[0] as f64).sqrt();
    let uniform = Uniform::new_inclusive(-bound, bound);
    w.data_mut().iter_mut().for_each(|v| *v = uniform.sample(rng));
    net.params.get_mut(net.classifier.bias).value.fill(0.0);
}

impl Network {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Survival probability used by block `l`.
    pub fn survival(&self, l: usize) -> Result<f64> {
        self.schedule.survival(l)
    }

    /// Logits `N x K` for an NCHW batch.
    pub fn forward(&self, tape: &mut Tape, input: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let store = &self.params;
        let mut x = run_layers(&self.stem, tape, store, input, ctx.layers_phase())?;
        for block in &self.blocks {
            x = self.block_forward(block, tape, x, ctx)?;
        }
        x = run_layers(&self.head, tape, store, x, ctx.layers_phase())?;
        let pooled = tape.global_avg_pool(x)?;
        self.classifier.forward(tape, store, pooled)
    }

    /// Mean cross-entropy loss and the logits.
    pub fn loss(
        &self,
        tape: &mut Tape,
        input: Var,
        targets: Targets<'_>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        let logits = self.forward(tape, input, ctx)?;
        let loss = tape.softmax_cross_entropy(logits, targets)?;
        Ok((loss, logits))
    }

    pub fn block_forward(
        &self,
        block: &ResidualBlock,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let store = &self.params;
        let skip = tape.shortcut(x, block.stride, block.out_channels)?;
        let outs = block
            .branches
            .iter()
            .map(|layers| run_layers(layers, tape, store, x, ctx.layers_phase()))
            .collect::<Result<Vec<_>>>()?;
        let combined = self.block_combine(block, tape, skip, &outs, ctx)?;
        Ok(if block.post_relu {
            tape.relu(combined)
        } else {
            combined
        })
    }

    /// Joins the shortcut with the branch outputs through the regularizer,
    /// stopping before the optional trailing ReLU.
    pub fn block_combine(
        &self,
        block: &ResidualBlock,
        tape: &mut Tape,
        skip: Var,
        outs: &[Var],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let reg = &self.spec.regularizer;

        if reg.kind == RegularizerKind::ShakeShake && outs.len() == 2 {
            let mut rng;
            let draws = match (ctx.phase, ctx.frozen.lookup(block.index, 0)) {
                (Phase::Train, Some(f)) | (Phase::Eval, Some(f)) => Draws::Frozen(f),
                (Phase::Eval, None) => Draws::Frozen(FrozenDraw::identity()),
                (Phase::Train, None) => {
                    rng = ctx.unit_rng(block.index, 0);
                    Draws::Random(&mut rng)
                }
            };
            reg.combine_pair(tape, skip, outs[0], outs[1], ctx.phase, draws)
        } else {
            let residual = match (outs, block.insertion) {
                ([single], _) => self.unit(tape, *single, block.index, 0, ctx)?,
                ([f1, f2], Insertion::TypeA) => {
                    let sum = tape.add(*f1, *f2)?;
                    self.unit(tape, sum, block.index, 0, ctx)?
                }
                ([f1, f2], Insertion::TypeB) => {
                    let u1 = self.unit(tape, *f1, block.index, 0, ctx)?;
                    let u2 = self.unit(tape, *f2, block.index, 1, ctx)?;
                    tape.add(u1, u2)?
                }
                _ => unreachable!("blocks have one or two branches"),
            };
            tape.add(skip, residual)
        }
    }

    fn unit(
        &self,
        tape: &mut Tape,
        branch: Var,
        block: usize,
        branch_index: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let reg = &self.spec.regularizer;
        if reg.kind == RegularizerKind::None {
            return Ok(branch);
        }
        let p = if reg.uses_decay() {
            self.schedule.survival(block)?
        } else {
            1.0
        };
        let mut rng;
        let draws = match (ctx.phase, ctx.frozen.lookup(block, branch_index)) {
            (_, Some(f)) => Draws::Frozen(f),
            (Phase::Eval, None) => Draws::Frozen(FrozenDraw::identity()),
            (Phase::Train, None) => {
                rng = ctx.unit_rng(block, branch_index);
                Draws::Random(&mut rng)
            }
        };
        let outcome = reg.perturb_branch(tape, branch, p, ctx.phase, draws)?;
        if let Some(gate) = outcome.gate {
            ctx.gates.push(GateRecord {
                block,
                branch: branch_index,
                gate,
            });
        }
        Ok(outcome.out)
    }

    /// Writes queued BN running-statistic updates into the parameters.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            self.params.get_mut(u.param).value = u.value.clone();
        }
    }
}

//! Parameterized layers that own `ParamId`s into a network's store.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::regularizers::Phase;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::zeros(&[out_channels, in_channels / groups, kernel, kernel]),
            true,
        );
        Self {
            weight,
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d_grouped(x, w, self.stride, self.padding, self.groups)
    }
}

/// Per-channel batch normalization with affine parameters and running
/// statistics kept as non-trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            shift: store.register(format!("{name}.shift"), Tensor::zeros(&[channels]), true),
            running_mean: store.register(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.register(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps,
            momentum,
        }
    }

    /// Training phase normalizes with batch statistics and queues the
    /// exponential-moving-average update of the running statistics on the
    /// tape; evaluation uses the running statistics.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, phase: Phase) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let shift = tape.param(store, self.shift);
        match phase {
            Phase::Train => {
                let (out, stats) = tape.batch_norm(x, gamma, shift, None, self.eps)?;
                let (mean, var) = stats.expect("training-phase batch norm returns statistics");
                let m = self.momentum;
                let blend = |running: &Tensor, batch: &[f64]| {
                    let data = running
                        .data()
                        .iter()
                        .zip(batch)
                        .map(|(&r, &b)| (1.0 - m) * r + m * b)
                        .collect();
                    Tensor::new(running.shape(), data)
                };
                let new_mean = blend(store.value(self.running_mean), &mean)?;
                let new_var = blend(store.value(self.running_var), &var)?;
                tape.push_stat_update(self.running_mean, new_mean);
                tape.push_stat_update(self.running_var, new_var);
                Ok(out)
            }
            Phase::Eval => {
                let (out, _) = tape.batch_norm(
                    x,
                    gamma,
                    shift,
                    Some((
                        store.value(self.running_mean).data(),
                        store.value(self.running_var).data(),
                    )),
                    self.eps,
                )?;
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: store.register(format!("{name}.weight"), Tensor::zeros(&[inputs, outputs]), true),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[outputs]), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// One unit of a residual branch, stem or head.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
}

impl Layer {
    pub fn tag(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "Conv",
            Layer::BatchNorm(_) => "BN",
            Layer::Relu => "ReLU",
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, phase: Phase) -> Result<Var> {
        match self {
            Layer::Conv(c) => c.forward(tape, store, x),
            Layer::BatchNorm(bn) => bn.forward(tape, store, x, phase),
            Layer::Relu => Ok(tape.relu(x)),
        }
    }
}

pub fn run_layers(
    layers: &[Layer],
    tape: &mut Tape,
    store: &ParamStore,
    mut x: Var,
    phase: Phase,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, store, x, phase)?;
    }
    Ok(x)
}

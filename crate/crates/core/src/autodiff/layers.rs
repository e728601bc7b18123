//! Parameterized building blocks recorded onto a [`Tape`].

use rand::{Rng, RngCore};

use super::params::{xavier_uniform, Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Forward-pass mode. Training carries the RNG used for dropout masks and
/// latent noise; inference is deterministic apart from explicit sampling.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(vec![fan_out, fan_in], fan_in, fan_out, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.weight), Some(bound.var(self.bias)))
    }
}

/// Stack of linear layers with ReLU between them. The last layer is linear
/// unless `activate_last` is set.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activate_last: bool,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, activate_last }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bound, x)?;
            if i < last || self.activate_last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct CausalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl CausalConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(
                vec![out_channels, in_channels, kernel],
                in_channels * kernel,
                out_channels * kernel,
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        CausalConv {
            weight,
            bias,
            dilation,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.causal_conv1d(x, bound.var(self.weight), Some(bound.var(self.bias)), self.dilation)
    }
}

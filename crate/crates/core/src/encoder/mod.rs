//! Per-agent feature extraction: a temporal convolutional network over the
//! past trajectory and a small causal CNN over the wind samples. The encoded
//! hidden item is `[h_tcn ; h_wind]`, trajectory features first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, CausalConv, Mode, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of the two temporal blocks.
    pub tcn_channels: Vec<usize>,
    pub tcn_kernel_size: usize,
    pub tcn_dilations: [usize; 2],
    pub dropout_rate: f64,
    /// Output channels of the two wind convolutions.
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel_size: usize,
    /// Width of the attention projection used by fusion.
    pub hidden_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tcn_channels: vec![32, 16],
            tcn_kernel_size: 3,
            tcn_dilations: [1, 2],
            dropout_rate: 0.1,
            cnn_channels: vec![8, 8],
            cnn_kernel_size: 3,
            hidden_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {}", m)));
        if self.tcn_channels.len() != 2 {
            return bad(format!("expected 2 TCN layers, got {}", self.tcn_channels.len()));
        }
        if self.cnn_channels.len() != 2 {
            return bad(format!("expected 2 wind CNN layers, got {}", self.cnn_channels.len()));
        }
        if self.tcn_channels.iter().chain(&self.cnn_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.tcn_kernel_size == 0 || self.cnn_kernel_size == 0 {
            return bad("kernel sizes must be positive".into());
        }
        if self.tcn_dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.tcn_channels[1] + self.cnn_channels[1]
    }

    /// Number of past steps that can influence the last output of the TCN.
    pub fn tcn_receptive_field(&self) -> usize {
        1 + self
            .tcn_dilations
            .iter()
            .map(|d| 2 * (self.tcn_kernel_size - 1) * d)
            .sum::<usize>()
    }
}

fn spatial_dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) => tape.dropout(x, rate, true, &mut **rng),
        Mode::Infer => Ok(x),
    }
}

/// Residual block: two dilated causal convolutions, each followed by ReLU
/// and spatial dropout, plus a 1x1 projection on the skip path when the
/// channel count changes.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub conv1: CausalConv,
    pub conv2: CausalConv,
    pub skip: Option<CausalConv>,
}

impl TemporalBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = CausalConv::new(
            store,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            kernel,
            dilation,
            rng,
        );
        let conv2 = CausalConv::new(
            store,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            kernel,
            dilation,
            rng,
        );
        let skip = (in_channels != out_channels)
            .then(|| CausalConv::new(store, &format!("{name}.skip"), in_channels, out_channels, 1, 1, rng));
        TemporalBlock { conv1, conv2, skip }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
        let mut h = self.conv1.forward(tape, bound, x)?;
        h = tape.relu(h)?;
        h = spatial_dropout(tape, h, rate, mode)?;
        h = self.conv2.forward(tape, bound, h)?;
        h = tape.relu(h)?;
        h = spatial_dropout(tape, h, rate, mode)?;
        let res = match &self.skip {
            Some(conv) => conv.forward(tape, bound, x)?,
            None => x,
        };
        let sum = tape.add(h, res)?;
        tape.relu(sum)
    }
}

/// Two temporal blocks with the last time step as readout.
#[derive(Clone, Debug)]
pub struct Tcn {
    pub blocks: Vec<TemporalBlock>,
    pub in_channels: usize,
    pub dropout_rate: f64,
}

impl Tcn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for (i, (&c_out, &d)) in config.tcn_channels.iter().zip(&config.tcn_dilations).enumerate() {
            blocks.push(TemporalBlock::new(
                store,
                &format!("{name}.block{i}"),
                c_in,
                c_out,
                config.tcn_kernel_size,
                d,
                rng,
            ));
            c_in = c_out;
        }
        Tcn {
            blocks,
            in_channels,
            dropout_rate: config.dropout_rate,
        }
    }

    pub fn output_width(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.conv2.out_channels)
    }

    /// `x: [agents, channels, time] -> [agents, output_width]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, bound, h, self.dropout_rate, mode)?;
        }
        tape.last_step(h)
    }
}

/// Two causal convolutions with ReLU over `(wind_vx, wind_vy)`, last-step
/// readout.
#[derive(Clone, Debug)]
pub struct WindCnn {
    pub layers: Vec<CausalConv>,
}

impl WindCnn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        let mut c_in = 2;
        let layers = config
            .cnn_channels
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = CausalConv::new(
                    store,
                    &format!("{name}.{i}"),
                    c_in,
                    c_out,
                    config.cnn_kernel_size,
                    1 << i,
                    rng,
                );
                c_in = c_out;
                conv
            })
            .collect();
        WindCnn { layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, bound, h)?;
            h = tape.relu(h)?;
        }
        tape.last_step(h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub past_len: usize,
    pub tcn: Tcn,
    pub wind: WindCnn,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        past_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if past_len < 2 {
            return Err(Error::Config(format!("past length {} below 2", past_len)));
        }
        Ok(Encoder {
            config: config.clone(),
            past_len,
            tcn: Tcn::new(store, &format!("{name}.tcn"), 3, config, rng),
            wind: WindCnn::new(store, &format!("{name}.wind"), config, rng),
        })
    }

    pub fn output_width(&self) -> usize {
        self.tcn.output_width() + self.wind.output_width()
    }

    fn check(&self, tape: &Tape, x: Var, channels: usize, what: &'static str) -> Result<usize> {
        let s = tape.value(x).shape();
        if s.len() != 3 || s[1] != channels || s[2] != self.past_len {
            return Err(Error::shape(
                what,
                format!("expected [agents, {}, {}], got {:?}", channels, self.past_len, s),
            ));
        }
        Ok(s[0])
    }

    /// `past: [agents, 3, n]` normalized positions; `mask: [agents, n]`,
    /// true where observed. Masked entries are zeroed before the TCN.
    pub fn tcn_encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        past: Var,
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let agents = self.check(tape, past, 3, "tcn_encode")?;
        let masked = apply_mask(tape, past, mask, agents, 3, self.past_len, "tcn_encode")?;
        self.tcn.forward(tape, bound, masked, mode)
    }

    /// `wind: [agents, 2, n]`, masked like the positions.
    pub fn cnn_encode_wind(&self, tape: &mut Tape, bound: &Bound, wind: Var, mask: &[bool]) -> Result<Var> {
        let agents = self.check(tape, wind, 2, "cnn_encode_wind")?;
        let masked = apply_mask(tape, wind, mask, agents, 2, self.past_len, "cnn_encode_wind")?;
        self.wind.forward(tape, bound, masked)
    }

    /// `[h_tcn ; h_wind]` per agent: `[agents, output_width]`.
    pub fn encode_agent(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        past: Var,
        wind: Var,
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h_tcn = self.tcn_encode(tape, bound, past, mask, mode)?;
        let h_wind = self.cnn_encode_wind(tape, bound, wind, mask)?;
        tape.concat(&[h_tcn, h_wind], 1)
    }
}

fn apply_mask(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    agents: usize,
    channels: usize,
    steps: usize,
    op: &'static str,
) -> Result<Var> {
    if mask.len() != agents * steps {
        return Err(Error::shape(
            op,
            format!("mask of {} entries for {} agents x {} steps", mask.len(), agents, steps),
        ));
    }
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let mut m = Vec::with_capacity(agents * channels * steps);
    for a in 0..agents {
        let row = &mask[a * steps..(a + 1) * steps];
        for _ in 0..channels {
            m.extend(row.iter().map(|&keep| if keep { 1.0 } else { 0.0 }));
        }
    }
    let m = tape.constant(Tensor::new(vec![agents, channels, steps], m)?);
    tape.mul(x, m)
}

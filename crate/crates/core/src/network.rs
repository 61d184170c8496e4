//! Feature generator (shared slice encoder + ConvLSTM) and the dense
//! discriminator/classifier heads.
//!
//! The generator maps a normalized MDR sequence to a descriptor: every slice
//! goes through the same four stride-2 convolutions, and the resulting
//! `256×2×2` feature maps are fed in sequence order to a peephole ConvLSTM
//! whose final cell state, flattened, is the descriptor.

use std::fmt;
use std::str::FromStr;

use mdrnet_tensor::conv::same_ceil_padding;
use mdrnet_tensor::{Gradients, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::mdr::NormalizedMdr;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Slices per inference batch.
const INFERENCE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub slice_side: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
    pub lstm_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            slice_side: 30,
            encoder_channels: vec![32, 64, 128, 256],
            encoder_kernel: 4,
            encoder_stride: 2,
            lstm_kernel: 3,
            leaky_slope: LEAKY_SLOPE,
        }
    }
}

impl Architecture {
    /// Spatial side of the encoder output.
    pub fn latent_side(&self) -> usize {
        self.encoder_channels.iter().fold(self.slice_side, |len, _| {
            same_ceil_padding(len, self.encoder_kernel, self.encoder_stride).0
        })
    }

    pub fn latent_channels(&self) -> usize {
        *self.encoder_channels.last().expect("encoder has layers")
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_side();
        [self.latent_channels(), s, s]
    }

    pub fn descriptor_len(&self) -> usize {
        self.latent_shape().iter().product()
    }
}

/// Ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Encoder, slice features averaged, two dense layers, N-way softmax.
    CnnOnly,
    /// Encoder + ConvLSTM descriptor, one dense layer, N-way softmax.
    CnnRnn,
    /// Encoder, slice features averaged, adversarial (N+1)-way discriminator.
    CnnAdv,
    /// Encoder + ConvLSTM descriptor, adversarial (N+1)-way discriminator.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::CnnOnly, Mode::CnnRnn, Mode::CnnAdv, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::CnnOnly => "cnn_only",
            Mode::CnnRnn => "cnn_rnn",
            Mode::CnnAdv => "cnn_adv",
            Mode::Full => "full",
        }
    }

    pub fn recurrent(self) -> bool {
        matches!(self, Mode::CnnRnn | Mode::Full)
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Mode::CnnAdv | Mode::Full)
    }

    pub fn head_hidden(self) -> &'static [usize] {
        match self {
            Mode::CnnOnly => &[128],
            Mode::CnnRnn => &[],
            Mode::CnnAdv | Mode::Full => &[128, 64],
        }
    }

    pub fn head_outputs(self, n_classes: usize) -> usize {
        n_classes + usize::from(self.adversarial())
    }

    fn code(self) -> f64 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as f64
    }

    fn from_code(code: f64) -> Option<Self> {
        Self::ALL.get(code as usize).copied().filter(|m| m.code() == code)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected cnn_only, cnn_rnn, cnn_adv or full)"))
    }
}

/// Which ConvLSTM state becomes the descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Readout {
    Cell,
    Hidden,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Cell => "cell",
            Readout::Hidden => "hidden",
        })
    }
}

impl FromStr for Readout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cell" => Ok(Readout::Cell),
            "hidden" => Ok(Readout::Hidden),
            other => Err(format!("descriptor_readout must be cell or hidden, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-s..s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Shared per-slice convolutional encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceEncoderParams {
    pub layers: Vec<ConvLayer>,
}

impl SliceEncoderParams {
    fn build(arch: &Architecture, mut weight: impl FnMut(&[usize], usize) -> Tensor) -> Self {
        let k = arch.encoder_kernel;
        let mut c_in = 1;
        let layers = arch
            .encoder_channels
            .iter()
            .map(|&c_out| {
                let layer = ConvLayer {
                    weight: weight(&[c_out, c_in, k, k], c_in * k * k),
                    bias: Tensor::zeros(&[c_out]),
                };
                c_in = c_out;
                layer
            })
            .collect();
        Self { layers }
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("gen.encoder.{i}.weight"), &l.weight),
                    (format!("gen.encoder.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Peephole ConvLSTM parameters. Input and hidden kernels are
/// `[C, C, 3, 3]`, peephole weights are `[C, s, s]` and multiply the cell
/// state elementwise, biases are `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_ci: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_cf: Tensor,
    pub b_f: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub w_co: Tensor,
    pub b_o: Tensor,
}

const LSTM_NAMES: [&str; 15] = [
    "w_xi", "w_hi", "w_ci", "b_i", "w_xf", "w_hf", "w_cf", "b_f", "w_xc", "w_hc", "b_c", "w_xo", "w_ho", "w_co", "b_o",
];

impl ConvLstmParams {
    fn build(arch: &Architecture, mut weight: impl FnMut(&[usize], usize) -> Tensor) -> Self {
        let [c, s, _] = arch.latent_shape();
        let k = arch.lstm_kernel;
        let mut conv = || weight(&[c, c, k, k], c * k * k);
        let (w_xi, w_hi) = (conv(), conv());
        let (w_xf, w_hf) = (conv(), conv());
        let (w_xc, w_hc) = (conv(), conv());
        let (w_xo, w_ho) = (conv(), conv());
        let w_ci = weight(&[c, s, s], 1);
        let w_cf = weight(&[c, s, s], 1);
        let w_co = weight(&[c, s, s], 1);
        Self {
            w_xi,
            w_hi,
            w_ci,
            b_i: Tensor::zeros(&[c]),
            w_xf,
            w_hf,
            w_cf,
            b_f: Tensor::ones(&[c]),
            w_xc,
            w_hc,
            b_c: Tensor::zeros(&[c]),
            w_xo,
            w_ho,
            w_co,
            b_o: Tensor::zeros(&[c]),
        }
    }

    fn fields(&self) -> [&Tensor; 15] {
        [
            &self.w_xi, &self.w_hi, &self.w_ci, &self.b_i, &self.w_xf, &self.w_hf, &self.w_cf, &self.b_f, &self.w_xc,
            &self.w_hc, &self.b_c, &self.w_xo, &self.w_ho, &self.w_co, &self.b_o,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.w_xi,
            &mut self.w_hi,
            &mut self.w_ci,
            &mut self.b_i,
            &mut self.w_xf,
            &mut self.w_hf,
            &mut self.w_cf,
            &mut self.b_f,
            &mut self.w_xc,
            &mut self.w_hc,
            &mut self.b_c,
            &mut self.w_xo,
            &mut self.w_ho,
            &mut self.w_co,
            &mut self.b_o,
        ]
    }

    fn from_fields(mut f: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            w_xi: f("w_xi")?,
            w_hi: f("w_hi")?,
            w_ci: f("w_ci")?,
            b_i: f("b_i")?,
            w_xf: f("w_xf")?,
            w_hf: f("w_hf")?,
            w_cf: f("w_cf")?,
            b_f: f("b_f")?,
            w_xc: f("w_xc")?,
            w_hc: f("w_hc")?,
            b_c: f("b_c")?,
            w_xo: f("w_xo")?,
            w_ho: f("w_ho")?,
            w_co: f("w_co")?,
            b_o: f("b_o")?,
        })
    }

    /// One ConvLSTM step on unbatched `[C, s, s]` (or batched) tensors.
    /// Returns `(H_t, C_t)`.
    pub fn step(&self, input: &Tensor, hidden: &Tensor, cell: &Tensor) -> Result<(Tensor, Tensor)> {
        for t in [hidden, cell] {
            if t.shape() != input.shape() {
                return Err(CoreError::Mismatch(format!(
                    "ConvLSTM state shape {:?} differs from input {:?}",
                    t.shape(),
                    input.shape()
                )));
            }
        }
        let mut tape = Tape::new();
        let bound = BoundLstm::bind(self, &mut tape, false);
        let x = tape.constant(input.clone());
        let h = tape.constant(hidden.clone());
        let c = tape.constant(cell.clone());
        let state = convlstm_cell(&mut tape, &bound, x, Some(LstmState { hidden: h, cell: c }))?;
        Ok((tape.value(state.hidden).clone(), tape.value(state.cell).clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub encoder: SliceEncoderParams,
    pub lstm: Option<ConvLstmParams>,
}

impl GeneratorParams {
    pub fn zeros(arch: &Architecture, recurrent: bool) -> Self {
        let zeros = |shape: &[usize], _| Tensor::zeros(shape);
        let mut lstm = recurrent.then(|| ConvLstmParams::build(arch, zeros));
        if let Some(l) = lstm.as_mut() {
            l.b_f = Tensor::zeros(l.b_f.shape());
        }
        Self {
            encoder: SliceEncoderParams::build(arch, zeros),
            lstm,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        if let Some(l) = &self.lstm {
            out.extend(
                LSTM_NAMES
                    .iter()
                    .zip(l.fields())
                    .map(|(n, t)| (format!("gen.lstm.{n}"), t)),
            );
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        if let Some(l) = &mut self.lstm {
            out.extend(l.fields_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGenerator {
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| (bind(tape, &l.weight, trainable), bind(tape, &l.bias, trainable)))
            .collect();
        let lstm = self.lstm.as_ref().map(|l| BoundLstm::bind(l, tape, trainable));
        BoundGenerator { encoder, lstm }
    }

    /// Binds existing tape vars, given in [`GeneratorParams::tensors_mut`]
    /// order, to this parameter layout.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundGenerator> {
        let n_enc = 2 * self.encoder.layers.len();
        let expected = n_enc + if self.lstm.is_some() { LSTM_NAMES.len() } else { 0 };
        if vars.len() != expected {
            return Err(CoreError::Mismatch(format!(
                "{} vars for {expected} generator tensors",
                vars.len()
            )));
        }
        let encoder = vars[..n_enc].chunks(2).map(|p| (p[0], p[1])).collect();
        let lstm = self.lstm.as_ref().map(|_| {
            let v = &vars[n_enc..];
            BoundLstm {
                w_xi: v[0],
                w_hi: v[1],
                w_ci: v[2],
                b_i: v[3],
                w_xf: v[4],
                w_hf: v[5],
                w_cf: v[6],
                b_f: v[7],
                w_xc: v[8],
                w_hc: v[9],
                b_c: v[10],
                w_xo: v[11],
                w_ho: v[12],
                w_co: v[13],
                b_o: v[14],
            }
        });
        Ok(BoundGenerator { encoder, lstm })
    }

    /// The descriptor of a single sequence, with `H_0 = C_0 = 0`.
    pub fn generate_descriptor(
        &self,
        arch: &Architecture,
        mdr: &NormalizedMdr,
        readout: Readout,
    ) -> Result<Descriptor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = generator_forward(&mut tape, arch, &bound, &[mdr], readout)?;
        Ok(Descriptor(tape.value(z).data().to_vec()))
    }
}

/// Dense stack with a leaky rectifier between layers and raw logits out.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStack {
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseStack {
    /// Layer widths `sizes[0] -> sizes[1] -> ...`.
    fn build(sizes: &[usize], mut weight: impl FnMut(&[usize], usize) -> Tensor) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer {
                weight: weight(&[w[1], w[0]], w[0]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self::build(sizes, |shape, _| Tensor::zeros(shape))
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[0]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("head.{i}.weight"), &l.weight),
                    (format!("head.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDense {
        BoundDense {
            layers: self
                .layers
                .iter()
                .map(|l| (bind(tape, &l.weight, trainable), bind(tape, &l.bias, trainable)))
                .collect(),
        }
    }

    /// Binds existing tape vars in [`DenseStack::tensors_mut`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundDense> {
        if vars.len() != 2 * self.layers.len() {
            return Err(CoreError::Mismatch(format!(
                "{} vars for {} head tensors",
                vars.len(),
                2 * self.layers.len()
            )));
        }
        Ok(BoundDense {
            layers: vars.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    /// Logits for one descriptor.
    pub fn discriminate(&self, descriptor: &Descriptor, slope: f64) -> Result<Tensor> {
        if descriptor.len() != self.input_len() {
            return Err(CoreError::Mismatch(format!(
                "descriptor length {} does not match head input {}",
                descriptor.len(),
                self.input_len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(&[descriptor.len()], descriptor.0.clone())?);
        let y = dense_forward(&mut tape, &bound, x, slope)?;
        Ok(tape.value(y).clone())
    }
}

fn bind(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.parameter(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

pub struct BoundGenerator {
    encoder: Vec<(Var, Var)>,
    lstm: Option<BoundLstm>,
}

impl BoundGenerator {
    /// Vars in [`GeneratorParams::tensors_mut`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
        if let Some(l) = &self.lstm {
            out.extend(l.vars());
        }
        out
    }
}

pub struct BoundLstm {
    w_xi: Var,
    w_hi: Var,
    w_ci: Var,
    b_i: Var,
    w_xf: Var,
    w_hf: Var,
    w_cf: Var,
    b_f: Var,
    w_xc: Var,
    w_hc: Var,
    b_c: Var,
    w_xo: Var,
    w_ho: Var,
    w_co: Var,
    b_o: Var,
}

impl BoundLstm {
    fn bind(p: &ConvLstmParams, tape: &mut Tape, trainable: bool) -> Self {
        let [w_xi, w_hi, w_ci, b_i, w_xf, w_hf, w_cf, b_f, w_xc, w_hc, b_c, w_xo, w_ho, w_co, b_o] =
            p.fields().map(|t| bind(tape, t, trainable));
        Self {
            w_xi,
            w_hi,
            w_ci,
            b_i,
            w_xf,
            w_hf,
            w_cf,
            b_f,
            w_xc,
            w_hc,
            b_c,
            w_xo,
            w_ho,
            w_co,
            b_o,
        }
    }

    fn vars(&self) -> [Var; 15] {
        [
            self.w_xi, self.w_hi, self.w_ci, self.b_i, self.w_xf, self.w_hf, self.w_cf, self.b_f, self.w_xc, self.w_hc,
            self.b_c, self.w_xo, self.w_ho, self.w_co, self.b_o,
        ]
    }
}

pub struct BoundDense {
    layers: Vec<(Var, Var)>,
}

impl BoundDense {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Gradients for `vars`, zero-filled where the loss did not reach a var.
pub fn collect_grads(grads: &Gradients, vars: &[Var], like: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Applies the encoder to `[B, 1, side, side]` slices.
pub fn encode(tape: &mut Tape, arch: &Architecture, bound: &BoundGenerator, slices: Var) -> Result<Var> {
    let mut x = slices;
    for &(w, b) in &bound.encoder {
        let y = tape.conv2d(x, w, Some(b), arch.encoder_stride)?;
        x = tape.leaky_relu(y, arch.leaky_slope);
    }
    Ok(x)
}

/// Encoder output for a single `[1, side, side]` slice.
pub fn encode_slice(params: &SliceEncoderParams, arch: &Architecture, slice: &Tensor) -> Result<Tensor> {
    if slice.shape() != [1, arch.slice_side, arch.slice_side] {
        return Err(CoreError::Mismatch(format!(
            "slice shape {:?}, expected [1, {}, {}]",
            slice.shape(),
            arch.slice_side,
            arch.slice_side
        )));
    }
    let gen = GeneratorParams {
        encoder: params.clone(),
        lstm: None,
    };
    let mut tape = Tape::new();
    let bound = gen.bind(&mut tape, false);
    let x = tape.constant(slice.clone());
    let y = encode(&mut tape, arch, &bound, x)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

fn gate_input(tape: &mut Tape, input: Var, w_x: Var, bias: Var, hidden: Option<(Var, Var)>) -> Result<Var> {
    let mut pre = tape.conv2d(input, w_x, Some(bias), 1)?;
    if let Some((h, w_h)) = hidden {
        let from_h = tape.conv2d(h, w_h, None, 1)?;
        pre = tape.add(pre, from_h)?;
    }
    Ok(pre)
}

fn peephole(tape: &mut Tape, pre: Var, cell: Var, w_c: Var) -> Result<Var> {
    let p = tape.hadamard(cell, w_c)?;
    Ok(tape.add(pre, p)?)
}

/// One peephole ConvLSTM step. `state = None` stands for `H = C = 0`; the
/// terms that would multiply those zeros are skipped.
pub fn convlstm_cell(tape: &mut Tape, p: &BoundLstm, input: Var, state: Option<LstmState>) -> Result<LstmState> {
    let hidden = state.map(|s| s.hidden);
    let with = |w: Var| hidden.map(|h| (h, w));

    let mut i_pre = gate_input(tape, input, p.w_xi, p.b_i, with(p.w_hi))?;
    if let Some(s) = state {
        i_pre = peephole(tape, i_pre, s.cell, p.w_ci)?;
    }
    let i = tape.sigmoid(i_pre);

    let g_pre = gate_input(tape, input, p.w_xc, p.b_c, with(p.w_hc))?;
    let g = tape.tanh(g_pre);
    let mut cell = tape.hadamard(i, g)?;

    if let Some(s) = state {
        let f_pre = gate_input(tape, input, p.w_xf, p.b_f, with(p.w_hf))?;
        let f_pre = peephole(tape, f_pre, s.cell, p.w_cf)?;
        let f = tape.sigmoid(f_pre);
        let kept = tape.hadamard(f, s.cell)?;
        cell = tape.add(kept, cell)?;
    }

    let o_pre = gate_input(tape, input, p.w_xo, p.b_o, with(p.w_ho))?;
    let o_pre = peephole(tape, o_pre, cell, p.w_co)?;
    let o = tape.sigmoid(o_pre);
    let squashed = tape.tanh(cell);
    let hidden = tape.hadamard(o, squashed)?;
    Ok(LstmState { hidden, cell })
}

/// Stacks a batch of sequences slice-major: row `s·B + b` holds slice `s`
/// of sequence `b`.
fn stack_slices(arch: &Architecture, batch: &[&NormalizedMdr]) -> Result<(Tensor, usize)> {
    let first = batch.first().ok_or_else(|| CoreError::Mismatch("empty batch".into()))?;
    let steps = first.len();
    for m in batch {
        if m.len() != steps || m.side() != arch.slice_side {
            return Err(CoreError::Mismatch(format!(
                "sequence of {} slices of side {} in a batch of {} slices of side {}",
                m.len(),
                m.side(),
                steps,
                arch.slice_side
            )));
        }
    }
    let side = arch.slice_side;
    let mut data = Vec::with_capacity(steps * batch.len() * side * side);
    for s in 0..steps {
        for m in batch {
            data.extend_from_slice(m.slice(s));
        }
    }
    Ok((Tensor::new(&[steps * batch.len(), 1, side, side], data)?, steps))
}

/// Generator forward pass for a batch, returning `[B, descriptor_len]`.
pub fn generator_forward(
    tape: &mut Tape,
    arch: &Architecture,
    bound: &BoundGenerator,
    batch: &[&NormalizedMdr],
    readout: Readout,
) -> Result<Var> {
    let (slices, steps) = stack_slices(arch, batch)?;
    let b = batch.len();
    let x = tape.constant(slices);
    let features = encode(tape, arch, bound, x)?;
    let latent = match &bound.lstm {
        Some(lstm) => {
            let mut state = None;
            for t in 0..steps {
                let input = tape.narrow(features, t * b, b)?;
                state = Some(convlstm_cell(tape, lstm, input, state)?);
            }
            let state = state.expect("at least one slice");
            match readout {
                Readout::Cell => state.cell,
                Readout::Hidden => state.hidden,
            }
        }
        None => tape.mean_chunks(features, steps)?,
    };
    Ok(tape.reshape(latent, &[b, arch.descriptor_len()])?)
}

pub fn dense_forward(tape: &mut Tape, bound: &BoundDense, input: Var, slope: f64) -> Result<Var> {
    let mut x = input;
    let last = bound.layers.len() - 1;
    for (i, &(w, b)) in bound.layers.iter().enumerate() {
        x = tape.fully_connected(x, w, b)?;
        if i < last {
            x = tape.leaky_relu(x, slope);
        }
    }
    Ok(x)
}

/// Generator and head parameters drawn from `seed`: weights uniform in
/// `(-s, s)` with `s = sqrt(1 / fan_in)`, biases zero except the forget
/// gate bias, which starts at one.
pub fn init_params(arch: &Architecture, mode: Mode, n_classes: usize, seed: u64) -> (GeneratorParams, DenseStack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weight = |shape: &[usize], fan_in: usize| uniform(&mut rng, shape, fan_in);
    let encoder = SliceEncoderParams::build(arch, &mut weight);
    let lstm = mode.recurrent().then(|| ConvLstmParams::build(arch, &mut weight));
    let mut sizes = vec![arch.descriptor_len()];
    sizes.extend_from_slice(mode.head_hidden());
    sizes.push(mode.head_outputs(n_classes));
    let head = DenseStack::build(&sizes, &mut weight);
    (GeneratorParams { encoder, lstm }, head)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mode: Mode,
    pub arch: Architecture,
    pub n_classes: usize,
    pub k: usize,
    pub readout: Readout,
    pub generator: GeneratorParams,
    pub head: DenseStack,
}

/// Standard-architecture model for `mode` with cell-state readout.
pub fn build_model(mode: Mode, n_classes: usize, k: usize, seed: u64) -> Model {
    Model::build(mode, Architecture::default(), n_classes, k, Readout::Cell, seed)
}

impl Model {
    pub fn build(mode: Mode, arch: Architecture, n_classes: usize, k: usize, readout: Readout, seed: u64) -> Self {
        let (generator, head) = init_params(&arch, mode, n_classes, seed);
        Self {
            mode,
            arch,
            n_classes,
            k,
            readout,
            generator,
            head,
        }
    }

    /// Descriptors for any number of sequences, computed in fixed-size
    /// batches without gradient recording.
    pub fn descriptors(&self, mdrs: &[&NormalizedMdr]) -> Result<Vec<Descriptor>> {
        let mut out = Vec::with_capacity(mdrs.len());
        for chunk in mdrs.chunks(INFERENCE_BATCH) {
            let mut tape = Tape::new();
            let bound = self.generator.bind(&mut tape, false);
            let z = generator_forward(&mut tape, &self.arch, &bound, chunk, self.readout)?;
            out.extend(
                tape.value(z)
                    .data()
                    .chunks(self.arch.descriptor_len())
                    .map(|d| Descriptor(d.to_vec())),
            );
        }
        Ok(out)
    }

    pub fn logits(&self, descriptor: &Descriptor) -> Result<Tensor> {
        self.head.discriminate(descriptor, self.arch.leaky_slope)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let meta = [
            ("mode", self.mode.code()),
            ("n_classes", self.n_classes as f64),
            ("k", self.k as f64),
            ("readout", f64::from(self.readout == Readout::Hidden)),
            ("slice_side", self.arch.slice_side as f64),
            ("encoder_kernel", self.arch.encoder_kernel as f64),
            ("encoder_stride", self.arch.encoder_stride as f64),
            ("lstm_kernel", self.arch.lstm_kernel as f64),
            ("leaky_slope", self.arch.leaky_slope),
        ];
        let mut out: Vec<(String, Tensor)> = meta
            .iter()
            .map(|&(n, v)| (format!("/meta/{n}"), Tensor::scalar(v)))
            .collect();
        out.extend(
            self.generator
                .named_tensors()
                .into_iter()
                .chain(self.head.named_tensors())
                .map(|(n, t)| (n, t.clone())),
        );
        out
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| CoreError::format("checkpoint", format!("missing record `{name}`")))
        };
        let meta = |name: &str| find(&format!("/meta/{name}")).map(|t| t.data()[0]);
        let mode = Mode::from_code(meta("mode")?).ok_or_else(|| CoreError::format("checkpoint", "bad mode code"))?;
        let readout = if meta("readout")? == 1.0 {
            Readout::Hidden
        } else {
            Readout::Cell
        };

        let mut layers = Vec::new();
        while let Ok(weight) = find(&format!("gen.encoder.{}.weight", layers.len())) {
            let bias = find(&format!("gen.encoder.{}.bias", layers.len()))?;
            layers.push(ConvLayer { weight, bias });
        }
        if layers.is_empty() {
            return Err(CoreError::format("checkpoint", "no encoder layers"));
        }
        let arch = Architecture {
            slice_side: meta("slice_side")? as usize,
            encoder_channels: layers.iter().map(|l| l.weight.shape()[0]).collect(),
            encoder_kernel: meta("encoder_kernel")? as usize,
            encoder_stride: meta("encoder_stride")? as usize,
            lstm_kernel: meta("lstm_kernel")? as usize,
            leaky_slope: meta("leaky_slope")?,
        };
        let lstm = if mode.recurrent() {
            Some(ConvLstmParams::from_fields(|n| find(&format!("gen.lstm.{n}")))?)
        } else {
            None
        };
        let mut head = Vec::new();
        while let Ok(weight) = find(&format!("head.{}.weight", head.len())) {
            let bias = find(&format!("head.{}.bias", head.len()))?;
            head.push(DenseLayer { weight, bias });
        }
        if head.is_empty() {
            return Err(CoreError::format("checkpoint", "no head layers"));
        }
        let model = Self {
            mode,
            arch,
            n_classes: meta("n_classes")? as usize,
            k: meta("k")? as usize,
            readout,
            generator: GeneratorParams {
                encoder: SliceEncoderParams { layers },
                lstm,
            },
            head: DenseStack { layers: head },
        };
        if model.head.output_len() != mode.head_outputs(model.n_classes)
            || model.head.input_len() != model.arch.descriptor_len()
        {
            return Err(CoreError::format(
                "checkpoint",
                "head shape does not match mode and class count",
            ));
        }
        Ok(model)
    }
}

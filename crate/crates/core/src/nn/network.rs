//! Network descriptors, parameter layout and the forward graph.
//!
//! Both variants take `[N, C + 1, H, W]` input (image channels followed by the
//! conditioning mask) and a timestep per sample, and produce `[N, C, H, W]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Encoder-decoder with one skip connection per resolution level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetSpec {
    pub image_channels: usize,
    /// Feature width per level, finest first.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
}

impl Default for UnetSpec {
    fn default() -> Self {
        Self { image_channels: 2, widths: vec![32, 64], blocks_per_level: 2, groups: 8, time_dim: 64, embed_dim: 128 }
    }
}

/// Per-pixel network: 1x1 convolutions with time modulation, no spatial context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub image_channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { image_channels: 2, hidden: 32, layers: 2, time_dim: 16, embed_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Unet(UnetSpec),
    Mlp(MlpSpec),
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Unet(UnetSpec::default())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform on `±1/sqrt(fan_in)`.
    Uniform(usize),
    Ones,
    Zeros,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Architecture {
    pub fn image_channels(&self) -> usize {
        match self {
            Architecture::Unet(s) => s.image_channels,
            Architecture::Mlp(s) => s.image_channels,
        }
    }

    /// Input and output spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self {
            Architecture::Unet(s) => 1 << (s.widths.len().saturating_sub(1)),
            Architecture::Mlp(_) => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, td, ed) = match self {
            Architecture::Unet(s) => (s.image_channels, s.time_dim, s.embed_dim),
            Architecture::Mlp(s) => (s.image_channels, s.time_dim, s.embed_dim),
        };
        if c == 0 {
            return Err(cfg_err("image_channels must be at least 1"));
        }
        if td < 2 || td % 2 != 0 {
            return Err(cfg_err(format!("time_dim must be even and at least 2, got {td}")));
        }
        if ed == 0 {
            return Err(cfg_err("embed_dim must be at least 1"));
        }
        match self {
            Architecture::Unet(s) => {
                if s.widths.is_empty() || s.blocks_per_level == 0 || s.groups == 0 {
                    return Err(cfg_err("unet needs at least one level, one block and one group"));
                }
                if let Some(w) = s.widths.iter().find(|&&w| w == 0 || w % s.groups != 0) {
                    return Err(cfg_err(format!("width {w} is not a positive multiple of groups {}", s.groups)));
                }
            }
            Architecture::Mlp(s) => {
                if s.hidden == 0 {
                    return Err(cfg_err("mlp hidden width must be at least 1"));
                }
            }
        }
        Ok(())
    }

    fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<Slot>, name: &str, din: usize, dout: usize| {
            out.push(Slot { name: format!("{name}.weight"), shape: vec![dout, din], init: Init::Uniform(din) });
            out.push(Slot { name: format!("{name}.bias"), shape: vec![dout], init: Init::Uniform(din) });
        };
        let conv = |out: &mut Vec<Slot>, name: &str, cin: usize, cout: usize, k: usize| {
            let fan = cin * k * k;
            out.push(Slot { name: format!("{name}.weight"), shape: vec![cout, cin, k, k], init: Init::Uniform(fan) });
            out.push(Slot { name: format!("{name}.bias"), shape: vec![cout], init: Init::Uniform(fan) });
        };
        match self {
            Architecture::Unet(s) => {
                dense(&mut out, "time.0", s.time_dim, s.embed_dim);
                dense(&mut out, "time.1", s.embed_dim, s.embed_dim);
                conv(&mut out, "conv_in", s.image_channels + 1, s.widths[0], 3);
                let block = |out: &mut Vec<Slot>, name: String, cin: usize, cout: usize| {
                    conv(out, &format!("{name}.conv"), cin, cout, 3);
                    out.push(Slot { name: format!("{name}.norm.weight"), shape: vec![cout], init: Init::Ones });
                    out.push(Slot { name: format!("{name}.norm.bias"), shape: vec![cout], init: Init::Zeros });
                    dense(out, &format!("{name}.emb"), s.embed_dim, 2 * cout);
                };
                let levels = s.widths.len();
                for l in 0..levels {
                    for b in 0..s.blocks_per_level {
                        let cin = match (l, b) {
                            (0, 0) => s.widths[0],
                            (_, 0) => s.widths[l - 1],
                            _ => s.widths[l],
                        };
                        block(&mut out, format!("enc{l}.{b}"), cin, s.widths[l]);
                    }
                }
                for l in (0..levels - 1).rev() {
                    for b in 0..s.blocks_per_level {
                        let cin = if b == 0 { s.widths[l + 1] + s.widths[l] } else { s.widths[l] };
                        block(&mut out, format!("dec{l}.{b}"), cin, s.widths[l]);
                    }
                }
                conv(&mut out, "conv_out", s.widths[0], s.image_channels, 3);
            }
            Architecture::Mlp(s) => {
                dense(&mut out, "time.0", s.time_dim, s.embed_dim);
                dense(&mut out, "time.1", s.embed_dim, s.embed_dim);
                conv(&mut out, "conv_in", s.image_channels + 1, s.hidden, 1);
                for i in 0..s.layers {
                    conv(&mut out, &format!("layer{i}.conv"), s.hidden, s.hidden, 1);
                    dense(&mut out, &format!("layer{i}.emb"), s.embed_dim, 2 * s.hidden);
                }
                conv(&mut out, "conv_out", s.hidden, s.image_channels, 1);
            }
        }
        out
    }

    /// Names and shapes of every parameter, in graph order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.slots().into_iter().map(|s| (s.name, s.shape)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.slots().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn init_params<R: Real>(&self, seed: u64) -> Result<Params<R>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for slot in self.slots() {
            let n: usize = slot.shape.iter().product();
            let data: Vec<R> = match slot.init {
                Init::Uniform(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    (0..n).map(|_| R::lit(rng.gen_range(-bound..bound))).collect()
                }
                Init::Ones => vec![R::one(); n],
                Init::Zeros => vec![R::zero(); n],
            };
            names.push(slot.name);
            tensors.push(Tensor::new(slot.shape, data));
        }
        Ok(Params { names, tensors })
    }
}

/// Named parameter tensors in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Params<R> {
    /// Checks the tensors against the architecture's layout and for finiteness.
    pub fn new(arch: &Architecture, named: Vec<(String, Tensor<R>)>) -> Result<Self> {
        arch.validate()?;
        let want = arch.param_shapes();
        if want.len() != named.len() {
            return Err(Error::Format(format!("expected {} parameter tensors, found {}", want.len(), named.len())));
        }
        for ((wn, ws), (n, t)) in want.iter().zip(&named) {
            if wn != n {
                return Err(Error::Format(format!("expected parameter {wn}, found {n}")));
            }
            if ws.as_slice() != t.shape() {
                return Err(Error::dims(n, ws, t.shape()));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {n}")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn cast<S: Real>(&self) -> Params<S> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// `[sin(t w_0), .., sin(t w_{h-1}), cos(t w_0), .., cos(t w_{h-1})]` with
/// `w_i = 10000^(-i/h)` and `h = dim / 2`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Walks parameter vars in the same order as [`Architecture::slots`].
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    fn pair(&mut self) -> (Var, Var) {
        let w = self.next();
        (w, self.next())
    }
}

/// A parameterized network over a fixed architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Params<f32>,
}

impl Network {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let params = arch.init_params(seed)?;
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Params<f32>) -> Result<Self> {
        let named = params.names.into_iter().zip(params.tensors).collect();
        let params = Params::new(&arch, named)?;
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<f32> {
        &mut self.params
    }

    /// Output for `[N, C + 1, H, W]` input and one timestep per sample.
    pub fn forward(&self, input: Tensor<f32>, ts: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let out = build_graph(&self.arch, &self.params, &mut tape, input, ts)?;
        Ok(tape.value(out.output).clone())
    }
}

pub(crate) struct Graph {
    pub output: Var,
}

fn check_input(arch: &Architecture, input: &Tensor<impl Real>, ts: &[usize]) -> Result<()> {
    let shape = input.shape();
    if shape.len() != 4 || shape[1] != arch.image_channels() + 1 {
        return Err(Error::dims("network input", format!("[N, {}, H, W]", arch.image_channels() + 1), shape));
    }
    if shape[0] != ts.len() {
        return Err(Error::dims("timesteps per sample", shape[0], ts.len()));
    }
    let m = arch.size_multiple();
    if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::Dimension(format!(
            "spatial size {}x{} must be a positive multiple of {m}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

pub(crate) fn build_graph<R: Real>(
    arch: &Architecture,
    params: &Params<R>,
    tape: &mut Tape<R>,
    input: Tensor<R>,
    ts: &[usize],
) -> Result<Graph> {
    check_input(arch, &input, ts)?;
    let pvars: Vec<Var> = params.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
    let mut cur = Cursor { vars: &pvars, pos: 0 };
    let n = ts.len();
    let time_dim = match arch {
        Architecture::Unet(s) => s.time_dim,
        Architecture::Mlp(s) => s.time_dim,
    };
    let emb_in: Vec<R> = ts.iter().flat_map(|&t| sinusoidal_embedding(t, time_dim)).map(R::lit).collect();
    let emb = tape.leaf(Tensor::new(vec![n, time_dim], emb_in));
    let (w, b) = cur.pair();
    let emb = tape.linear(emb, w, b);
    let emb = tape.silu(emb);
    let (w, b) = cur.pair();
    let emb = tape.linear(emb, w, b);
    let emb = tape.silu(emb);

    let x = tape.leaf(input);
    let (w, b) = cur.pair();
    let mut h = tape.conv2d(x, w, b);

    match arch {
        Architecture::Unet(s) => {
            let block = |tape: &mut Tape<R>, cur: &mut Cursor, h: Var| {
                let (w, b) = cur.pair();
                let h = tape.conv2d(h, w, b);
                let (g, be) = cur.pair();
                let h = tape.group_norm(h, g, be, s.groups);
                let (w, b) = cur.pair();
                let ss = tape.linear(emb, w, b);
                let h = tape.scale_shift(h, ss);
                tape.silu(h)
            };
            let levels = s.widths.len();
            let mut skips = Vec::with_capacity(levels);
            for l in 0..levels {
                if l > 0 {
                    h = tape.avg_pool2(h);
                }
                for _ in 0..s.blocks_per_level {
                    h = block(tape, &mut cur, h);
                }
                skips.push(h);
            }
            for l in (0..levels - 1).rev() {
                h = tape.upsample2(h);
                h = tape.concat(h, skips[l]);
                for _ in 0..s.blocks_per_level {
                    h = block(tape, &mut cur, h);
                }
            }
        }
        Architecture::Mlp(s) => {
            h = tape.silu(h);
            for _ in 0..s.layers {
                let (w, b) = cur.pair();
                h = tape.conv2d(h, w, b);
                let (w, b) = cur.pair();
                let ss = tape.linear(emb, w, b);
                h = tape.scale_shift(h, ss);
                h = tape.silu(h);
            }
        }
    }
    let (w, b) = cur.pair();
    let output = tape.conv2d(h, w, b);
    debug_assert_eq!(cur.pos, pvars.len());
    Ok(Graph { output })
}

/// Mean squared error between the network output and `target`, and its
/// gradient with respect to every parameter (scaled by `seed`).
pub fn loss_and_grads<R: Real>(
    arch: &Architecture,
    params: &Params<R>,
    input: Tensor<R>,
    ts: &[usize],
    target: Tensor<R>,
    seed: R,
) -> Result<(f64, Vec<Tensor<R>>)> {
    let mut tape = Tape::new();
    let g = build_graph(arch, params, &mut tape, input, ts)?;
    if tape.value(g.output).shape() != target.shape() {
        return Err(Error::dims("loss target", tape.value(g.output).shape(), target.shape()));
    }
    let target = tape.leaf(target);
    let loss = tape.mse(g.output, target);
    let value = tape.value(loss).data()[0].to_f64().unwrap();
    let grads: Grads<R> = tape.backward_seeded(loss, seed);
    Ok((value, grads.param_grads(&params.shapes())))
}

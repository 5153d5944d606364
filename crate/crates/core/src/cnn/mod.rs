//! Convolutional classifier over I/Q examples.
//!
//! An example of `N` complex samples enters the network as a `1 x 2 x N`
//! tensor: row 0 holds the I components and row 1 the Q components. The
//! network ends in a dense layer with one unit per device followed by a
//! softmax. Class labels are 1-based throughout.

mod kernels;
mod train;

pub use train::{accuracy, train, Adam, Dataset, TrainConfig, TrainReport};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqcore::Sample;
use kernels::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid, stride-1 convolution with `filters` output channels.
    Conv { filters: usize, kh: usize, kw: usize },
    Relu,
    /// Stride-1 max pool; keeps the height (window clipped at the bottom
    /// edge) and shrinks the width by `pw - 1`.
    MaxPool { ph: usize, pw: usize },
    /// Fully connected; flattens its input.
    Dense { units: usize },
    /// Inverted dropout, active only in training mode.
    Dropout { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input shape as `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    /// The last layer must be `Dense { units: classes }`; softmax is implied.
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// The two-convolution testbed network for `classes` devices and
    /// examples of `n` complex samples.
    pub fn testbed(classes: usize, n: usize) -> Self {
        use LayerSpec::*;
        ModelSpec {
            input: [1, 2, n],
            classes,
            layers: vec![
                Conv { filters: 50, kh: 1, kw: 7 },
                Relu,
                MaxPool { ph: 2, pw: 2 },
                Conv { filters: 50, kh: 2, kw: 7 },
                Relu,
                MaxPool { ph: 2, pw: 2 },
                Dense { units: 256 },
                Relu,
                Dropout { rate: 0.5 },
                Dense { units: 80 },
                Relu,
                Dropout { rate: 0.5 },
                Dense { units: classes },
            ],
        }
    }

    /// Input shape of every layer followed by the output shape.
    pub(crate) fn shapes(&self) -> Result<Vec<Shape>> {
        let bad = |msg: String| Error::Config(msg);
        if self.classes < 2 {
            return Err(bad(format!("need at least 2 classes, got {}", self.classes)));
        }
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(bad("input dimensions must be positive".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) if *units == self.classes => {}
            _ => return Err(bad(format!("the last layer must be Dense with {} units", self.classes))),
        }
        let mut s = Shape { c, h, w };
        let mut shapes = vec![s];
        for (i, l) in self.layers.iter().enumerate() {
            s = match *l {
                LayerSpec::Conv { filters, kh, kw } => {
                    if filters == 0 || kh == 0 || kw == 0 || kh > s.h || kw > s.w {
                        return Err(bad(format!(
                            "layer {i}: {kh}x{kw} convolution with {filters} filters does not fit a {}x{} input",
                            s.h, s.w
                        )));
                    }
                    Shape { c: filters, h: s.h - kh + 1, w: s.w - kw + 1 }
                }
                LayerSpec::Relu => s,
                LayerSpec::MaxPool { ph, pw } => {
                    if ph == 0 || pw == 0 || pw > s.w {
                        return Err(bad(format!("layer {i}: {ph}x{pw} pool does not fit width {}", s.w)));
                    }
                    kernels::pool_shape(s, pw)
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(bad(format!("layer {i}: dense layer needs units")));
                    }
                    Shape { c: units, h: 1, w: 1 }
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(format!("layer {i}: dropout rate {rate} outside [0, 1)")));
                    }
                    s
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

/// Weights and biases of one layer; both empty for parameter-free layers.
/// Convolution weights are `[out][in][kh][kw]`, dense weights `[out][in]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        LayerParams { weights: vec![0.0; self.weights.len()], bias: vec![0.0; self.bias.len()] }
    }
}

/// A `[c, h, w]` array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for shape {shape:?}", shape.iter().product::<usize>()),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// `1 x 2 x N` layout: I row then Q row.
    pub fn from_iq(samples: &[Sample]) -> Self {
        let data = samples.iter().map(|s| s.re).chain(samples.iter().map(|s| s.im)).collect();
        Tensor { shape: [1, 2, samples.len()], data }
    }

    /// Inverse of [`Tensor::from_iq`]; for a gradient tensor this gives
    /// `dI + j dQ` per sample.
    pub fn to_iq(&self) -> Vec<Sample> {
        let n = self.data.len() / 2;
        (0..n).map(|i| Sample::new(self.data[i], self.data[n + i])).collect()
    }
}

/// Softmax output over the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    pub probs: Vec<f64>,
}

impl ClassProbabilities {
    /// 1-based label of the most likely class (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn of(&self, label: usize) -> f64 {
        self.probs[label - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, with masks drawn from this seed.
    Train { seed: u64 },
}

/// Cached intermediate values of one batched forward pass.
struct Pass {
    n: usize,
    /// `acts[i]` is the input of layer `i`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    pool_args: Vec<Vec<u32>>,
    drop_masks: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<Shape>,
    params: Vec<LayerParams>,
}

const MAGIC: &[u8; 8] = b"RFPCNN\0\x01";
pub const FORMAT_VERSION: u32 = 1;

fn softmax_rows(logits: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(d) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

impl Model {
    /// Builds the network with fan-in scaled uniform weights drawn from
    /// `seed` and zero biases. Layers feeding a ReLU use `sqrt(6 / fan_in)`
    /// as the bound; the output layer uses `sqrt(3 / fan_in)`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = spec.layers.len() - 1;
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (fan_in, w_len, b_len) = match *l {
                    LayerSpec::Conv { filters, kh, kw } => {
                        let fi = shapes[i].c * kh * kw;
                        (fi, filters * fi, filters)
                    }
                    LayerSpec::Dense { units } => (shapes[i].size(), units * shapes[i].size(), units),
                    _ => return LayerParams::default(),
                };
                let bound = if i == last { (3.0 / fan_in as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
                LayerParams {
                    weights: (0..w_len).map(|_| rng.gen_range(-bound..bound)).collect(),
                    bias: vec![0.0; b_len],
                }
            })
            .collect();
        Ok(Model { spec, shapes, params })
    }

    /// Assembles a model from explicit parameters (checked against the spec).
    pub fn from_params(spec: ModelSpec, params: Vec<LayerParams>) -> Result<Self> {
        let template = Model::new(spec, 0)?;
        if params.len() != template.params.len()
            || params
                .iter()
                .zip(&template.params)
                .any(|(a, b)| a.weights.len() != b.weights.len() || a.bias.len() != b.bias.len())
        {
            return Err(Error::ShapeMismatch {
                expected: "parameter blocks matching the model spec".into(),
                found: "differently sized blocks".into(),
            });
        }
        Ok(Model { params, ..template })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape != self.spec.input || x.data.len() != self.spec.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.spec.input),
                found: format!("{:?}", x.shape),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label == 0 || label > self.classes() {
            return Err(Error::InvalidLabel { label, classes: self.classes() });
        }
        Ok(())
    }

    fn stack(&self, xs: &[&Tensor]) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(xs.len() * self.spec.input_len());
        for x in xs {
            self.check_input(x)?;
            flat.extend_from_slice(&x.data);
        }
        Ok(flat)
    }

    fn run(&self, x: Vec<f64>, n: usize, mode: Mode) -> Pass {
        let mut rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        let mut acts = vec![x];
        let mut pool_args = Vec::new();
        let mut drop_masks = Vec::new();
        for (i, l) in self.spec.layers.iter().enumerate() {
            let s = self.shapes[i];
            let input = &acts[i];
            let p = &self.params[i];
            let out = match *l {
                LayerSpec::Conv { kh, kw, .. } => kernels::conv_forward(input, n, s, &p.weights, &p.bias, kh, kw),
                LayerSpec::Relu => input.iter().map(|v| v.max(0.0)).collect(),
                LayerSpec::MaxPool { ph, pw } => {
                    let (out, arg) = kernels::pool_forward(input, n, s, ph, pw);
                    pool_args.push(arg);
                    out
                }
                LayerSpec::Dense { .. } => kernels::dense_forward(input, n, s.size(), &p.weights, &p.bias),
                LayerSpec::Dropout { rate } => match rng.as_mut() {
                    Some(rng) if rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> =
                            (0..input.len()).map(|_| if rng.gen::<f64>() >= rate { keep } else { 0.0 }).collect();
                        let out = input.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        drop_masks.push(mask);
                        out
                    }
                    _ => {
                        drop_masks.push(Vec::new());
                        input.clone()
                    }
                },
            };
            acts.push(out);
        }
        let probs = softmax_rows(acts.last().expect("logits"), self.classes());
        Pass { n, acts, pool_args, drop_masks, probs }
    }

    /// Backpropagates logit gradients. Parameter gradients are accumulated
    /// into `grads` when given; the input gradient is returned when asked for.
    fn backprop(&self, pass: &Pass, dlogits: Vec<f64>, mut grads: Option<&mut [LayerParams]>, need_input: bool) -> Option<Vec<f64>> {
        let n = pass.n;
        let mut d = dlogits;
        let mut pool_i = pass.pool_args.len();
        let mut drop_i = pass.drop_masks.len();
        for (i, l) in self.spec.layers.iter().enumerate().rev() {
            let s = self.shapes[i];
            let input = &pass.acts[i];
            let p = &self.params[i];
            let want_dx = i > 0 || need_input;
            let g = grads.as_mut().map(|g| {
                let lp = &mut g[i];
                (lp.weights.as_mut_slice(), lp.bias.as_mut_slice())
            });
            let next = match *l {
                LayerSpec::Conv { filters, kh, kw } => {
                    kernels::conv_backward(input, n, s, &p.weights, filters, kh, kw, &d, g, want_dx)
                }
                LayerSpec::Dense { units } => {
                    kernels::dense_backward(input, n, s.size(), &p.weights, units, &d, g, want_dx)
                }
                LayerSpec::Relu => {
                    Some(d.iter().zip(input).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())
                }
                LayerSpec::MaxPool { .. } => {
                    pool_i -= 1;
                    Some(kernels::pool_backward(&pass.pool_args[pool_i], n, s, &d))
                }
                LayerSpec::Dropout { .. } => {
                    drop_i -= 1;
                    let mask = &pass.drop_masks[drop_i];
                    if mask.is_empty() {
                        Some(d)
                    } else {
                        Some(d.iter().zip(mask).map(|(g, m)| g * m).collect())
                    }
                }
            };
            match next {
                Some(v) => d = v,
                None => return None,
            }
        }
        Some(d)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ClassProbabilities> {
        self.check_input(x)?;
        let pass = self.run(x.data.clone(), 1, mode);
        Ok(ClassProbabilities { probs: pass.probs })
    }

    /// Eval-mode probabilities for many inputs, processed in batches.
    pub fn predict(&self, xs: &[Tensor]) -> Result<Vec<ClassProbabilities>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(64) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let pass = self.run(self.stack(&refs)?, chunk.len(), Mode::Eval);
            out.extend(pass.probs.chunks_exact(self.classes()).map(|p| ClassProbabilities { probs: p.to_vec() }));
        }
        Ok(out)
    }

    /// `d f_target / d x` where `f_target` is the eval-mode softmax output of
    /// class `target` (1-based).
    pub fn input_gradient(&self, x: &Tensor, target: usize) -> Result<Tensor> {
        let (_, mut g) = self.input_gradients(std::slice::from_ref(x), target)?;
        Ok(g.remove(0))
    }

    /// Batched [`Model::input_gradient`]; also returns `f_target` per input.
    pub fn input_gradients(&self, xs: &[Tensor], target: usize) -> Result<(Vec<f64>, Vec<Tensor>)> {
        self.check_label(target)?;
        let d = self.classes();
        let mut values = Vec::with_capacity(xs.len());
        let mut grads = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(32) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let pass = self.run(self.stack(&refs)?, chunk.len(), Mode::Eval);
            let mut dlogits = vec![0.0; chunk.len() * d];
            for (row, p) in dlogits.chunks_exact_mut(d).zip(pass.probs.chunks_exact(d)) {
                let pa = p[target - 1];
                values.push(pa);
                for j in 0..d {
                    row[j] = pa * (f64::from(u8::from(j + 1 == target)) - p[j]);
                }
            }
            let dx = self.backprop(&pass, dlogits, None, true).expect("input gradient requested");
            let len = self.spec.input_len();
            grads.extend(dx.chunks_exact(len).map(|g| Tensor { shape: self.spec.input, data: g.to_vec() }));
        }
        Ok((values, grads))
    }

    /// Mean cross-entropy over the batch plus `l2 / 2` times the squared norm
    /// of all weights (biases excluded), and its gradient with respect to
    /// every parameter.
    pub fn loss_and_gradient(&self, xs: &[Tensor], labels: &[usize], l2: f64, mode: Mode) -> Result<(f64, Vec<LayerParams>)> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::invalid(format!("{} inputs but {} labels", xs.len(), labels.len())));
        }
        for &l in labels {
            self.check_label(l)?;
        }
        let refs: Vec<&Tensor> = xs.iter().collect();
        let n = xs.len();
        let d = self.classes();
        let pass = self.run(self.stack(&refs)?, n, mode);
        let mut loss = 0.0;
        let mut dlogits = pass.probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            loss -= pass.probs[i * d + l - 1].max(f64::MIN_POSITIVE).ln();
            dlogits[i * d + l - 1] -= 1.0;
        }
        loss /= n as f64;
        for v in dlogits.iter_mut() {
            *v /= n as f64;
        }
        let mut grads: Vec<LayerParams> = self.params.iter().map(LayerParams::zeros_like).collect();
        self.backprop(&pass, dlogits, Some(&mut grads), false);
        if l2 > 0.0 {
            for (g, p) in grads.iter_mut().zip(&self.params) {
                loss += 0.5 * l2 * p.weights.iter().map(|w| w * w).sum::<f64>();
                for (gw, w) in g.weights.iter_mut().zip(&p.weights) {
                    *gw += l2 * w;
                }
            }
        }
        Ok((loss, grads))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = serde_json::to_vec(&self.spec).expect("ModelSpec serializes");
        let mut out = Vec::with_capacity(32 + spec.len() + self.num_params() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        out.extend_from_slice(&spec);
        for p in &self.params {
            for block in [&p.weights, &p.bias] {
                out.extend_from_slice(&(block.len() as u64).to_le_bytes());
                for v in block.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("not a model file (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let spec_len = r.u64()? as usize;
        let spec: ModelSpec =
            serde_json::from_slice(r.take(spec_len)?).map_err(|e| Error::Corrupt(format!("model spec: {e}")))?;
        let template = Model::new(spec, 0).map_err(|e| Error::Corrupt(format!("model spec: {e}")))?;
        let mut params = Vec::with_capacity(template.params.len());
        for (i, t) in template.params.iter().enumerate() {
            let mut blocks = [Vec::new(), Vec::new()];
            for (block, want) in blocks.iter_mut().zip([t.weights.len(), t.bias.len()]) {
                let count = r.u64()? as usize;
                if count != want {
                    return Err(Error::Corrupt(format!("layer {i}: block of {count} values, expected {want}")));
                }
                *block = r
                    .take(count.checked_mul(8).ok_or_else(|| Error::Corrupt("block size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
            }
            let [weights, bias] = blocks;
            params.push(LayerParams { weights, bias });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Model { params, ..template })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("model file truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

//! Small differentiable classifiers with exact input gradients, training
//! loops, and a binary checkpoint format.
//!
//! Parameters are stored as `f32` (that is what checkpoints hold) and every
//! forward/backward pass computes in `f64`.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic        6 bytes  "WBCKPT"
//! version      u16      1
//! arch tag     u16 length + UTF-8 ("linear-softmax" | "conv-small")
//! channels     u32
//! height       u32
//! width        u32
//! num_classes  u32
//! tensors      u32 count, then per tensor:
//!                u16 length + UTF-8 name, u32 rank, rank × u32 dims
//! payload      f32 values of every tensor in table order
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack_with, ThreatKind, ThreatModel, WassersteinSettings};
use crate::dataio::{write_atomic, LabeledDataset};
use crate::imagecore::Image;
use crate::par::Exec;
use crate::{Error, Result};

/// Anything an attack can query: logits and the input gradient of the
/// cross-entropy loss.
pub trait Model: Sync {
    /// `(channels, height, width)` accepted by the model.
    fn input_shape(&self) -> (usize, usize, usize);

    fn num_classes(&self) -> usize;

    fn forward(&self, image: &Image) -> Result<Vec<f64>>;

    /// Cross-entropy loss against `label` and its gradient with respect to
    /// the pixels, in the image's channel-major layout.
    fn loss_and_input_gradient(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)>;

    fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.forward(image)?))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log Σ exp(logits) − logits[label]` and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = m + total.ln() - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// One dense layer straight to the logits.
    #[serde(rename = "linear-softmax")]
    LinearSoftmax,
    /// conv3×3(16) → relu → maxpool2 → conv3×3(32) → relu → maxpool2 →
    /// dense(128) → relu → dense(classes).
    #[serde(rename = "conv-small")]
    ConvSmall,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::LinearSoftmax => "linear-softmax",
            Architecture::ConvSmall => "conv-small",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "linear-softmax" | "linear" => Ok(Architecture::LinearSoftmax),
            "conv-small" | "conv" => Ok(Architecture::ConvSmall),
            other => Err(Error::invalid("architecture", format!("unknown architecture {other:?}"))),
        }
    }
}

const CONV1: usize = 16;
const CONV2: usize = 32;
const HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamTensor {
    fn new(name: &str, shape: &[usize]) -> Self {
        ParamTensor { name: name.to_string(), shape: shape.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    tensors: Vec<ParamTensor>,
    values: Vec<f32>,
    wide: Vec<f64>,
}

fn layout(arch: Architecture, c: usize, h: usize, w: usize, classes: usize) -> Result<Vec<ParamTensor>> {
    if c == 0 || h == 0 || w == 0 || classes < 2 {
        return Err(Error::invalid("shape", "need a non-empty input and at least two classes"));
    }
    Ok(match arch {
        Architecture::LinearSoftmax => {
            vec![ParamTensor::new("dense.weight", &[classes, c * h * w]), ParamTensor::new("dense.bias", &[classes])]
        }
        Architecture::ConvSmall => {
            if h < 4 || w < 4 {
                return Err(Error::invalid("shape", "conv-small needs at least 4×4 inputs"));
            }
            let flat = CONV2 * (h / 2 / 2) * (w / 2 / 2);
            vec![
                ParamTensor::new("conv1.weight", &[CONV1, c, 3, 3]),
                ParamTensor::new("conv1.bias", &[CONV1]),
                ParamTensor::new("conv2.weight", &[CONV2, CONV1, 3, 3]),
                ParamTensor::new("conv2.bias", &[CONV2]),
                ParamTensor::new("fc1.weight", &[HIDDEN, flat]),
                ParamTensor::new("fc1.bias", &[HIDDEN]),
                ParamTensor::new("fc2.weight", &[classes, HIDDEN]),
                ParamTensor::new("fc2.bias", &[classes]),
            ]
        }
    })
}

impl Classifier {
    /// All parameters zero.
    pub fn zeros(arch: Architecture, shape: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let (channels, height, width) = shape;
        let tensors = layout(arch, channels, height, width, num_classes)?;
        let count = tensors.iter().map(ParamTensor::len).sum();
        Ok(Classifier {
            arch,
            channels,
            height,
            width,
            num_classes,
            tensors,
            values: vec![0.0; count],
            wide: vec![0.0; count],
        })
    }

    /// He-uniform weights, zero biases, from a seeded stream.
    pub fn init(arch: Architecture, shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let mut m = Classifier::zeros(arch, shape, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(m.values.len());
        for t in &m.tensors {
            if t.name.ends_with(".bias") {
                values.extend(std::iter::repeat(0.0f32).take(t.len()));
            } else {
                let fan_in: usize = t.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                values.extend((0..t.len()).map(|_| rng.gen_range(-bound..bound) as f32));
            }
        }
        m.set_values(values)?;
        Ok(m)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn set_values(&mut self, values: Vec<f32>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameters", self.values.len()),
                actual: format!("{}", values.len()),
            });
        }
        self.wide = values.iter().map(|&v| v as f64).collect();
        self.values = values;
        Ok(())
    }

    /// Applies `f` to every parameter.
    pub fn map_parameters(&mut self, f: impl Fn(f32) -> f32) {
        let values = self.values.iter().map(|&v| f(v)).collect();
        self.set_values(values).expect("same length");
    }

    /// Parameters of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let mut off = 0;
        for t in &self.tensors {
            if t.name == name {
                return Some(&self.values[off..off + t.len()]);
            }
            off += t.len();
        }
        None
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if (image.channels(), image.height(), image.width()) != (self.channels, self.height, self.width) {
            return Err(Error::DimensionMismatch {
                expected: format!("{}×{}×{}", self.channels, self.height, self.width),
                actual: format!("{}×{}×{}", image.channels(), image.height(), image.width()),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::invalid("label", format!("{label} is not below {} classes", self.num_classes)));
        }
        Ok(())
    }

    /// Loss, input gradient, and (when `param_grad` is given) the parameter
    /// gradient accumulated into it.
    fn backprop(&self, input: &[f64], label: usize, param_grad: Option<&mut [f64]>) -> (f64, Vec<f64>, usize) {
        match self.arch {
            Architecture::LinearSoftmax => self.backprop_linear(input, label, param_grad),
            Architecture::ConvSmall => self.backprop_conv(input, label, param_grad),
        }
    }

    fn backprop_linear(&self, input: &[f64], label: usize, param_grad: Option<&mut [f64]>) -> (f64, Vec<f64>, usize) {
        let d = input.len();
        let k = self.num_classes;
        let (w, b) = self.wide.split_at(k * d);
        let logits = dense_forward(input, w, b, k);
        let predicted = argmax(&logits);
        let (loss, dlogits) = cross_entropy(&logits, label);
        let mut dinput = vec![0.0; d];
        let (gw, gb) = match param_grad {
            Some(g) => {
                let (gw, gb) = g.split_at_mut(k * d);
                (Some(gw), Some(gb))
            }
            None => (None, None),
        };
        dense_backward(input, w, &dlogits, &mut dinput, gw, gb);
        (loss, dinput, predicted)
    }

    fn backprop_conv(&self, input: &[f64], label: usize, param_grad: Option<&mut [f64]>) -> (f64, Vec<f64>, usize) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h2 / 2, w2 / 2);
        let flat = CONV2 * h4 * w4;
        let sizes: Vec<usize> = self.tensors.iter().map(ParamTensor::len).collect();
        let mut views = Vec::with_capacity(8);
        let mut rest: &[f64] = &self.wide;
        for s in &sizes {
            let (a, b) = rest.split_at(*s);
            views.push(a);
            rest = b;
        }
        let (w1, b1, w2_, b2, w3, b3, w4_, b4) =
            (views[0], views[1], views[2], views[3], views[4], views[5], views[6], views[7]);

        let mut a1 = conv3x3_forward(input, c, h, w, w1, b1, CONV1);
        relu(&mut a1);
        let (p1, i1) = maxpool2(&a1, CONV1, h, w);
        let mut a2 = conv3x3_forward(&p1, CONV1, h2, w2, w2_, b2, CONV2);
        relu(&mut a2);
        let (p2, i2) = maxpool2(&a2, CONV2, h2, w2);
        let mut a3 = dense_forward(&p2, w3, b3, HIDDEN);
        relu(&mut a3);
        let logits = dense_forward(&a3, w4_, b4, self.num_classes);
        let predicted = argmax(&logits);
        let (loss, dlogits) = cross_entropy(&logits, label);

        let mut grads: Vec<Option<&mut [f64]>> = match param_grad {
            Some(g) => {
                let mut out = Vec::with_capacity(8);
                let mut rest = g;
                for s in &sizes {
                    let (a, b) = rest.split_at_mut(*s);
                    out.push(Some(a));
                    rest = b;
                }
                out
            }
            None => (0..8).map(|_| None).collect(),
        };
        let mut take = |k: usize| grads[k].take();

        let mut da3 = vec![0.0; HIDDEN];
        dense_backward(&a3, w4_, &dlogits, &mut da3, take(6), take(7));
        relu_backward(&a3, &mut da3);
        let mut dp2 = vec![0.0; flat];
        dense_backward(&p2, w3, &da3, &mut dp2, take(4), take(5));
        let mut da2 = maxpool2_backward(&dp2, &i2, a2.len());
        relu_backward(&a2, &mut da2);
        let mut dp1 = vec![0.0; p1.len()];
        conv3x3_backward(&p1, CONV1, h2, w2, w2_, &da2, CONV2, &mut dp1, take(2), take(3));
        let mut da1 = maxpool2_backward(&dp1, &i1, a1.len());
        relu_backward(&a1, &mut da1);
        let mut dinput = vec![0.0; input.len()];
        conv3x3_backward(input, c, h, w, w1, &da1, CONV1, &mut dinput, take(0), take(1));
        (loss, dinput, predicted)
    }

    fn logits(&self, input: &[f64]) -> Vec<f64> {
        match self.arch {
            Architecture::LinearSoftmax => {
                let k = self.num_classes;
                let (w, b) = self.wide.split_at(k * input.len());
                dense_forward(input, w, b, k)
            }
            Architecture::ConvSmall => {
                // The backward pass is cheap relative to the convolutions;
                // reuse it rather than keep a second forward path in sync.
                let (c, h, w) = (self.channels, self.height, self.width);
                let mut off = 0;
                let mut views = Vec::with_capacity(8);
                for t in &self.tensors {
                    views.push(&self.wide[off..off + t.len()]);
                    off += t.len();
                }
                let mut a1 = conv3x3_forward(input, c, h, w, views[0], views[1], CONV1);
                relu(&mut a1);
                let (p1, _) = maxpool2(&a1, CONV1, h, w);
                let mut a2 = conv3x3_forward(&p1, CONV1, h / 2, w / 2, views[2], views[3], CONV2);
                relu(&mut a2);
                let (p2, _) = maxpool2(&a2, CONV2, h / 2, w / 2);
                let mut a3 = dense_forward(&p2, views[4], views[5], HIDDEN);
                relu(&mut a3);
                dense_forward(&a3, views[6], views[7], self.num_classes)
            }
        }
    }

    /// Loss and gradient with respect to every parameter, in storage order.
    pub fn loss_and_parameter_gradient(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(image)?;
        self.check_label(label)?;
        let mut g = vec![0.0; self.values.len()];
        let (loss, _, _) = self.backprop(image.pixels(), label, Some(&mut g));
        Ok((loss, g))
    }

    pub fn accuracy(&self, data: &LabeledDataset, exec: Exec) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("dataset", "empty"));
        }
        let hits = exec.try_map(data.images(), |i, im| Ok::<_, Error>(self.predict(im)? == data.labels()[i]))?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, self.arch.tag());
        for v in [self.channels, self.height, self.width, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            let mut word = [0u8; 4];
            word.copy_from_slice(&magic[..4]);
            let mut expected = [0u8; 4];
            expected.copy_from_slice(&CHECKPOINT_MAGIC[..4]);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: u32::from_be_bytes(word),
                expected: u32::from_be_bytes(expected),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let arch = Architecture::from_tag(&r.string()?)?;
        let (c, h, w, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut m = Classifier::zeros(arch, (c, h, w), k)?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push(ParamTensor { name, shape });
        }
        if table != m.tensors {
            return Err(Error::Format("tensor table does not match the architecture".into()));
        }
        let raw = r.take(4 * m.values.len())?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        m.set_values(values)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Classifier::from_bytes(&bytes, path)
    }
}

impl Model for Classifier {
    fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        Ok(self.logits(image.pixels()))
    }

    fn loss_and_input_gradient(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(image)?;
        self.check_label(label)?;
        let (loss, g, _) = self.backprop(image.pixels(), label, None);
        Ok((loss, g))
    }
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"WBCKPT";
const CHECKPOINT_VERSION: u16 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.bytes.get(self.at..self.at + n) {
            Some(s) => {
                self.at += n;
                Ok(s)
            }
            None => Err(Error::TruncatedFile {
                path: self.path.to_path_buf(),
                needed: self.at + n,
                available: self.bytes.len(),
            }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

fn dense_forward(input: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let d = input.len();
    (0..out).map(|o| b[o] + w[o * d..(o + 1) * d].iter().zip(input).map(|(a, x)| a * x).sum::<f64>()).collect()
}

fn dense_backward(
    input: &[f64],
    w: &[f64],
    dout: &[f64],
    dinput: &mut [f64],
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let d = input.len();
    for (o, &g) in dout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (di, wi) in dinput.iter_mut().zip(&w[o * d..(o + 1) * d]) {
            *di += g * wi;
        }
    }
    if let Some(gw) = gw {
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (gwi, x) in gw[o * d..(o + 1) * d].iter_mut().zip(input) {
                *gwi += g * x;
            }
        }
    }
    if let Some(gb) = gb {
        for (a, g) in gb.iter_mut().zip(dout) {
            *a += g;
        }
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Same-size 3×3 convolution with zero padding.
fn conv3x3_forward(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            let k = &weight[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = k[ky * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    // Output rows/cols whose tap (y+ky-1, x+kx-1) is inside.
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let srow = &src[sy * w..(sy + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            drow[x] += kv * srow[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    dout: &[f64],
    cout: usize,
    dinput: &mut [f64],
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let plane = h * w;
    let mut gw = gw;
    for o in 0..cout {
        let d = &dout[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            let base = (o * cin + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let kv = weight[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let di = &mut dinput[i * plane + sy * w..i * plane + (sy + 1) * w];
                        let drow = &d[y * w..(y + 1) * w];
                        let srow = &src[sy * w..(sy + 1) * w];
                        for x in x0..x1 {
                            di[x + kx - 1] += kv * drow[x];
                            acc += drow[x] * srow[x + kx - 1];
                        }
                    }
                    if let Some(g) = gw.as_deref_mut() {
                        g[base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for o in 0..cout {
            gb[o] += dout[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
    }
}

/// 2×2 max pooling (trailing odd row/column dropped); also returns the flat
/// index of each window's maximum.
fn maxpool2(input: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * ho * wo);
    let mut idx = Vec::with_capacity(channels * ho * wo);
    for c in 0..channels {
        for y in 0..ho {
            for x in 0..wo {
                let mut best = c * h * w + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = c * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if input[k] > input[best] {
                        best = k;
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn maxpool2_backward(dout: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut d = vec![0.0; input_len];
    for (g, &k) in dout.iter().zip(idx) {
        d[k] += g;
    }
    d
}

/// Geometric sequence from `start` to `end` inclusive (`epochs ≥ 2`).
pub fn epsilon_schedule(start: f64, end: f64, epochs: usize) -> Result<Vec<f64>> {
    if epochs < 2 {
        return Err(Error::invalid("epochs", "a schedule needs at least two epochs"));
    }
    if !(start > 0.0 && end > start && end.is_finite()) {
        return Err(Error::invalid("epsilon_schedule", format!("need 0 < start < end, got {start}..{end}")));
    }
    let ratio = end / start;
    let last = (epochs - 1) as f64;
    Ok((0..epochs)
        .map(|k| match k {
            0 => start,
            k if k == epochs - 1 => end,
            k => start * ratio.powf(k as f64 / last),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialTraining {
    /// Radius per epoch (normalized units); its length must equal `epochs`.
    pub epsilon_schedule: Vec<f64>,
    /// Attack used to perturb each example; its `epsilon` is replaced by the
    /// schedule entry of the epoch.
    pub threat: ThreatModel,
}

impl AdversarialTraining {
    /// Wasserstein PGD with training-mode projection settings, `steps` steps
    /// per example, and a geometric radius schedule from `start` to `end`.
    pub fn wasserstein(start: f64, end: f64, epochs: usize, steps: usize) -> Result<Self> {
        let mut threat = ThreatModel::wasserstein(end).with_max_steps(steps);
        threat.wasserstein = WassersteinSettings::training();
        Ok(AdversarialTraining { epsilon_schedule: epsilon_schedule(start, end, epochs)?, threat })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adversarial: Option<AdversarialTraining>,
}

impl TrainConfig {
    /// Plain mini-batch SGD with the architecture's default learning rate.
    pub fn standard(arch: Architecture, epochs: usize, seed: u64) -> Self {
        TrainConfig { epochs, batch_size: 32, learning_rate: default_learning_rate(arch), seed, adversarial: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if let Some(adv) = &self.adversarial {
            if adv.epsilon_schedule.len() != self.epochs {
                return Err(Error::invalid(
                    "epsilon_schedule",
                    format!("{} entries for {} epochs", adv.epsilon_schedule.len(), self.epochs),
                ));
            }
            adv.threat.validate()?;
        }
        Ok(())
    }
}

pub fn default_learning_rate(arch: Architecture) -> f64 {
    match arch {
        Architecture::LinearSoftmax => 0.1,
        Architecture::ConvSmall => 0.05,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy on the clean training set after the epoch.
    pub clean_accuracy: f64,
    /// Training radius for the epoch (adversarial runs only).
    pub epsilon: Option<f64>,
}

/// Mini-batch gradient descent. Examples are shuffled per epoch from `seed`;
/// per-example work (attack, backprop) runs through `exec` against a frozen
/// snapshot and gradients are summed in example order, so results do not
/// depend on the strategy.
pub fn train(
    model: &Classifier,
    data: &LabeledDataset,
    config: &TrainConfig,
    exec: Exec,
) -> Result<(Classifier, Vec<EpochRecord>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    let mut model = model.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let threat = config.adversarial.as_ref().map(|adv| ThreatModel {
            epsilon: adv.epsilon_schedule[epoch],
            ..adv.threat.clone()
        });
        let cost = match &threat {
            Some(t) if t.kind == ThreatKind::Wasserstein => {
                let (_, h, w) = model.input_shape();
                Some(t.wasserstein.cost_matrix(h, w)?)
            }
            _ => None,
        };
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let snapshot = &model;
            let per_example = exec.try_map(batch, |_, &k| -> Result<(f64, Vec<f64>)> {
                let (image, label) = (&data.images()[k], data.labels()[k]);
                match &threat {
                    Some(t) => {
                        let adv = pgd_attack_with(snapshot, image, label, t, cost.as_ref(), None)?;
                        snapshot.loss_and_parameter_gradient(&adv.adversarial, label)
                    }
                    None => snapshot.loss_and_parameter_gradient(image, label),
                }
            })?;
            let mut grad = vec![0.0; model.values.len()];
            for (loss, g) in &per_example {
                total_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = config.learning_rate / batch.len() as f64;
            let values = model.wide.iter().zip(&grad).map(|(v, g)| (v - scale * g) as f32).collect();
            model.set_values(values)?;
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: total_loss / data.len() as f64,
            clean_accuracy: model.accuracy(data, exec)?,
            epsilon: threat.map(|t| t.epsilon),
        });
    }
    Ok((model, history))
}

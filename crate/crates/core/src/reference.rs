//! Integer golden model of binarized forward propagation, plus seeded and
//! on-disk weights.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::network::{Dims, LayerKind, LayerSpec, NetworkSpec, OutputMode};

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("truncated blob: need {need} bytes, found {found}")]
    Truncated { need: usize, found: usize },
    #[error("checksum mismatch: manifest {expected}, blob {actual}")]
    Checksum { expected: String, actual: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ForwardError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Weights and thresholds of one layer. Weight bit `c` of tap `t` of channel
/// `k` lives at bit index `(k * taps + t) * planes + c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerWeights {
    pub channels: usize,
    pub taps: usize,
    pub planes: u32,
    bits: Vec<u64>,
    pub thresholds: Vec<i64>,
}

impl LayerWeights {
    pub fn zeros(channels: usize, taps: usize, planes: u32) -> Self {
        let n = channels * taps * planes as usize;
        LayerWeights {
            channels,
            taps,
            planes,
            bits: vec![0; n.div_ceil(64)],
            thresholds: vec![0; channels],
        }
    }

    fn bit_index(&self, channel: usize, tap: usize, plane: u32) -> usize {
        (channel * self.taps + tap) * self.planes as usize + plane as usize
    }

    pub fn bit(&self, channel: usize, tap: usize, plane: u32) -> bool {
        let i = self.bit_index(channel, tap, plane);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set_bit(&mut self, channel: usize, tap: usize, plane: u32, v: bool) {
        let i = self.bit_index(channel, tap, plane);
        if v {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Unsigned value formed by the weight's bit-planes.
    pub fn value(&self, channel: usize, tap: usize) -> u64 {
        (0..self.planes).fold(0, |acc, c| acc | (self.bit(channel, tap, c) as u64) << c)
    }

    pub fn bit_len(&self) -> usize {
        self.channels * self.taps * self.planes as usize
    }

    fn packed_bytes(&self) -> Vec<u8> {
        let n = self.bit_len().div_ceil(8);
        self.bits.iter().flat_map(|w| w.to_le_bytes()).take(n).collect()
    }

    fn from_packed(channels: usize, taps: usize, planes: u32, bytes: &[u8], thresholds: Vec<i64>) -> Self {
        let mut lw = LayerWeights::zeros(channels, taps, planes);
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            lw.bits[i] = u64::from_le_bytes(buf);
        }
        let tail = lw.bit_len() % 64;
        if tail != 0 {
            if let Some(last) = lw.bits.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        lw.thresholds = thresholds;
        lw
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    channels: usize,
    taps: usize,
    weight_bits: u32,
    bits_offset: usize,
    bits_bytes: usize,
    thresholds_offset: usize,
    thresholds: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    network: String,
    blob: String,
    bytes: usize,
    sha256: String,
    #[serde(rename = "layer")]
    layers: Vec<ManifestLayer>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Weights {
    /// Uniform random weight bits and thresholds drawn around zero with a
    /// spread of half the dot product's standard deviation, so outputs are
    /// roughly balanced.
    pub fn seeded(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let mut lw = LayerWeights::zeros(l.channels(), l.taps(), l.weight_bits);
                for w in lw.bits.iter_mut() {
                    *w = rng.gen();
                }
                let tail = lw.bit_len() % 64;
                if tail != 0 {
                    if let Some(last) = lw.bits.last_mut() {
                        *last &= (1u64 << tail) - 1;
                    }
                }
                let spread = threshold_spread(l);
                for t in lw.thresholds.iter_mut() {
                    *t = if spread == 0 { 0 } else { rng.gen_range(-spread..=spread) };
                }
                lw
            })
            .collect();
        Weights { layers }
    }

    pub fn check_shape(&self, net: &NetworkSpec) -> Result<(), WeightsError> {
        if self.layers.len() != net.layers.len() {
            return Err(WeightsError::Shape(format!(
                "{} weight layers for {} network layers",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (i, (lw, l)) in self.layers.iter().zip(&net.layers).enumerate() {
            if lw.channels != l.channels() || lw.taps != l.taps() || lw.planes != l.weight_bits || lw.thresholds.len() != l.channels() {
                return Err(WeightsError::Shape(format!(
                    "layer {i}: weights {}x{}x{} do not match {}x{}x{}",
                    lw.channels,
                    lw.taps,
                    lw.planes,
                    l.channels(),
                    l.taps(),
                    l.weight_bits
                )));
            }
        }
        Ok(())
    }

    /// Flat blob: per layer, LSB-first packed weight bits then thresholds as
    /// little-endian i64.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for lw in &self.layers {
            out.extend(lw.packed_bytes());
            for t in &lw.thresholds {
                out.extend(t.to_le_bytes());
            }
        }
        out
    }

    /// Writes `<manifest>` and its blob (`<manifest stem>.bin` beside it).
    pub fn save(&self, net: &NetworkSpec, manifest_path: &Path) -> Result<(), WeightsError> {
        self.check_shape(net)?;
        let blob = self.to_blob();
        let blob_name = format!(
            "{}.bin",
            manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("weights")
        );
        let mut offset = 0;
        let mut layers = Vec::new();
        for (lw, l) in self.layers.iter().zip(&net.layers) {
            let bits_bytes = lw.bit_len().div_ceil(8);
            layers.push(ManifestLayer {
                name: l.name.clone(),
                channels: lw.channels,
                taps: lw.taps,
                weight_bits: lw.planes,
                bits_offset: offset,
                bits_bytes,
                thresholds_offset: offset + bits_bytes,
                thresholds: lw.thresholds.len(),
            });
            offset += bits_bytes + 8 * lw.thresholds.len();
        }
        let manifest = Manifest {
            network: net.name.clone(),
            blob: blob_name.clone(),
            bytes: blob.len(),
            sha256: sha256_hex(&blob),
            layers,
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&blob_name);
        write_file(&blob_path, &blob)?;
        let text = toml::to_string(&manifest).map_err(|e| WeightsError::Manifest(e.to_string()))?;
        write_file(manifest_path, text.as_bytes())
    }

    pub fn load(net: &NetworkSpec, manifest_path: &Path) -> Result<Self, WeightsError> {
        let text = fs::read_to_string(manifest_path).map_err(|source| WeightsError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| WeightsError::Manifest(e.to_string()))?;
        if manifest.network != net.name {
            return Err(WeightsError::Manifest(format!(
                "weights are for network `{}`, not `{}`",
                manifest.network, net.name
            )));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|source| WeightsError::Io { path: blob_path, source })?;
        if blob.len() < manifest.bytes {
            return Err(WeightsError::Truncated {
                need: manifest.bytes,
                found: blob.len(),
            });
        }
        let actual = sha256_hex(&blob);
        if actual != manifest.sha256 {
            return Err(WeightsError::Checksum {
                expected: manifest.sha256,
                actual,
            });
        }
        if manifest.layers.len() != net.layers.len() {
            return Err(WeightsError::Shape(format!(
                "manifest lists {} layers, network has {}",
                manifest.layers.len(),
                net.layers.len()
            )));
        }
        let mut layers = Vec::new();
        for (i, (m, l)) in manifest.layers.iter().zip(&net.layers).enumerate() {
            if m.channels != l.channels() || m.taps != l.taps() || m.weight_bits != l.weight_bits || m.thresholds != l.channels() {
                return Err(WeightsError::Shape(format!("manifest layer {i} (`{}`) does not match the network", m.name)));
            }
            let need_bits = (m.channels * m.taps * m.weight_bits as usize).div_ceil(8);
            if m.bits_bytes != need_bits {
                return Err(WeightsError::Shape(format!("manifest layer {i}: {} weight bytes, expected {need_bits}", m.bits_bytes)));
            }
            let bits_end = m.bits_offset + m.bits_bytes;
            let thr_end = m.thresholds_offset + 8 * m.thresholds;
            let end = bits_end.max(thr_end);
            if end > blob.len() {
                return Err(WeightsError::Truncated {
                    need: end,
                    found: blob.len(),
                });
            }
            let thresholds = blob[m.thresholds_offset..thr_end]
                .chunks(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            layers.push(LayerWeights::from_packed(
                m.channels,
                m.taps,
                m.weight_bits,
                &blob[m.bits_offset..bits_end],
                thresholds,
            ));
        }
        Ok(Weights { layers })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), WeightsError> {
    fs::write(path, bytes).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn threshold_spread(l: &LayerSpec) -> i64 {
    if l.is_raw() {
        return 0;
    }
    let var = |bits: u32| ((1u128 << (2 * bits)) - 1) as f64 / 3.0;
    let sd = (l.taps() as f64 * var(l.input_bits) * var(l.weight_bits)).sqrt() * l.scale_product() as f64;
    let scaled = if l.shift >= 0 {
        sd * f64::powi(2.0, l.shift)
    } else {
        sd / f64::powi(2.0, -l.shift)
    };
    (scaled / 2.0).round() as i64
}

/// Uniform random input values of the network's input bit width.
pub fn seeded_inputs(net: &NetworkSpec, seed: u64, count: usize) -> Vec<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = (1u64 << net.input_bits()) - 1;
    (0..count)
        .map(|_| (0..net.input_len()).map(|_| rng.gen_range(0..=max)).collect())
        .collect()
}

/// Applies scale factors and the batch-norm shift to a +/-1 dot product.
pub fn scale_and_shift(layer: &LayerSpec, dot: i128) -> i128 {
    let y = dot * layer.scale_product() as i128;
    if layer.shift >= 0 {
        y << layer.shift
    } else {
        y >> (-layer.shift)
    }
}

/// Input taps of one output position: `Some(input index)` or `None` for
/// padding. Tap order is kernel row, kernel column, then depth.
pub fn conv_taps(input: Dims, kernel: (usize, usize), stride: usize, top: usize, left: usize, oy: usize, ox: usize) -> Vec<Option<usize>> {
    let mut taps = Vec::with_capacity(kernel.0 * kernel.1 * input.depth);
    for ky in 0..kernel.0 {
        for kx in 0..kernel.1 {
            let y = (oy * stride + ky) as isize - top as isize;
            let x = (ox * stride + kx) as isize - left as isize;
            let inside = y >= 0 && x >= 0 && (y as usize) < input.height && (x as usize) < input.width;
            for z in 0..input.depth {
                taps.push(inside.then(|| input.index(y as usize, x as usize, z)));
            }
        }
    }
    taps
}

/// Sum over taps and plane pairs of `2^(b+c) * XNOR(x_b, w_c)`, computed as
/// `x*w + (X - x)(W - w)` per tap with `X`, `W` the all-ones values.
fn weighted_popcount(layer: &LayerSpec, lw: &LayerWeights, channel: usize, values: impl Iterator<Item = u64>) -> u128 {
    let xmax = (1u128 << layer.input_bits) - 1;
    let wmax = (1u128 << layer.weight_bits) - 1;
    values
        .enumerate()
        .map(|(t, x)| {
            let x = x as u128;
            let w = lw.value(channel, t) as u128;
            x * w + (xmax - x) * (wmax - w)
        })
        .sum()
}

fn neuron_output(layer: &LayerSpec, lw: &LayerWeights, channel: usize, sum: u128) -> u64 {
    match layer.output {
        OutputMode::Raw { .. } => sum as u64,
        OutputMode::Binary => {
            let dot = 2 * sum as i128 - layer.affine_offset() as i128;
            (scale_and_shift(layer, dot) >= lw.thresholds[channel] as i128) as u64
        }
    }
}

pub fn layer_forward(layer: &LayerSpec, lw: &LayerWeights, input: &[u64]) -> Result<Vec<u64>, ForwardError> {
    if input.len() != layer.input_len() {
        return Err(ForwardError::Shape(format!(
            "layer `{}` takes {} inputs, got {}",
            layer.name,
            layer.input_len(),
            input.len()
        )));
    }
    if lw.channels != layer.channels() || lw.taps != layer.taps() || lw.planes != layer.weight_bits {
        return Err(ForwardError::Shape(format!("weights do not match layer `{}`", layer.name)));
    }
    let limit = 1u64 << layer.input_bits;
    if let Some(v) = input.iter().find(|&&v| v >= limit) {
        return Err(ForwardError::Shape(format!("input value {v} exceeds {} bits", layer.input_bits)));
    }
    match &layer.kind {
        LayerKind::FullyConnected { outputs, .. } => Ok((0..*outputs)
            .map(|k| neuron_output(layer, lw, k, weighted_popcount(layer, lw, k, input.iter().copied())))
            .collect()),
        LayerKind::Conv {
            input: dims,
            kernel,
            stride,
            padding,
            ..
        } => {
            let out = layer.output_dims().expect("conv output");
            let (ph, pw) = layer.pool();
            let mut result = vec![0u64; out.len()];
            for py in 0..out.height {
                for px in 0..out.width {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let taps = conv_taps(*dims, *kernel, *stride, padding.top, padding.left, py * ph + dy, px * pw + dx);
                            for k in 0..out.depth {
                                let values = taps.iter().map(|t| t.map_or(0, |i| input[i]));
                                let v = neuron_output(layer, lw, k, weighted_popcount(layer, lw, k, values));
                                let slot = &mut result[out.index(py, px, k)];
                                *slot = if layer.is_raw() { v } else { *slot | v };
                            }
                        }
                    }
                }
            }
            Ok(result)
        }
    }
}

/// Outputs of every layer in order; the last entry is the network output.
pub fn forward_layers(net: &NetworkSpec, weights: &Weights, input: &[u64]) -> Result<Vec<Vec<u64>>, ForwardError> {
    if weights.layers.len() != net.layers.len() {
        return Err(ForwardError::Shape("weights do not match the network".into()));
    }
    let mut outs: Vec<Vec<u64>> = Vec::with_capacity(net.layers.len());
    for (l, lw) in net.layers.iter().zip(&weights.layers) {
        let x = outs.last().map_or(input, |v| v.as_slice());
        outs.push(layer_forward(l, lw, x)?);
    }
    Ok(outs)
}

pub fn forward(net: &NetworkSpec, weights: &Weights, input: &[u64]) -> Result<Vec<u64>, ForwardError> {
    let outs = forward_layers(net, weights, input)?;
    Ok(outs.into_iter().last().unwrap_or_else(|| input.to_vec()))
}

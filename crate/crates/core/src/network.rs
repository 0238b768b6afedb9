//! Layer and network descriptions, benchmark presets and the network file
//! format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("network: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("network file: {0}")]
    Parse(String),
}

/// Height, width, depth of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize, depth: usize) -> Self {
        Dims { height, width, depth }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index, depth fastest.
    pub fn index(&self, y: usize, x: usize, z: usize) -> usize {
        (y * self.width + x) * self.depth + z
    }
}

/// Zero padding around the input of a convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn same(kh: usize, kw: usize) -> Self {
        Padding {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        input: Dims,
        filters: usize,
        /// Kernel height and width; depth equals the input depth.
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        /// Non-overlapping max pool (height, width), computed in the same
        /// tiles. Positions outside complete windows are dropped.
        pool: Option<(usize, usize)>,
    },
}

/// How a layer's result leaves the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    /// Thresholded sign bit.
    Binary,
    /// The weighted bit-plane popcount sum, zero-extended to `bits`.
    Raw { bits: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Bits per input value, processed one bit-plane at a time.
    pub input_bits: u32,
    /// Bits per weight, each plane an independent +/-1 weight scaled by 2^c.
    pub weight_bits: u32,
    /// Batch-norm shift applied after scaling: multiply by 2^shift when
    /// positive, floor-divide by 2^-shift when negative.
    pub shift: i32,
    /// Unsigned fixed-point scale factors multiplied into the dot product.
    pub scales: Vec<u64>,
    pub output: OutputMode,
}

impl LayerSpec {
    pub fn fc(name: &str, inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::FullyConnected { inputs, outputs },
            input_bits: 1,
            weight_bits: 1,
            shift: 0,
            scales: Vec::new(),
            output: OutputMode::Binary,
        }
    }

    pub fn conv(
        name: &str,
        input: Dims,
        filters: usize,
        kernel: (usize, usize),
        padding: Padding,
        pool: Option<(usize, usize)>,
    ) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv {
                input,
                filters,
                kernel,
                stride: 1,
                padding,
                pool,
            },
            input_bits: 1,
            weight_bits: 1,
            shift: 0,
            scales: Vec::new(),
            output: OutputMode::Binary,
        }
    }

    pub fn with_input_bits(mut self, bits: u32) -> Self {
        self.input_bits = bits;
        self
    }

    pub fn with_weight_bits(mut self, bits: u32) -> Self {
        self.weight_bits = bits;
        self
    }

    pub fn with_raw_output(mut self, bits: u32) -> Self {
        self.output = OutputMode::Raw { bits };
        self
    }

    pub fn with_shift(mut self, shift: i32) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_scales(mut self, scales: Vec<u64>) -> Self {
        self.scales = scales;
        self
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        if let LayerKind::Conv { stride, .. } = &mut self.kind {
            *stride = s;
        }
        self
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }

    pub fn is_raw(&self) -> bool {
        matches!(self.output, OutputMode::Raw { .. })
    }

    pub fn input_len(&self) -> usize {
        match &self.kind {
            LayerKind::FullyConnected { inputs, .. } => *inputs,
            LayerKind::Conv { input, .. } => input.len(),
        }
    }

    /// Weights per output channel (filter taps including depth).
    pub fn taps(&self) -> usize {
        match &self.kind {
            LayerKind::FullyConnected { inputs, .. } => *inputs,
            LayerKind::Conv { input, kernel, .. } => kernel.0 * kernel.1 * input.depth,
        }
    }

    /// Output channels: neurons for FC, filters for conv.
    pub fn channels(&self) -> usize {
        match &self.kind {
            LayerKind::FullyConnected { outputs, .. } => *outputs,
            LayerKind::Conv { filters, .. } => *filters,
        }
    }

    /// Convolution output size before pooling.
    pub fn conv_out(&self) -> Option<(usize, usize)> {
        match &self.kind {
            LayerKind::Conv {
                input,
                kernel,
                stride,
                padding,
                ..
            } => {
                let h = input.height + padding.top + padding.bottom;
                let w = input.width + padding.left + padding.right;
                if h < kernel.0 || w < kernel.1 {
                    return Some((0, 0));
                }
                Some(((h - kernel.0) / stride + 1, (w - kernel.1) / stride + 1))
            }
            LayerKind::FullyConnected { .. } => None,
        }
    }

    pub fn pool(&self) -> (usize, usize) {
        match &self.kind {
            LayerKind::Conv { pool: Some(p), .. } => *p,
            _ => (1, 1),
        }
    }

    /// Conv output map after pooling.
    pub fn output_dims(&self) -> Option<Dims> {
        let (oh, ow) = self.conv_out()?;
        let (ph, pw) = self.pool();
        Some(Dims::new(oh / ph, ow / pw, self.channels()))
    }

    pub fn output_len(&self) -> usize {
        match &self.kind {
            LayerKind::FullyConnected { outputs, .. } => *outputs,
            LayerKind::Conv { .. } => self.output_dims().map_or(0, |d| d.len()),
        }
    }

    /// Output positions whose results are kept (inside complete pool
    /// windows), each computed by its own group per channel.
    pub fn positions(&self) -> usize {
        match self.output_dims() {
            Some(d) => {
                let (ph, pw) = self.pool();
                d.height * ph * d.width * pw
            }
            None => 1,
        }
    }

    pub fn pool_size(&self) -> usize {
        let (ph, pw) = self.pool();
        ph * pw
    }

    /// `N (2^B - 1)(2^C - 1)`: subtracting it from twice the weighted
    /// popcount sum gives the +/-1 dot product.
    pub fn affine_offset(&self) -> u128 {
        self.taps() as u128 * ((1u128 << self.input_bits) - 1) * ((1u128 << self.weight_bits) - 1)
    }

    pub fn scale_product(&self) -> u128 {
        self.scales.iter().map(|&s| s as u128).product()
    }

    /// Largest weighted popcount sum, `N (2^B - 1)(2^C - 1)`.
    pub fn max_sum(&self) -> u128 {
        self.affine_offset()
    }

    fn validate(&self, idx: usize) -> Result<(), NetworkError> {
        let err = |reason: String| NetworkError::Layer { layer: idx, reason };
        if !(1..=16).contains(&self.input_bits) || !(1..=16).contains(&self.weight_bits) {
            return Err(err("input and weight bit widths must be within 1..=16".into()));
        }
        if self.shift.unsigned_abs() > 32 {
            return Err(err("shift magnitude above 32".into()));
        }
        if self.scales.contains(&0) {
            return Err(err("scale factors must be positive".into()));
        }
        match &self.kind {
            LayerKind::FullyConnected { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err(err("fully connected layer with no inputs or outputs".into()));
                }
            }
            LayerKind::Conv {
                input,
                filters,
                kernel,
                stride,
                pool,
                ..
            } => {
                if input.is_empty() || *filters == 0 || kernel.0 == 0 || kernel.1 == 0 || *stride == 0 {
                    return Err(err("convolution with an empty dimension".into()));
                }
                if let Some((ph, pw)) = pool {
                    if *ph == 0 || *pw == 0 {
                        return Err(err("empty pool window".into()));
                    }
                    if self.is_raw() {
                        return Err(err("pooling requires a binary output".into()));
                    }
                }
                if self.output_len() == 0 {
                    return Err(err("convolution produces no output".into()));
                }
            }
        }
        if let OutputMode::Raw { bits } = self.output {
            let need = 128 - self.max_sum().leading_zeros();
            if bits < need || bits > 64 {
                return Err(err(format!("raw output needs {need}..=64 bits, got {bits}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(name: &str, layers: Vec<LayerSpec>) -> Result<Self, NetworkError> {
        let net = NetworkSpec {
            name: name.to_string(),
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
            if i > 0 {
                let prev = &self.layers[i - 1];
                if prev.is_raw() {
                    return Err(NetworkError::Layer {
                        layer: i - 1,
                        reason: "only the final layer may emit raw sums".into(),
                    });
                }
                if l.input_bits != 1 {
                    return Err(NetworkError::Layer {
                        layer: i,
                        reason: "layers after the first take binary inputs".into(),
                    });
                }
                if prev.output_len() != l.input_len() {
                    return Err(NetworkError::Layer {
                        layer: i,
                        reason: format!("expects {} inputs, previous layer produces {}", l.input_len(), prev.output_len()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_len())
    }

    pub fn input_bits(&self) -> u32 {
        self.layers.first().map_or(1, |l| l.input_bits)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input_len(), |l| l.output_len())
    }

    /// Bits per output value: the raw width or 1.
    pub fn output_bits(&self) -> u32 {
        match self.layers.last().map(|l| l.output) {
            Some(OutputMode::Raw { bits }) => bits,
            Some(OutputMode::Binary) => 1,
            None => self.input_bits(),
        }
    }

    pub fn is_convolutional(&self) -> bool {
        self.layers.iter().any(|l| l.is_conv())
    }

    pub fn preset(name: &str) -> Result<Self, NetworkError> {
        let key = name.to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "fpbnn-fc" => Ok(fpbnn_fc()),
            "finn-fc" => Ok(finn_fc()),
            "fpbnn-cifar" => Ok(fpbnn_cifar()),
            "finn-cifar" => Ok(finn_cifar()),
            "bionet" => Ok(bionet()),
            "alexnet-xnor" | "alexnet" => Ok(alexnet_xnor()),
            _ => Err(NetworkError::UnknownPreset(name.to_string())),
        }
    }

    pub const PRESETS: [&'static str; 6] = ["fpbnn-fc", "finn-fc", "fpbnn-cifar", "finn-cifar", "bionet", "alexnet-xnor"];

    pub fn from_toml_str(text: &str) -> Result<Self, NetworkError> {
        let file: NetworkFile = toml::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))?;
        file.into_spec()
    }

    pub fn to_toml_string(&self) -> String {
        let file = NetworkFile::from_spec(self);
        toml::to_string(&file).expect("network serializes")
    }
}

fn fpbnn_fc() -> NetworkSpec {
    NetworkSpec::new(
        "fpbnn-fc",
        vec![
            LayerSpec::fc("fc1", 784, 2048).with_input_bits(8),
            LayerSpec::fc("fc2", 2048, 2048),
            LayerSpec::fc("fc3", 2048, 2048),
            LayerSpec::fc("fc4", 2048, 10).with_raw_output(16),
        ],
    )
    .expect("valid preset")
}

fn finn_fc() -> NetworkSpec {
    NetworkSpec::new(
        "finn-fc",
        vec![
            LayerSpec::fc("fc1", 784, 1024),
            LayerSpec::fc("fc2", 1024, 1024),
            LayerSpec::fc("fc3", 1024, 1024),
            LayerSpec::fc("fc4", 1024, 10),
        ],
    )
    .expect("valid preset")
}

/// Six 3x3 same-padded convolutions with 2x2 pools after every second one,
/// then three fully connected layers.
fn cifar(name: &str, filters: [usize; 3], hidden: usize) -> NetworkSpec {
    let same = Padding::same(3, 3);
    let mut layers = Vec::new();
    let mut dims = Dims::new(32, 32, 3);
    for (i, &f) in [filters[0], filters[0], filters[1], filters[1], filters[2], filters[2]].iter().enumerate() {
        let pool = if i % 2 == 1 { Some((2, 2)) } else { None };
        let mut l = LayerSpec::conv(&format!("conv{}", i + 1), dims, f, (3, 3), same, pool);
        if i == 0 {
            l = l.with_input_bits(8);
        }
        dims = l.output_dims().expect("conv");
        layers.push(l);
    }
    let flat = dims.len();
    layers.push(LayerSpec::fc("fc1", flat, hidden));
    layers.push(LayerSpec::fc("fc2", hidden, hidden));
    layers.push(LayerSpec::fc("fc3", hidden, 10).with_raw_output(16));
    NetworkSpec::new(name, layers).expect("valid preset")
}

fn fpbnn_cifar() -> NetworkSpec {
    cifar("fpbnn-cifar", [128, 256, 512], 1024)
}

fn finn_cifar() -> NetworkSpec {
    cifar("finn-cifar", [64, 128, 256], 512)
}

fn bionet() -> NetworkSpec {
    let l1 = LayerSpec::conv(
        "conv1",
        Dims::new(4, 100, 1),
        64,
        (4, 3),
        Padding { top: 0, bottom: 0, left: 1, right: 1 },
        Some((1, 5)),
    );
    let l2 = LayerSpec::conv(
        "conv2",
        l1.output_dims().expect("conv"),
        32,
        (1, 5),
        Padding { top: 0, bottom: 0, left: 2, right: 2 },
        Some((1, 2)),
    );
    let l3 = LayerSpec::conv(
        "conv3",
        l2.output_dims().expect("conv"),
        20,
        (1, 4),
        Padding { top: 0, bottom: 0, left: 1, right: 2 },
        Some((1, 2)),
    );
    let l4 = LayerSpec::fc("fc1", l3.output_len(), 40).with_raw_output(10);
    NetworkSpec::new("bionet", vec![l1, l2, l3, l4]).expect("valid preset")
}

/// Fraction bits of the fixed-point scale factors in the AlexNet preset.
pub const ALEXNET_SCALE_FRACTION_BITS: u32 = 4;

fn alexnet_xnor() -> NetworkSpec {
    let f = ALEXNET_SCALE_FRACTION_BITS;
    // Per-layer scaling and batch-norm multipliers, both in fixed point with
    // `f` fraction bits; the final shift renormalizes their product.
    let scaled = |l: LayerSpec| l.with_scales(vec![11, 13]).with_shift(-2 * f as i32);
    let same3 = Padding::same(3, 3);
    let c1 = scaled(
        LayerSpec::conv("conv1", Dims::new(227, 227, 3), 96, (11, 11), Padding::default(), Some((2, 2)))
            .with_stride(4)
            .with_input_bits(8)
            .with_weight_bits(2),
    );
    let c2 = scaled(LayerSpec::conv(
        "conv2",
        c1.output_dims().expect("conv"),
        256,
        (5, 5),
        Padding::same(5, 5),
        Some((2, 2)),
    ));
    let c3 = scaled(LayerSpec::conv("conv3", c2.output_dims().expect("conv"), 384, (3, 3), same3, None));
    let c4 = scaled(LayerSpec::conv("conv4", c3.output_dims().expect("conv"), 384, (3, 3), same3, None));
    let c5 = scaled(LayerSpec::conv(
        "conv5",
        c4.output_dims().expect("conv"),
        256,
        (3, 3),
        same3,
        Some((2, 2)),
    ));
    let flat = c5.output_len();
    let f1 = scaled(LayerSpec::fc("fc1", flat, 4096));
    let f2 = scaled(LayerSpec::fc("fc2", 4096, 4096));
    let f3 = LayerSpec::fc("fc3", 4096, 1000).with_weight_bits(2).with_raw_output(16);
    NetworkSpec::new("alexnet-xnor", vec![c1, c2, c3, c4, c5, f1, f2, f3]).expect("valid preset")
}

/// On-disk layer record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outputs: Option<usize>,
    /// Conv input as [height, width, depth].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    /// [top, bottom, left, right], or "same".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<PaddingRecord>,
    /// Pool window [height, width]; on a `pool` record, `size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shift: Option<i32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    scales: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_bits: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PaddingRecord {
    Named(String),
    Explicit([usize; 4]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    name: String,
    #[serde(rename = "layer")]
    layers: Vec<LayerRecord>,
}

impl NetworkFile {
    fn into_spec(self) -> Result<NetworkSpec, NetworkError> {
        let mut layers: Vec<LayerSpec> = Vec::new();
        for (i, r) in self.layers.into_iter().enumerate() {
            let err = |reason: &str| NetworkError::Layer { layer: i, reason: reason.to_string() };
            let need = |v: Option<usize>, what: &str| v.ok_or_else(|| err(&format!("missing `{what}`")));
            let name = r.name.clone().unwrap_or_else(|| format!("{}{}", r.kind, i + 1));
            let mut spec = match r.kind.as_str() {
                "fc" => LayerSpec::fc(&name, need(r.inputs, "inputs")?, need(r.outputs, "outputs")?),
                "conv" => {
                    let input = r.input.ok_or_else(|| err("missing `input`"))?;
                    let kernel = r.kernel.ok_or_else(|| err("missing `kernel`"))?;
                    let padding = match &r.padding {
                        None => Padding::default(),
                        Some(PaddingRecord::Named(s)) if s == "same" => Padding::same(kernel[0], kernel[1]),
                        Some(PaddingRecord::Named(s)) if s == "valid" => Padding::default(),
                        Some(PaddingRecord::Named(s)) => return Err(err(&format!("unknown padding `{s}`"))),
                        Some(PaddingRecord::Explicit([t, b, l, rr])) => Padding {
                            top: *t,
                            bottom: *b,
                            left: *l,
                            right: *rr,
                        },
                    };
                    LayerSpec::conv(
                        &name,
                        Dims::new(input[0], input[1], input[2]),
                        need(r.filters, "filters")?,
                        (kernel[0], kernel[1]),
                        padding,
                        r.pool.map(|p| (p[0], p[1])),
                    )
                    .with_stride(r.stride.unwrap_or(1))
                }
                "pool" => {
                    let size = r.size.or(r.pool).ok_or_else(|| err("missing `size`"))?;
                    match layers.last_mut() {
                        Some(LayerSpec {
                            kind: LayerKind::Conv { pool, .. },
                            ..
                        }) if pool.is_none() => {
                            *pool = Some((size[0], size[1]));
                            continue;
                        }
                        _ => return Err(err("a pool layer must follow a convolution without its own pool")),
                    }
                }
                other => return Err(err(&format!("unknown layer kind `{other}`"))),
            };
            spec.input_bits = r.input_bits.unwrap_or(1);
            spec.weight_bits = r.weight_bits.unwrap_or(1);
            spec.shift = r.shift.unwrap_or(0);
            spec.scales = r.scales;
            if let Some(bits) = r.raw_bits {
                spec.output = OutputMode::Raw { bits };
            }
            layers.push(spec);
        }
        NetworkSpec::new(&self.name, layers)
    }

    fn from_spec(net: &NetworkSpec) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let mut r = LayerRecord {
                    kind: String::new(),
                    name: Some(l.name.clone()),
                    inputs: None,
                    outputs: None,
                    input: None,
                    filters: None,
                    kernel: None,
                    stride: None,
                    padding: None,
                    pool: None,
                    size: None,
                    input_bits: (l.input_bits != 1).then_some(l.input_bits),
                    weight_bits: (l.weight_bits != 1).then_some(l.weight_bits),
                    shift: (l.shift != 0).then_some(l.shift),
                    scales: l.scales.clone(),
                    raw_bits: match l.output {
                        OutputMode::Raw { bits } => Some(bits),
                        OutputMode::Binary => None,
                    },
                };
                match &l.kind {
                    LayerKind::FullyConnected { inputs, outputs } => {
                        r.kind = "fc".into();
                        r.inputs = Some(*inputs);
                        r.outputs = Some(*outputs);
                    }
                    LayerKind::Conv {
                        input,
                        filters,
                        kernel,
                        stride,
                        padding,
                        pool,
                    } => {
                        r.kind = "conv".into();
                        r.input = Some([input.height, input.width, input.depth]);
                        r.filters = Some(*filters);
                        r.kernel = Some([kernel.0, kernel.1]);
                        r.stride = (*stride != 1).then_some(*stride);
                        r.padding = Some(PaddingRecord::Explicit([padding.top, padding.bottom, padding.left, padding.right]));
                        r.pool = pool.map(|(h, w)| [h, w]);
                    }
                }
                r
            })
            .collect();
        NetworkFile {
            name: net.name.clone(),
            layers,
        }
    }
}

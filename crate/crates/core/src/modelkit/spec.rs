//! Declarative layer and model descriptions with shape inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::patchset::PATCH_SIZE;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding so the output is `ceil(input / stride)`.
    Same,
}

fn unit_stride() -> (usize, usize) {
    (1, 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        #[serde(default = "unit_stride")]
        stride: (usize, usize),
        #[serde(default)]
        padding: Padding,
        activation: Activation,
    },
    /// One filter per input channel.
    DepthwiseConv2d {
        kernel: (usize, usize),
        #[serde(default = "unit_stride")]
        stride: (usize, usize),
        #[serde(default)]
        padding: Padding,
        activation: Activation,
    },
    Maxpool2d {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Tiles a single-channel image across `channels` channels.
    ReplicateChannels {
        channels: usize,
    },
    /// `activation(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        #[serde(default)]
        shortcut: Vec<LayerSpec>,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize, k: usize, activation: Activation) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel: (k, k),
            stride: (1, 1),
            padding: Padding::Valid,
            activation,
        }
    }

    /// `k × k` convolution with explicit stride and padding.
    pub fn conv_with(filters: usize, k: usize, stride: usize, padding: Padding, activation: Activation) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel: (k, k),
            stride: (stride, stride),
            padding,
            activation,
        }
    }

    pub fn maxpool(size: usize) -> Self {
        LayerSpec::Maxpool2d {
            pool: (size, size),
            stride: (size, size),
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::ReplicateChannels { .. } => "replicate_channels",
            LayerSpec::Residual { .. } => "residual",
        }
    }

    fn check(&self) -> Result<()> {
        let positive = |v: (usize, usize), what: &str| {
            if v.0 == 0 || v.1 == 0 {
                Err(Error::Spec(format!("{} {what} must be positive, got {v:?}", self.kind_name())))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Conv2d {
                filters, kernel, stride, ..
            } => {
                if *filters == 0 {
                    return Err(Error::Spec("conv2d filters must be positive".into()));
                }
                positive(*kernel, "kernel")?;
                positive(*stride, "stride")
            }
            LayerSpec::DepthwiseConv2d { kernel, stride, .. } => {
                positive(*kernel, "kernel")?;
                positive(*stride, "stride")
            }
            LayerSpec::Maxpool2d { pool, stride } => {
                positive(*pool, "pool")?;
                positive(*stride, "stride")
            }
            LayerSpec::Dense { units, .. } if *units == 0 => Err(Error::Spec("dense units must be positive".into())),
            LayerSpec::ReplicateChannels { channels } if *channels == 0 => {
                Err(Error::Spec("replicate_channels needs at least one channel".into()))
            }
            _ => Ok(()),
        }
    }

    /// Output shape and trainable parameter count for a given input.
    pub fn infer(&self, input: Shape) -> Result<(Shape, usize)> {
        self.check()?;
        let spatial = |what: &str| match input {
            Shape::Spatial { h, w, c } => Ok((h, w, c)),
            Shape::Flat(_) => Err(Error::Spec(format!("{what} needs a spatial input, got {input}"))),
        };
        match self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (h, w, c) = spatial("conv2d")?;
                let (oh, ow) = conv_out(h, w, *kernel, *stride, *padding)?;
                Ok((Shape::spatial(oh, ow, *filters), kernel.0 * kernel.1 * c * filters + filters))
            }
            LayerSpec::DepthwiseConv2d {
                kernel, stride, padding, ..
            } => {
                let (h, w, c) = spatial("depthwise_conv2d")?;
                let (oh, ow) = conv_out(h, w, *kernel, *stride, *padding)?;
                Ok((Shape::spatial(oh, ow, c), kernel.0 * kernel.1 * c + c))
            }
            LayerSpec::Maxpool2d { pool, stride } => {
                let (h, w, c) = spatial("maxpool2d")?;
                let axis = |len: usize, p: usize, s: usize| {
                    if len < p || !(len - p).is_multiple_of(s) {
                        Err(Error::Spec(format!(
                            "maxpool {p} stride {s} over {len} gives a non-integral output"
                        )))
                    } else {
                        Ok((len - p) / s + 1)
                    }
                };
                Ok((Shape::spatial(axis(h, pool.0, stride.0)?, axis(w, pool.1, stride.1)?, c), 0))
            }
            LayerSpec::GlobalAvgPool => {
                let (_, _, c) = spatial("global_avg_pool")?;
                Ok((Shape::Flat(c), 0))
            }
            LayerSpec::Flatten => Ok((Shape::Flat(input.len()), 0)),
            LayerSpec::Dense { units, .. } => match input {
                Shape::Flat(n) => Ok((Shape::Flat(*units), n * units + units)),
                Shape::Spatial { .. } => Err(Error::Spec(format!("dense needs a flat input, got {input}"))),
            },
            LayerSpec::ReplicateChannels { channels } => {
                let (h, w, c) = spatial("replicate_channels")?;
                if c != 1 {
                    return Err(Error::Spec(format!("replicate_channels needs 1 input channel, got {c}")));
                }
                Ok((Shape::spatial(h, w, *channels), 0))
            }
            LayerSpec::Residual { body, shortcut, .. } => {
                let (b, bp) = infer_chain(body, input)?;
                let (s, sp) = infer_chain(shortcut, input)?;
                if b != s {
                    return Err(Error::Spec(format!("residual branches disagree: body {b}, shortcut {s}")));
                }
                Ok((b, bp + sp))
            }
        }
    }
}

/// Lengths of the weight tensors a layer instantiates, in parameter order
/// (weights before biases, residual body before shortcut).
pub fn param_lens(layers: &[LayerSpec], mut input: Shape) -> Result<Vec<usize>> {
    let mut lens = Vec::new();
    for layer in layers {
        let (out, params) = layer.infer(input)?;
        match layer {
            LayerSpec::Conv2d { filters, .. } => lens.extend([params - filters, *filters]),
            LayerSpec::DepthwiseConv2d { .. } | LayerSpec::Dense { .. } => {
                let bias = out.hwc().2;
                lens.extend([params - bias, bias]);
            }
            LayerSpec::Residual { body, shortcut, .. } => {
                lens.extend(param_lens(body, input)?);
                lens.extend(param_lens(shortcut, input)?);
            }
            _ => {}
        }
        input = out;
    }
    Ok(lens)
}

fn conv_out(h: usize, w: usize, k: (usize, usize), s: (usize, usize), padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => Ok((h.div_ceil(s.0), w.div_ceil(s.1))),
        Padding::Valid => {
            if h < k.0 || w < k.1 {
                return Err(Error::Spec(format!("kernel {k:?} larger than input {h}×{w}")));
            }
            Ok(((h - k.0) / s.0 + 1, (w - k.1) / s.1 + 1))
        }
    }
}

fn infer_chain(layers: &[LayerSpec], mut shape: Shape) -> Result<(Shape, usize)> {
    let mut params = 0;
    for layer in layers {
        let (next, p) = layer.infer(shape)?;
        shape = next;
        params += p;
    }
    Ok((shape, params))
}

/// Per-example tensor shape; the batch axis is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn spatial(h: usize, w: usize, c: usize) -> Self {
        Shape::Spatial { h, w, c }
    }

    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(h, w, c)`, with flat shapes as `(1, 1, n)`.
    pub fn hwc(&self) -> (usize, usize, usize) {
        match *self {
            Shape::Spatial { h, w, c } => (h, w, c),
            Shape::Flat(n) => (1, 1, n),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { h, w, c } => write!(f, "({h}, {w}, {c})"),
            Shape::Flat(n) => write!(f, "({n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Vgg16,
    Resnet50,
    Mobilenet,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::Vgg16, BackboneKind::Resnet50, BackboneKind::Mobilenet];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Vgg16 => "vgg16",
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::Mobilenet => "mobilenet",
        }
    }

    /// Display name of the transfer model built on this backbone.
    pub fn model_name(&self, pretrained: bool) -> String {
        let base = match self {
            BackboneKind::Vgg16 => "MVGG16",
            BackboneKind::Resnet50 => "ResNet50",
            BackboneKind::Mobilenet => "MobileNet",
        };
        if pretrained {
            format!("{base}+ImageNet")
        } else {
            base.to_string()
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vgg16" | "mvgg16" => Ok(BackboneKind::Vgg16),
            "resnet50" => Ok(BackboneKind::Resnet50),
            "mobilenet" => Ok(BackboneKind::Mobilenet),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Which provider supplied the leading feature layers of a transfer model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneRef {
    pub kind: BackboneKind,
    /// Registry key of the provider, e.g. `vgg16` or `vgg16-desk`.
    pub provider: String,
    /// Number of leading entries in `layers` that belong to the backbone.
    pub feature_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub backbone: Option<BackboneRef>,
    #[serde(default)]
    pub pretrained: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Shape,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub layers: Vec<LayerSummary>,
    pub total: usize,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<20} {:>12}", "Layer (type)", "Output Shape", "Param #")?;
        for l in &self.layers {
            let name = format!("{} ({})", l.name, l.kind);
            writeln!(f, "{:<24} {:<20} {:>12}", name, l.output_shape.to_string(), l.params)?;
        }
        write!(f, "Total params: {}", self.total)
    }
}

impl ModelSpec {
    pub fn input(&self) -> Shape {
        let (h, w, c) = self.input_shape;
        Shape::spatial(h, w, c)
    }

    /// Runs shape inference and checks the output and head contract.
    pub fn validate(&self) -> Result<()> {
        self.summary().map(|_| ())
    }

    /// Output shape and parameter count of every top-level layer.
    pub fn summary(&self) -> Result<ParamCount> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Spec(format!("input shape {:?} has a zero axis", self.input_shape)));
        }
        let mut shape = self.input();
        let mut counters = std::collections::HashMap::<&str, usize>::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut total = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, params) = layer
                .infer(shape)
                .map_err(|e| Error::Spec(format!("layer {i} ({}): {e}", layer.kind_name())))?;
            let n = counters.entry(layer.kind_name()).or_insert(0);
            *n += 1;
            layers.push(LayerSummary {
                name: format!("{}_{}", layer.kind_name(), n),
                kind: layer.kind_name(),
                output_shape: next,
                params,
            });
            total += params;
            shape = next;
        }
        self.check_head(shape)?;
        Ok(ParamCount { layers, total })
    }

    fn check_head(&self, output: Shape) -> Result<()> {
        let is_sigmoid_out =
            |l: &LayerSpec| matches!(l, LayerSpec::Dense { units: 1, activation: Activation::Sigmoid });
        match self.layers.last() {
            Some(l) if is_sigmoid_out(l) => {}
            _ => return Err(Error::Spec("the final layer must be dense(1, sigmoid)".into())),
        }
        if output != Shape::Flat(1) {
            return Err(Error::Spec(format!("model output must be (1), got {output}")));
        }
        if self.layers.iter().filter(|l| is_sigmoid_out(l)).count() != 1 {
            return Err(Error::Spec("exactly one dense(1, sigmoid) layer is allowed".into()));
        }
        if let Some(b) = &self.backbone {
            let n = self.layers.len();
            let head_ok = n >= b.feature_layers + 2
                && self.layers[n - 2]
                    == LayerSpec::Dense {
                        units: 32,
                        activation: Activation::Relu,
                    };
            if !head_ok {
                return Err(Error::Spec("transfer models need a dense(32, relu), dense(1, sigmoid) head".into()));
            }
        } else if self.pretrained {
            return Err(Error::Spec("pretrained is only meaningful with a backbone".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("ModelSpec serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ModelSpec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-layer and total parameter counts.
pub fn param_count(spec: &ModelSpec) -> Result<ParamCount> {
    spec.summary()
}

/// The two-conv baseline classifier.
pub fn build_baseline() -> ModelSpec {
    ModelSpec {
        name: "Simple model".into(),
        input_shape: (PATCH_SIZE, PATCH_SIZE, 1),
        layers: vec![
            LayerSpec::conv(32, 3, Activation::Relu),
            LayerSpec::conv(64, 3, Activation::Relu),
            LayerSpec::maxpool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(32, Activation::Relu),
            LayerSpec::dense(1, Activation::Sigmoid),
        ],
        backbone: None,
        pretrained: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_shapes_and_params() {
        let count = param_count(&build_baseline()).unwrap();
        let shapes: Vec<String> = count.layers.iter().map(|l| l.output_shape.to_string()).collect();
        assert_eq!(
            shapes,
            ["(254, 254, 32)", "(252, 252, 64)", "(126, 126, 64)", "(1016064)", "(32)", "(1)"]
        );
        let params: Vec<usize> = count.layers.iter().map(|l| l.params).collect();
        assert_eq!(params, [320, 18_496, 0, 0, 32_514_080, 33]);
        assert_eq!(count.total, 32_532_929);
    }

    #[test]
    fn param_formulas_by_hand() {
        // Independent arithmetic: conv kh·kw·in·f + f, dense in·u + u.
        let conv1 = 3 * 3 * 1 * 32 + 32;
        let conv2 = 3 * 3 * 32 * 64 + 64;
        let flat = 126 * 126 * 64;
        let dense1 = flat * 32 + 32;
        let dense2 = 32 + 1;
        let count = param_count(&build_baseline()).unwrap();
        assert_eq!(count.total, conv1 + conv2 + dense1 + dense2);
    }

    #[test]
    fn non_integral_pool_is_spec_error() {
        let mut spec = build_baseline();
        spec.input_shape = (255, 255, 1);
        // 255 → 253 → 251, and (251 − 2) is odd.
        assert!(matches!(param_count(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn head_contract_enforced() {
        let mut spec = build_baseline();
        spec.layers.pop();
        assert!(spec.validate().is_err());
        let mut spec = build_baseline();
        spec.layers.insert(4, LayerSpec::dense(1, Activation::Sigmoid));
        assert!(spec.validate().is_err());
        let mut spec = build_baseline();
        *spec.layers.last_mut().unwrap() = LayerSpec::dense(1, Activation::Relu);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_sizes_rejected() {
        let mut spec = build_baseline();
        spec.layers[0] = LayerSpec::conv(0, 3, Activation::Relu);
        assert!(spec.validate().is_err());
        let mut spec = build_baseline();
        spec.layers[4] = LayerSpec::dense(0, Activation::Relu);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dense_on_spatial_input_rejected() {
        let mut spec = build_baseline();
        spec.layers.remove(3);
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn same_padding_and_strides() {
        let l = LayerSpec::conv_with(8, 3, 2, Padding::Same, Activation::Relu);
        assert_eq!(l.infer(Shape::spatial(256, 256, 3)).unwrap(), (Shape::spatial(128, 128, 8), 3 * 3 * 3 * 8 + 8));
        let l = LayerSpec::conv_with(8, 1, 2, Padding::Valid, Activation::None);
        assert_eq!(l.infer(Shape::spatial(65, 65, 4)).unwrap().0, Shape::spatial(33, 33, 8));
    }

    #[test]
    fn residual_branch_mismatch_rejected() {
        let l = LayerSpec::Residual {
            body: vec![LayerSpec::conv_with(8, 3, 1, Padding::Same, Activation::None)],
            shortcut: vec![],
            activation: Activation::Relu,
        };
        assert!(l.infer(Shape::spatial(8, 8, 4)).is_err());
        assert_eq!(l.infer(Shape::spatial(8, 8, 8)).unwrap(), (Shape::spatial(8, 8, 8), 9 * 8 * 8 + 8));
    }

    #[test]
    fn json_round_trip() {
        let spec = build_baseline();
        let json = spec.to_json();
        assert!(json.contains("\"kind\": \"conv2d\""));
        let back = ModelSpec::from_json(&json).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
    }

    #[test]
    fn backbone_names() {
        assert_eq!(BackboneKind::Vgg16.model_name(true), "MVGG16+ImageNet");
        assert_eq!(BackboneKind::Mobilenet.model_name(false), "MobileNet");
        assert!(matches!("inception".parse::<BackboneKind>(), Err(Error::Config(_))));
    }
}

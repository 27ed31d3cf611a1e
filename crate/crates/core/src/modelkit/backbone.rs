//! Feature-extractor providers for transfer models.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::spec::{param_lens, Activation, BackboneKind, BackboneRef, LayerSpec, ModelSpec, Padding, Shape};
use crate::patchset::PATCH_SIZE;
use crate::{Error, Result};

/// Supplies the feature stack of a transfer model and, optionally, weights
/// learned elsewhere for it.
pub trait BackboneProvider: Send + Sync {
    /// Registry key.
    fn name(&self) -> &str;

    fn kind(&self) -> BackboneKind;

    /// Layers from the single-channel patch up to and including the
    /// flatten or pooling step that feeds the dense head.
    fn feature_layers(&self) -> Vec<LayerSpec>;

    fn pretrained_weights(&self) -> Option<Arc<BackboneWeights>> {
        None
    }
}

/// Parameter tensors for a provider's feature layers, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub provider: String,
    /// Where the weights came from, e.g. a checkpoint path.
    pub source: String,
    pub tensors: Vec<Vec<f32>>,
}

impl BackboneWeights {
    /// Checks tensor count and sizes against a layer stack.
    pub fn check(&self, layers: &[LayerSpec]) -> Result<()> {
        let input = Shape::spatial(PATCH_SIZE, PATCH_SIZE, 1);
        let lens = param_lens(layers, input)?;
        let got: Vec<usize> = self.tensors.iter().map(Vec::len).collect();
        if lens != got {
            return Err(Error::Config(format!(
                "weights from {} do not fit backbone `{}`: expected tensor sizes {lens:?}, got {got:?}",
                self.source, self.provider
            )));
        }
        Ok(())
    }
}

/// One of the built-in layer stacks.
#[derive(Debug, Clone)]
pub struct StandardBackbone {
    name: String,
    kind: BackboneKind,
    layers: Vec<LayerSpec>,
}

impl StandardBackbone {
    /// Full-size topology, without batch normalization.
    pub fn full(kind: BackboneKind) -> Self {
        let layers = match kind {
            BackboneKind::Vgg16 => vgg16(),
            BackboneKind::Resnet50 => resnet50(),
            BackboneKind::Mobilenet => mobilenet(),
        };
        StandardBackbone {
            name: kind.as_str().to_string(),
            kind,
            layers,
        }
    }

    /// A few-layer stand-in with the same shape of feature stack, small
    /// enough to train on one core.
    pub fn desk(kind: BackboneKind) -> Self {
        let layers = match kind {
            BackboneKind::Vgg16 => vgg16_desk(),
            BackboneKind::Resnet50 => resnet_desk(),
            BackboneKind::Mobilenet => mobilenet_desk(),
        };
        StandardBackbone {
            name: format!("{}-desk", kind.as_str()),
            kind,
            layers,
        }
    }
}

impl BackboneProvider for StandardBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> BackboneKind {
        self.kind
    }

    fn feature_layers(&self) -> Vec<LayerSpec> {
        self.layers.clone()
    }
}

/// A provider paired with loaded weights.
pub struct Pretrained {
    inner: Arc<dyn BackboneProvider>,
    weights: Arc<BackboneWeights>,
}

impl BackboneProvider for Pretrained {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn kind(&self) -> BackboneKind {
        self.inner.kind()
    }

    fn feature_layers(&self) -> Vec<LayerSpec> {
        self.inner.feature_layers()
    }

    fn pretrained_weights(&self) -> Option<Arc<BackboneWeights>> {
        Some(self.weights.clone())
    }
}

fn relu_same(filters: usize, k: usize, stride: usize) -> LayerSpec {
    LayerSpec::conv_with(filters, k, stride, Padding::Same, Activation::Relu)
}

fn vgg16() -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::ReplicateChannels { channels: 3 }];
    for (filters, convs) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
        layers.extend((0..convs).map(|_| relu_same(filters, 3, 1)));
        layers.push(LayerSpec::maxpool(2));
    }
    layers.push(LayerSpec::Flatten);
    layers
}

fn bottleneck(mid: usize, out: usize, stride: usize, project: bool) -> LayerSpec {
    let shortcut = if project {
        vec![LayerSpec::conv_with(out, 1, stride, Padding::Valid, Activation::None)]
    } else {
        Vec::new()
    };
    LayerSpec::Residual {
        body: vec![
            LayerSpec::conv_with(mid, 1, stride, Padding::Valid, Activation::Relu),
            relu_same(mid, 3, 1),
            LayerSpec::conv_with(out, 1, 1, Padding::Valid, Activation::None),
        ],
        shortcut,
        activation: Activation::Relu,
    }
}

fn resnet50() -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::ReplicateChannels { channels: 3 },
        relu_same(64, 7, 2),
        LayerSpec::maxpool(2),
    ];
    for (i, (mid, blocks)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        layers.push(bottleneck(mid, mid * 4, stride, true));
        layers.extend((1..blocks).map(|_| bottleneck(mid, mid * 4, 1, false)));
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

fn separable(filters: usize, stride: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::DepthwiseConv2d {
            kernel: (3, 3),
            stride: (stride, stride),
            padding: Padding::Same,
            activation: Activation::Relu,
        },
        LayerSpec::conv_with(filters, 1, 1, Padding::Valid, Activation::Relu),
    ]
}

fn mobilenet() -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::ReplicateChannels { channels: 3 }, relu_same(32, 3, 2)];
    let blocks = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (filters, stride) in blocks {
        layers.extend(separable(filters, stride));
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

fn vgg16_desk() -> Vec<LayerSpec> {
    vec![
        LayerSpec::ReplicateChannels { channels: 3 },
        relu_same(8, 3, 1),
        LayerSpec::maxpool(4),
        relu_same(16, 3, 1),
        LayerSpec::maxpool(4),
        relu_same(32, 3, 1),
        LayerSpec::maxpool(2),
        LayerSpec::Flatten,
    ]
}

fn resnet_desk() -> Vec<LayerSpec> {
    vec![
        LayerSpec::ReplicateChannels { channels: 3 },
        relu_same(8, 3, 2),
        LayerSpec::maxpool(2),
        bottleneck(8, 16, 2, true),
        bottleneck(8, 32, 2, true),
        bottleneck(8, 32, 1, false),
        LayerSpec::GlobalAvgPool,
    ]
}

fn mobilenet_desk() -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::ReplicateChannels { channels: 3 }, relu_same(8, 3, 2)];
    for filters in [16, 32, 64] {
        layers.extend(separable(filters, 2));
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

/// Providers by name, with one default per backbone kind.
#[derive(Clone)]
pub struct BackboneRegistry {
    providers: BTreeMap<String, Arc<dyn BackboneProvider>>,
    defaults: BTreeMap<BackboneKind, String>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        BackboneRegistry {
            providers: BTreeMap::new(),
            defaults: BTreeMap::new(),
        }
    }

    /// Full-size topologies as defaults; desk variants registered by name.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        for kind in BackboneKind::ALL {
            r.insert(Arc::new(StandardBackbone::desk(kind)));
            r.register(Arc::new(StandardBackbone::full(kind)));
        }
        r
    }

    /// Desk variants as defaults.
    pub fn desk() -> Self {
        let mut r = Self::empty();
        for kind in BackboneKind::ALL {
            r.insert(Arc::new(StandardBackbone::full(kind)));
            r.register(Arc::new(StandardBackbone::desk(kind)));
        }
        r
    }

    fn insert(&mut self, provider: Arc<dyn BackboneProvider>) {
        self.providers.insert(provider.name().to_string(), provider);
    }

    /// Adds a provider and makes it the default for its kind.
    pub fn register(&mut self, provider: Arc<dyn BackboneProvider>) {
        self.defaults.insert(provider.kind(), provider.name().to_string());
        self.insert(provider);
    }

    /// Attaches weights to the provider named in `weights.provider`.
    pub fn attach_weights(&mut self, weights: BackboneWeights) -> Result<()> {
        let inner = self.get(&weights.provider)?;
        weights.check(&inner.feature_layers())?;
        self.insert(Arc::new(Pretrained {
            inner,
            weights: Arc::new(weights),
        }));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn BackboneProvider>> {
        self.providers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no backbone provider named `{name}`")))
    }

    pub fn default_for(&self, kind: BackboneKind) -> Result<Arc<dyn BackboneProvider>> {
        let name = self
            .defaults
            .get(&kind)
            .ok_or_else(|| Error::Config(format!("no backbone registered for `{kind}`")))?;
        self.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }

    /// Transfer model on the default provider for `kind`.
    pub fn build_transfer(&self, kind: BackboneKind, pretrained: bool) -> Result<ModelSpec> {
        let provider = self.default_for(kind)?;
        transfer_spec(provider.as_ref(), pretrained)
    }
}

/// Provider features followed by the dense(32, relu), dense(1, sigmoid) head.
pub fn transfer_spec(provider: &dyn BackboneProvider, pretrained: bool) -> Result<ModelSpec> {
    if pretrained && provider.pretrained_weights().is_none() {
        return Err(Error::PretrainedUnavailable(provider.name().to_string()));
    }
    let mut layers = provider.feature_layers();
    let feature_layers = layers.len();
    layers.push(LayerSpec::dense(32, Activation::Relu));
    layers.push(LayerSpec::dense(1, Activation::Sigmoid));
    let spec = ModelSpec {
        name: provider.kind().model_name(pretrained),
        input_shape: (PATCH_SIZE, PATCH_SIZE, 1),
        layers,
        backbone: Some(BackboneRef {
            kind: provider.kind(),
            provider: provider.name().to_string(),
            feature_layers,
        }),
        pretrained,
    };
    spec.validate()?;
    Ok(spec)
}

/// Transfer model on the full-size backbone of the standard registry.
pub fn build_transfer(kind: BackboneKind, pretrained: bool) -> Result<ModelSpec> {
    BackboneRegistry::standard().build_transfer(kind, pretrained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::spec::param_count;

    fn fake_weights(provider: &str, registry: &BackboneRegistry) -> BackboneWeights {
        let layers = registry.get(provider).unwrap().feature_layers();
        let lens = param_lens(&layers, Shape::spatial(PATCH_SIZE, PATCH_SIZE, 1)).unwrap();
        BackboneWeights {
            provider: provider.into(),
            source: "test".into(),
            tensors: lens.into_iter().map(|n| vec![0.01; n]).collect(),
        }
    }

    #[test]
    fn vgg16_feature_params() {
        // Published count for the 13-conv feature extractor on 3-channel input.
        let spec = build_transfer(BackboneKind::Vgg16, false).unwrap();
        let count = param_count(&spec).unwrap();
        let n = spec.backbone.as_ref().unwrap().feature_layers;
        let features: usize = count.layers[..n].iter().map(|l| l.params).sum();
        assert_eq!(features, 14_714_688);
        assert_eq!(count.layers[n - 1].output_shape, Shape::Flat(8 * 8 * 512));
    }

    #[test]
    fn head_params_follow_dense_arithmetic() {
        for registry in [BackboneRegistry::standard(), BackboneRegistry::desk()] {
            for kind in BackboneKind::ALL {
                let spec = registry.build_transfer(kind, false).unwrap();
                let count = param_count(&spec).unwrap();
                let n = spec.backbone.as_ref().unwrap().feature_layers;
                let f = count.layers[n - 1].output_shape.len();
                let head: usize = count.layers[n..].iter().map(|l| l.params).sum();
                assert_eq!(head, 32 * (f + 1) + 33, "{kind}");
            }
        }
    }

    #[test]
    fn heads_identical_across_backbones() {
        let r = BackboneRegistry::standard();
        let heads: Vec<Vec<LayerSpec>> = BackboneKind::ALL
            .iter()
            .map(|&k| {
                let s = r.build_transfer(k, false).unwrap();
                s.layers[s.layers.len() - 2..].to_vec()
            })
            .collect();
        assert!(heads.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn pretrained_without_weights_is_explicit_error() {
        for kind in BackboneKind::ALL {
            let err = build_transfer(kind, true).unwrap_err();
            assert!(matches!(err, Error::PretrainedUnavailable(_)));
            assert!(err.is_config());
        }
    }

    #[test]
    fn attached_weights_enable_pretrained_spec() {
        let mut r = BackboneRegistry::desk();
        let w = fake_weights("vgg16-desk", &r);
        r.attach_weights(w).unwrap();
        let spec = r.build_transfer(BackboneKind::Vgg16, true).unwrap();
        assert_eq!(spec.name, "MVGG16+ImageNet");
        let plain = r.build_transfer(BackboneKind::Vgg16, false).unwrap();
        assert_eq!(spec.layers, plain.layers);
        assert_eq!(plain.name, "MVGG16");
    }

    #[test]
    fn mismatched_weights_rejected() {
        let mut r = BackboneRegistry::desk();
        let mut w = fake_weights("mobilenet-desk", &r);
        w.tensors.pop();
        assert!(r.attach_weights(w).is_err());
        let mut w = fake_weights("mobilenet-desk", &r);
        w.provider = "vgg16-desk".into();
        assert!(r.attach_weights(w).is_err());
    }

    #[test]
    fn unknown_provider_is_config_error() {
        let r = BackboneRegistry::standard();
        assert!(r.get("inception").err().unwrap().is_config());
        assert!(BackboneRegistry::empty()
            .build_transfer(BackboneKind::Vgg16, false)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn full_backbones_reach_8x8() {
        let r = BackboneRegistry::standard();
        for (kind, features) in [(BackboneKind::Resnet50, 2048), (BackboneKind::Mobilenet, 1024)] {
            let spec = r.build_transfer(kind, false).unwrap();
            let count = param_count(&spec).unwrap();
            let n = spec.backbone.as_ref().unwrap().feature_layers;
            assert_eq!(count.layers[n - 2].output_shape, Shape::spatial(8, 8, features));
        }
    }
}

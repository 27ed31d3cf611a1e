//! Instantiated models: weights, inference and the training step.

use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::BackboneRegistry;
use super::layers::{self, sigmoid, Layer, Param, Tensor};
use super::spec::{ModelSpec, Shape};
use crate::patchset::Patch;
use crate::{Error, Result};

/// Images per inference pass, bounding activation memory.
const INFER_CHUNK: usize = 32;

/// Images that go through the spatial layers together: two per worker
/// thread. The trunk runs depth-first over groups this small so its large
/// activations and their gradients stay in cache; the dense head then sees
/// the whole batch.
fn trunk_group() -> usize {
    2 * rayon::current_num_threads().max(1)
}

/// A [`ModelSpec`] with weights.
///
/// Training needs `&mut self`; inference takes `&self` and may run from
/// several threads at once.
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Box<dyn Layer>>,
    /// Leading layers up to and including the first flat output.
    trunk: usize,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.spec.name)
            .field("params", &self.param_count())
            .finish()
    }
}

impl Model {
    /// Seeded initialization; backbone weights come from `registry` when
    /// the spec asks for pretrained parameters.
    pub fn new(spec: &ModelSpec, seed: u64, registry: &BackboneRegistry) -> Result<Self> {
        spec.validate()?;
        let mut model = Self::random(spec, seed)?;
        if let Some(b) = &spec.backbone {
            let provider = registry.get(&b.provider)?;
            if provider.feature_layers() != spec.layers[..b.feature_layers] {
                return Err(Error::Config(format!(
                    "backbone provider `{}` no longer matches the layers in `{}`",
                    b.provider, spec.name
                )));
            }
            if spec.pretrained {
                let weights = provider
                    .pretrained_weights()
                    .ok_or_else(|| Error::PretrainedUnavailable(b.provider.clone()))?;
                weights.check(&provider.feature_layers())?;
                model.load_prefix(&weights.tensors)?;
            }
        } else if spec.pretrained {
            return Err(Error::Spec("pretrained is only meaningful with a backbone".into()));
        }
        Ok(model)
    }

    /// Seeded initialization of every layer, ignoring `spec.pretrained`.
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = spec.input();
        let last = spec.layers.len() - 1;
        let mut built = Vec::with_capacity(spec.layers.len());
        let mut trunk = None;
        for (i, l) in spec.layers.iter().enumerate() {
            // The output sigmoid is fused into the loss; layers produce logits.
            built.push(if i == last {
                layers::build_logit_dense(l, shape, &mut rng)
            } else {
                layers::build(l, shape, &mut rng)
            });
            shape = l.infer(shape)?.0;
            if trunk.is_none() && matches!(shape, Shape::Flat(_)) {
                trunk = Some(i + 1);
            }
        }
        Ok(Model {
            spec: spec.clone(),
            layers: built,
            trunk: trunk.unwrap_or(0),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn all_params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub(crate) fn all_params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Total scalar count over the instantiated weight arrays.
    pub fn param_count(&self) -> usize {
        self.all_params().iter().map(|p| p.value.len()).sum()
    }

    /// Copies of every weight tensor, in parameter order.
    pub fn weights(&self) -> Vec<Vec<f32>> {
        self.all_params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_weights(&mut self, tensors: &[Vec<f32>]) -> Result<()> {
        if tensors.len() != self.all_params().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.all_params().len(),
                tensors.len()
            )));
        }
        self.load_prefix(tensors)
    }

    /// Overwrites the first `tensors.len()` parameter tensors.
    fn load_prefix(&mut self, tensors: &[Vec<f32>]) -> Result<()> {
        let mut params = self.all_params_mut();
        if tensors.len() > params.len() {
            return Err(Error::Checkpoint("more tensors than parameters".into()));
        }
        for (i, (p, t)) in params.iter_mut().zip(tensors).enumerate() {
            if p.value.len() != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {} values, got {}",
                    p.value.len(),
                    t.len()
                )));
            }
            p.value.copy_from_slice(t);
        }
        Ok(())
    }

    /// Number of leading parameter tensors that belong to the backbone.
    pub fn backbone_tensors(&self) -> usize {
        self.spec
            .backbone
            .as_ref()
            .map(|b| self.layers[..b.feature_layers].iter().map(|l| l.params().len()).sum())
            .unwrap_or(0)
    }

    /// Stacks patches into an `(n, h, w, 1)` batch.
    pub fn batch<'a>(&self, images: impl IntoIterator<Item = &'a Patch>) -> Result<Tensor> {
        let (h, w, c) = self.spec.input_shape;
        if c != 1 {
            return Err(Error::Input(format!("model expects {c} channels; patches have 1")));
        }
        let images: Vec<&Patch> = images.into_iter().collect();
        let mut batch = Array4::zeros((images.len(), h, w, 1));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::Input(format!(
                    "image {i} is {}×{}, model expects {h}×{w}",
                    img.nrows(),
                    img.ncols()
                )));
            }
            batch.slice_mut(s![i, .., .., 0]).assign(img);
        }
        Ok(batch)
    }

    /// Probability of the pathological class for each image, in order.
    pub fn predict<'a>(&self, images: impl IntoIterator<Item = &'a Patch>) -> Result<Vec<f32>> {
        let images: Vec<&Patch> = images.into_iter().collect();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let batch = self.batch(chunk.iter().copied())?;
            out.extend(self.logits(&batch).into_iter().map(sigmoid));
        }
        Ok(out)
    }

    fn logits(&self, batch: &Tensor) -> Vec<f32> {
        let (trunk, head) = self.layers.split_at(self.trunk);
        let group = trunk_group();
        let groups: Vec<Tensor> = (0..batch.dim().0)
            .step_by(group)
            .map(|start| {
                let end = (start + group).min(batch.dim().0);
                let x = batch.slice(s![start..end, .., .., ..]);
                trunk.iter().fold(x.to_owned(), |x, l| l.infer(&x))
            })
            .collect();
        let x = stack(&groups);
        head.iter().fold(x, |x, l| l.infer(&x)).iter().copied().collect()
    }

    /// Forward and backward over one batch. Gradients are added to the
    /// parameters' accumulators; returns mean loss and the probabilities.
    pub(crate) fn train_step(&mut self, batch: Tensor, labels: &[f32]) -> (f64, Vec<f32>) {
        let n = labels.len();
        debug_assert_eq!(batch.dim().0, n);
        let split = self.trunk;
        let (trunk, head) = self.layers.split_at_mut(split);

        let mut parked = Vec::new();
        let mut groups = Vec::new();
        let group = trunk_group();
        for start in (0..n).step_by(group) {
            let end = (start + group).min(n);
            let mut x = batch.slice(s![start..end, .., .., ..]).to_owned();
            for l in trunk.iter_mut() {
                x = l.forward(x);
            }
            parked.push((start..end, trunk.iter_mut().map(|l| l.take_cache()).collect::<Vec<_>>()));
            groups.push(x);
        }
        drop(batch);
        let mut x = stack(&groups);
        drop(groups);
        for l in head.iter_mut() {
            x = l.forward(x);
        }

        let logits: Vec<f32> = x.iter().copied().collect();
        let mut loss = 0.0;
        let mut g = Tensor::zeros((n, 1, 1, 1));
        let mut probs = Vec::with_capacity(n);
        for (i, (&z, &y)) in logits.iter().zip(labels).enumerate() {
            loss += bce_with_logits(z as f64, y as f64);
            let p = sigmoid(z);
            probs.push(p);
            g[[i, 0, 0, 0]] = (p - y) / n as f32;
        }

        for (i, l) in head.iter_mut().enumerate().rev() {
            match l.backward(g, split + i > 0) {
                Some(next) => g = next,
                None => return (loss / n as f64, probs),
            }
        }
        for (rows, caches) in parked {
            for (l, c) in trunk.iter_mut().zip(caches) {
                l.put_cache(c);
            }
            let mut gi = g.slice(s![rows, .., .., ..]).to_owned();
            for (i, l) in trunk.iter_mut().enumerate().rev() {
                match l.backward(gi, i > 0) {
                    Some(next) => gi = next,
                    None => break,
                }
            }
        }
        (loss / n as f64, probs)
    }

    /// Mean loss and probabilities without touching gradients.
    pub(crate) fn eval_batch(&self, batch: &Tensor, labels: &[f32]) -> (f64, Vec<f32>) {
        let logits = self.logits(batch);
        let loss: f64 = logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_with_logits(z as f64, y as f64))
            .sum();
        (loss / labels.len().max(1) as f64, logits.into_iter().map(sigmoid).collect())
    }

    pub(crate) fn zero_grads(&mut self) {
        for p in self.all_params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }

    /// Output shape after every top-level layer, from the live model.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        Ok(self.spec.summary()?.layers.into_iter().map(|l| l.output_shape).collect())
    }
}

/// Concatenates per-group activations along the batch axis.
fn stack(groups: &[Tensor]) -> Tensor {
    let views: Vec<_> = groups.iter().map(|t| t.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("groups share a shape")
}

/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]`, stable for large `|z|`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Probabilities for a batch of patches.
pub fn forward<'a>(model: &Model, images: impl IntoIterator<Item = &'a Patch>) -> Result<Vec<f32>> {
    model.predict(images)
}

//! Sequential networks, the concrete architectures, initialization and the
//! transfer-learning adapter.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec, Mode, ParamSlot};
use crate::optim::ParamRef;
use crate::rng::{self, Purpose};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_CLASSES: [&str; 4] = ["alice", "bob", "carol", "other"];

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    if num_classes == DEFAULT_CLASSES.len() {
        DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|i| format!("class{i}")).collect()
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample `C × H × W`.
    pub input_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub layers: Vec<LayerSpec>,
    /// Indices of layers whose parameters are frozen.
    #[serde(default)]
    pub frozen_layers: Vec<usize>,
}

impl NetworkSpec {
    /// Per-sample output shape after every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least two classes, got {}",
                self.class_names.len()
            )));
        }
        let shapes = self.layer_shapes()?;
        let out = shapes.last().cloned().unwrap_or_else(|| self.input_shape.to_vec());
        if out != [self.class_names.len()] {
            return Err(Error::Config(format!(
                "network {} outputs shape {out:?} but has {} class names",
                self.name,
                self.class_names.len()
            )));
        }
        if let Some(&i) = self.frozen_layers.iter().find(|&&i| i >= self.layers.len()) {
            return Err(Error::Config(format!("frozen layer index {i} out of range")));
        }
        Ok(())
    }
}

/// A sequential stack of layers.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    name: String,
    input_shape: [usize; 3],
    class_names: Vec<String>,
    layers: Vec<Layer<T>>,
}

impl<T: Element> Network<T> {
    /// Build with zero-valued parameters. Call [`init_weights`] afterwards.
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let mut layer = Layer::from_spec(ls, i as u64)?;
            if spec.frozen_layers.contains(&i) {
                layer.set_trainable(false);
            }
            layers.push(layer);
        }
        Ok(Self {
            name: spec.name.clone(),
            input_shape: spec.input_shape,
            class_names: spec.class_names.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            name: self.name.clone(),
            input_shape: self.input_shape,
            class_names: self.class_names.clone(),
            layers: self.layers.iter().map(Layer::spec).collect(),
            frozen_layers: self
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.has_params() && !l.trainable())
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    /// All parameter slots in layer order, weights before bias.
    pub fn params(&self) -> impl Iterator<Item = &ParamSlot<T>> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn param_refs(&mut self) -> Vec<ParamRef<'_, T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let trainable = l.trainable();
                l.params_mut()
                    .into_iter()
                    .map(move |slot| ParamRef { slot, trainable })
            })
            .collect()
    }

    /// Number of parameterized layers that are still trainable.
    pub fn trainable_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.has_params() && l.trainable())
            .count()
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let expected = [input.shape()[0], self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        if input.shape() != expected {
            return Err(Error::Shape {
                op: "network forward",
                lhs: input.shape().to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let mut x = None;
        for layer in &mut self.layers {
            let next = layer.forward(x.as_ref().unwrap_or(input), mode)?;
            x = Some(next);
        }
        Ok(x.unwrap_or_else(|| input.clone()))
    }

    /// Backpropagate `grad_logits`, accumulating parameter gradients. Stops
    /// at the earliest trainable parameterized layer, since nothing below it
    /// needs a gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let Some(first) = self
            .layers
            .iter()
            .position(|l| l.has_params() && l.trainable())
        else {
            return Ok(());
        };
        let mut grad = grad_logits.clone();
        for i in (first..self.layers.len()).rev() {
            let want_input = i > first;
            if let Some(g) = self.layers[i].backward_inner(&grad, want_input)? {
                grad = g;
            }
        }
        Ok(())
    }

    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Vec<usize>> {
        self.forward(input, Mode::Eval)?.argmax_rows()
    }
}

/// He-style uniform initialization: weights `~ U(−b, b)` with
/// `b = sqrt(6 / fan_in)`, biases zero. Deterministic per seed.
pub fn init_weights<T: Element>(net: &mut Network<T>, seed: u64) {
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let Some(fan_in) = layer.fan_in() else {
            continue;
        };
        init_layer(layer, fan_in, seed, i as u64);
    }
}

fn init_layer<T: Element>(layer: &mut Layer<T>, fan_in: usize, seed: u64, key: u64) {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    let mut rng = rng::stream(seed, Purpose::Init, &[key]);
    let mut params = layer.params_mut();
    for v in params[0].value.data_mut() {
        *v = T::from_f64(dist.sample(&mut rng));
    }
    params[1].value.fill(T::zero());
}

/// Hyperparameters of the WoodNet family: `(conv 3×3 → maxpool → ReLU)`
/// blocks, then a fully connected classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct WoodNetConfig {
    pub name: String,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Dropout after the ReLU of each hidden layer.
    pub dropout_after: Vec<bool>,
    pub dropout_p: f64,
    pub class_names: Vec<String>,
}

impl WoodNetConfig {
    /// The full-size network on 224×224 inputs.
    pub fn full(num_classes: usize, dropout_p: f64) -> Self {
        Self {
            name: "woodnet".into(),
            input_size: 224,
            channels: vec![16, 32, 64, 64, 64],
            hidden: vec![2048, 1024],
            dropout_after: vec![false, true],
            dropout_p,
            class_names: default_class_names(num_classes),
        }
    }

    /// Three blocks on 32×32 inputs with a proportionally narrower
    /// classifier.
    pub fn mini(num_classes: usize, dropout_p: f64) -> Self {
        Self {
            name: "woodnet-mini".into(),
            input_size: 32,
            channels: vec![16, 32, 64],
            hidden: vec![512, 256],
            dropout_after: vec![false, true],
            dropout_p,
            class_names: default_class_names(num_classes),
        }
    }

    /// Full topology scaled to an arbitrary input size divisible by 32.
    pub fn for_input_size(input_size: usize, num_classes: usize, dropout_p: f64) -> Self {
        Self {
            input_size,
            ..Self::full(num_classes, dropout_p)
        }
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        if self.dropout_after.len() != self.hidden.len() {
            return Err(Error::Config("one dropout flag per hidden layer".into()));
        }
        let mut layers = Vec::new();
        let mut c_in = 3;
        for &c in &self.channels {
            layers.push(LayerSpec::Conv2d {
                in_channels: c_in,
                out_channels: c,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(LayerSpec::MaxPool2d);
            layers.push(LayerSpec::Relu);
            c_in = c;
        }
        let blocks = self.channels.len() as u32;
        if !self.input_size.is_multiple_of(2usize.pow(blocks)) {
            return Err(Error::Config(format!(
                "input size {} cannot be halved {blocks} times",
                self.input_size
            )));
        }
        let side = self.input_size >> blocks;
        layers.push(LayerSpec::Flatten);
        let mut features = c_in * side * side;
        for (&h, &drop) in self.hidden.iter().zip(&self.dropout_after) {
            layers.push(LayerSpec::Linear {
                in_features: features,
                out_features: h,
            });
            layers.push(LayerSpec::Relu);
            if drop {
                layers.push(LayerSpec::Dropout { p: self.dropout_p });
            }
            features = h;
        }
        layers.push(LayerSpec::Linear {
            in_features: features,
            out_features: self.class_names.len(),
        });
        let spec = NetworkSpec {
            name: self.name.clone(),
            input_shape: [3, self.input_size, self.input_size],
            class_names: self.class_names.clone(),
            layers,
            frozen_layers: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn build<T: Element>(&self, seed: u64) -> Result<Network<T>> {
        let mut net = Network::from_spec(&self.spec()?)?;
        init_weights(&mut net, seed);
        Ok(net)
    }
}

/// The full WoodNet on 224×224 inputs.
pub fn build_woodnet(num_classes: usize, dropout_p: f64, seed: u64) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    WoodNetConfig::full(num_classes, dropout_p).build(seed)
}

/// Dense baseline on raw pixels: `flatten → linear → ReLU → linear`.
pub fn badnet_spec(input_size: usize, hidden: usize, class_names: Vec<String>) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        name: "badnet".into(),
        input_shape: [3, input_size, input_size],
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 3 * input_size * input_size,
                out_features: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                in_features: hidden,
                out_features: class_names.len(),
            },
        ],
        class_names,
        frozen_layers: Vec::new(),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn build_badnet(num_classes: usize, seed: u64) -> Result<Network> {
    let mut net = Network::from_spec(&badnet_spec(224, 256, default_class_names(num_classes))?)?;
    init_weights(&mut net, seed);
    Ok(net)
}

/// Replace the final linear layer with a freshly initialized one producing
/// `class_names.len()` logits and freeze every other layer.
pub fn adapt_for_transfer<T: Element>(
    mut pretrained: Network<T>,
    class_names: Vec<String>,
    seed: u64,
) -> Result<Network<T>> {
    let last = pretrained.layers.len().checked_sub(1);
    let in_features = match last.map(|i| &pretrained.layers[i]) {
        Some(Layer::Linear(l)) => l.in_features,
        Some(other) => {
            return Err(Error::Adapter(format!(
                "final layer is {}, expected linear",
                other.kind_name()
            )))
        }
        None => return Err(Error::Adapter("network has no layers".into())),
    };
    if class_names.len() < 2 {
        return Err(Error::Adapter("need at least two classes".into()));
    }
    let last = last.unwrap();
    for layer in &mut pretrained.layers[..last] {
        layer.set_trainable(false);
    }
    let spec = LayerSpec::Linear {
        in_features,
        out_features: class_names.len(),
    };
    let mut head = Layer::from_spec(&spec, last as u64)?;
    init_layer(&mut head, in_features, seed, last as u64);
    pretrained.layers[last] = head;
    pretrained.class_names = class_names;
    Ok(pretrained)
}

//! Central finite-difference checks of every backward pass, in `f64`.
//!
//! Each layer is checked on the scalar objective `Σ r ⊙ f(x)` for a fixed
//! random `r`, against both its input and its parameters.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec, Mode, ParamSlot};
use crate::optim::cross_entropy;
use crate::rng::{self, Purpose, Stream};
use crate::tensor::Tensor;

/// Maximum relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that two vanishing gradients compare as equal.
pub const REL_FLOOR: f64 = 1e-7;

pub const KINDS: [&str; 7] = ["conv2d", "maxpool2d", "relu", "linear", "dropout", "flatten", "cross_entropy"];

pub fn step_size(x: f64) -> f64 {
    1e-3 * x.abs().max(1.0)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Something with a forward and a backward pass to verify.
pub trait Differentiable {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    /// Gradient with respect to the input; parameter gradients accumulate
    /// into the slots.
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn params_mut(&mut self) -> Vec<&mut ParamSlot<f64>>;
}

/// A layer evaluated in a fixed mode, so dropout masks repeat across calls.
#[derive(Debug, Clone)]
pub struct LayerUnderTest {
    pub layer: Layer<f64>,
    pub mode: Mode,
}

impl Differentiable for LayerUnderTest {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.forward(x, self.mode)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.backward(grad_out)
    }

    fn params_mut(&mut self) -> Vec<&mut ParamSlot<f64>> {
        self.layer.params_mut()
    }
}

/// Wraps another function and flips the sign of its input gradient.
#[derive(Debug, Clone)]
pub struct SignFlipped<D>(pub D);

impl<D: Differentiable> Differentiable for SignFlipped<D> {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.0.backward(grad_out)?.scale(-1.0))
    }

    fn params_mut(&mut self) -> Vec<&mut ParamSlot<f64>> {
        self.0.params_mut()
    }
}

fn normal_tensor(rng: &mut Stream, shape: &[usize], sd: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("positive extents")
}

/// Largest relative error over every input and parameter coordinate.
pub fn check_differentiable(f: &mut dyn Differentiable, x: &Tensor<f64>, seed: u64) -> Result<f64> {
    let y = f.forward(x)?;
    let r = normal_tensor(&mut rng::stream(seed, Purpose::GradCheck, &[u64::MAX]), y.shape(), 1.0);
    for p in f.params_mut() {
        p.zero_grad();
    }
    let gx = f.backward(&r)?;
    if gx.shape() != x.shape() {
        return Err(Error::Shape {
            op: "gradcheck",
            lhs: gx.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let param_grads: Vec<Vec<f64>> = f.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();

    let objective = |f: &mut dyn Differentiable, x: &Tensor<f64>| -> Result<f64> {
        let y = f.forward(x)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        let h = step_size(v);
        probe.data_mut()[i] = v + h;
        let plus = objective(f, &probe)?;
        probe.data_mut()[i] = v - h;
        let minus = objective(f, &probe)?;
        probe.data_mut()[i] = v;
        worst = worst.max(relative_error(gx.data()[i], (plus - minus) / (2.0 * h)));
    }

    for (s, grads) in param_grads.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let v = f.params_mut()[s].value.data()[i];
            let h = step_size(v);
            f.params_mut()[s].value.data_mut()[i] = v + h;
            let plus = objective(f, x)?;
            f.params_mut()[s].value.data_mut()[i] = v - h;
            let minus = objective(f, x)?;
            f.params_mut()[s].value.data_mut()[i] = v;
            worst = worst.max(relative_error(g, (plus - minus) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn check_cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let analytic = cross_entropy(logits, labels)?.grad_logits;
    let mut probe = logits.clone();
    let mut worst = 0.0f64;
    for i in 0..logits.len() {
        let v = logits.data()[i];
        let h = step_size(v);
        probe.data_mut()[i] = v + h;
        let plus = cross_entropy(&probe, labels)?.mean_loss;
        probe.data_mut()[i] = v - h;
        let minus = cross_entropy(&probe, labels)?.mean_loss;
        probe.data_mut()[i] = v;
        worst = worst.max(relative_error(analytic.data()[i], (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

/// A random layer instance of `kind` and an input it is checked on.
///
/// Max-pool inputs are distinct values spaced wider than any step, and ReLU
/// inputs stay away from the kink, so no finite difference crosses a
/// non-differentiable point.
pub fn random_layer_case(kind: &str, seed: u64, index: u64) -> Result<(LayerUnderTest, Tensor<f64>)> {
    let mut rng = rng::stream(seed, Purpose::GradCheck, &[rng::key_of(kind), index]);
    let batch = rng.random_range(1..=2);
    let (spec, input) = match kind {
        "conv2d" => {
            let in_channels = rng.random_range(1..=3);
            let out_channels = rng.random_range(1..=3);
            let kernel = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=kernel / 2);
            let mut extent = || {
                let m: usize = rng.random_range(1..=3);
                stride * m + kernel - 2 * padding
            };
            let (h, w) = (extent(), extent());
            let spec = LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            };
            (spec, normal_tensor(&mut rng, &[batch, in_channels, h, w], 1.0))
        }
        "maxpool2d" => {
            let c = rng.random_range(1..=3);
            let h = 2 * rng.random_range(1..=3);
            let w = 2 * rng.random_range(1..=3);
            let n = batch * c * h * w;
            let mut values: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
            rand::seq::SliceRandom::shuffle(&mut values[..], &mut rng);
            (LayerSpec::MaxPool2d, Tensor::from_vec(vec![batch, c, h, w], values)?)
        }
        "relu" => {
            let shape = [batch, rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
            let mut x = normal_tensor(&mut rng, &shape, 1.0);
            for v in x.data_mut() {
                if v.abs() < 2e-2 {
                    *v = if *v < 0.0 { -0.5 } else { 0.5 };
                }
            }
            (LayerSpec::Relu, x)
        }
        "linear" => {
            let in_features = rng.random_range(1..=6);
            let out_features = rng.random_range(1..=5);
            let spec = LayerSpec::Linear {
                in_features,
                out_features,
            };
            (spec, normal_tensor(&mut rng, &[batch + 1, in_features], 1.0))
        }
        "dropout" => {
            let p = rng.random_range(0.1..0.7);
            let shape = [batch, rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
            (LayerSpec::Dropout { p }, normal_tensor(&mut rng, &shape, 1.0))
        }
        "flatten" => {
            let shape = [batch, rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
            (LayerSpec::Flatten, normal_tensor(&mut rng, &shape, 1.0))
        }
        other => return Err(Error::Config(format!("no gradient check for layer kind {other:?}"))),
    };
    let mut layer = Layer::from_spec(&spec, index)?;
    for p in layer.params_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&normal_tensor(&mut rng, &[n], 0.5).into_data());
    }
    let mode = Mode::Train { seed, step: index };
    Ok((LayerUnderTest { layer, mode }, input))
}

pub fn random_loss_case(seed: u64, index: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = rng::stream(seed, Purpose::GradCheck, &[rng::key_of("cross_entropy"), index]);
    let rows = rng.random_range(1..=4);
    let cols = rng.random_range(2..=6);
    let logits = normal_tensor(&mut rng, &[rows, cols], 2.0);
    let labels = (0..rows).map(|_| rng.random_range(0..cols)).collect();
    (logits, labels)
}

/// A deliberate bug that the suite must detect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    LinearSignFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindReport {
    pub kind: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
}

impl KindReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Check each of `kinds` on `configs` random instances.
pub fn run_gradcheck(kinds: &[&str], seed: u64, configs: usize, fault: Option<Fault>) -> Result<Vec<KindReport>> {
    kinds
        .iter()
        .map(|&name| {
            let kind = KINDS
                .iter()
                .copied()
                .find(|k| *k == name)
                .ok_or_else(|| Error::Config(format!("unknown layer kind {name:?}")))?;
            let mut worst = 0.0f64;
            for i in 0..configs as u64 {
                let err = if kind == "cross_entropy" {
                    let (logits, labels) = random_loss_case(seed, i);
                    check_cross_entropy(&logits, &labels)?
                } else {
                    let (mut f, x) = random_layer_case(kind, seed, i)?;
                    if kind == "linear" && fault == Some(Fault::LinearSignFlip) {
                        check_differentiable(&mut SignFlipped(f), &x, seed)?
                    } else {
                        check_differentiable(&mut f, &x, seed)?
                    }
                };
                worst = worst.max(err);
            }
            Ok(KindReport {
                kind,
                configs,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes() {
        let reports = run_gradcheck(&KINDS, 11, 5, None).unwrap();
        assert_eq!(reports.len(), KINDS.len());
        for r in &reports {
            assert!(r.passed(), "{} max rel error {}", r.kind, r.max_rel_error);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let reports = run_gradcheck(&["linear"], 11, 5, Some(Fault::LinearSignFlip)).unwrap();
        assert!(!reports[0].passed());
    }

    #[test]
    fn conv_cases_have_valid_geometry() {
        for i in 0..50 {
            let (mut f, x) = random_layer_case("conv2d", 3, i).unwrap();
            f.forward(&x).unwrap();
        }
    }

    #[test]
    fn unknown_kind() {
        assert!(run_gradcheck(&["softmax"], 0, 1, None).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!(relative_error(1.0, -1.0) > 1.0);
    }
}

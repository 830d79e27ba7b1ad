//! Softmax cross-entropy and first-order parameter updates.

use crate::error::{Error, Result};
use crate::layers::ParamSlot;
use crate::tensor::{Element, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = logits.as_matrix("softmax")?;
    if let Some(i) = logits.data().iter().position(|v| v.is_nan()) {
        return Err(Error::Domain {
            op: "softmax",
            reason: format!("NaN logit at index {i}"),
        });
    }
    let mut out = Vec::with_capacity(rows * cols);
    for row in logits.data().chunks(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / total)));
    }
    Tensor::from_vec(vec![rows, cols], out)
}

/// Mean cross-entropy over a batch, fused with softmax.
#[derive(Debug, Clone)]
pub struct LossResult<T = f32> {
    /// Mean negative log-likelihood in nats.
    pub mean_loss: f64,
    /// Per-sample losses, so callers can re-aggregate over several batches.
    pub sample_losses: Vec<f64>,
    pub grad_logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

/// `-(1/N) Σᵢ log softmax(logitsᵢ)[labelᵢ]` and its gradient
/// `(softmax − onehot) / N`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossResult<T>> {
    let (rows, cols) = logits.as_matrix("cross_entropy")?;
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= cols) {
        return Err(Error::Label {
            index,
            label,
            classes: cols,
        });
    }
    if let Some(i) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain {
            op: "cross_entropy",
            reason: format!("non-finite logit at index {i}"),
        });
    }
    let n = rows as f64;
    let mut probs = Vec::with_capacity(rows * cols);
    let mut grad = Vec::with_capacity(rows * cols);
    let mut sample_losses = Vec::with_capacity(rows);
    for (row, &label) in logits.data().chunks(cols).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        // total >= 1 because the max term contributes exp(0)
        let log_total = (total - 1.0).ln_1p();
        sample_losses.push(max + log_total - row[label].as_f64());
        for (c, e) in exps.iter().enumerate() {
            let p = e / total;
            probs.push(T::from_f64(p));
            let y = if c == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p - y) / n));
        }
    }
    let mean_loss = sample_losses.iter().sum::<f64>() / n;
    Ok(LossResult {
        mean_loss,
        sample_losses,
        grad_logits: Tensor::from_vec(vec![rows, cols], grad)?,
        probabilities: Tensor::from_vec(vec![rows, cols], probs)?,
    })
}

/// A parameter handed to an optimizer, with its freeze flag.
pub struct ParamRef<'a, T = f32> {
    pub slot: &'a mut ParamSlot<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment of parameter `index`, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&[T], &[T])> {
        self.moments
            .get(index)?
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_, T>]) -> Result<()> {
        check_populated(params)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));

        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let len = p.slot.value.len();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![T::zero(); len], vec![T::zero(); len]));
            if m.len() != len {
                return Err(Error::State(format!(
                    "parameter {i} changed size from {} to {len} between optimizer steps",
                    m.len()
                )));
            }
            let grad = p.slot.grad.data();
            for (((theta, &g), m), v) in p.slot.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<T: Element>(&self, params: &mut [ParamRef<'_, T>]) {
        let lr = T::from_f64(self.lr);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let grad = p.slot.grad.data();
            for (theta, &g) in p.slot.value.data_mut().iter_mut().zip(grad) {
                *theta = *theta - lr * g;
            }
        }
    }
}

fn check_populated<T: Element>(params: &[ParamRef<'_, T>]) -> Result<()> {
    if let Some(i) = params
        .iter()
        .position(|p| p.trainable && !p.slot.is_populated())
    {
        return Err(Error::State(format!(
            "optimizer step with no gradient populated for parameter {i}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer<T = f32> {
    Adam(Adam<T>),
    Sgd(Sgd),
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            })),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
        }
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_, T>]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params),
            Optimizer::Sgd(s) => {
                s.step(params);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn slot(value: f64, n: usize) -> ParamSlot<f64> {
        ParamSlot::new(Tensor::full(&[n], value))
    }

    fn populated(value: f64, grad: f64, n: usize) -> ParamSlot<f64> {
        let mut s = slot(value, n);
        s.accumulate_grad(&vec![grad; n]);
        s
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&t(&[1, 4], &[0., 0., 0., 0.])).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
        let p = softmax(&t(&[1, 2], &[1000., 0.])).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12 && p.data()[1] < 1e-300);
        let a = softmax(&t(&[1, 3], &[0.3, -1.2, 2.0])).unwrap();
        let b = softmax(&t(&[1, 3], &[100.3, 98.8, 102.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax(&t(&[1, 2], &[f64::NAN, 0.])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let r = cross_entropy(&t(&[1, 4], &[0.; 4]), &[2]).unwrap();
        assert!((r.mean_loss - 4f64.ln()).abs() < 1e-12);
        let r = cross_entropy(&t(&[1, 4], &[50., 0., 0., 0.]), &[0]).unwrap();
        assert!(r.mean_loss < 1e-12);
        let rows = [[0.2, -0.4, 1.0], [1.5, 0.1, -2.0]];
        let l1 = cross_entropy(&t(&[1, 3], &rows[0]), &[2]).unwrap().mean_loss;
        let l2 = cross_entropy(&t(&[1, 3], &rows[1]), &[1]).unwrap().mean_loss;
        let both = cross_entropy(&t(&[2, 3], &rows.concat()), &[2, 1]).unwrap();
        assert!((both.mean_loss - (l1 + l2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let err = cross_entropy(&t(&[1, 4], &[0.; 4]), &[4]).unwrap_err();
        assert!(matches!(err, Error::Label { index: 0, label: 4, classes: 4 }));
    }

    #[test]
    fn adam_first_step() {
        let mut s = populated(0.0, 1.0, 3);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [ParamRef { slot: &mut s, trainable: true }]).unwrap();
        for &v in s.value.data() {
            assert!((v - -9.99999990e-4).abs() < 1e-15, "{v}");
        }
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn adam_zero_grad_and_frozen() {
        let mut s = populated(0.7, 0.0, 2);
        let mut frozen = populated(0.7, 5.0, 2);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [
            ParamRef { slot: &mut s, trainable: true },
            ParamRef { slot: &mut frozen, trainable: false },
        ])
        .unwrap();
        assert_eq!(s.value.data(), &[0.7, 0.7]);
        assert_eq!(frozen.value.data(), &[0.7, 0.7]);
    }

    #[test]
    fn adam_requires_gradients() {
        let mut s = slot(0.0, 2);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut [ParamRef { slot: &mut s, trainable: true }]);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn adam_is_deterministic_per_history() {
        let mut a = populated(1.0, 0.3, 4);
        let mut b = populated(1.0, 0.3, 4);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [
                ParamRef { slot: &mut a, trainable: true },
                ParamRef { slot: &mut b, trainable: true },
            ])
            .unwrap();
        }
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn sgd_cases() {
        let mut s = populated(1.0, 2.0, 1);
        Sgd { lr: 0.1 }.step(&mut [ParamRef { slot: &mut s, trainable: true }]);
        assert!((s.value.data()[0] - 0.8).abs() < 1e-15);
        Sgd { lr: 0.0 }.step(&mut [ParamRef { slot: &mut s, trainable: true }]);
        assert!((s.value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_and_adam_agree_in_sign_on_first_step() {
        let grads = [-3.0, -1e-3, 0.5, 7.0, 1e-6];
        for g in grads {
            let mut a = populated(0.0, g, 1);
            let mut s = populated(0.0, g, 1);
            Adam::new(AdamConfig::default())
                .step(&mut [ParamRef { slot: &mut a, trainable: true }])
                .unwrap();
            Sgd { lr: 0.01 }.step(&mut [ParamRef { slot: &mut s, trainable: true }]);
            assert_eq!(a.value.data()[0].signum(), s.value.data()[0].signum());
        }
    }
}

use rand::seq::index::sample;
use rand::Rng;

use super::{HasParams, Sequential, Tensor};
use crate::error::Result;

/// A scalar loss over a flat vector of checkable variables.
pub trait Differentiable {
    fn dim(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient of [`Differentiable::loss`], one entry per variable.
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

/// Maximum relative error between analytic gradients and central differences
/// over `samples` randomly chosen variables (all of them if fewer exist).
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(model: &mut dyn Differentiable, samples: usize, h: f64, rng: &mut impl Rng) -> Result<f64> {
    let analytic = model.gradient()?;
    let dim = model.dim();
    let idx: Vec<usize> = if dim <= samples {
        (0..dim).collect()
    } else {
        sample(rng, dim, samples).into_vec()
    };
    let mut worst = 0.0f64;
    for i in idx {
        let orig = model.get(i);
        model.set(i, orig + h);
        let up = model.loss()?;
        model.set(i, orig - h);
        let down = model.loss()?;
        model.set(i, orig);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Gradient probe for a [`Sequential`]: loss `Σ wᵢ·yᵢ` with fixed weights;
/// the checkable variables are all parameters followed by the input entries.
pub struct SequentialProbe {
    pub net: Sequential,
    pub input: Tensor,
    pub loss_weights: Vec<f64>,
}

impl SequentialProbe {
    pub fn new(net: Sequential, input: Tensor, rng: &mut impl Rng) -> Result<Self> {
        let n = net.infer(&input)?.numel();
        let loss_weights = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Self {
            net,
            input,
            loss_weights,
        })
    }
}

impl Differentiable for SequentialProbe {
    fn dim(&self) -> usize {
        self.net.param_count() + self.input.numel()
    }

    fn get(&self, i: usize) -> f64 {
        let np = self.net.param_count();
        if i < np {
            self.net.flat_get(i)
        } else {
            self.input.data()[i - np]
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        let np = self.net.param_count();
        if i < np {
            self.net.flat_set(i, v)
        } else {
            self.input.data_mut()[i - np] = v;
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let y = self.net.infer(&self.input)?;
        Ok(y.data().iter().zip(&self.loss_weights).map(|(a, b)| a * b).sum())
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.net.zero_grad();
        let y = self.net.forward(&self.input)?;
        let g = Tensor::new(y.shape().to_vec(), self.loss_weights.clone())?;
        let dx = self.net.backward(&g)?;
        let mut out = self.net.flat_grads();
        out.extend_from_slice(dx.data());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdaptiveAvgPool, Conv2d, Layer, Linear, Relu, Tanh};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(net: Sequential, input: Tensor, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = SequentialProbe::new(net, input, &mut rng).unwrap();
        grad_check(&mut probe, 200, 1e-4, &mut rng).unwrap()
    }

    #[test]
    fn every_layer_type_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cases: Vec<(Sequential, Tensor)> = vec![
            (
                Sequential::new(vec![Layer::Linear(Linear::new(6, 5, &mut rng))]),
                random_tensor(vec![3, 6], &mut rng),
            ),
            (
                Sequential::new(vec![Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1, &mut rng))]),
                random_tensor(vec![2, 2, 7, 6], &mut rng),
            ),
            (
                Sequential::new(vec![Layer::Conv2d(Conv2d::new(2, 2, 3, 1, 1, &mut rng))]),
                random_tensor(vec![1, 2, 5, 5], &mut rng),
            ),
            (
                Sequential::new(vec![
                    Layer::Linear(Linear::new(4, 6, &mut rng)),
                    Layer::Relu(Relu::default()),
                ]),
                random_tensor(vec![4, 4], &mut rng),
            ),
            (
                Sequential::new(vec![
                    Layer::Linear(Linear::new(4, 6, &mut rng)),
                    Layer::Tanh(Tanh::default()),
                ]),
                random_tensor(vec![4, 4], &mut rng),
            ),
            (
                Sequential::new(vec![
                    Layer::Conv2d(Conv2d::new(1, 2, 3, 1, 1, &mut rng)),
                    Layer::AvgPool(AdaptiveAvgPool::new(2, 3)),
                ]),
                random_tensor(vec![2, 1, 7, 8], &mut rng),
            ),
        ];
        for (i, (net, x)) in cases.into_iter().enumerate() {
            let err = check(net, x, i as u64);
            assert!(err < 1e-4, "case {i}: {err}");
        }
    }

    #[test]
    fn linear_relu_linear_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Sequential::mlp(&[5, 16, 3], false, &mut rng);
        let x = random_tensor(vec![8, 5], &mut rng);
        assert!(check(net, x, 11) < 1e-4);
    }

    #[test]
    fn zero_network_has_zero_error() {
        let mut net = Sequential::new(vec![
            Layer::Linear(Linear::zeros(3, 4)),
            Layer::Relu(Relu::default()),
            Layer::Linear(Linear::zeros(4, 2)),
        ]);
        net.zero_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(vec![2, 3], &mut rng);
        let mut probe = SequentialProbe::new(net, x, &mut rng).unwrap();
        let g = probe.gradient().unwrap();
        // only the output bias sees a gradient; hidden units are dead at zero
        assert!(g[..16].iter().all(|v| *v == 0.0));
        assert!(grad_check(&mut probe, 100, 1e-4, &mut rng).unwrap() < 1e-9);
    }

    struct Corrupted(SequentialProbe);

    impl Differentiable for Corrupted {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn get(&self, i: usize) -> f64 {
            self.0.get(i)
        }
        fn set(&mut self, i: usize, v: f64) {
            self.0.set(i, v)
        }
        fn loss(&mut self) -> Result<f64> {
            self.0.loss()
        }
        fn gradient(&mut self) -> Result<Vec<f64>> {
            Ok(self.0.gradient()?.into_iter().map(|g| g * 1.1 + 0.01).collect())
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = Sequential::mlp(&[4, 8, 2], false, &mut rng);
        let x = random_tensor(vec![3, 4], &mut rng);
        let mut probe = Corrupted(SequentialProbe::new(net, x, &mut rng).unwrap());
        assert!(grad_check(&mut probe, 100, 1e-4, &mut rng).unwrap() > 1e-2);
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_row, matmul_t, AutodiffError, Gradients, Tape, Tensor, Var};

/// One fully connected layer, `y = x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

/// A fully connected ReLU network; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Dense {
                    weight: Tensor::new(fan_out, fan_in, draw(fan_out * fan_in)),
                    bias: Tensor::new(1, fan_out, draw(fan_out)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(w[1], w[0]),
                bias: Tensor::zeros(1, w[1]),
            })
            .collect();
        Self { layers }
    }

    /// Builds a network from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, AutodiffError> {
        for pair in layers.windows(2) {
            if pair[1].weight.cols() != pair[0].weight.rows() {
                return Err(AutodiffError::Shape {
                    context: "mlp layer chain",
                    expected: (pair[1].weight.rows(), pair[0].weight.rows()),
                    actual: pair[1].weight.shape(),
                });
            }
        }
        for l in &layers {
            if l.bias.shape() != (1, l.weight.rows()) {
                return Err(AutodiffError::Shape {
                    context: "mlp bias",
                    expected: (1, l.weight.rows()),
                    actual: l.bias.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn attach(&self, tape: &Tape) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    pub fn detached(&self) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (Var::constant(l.weight.clone()), Var::constant(l.bias.clone())))
                .collect(),
        }
    }

    /// Forward pass on plain values, without a tape. Produces exactly the
    /// same numbers as [`BoundMlp::forward`].
    pub fn eval(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = add_row(&matmul_t(&h, &l.weight), &l.bias);
            if i < last {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<(), AutodiffError> {
        if x.cols() != self.input_dim() {
            return Err(AutodiffError::Shape {
                context: "mlp input",
                expected: (x.rows(), self.input_dim()),
                actual: x.shape(),
            });
        }
        Ok(())
    }

    /// Parameter tensors in `[W₀, b₀, W₁, b₁, …]` order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }
}

/// An [`MlpParams`] whose tensors are bound to a tape (or held detached).
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape().1
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var, AutodiffError> {
        if x.shape().1 != self.input_dim() {
            return Err(AutodiffError::Shape {
                context: "mlp input",
                expected: (x.shape().0, self.input_dim()),
                actual: x.shape(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = tape.add_row(&tape.matmul_t(&h, w), b);
            if i < last {
                h = tape.relu(&h);
            }
        }
        Ok(h)
    }

    /// Gradients in the same order as [`MlpParams::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [grads.wrt(w), grads.wrt(b)])
            .collect()
    }
}

/// Runs `x` through a bound network.
pub fn forward_mlp(tape: &Tape, params: &BoundMlp, x: &Var) -> Result<Var, AutodiffError> {
    params.forward(tape, x)
}

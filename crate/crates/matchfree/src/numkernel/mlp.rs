//! Feed-forward MLP with ReLU hidden activations and an analytic backward
//! pass. Weights are (in × out) so a batch forward is `x · W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::matrix::{matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    /// in_dim × out_dim
    pub weight: Matrix,
    /// 1 × out_dim, broadcast over the batch
    pub bias: Matrix,
}

/// MLP parameters. Hidden layers apply the activation; the final layer is
/// linear. Adjacent layer dimensions chain by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Per-layer activations retained by `forward` for the backward pass.
pub struct MlpCache {
    /// Input to each layer (index 0 is the network input).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    preacts: Vec<Matrix>,
}

/// Gradient buffers mirroring `Mlp` layer shapes.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Glorot-uniform initialized MLP with the given dimension chain, e.g.
    /// `[8, 64, 64]` for a 2-layer net mapping 8 → 64 → 64.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("mlp needs at least input and output dims".to_string()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(Linear {
                weight: glorot(fan_in, fan_out, rng),
                bias: Matrix::zeros(1, fan_out),
            });
        }
        Ok(Mlp { layers, activation: Activation::Relu })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    /// Batch forward: `x` is (batch × input_dim). Returns the output and the
    /// cache needed by `backward`. A zero-row batch is legal and produces a
    /// zero-row output.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp input has {} cols, expected {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut z = matmul(&cur, &layer.weight)?;
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (v, b) in row.iter_mut().zip(layer.bias.row(0)) {
                    *v += b;
                }
            }
            preacts.push(z.clone());
            cur = if li + 1 < self.layers.len() {
                let mut a = z;
                for v in a.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                a
            } else {
                z
            };
        }
        Ok((cur, MlpCache { inputs, preacts }))
    }

    /// Backward pass: accumulates parameter gradients into `grads` and
    /// returns the gradient with respect to the input batch.
    pub fn backward(&self, cache: &MlpCache, dy: &Matrix, grads: &mut MlpGrads) -> Result<Matrix> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::shape("mlp cache does not match layer count".to_string()));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("mlp grads do not match layer count".to_string()));
        }
        let last = self.layers.len() - 1;
        if !dy.same_shape(&cache.preacts[last]) {
            return Err(Error::shape(format!(
                "mlp backward dy {:?} vs forward output {:?}",
                dy.shape(),
                cache.preacts[last].shape()
            )));
        }
        let mut delta = dy.clone();
        for li in (0..self.layers.len()).rev() {
            if li != last {
                // ReLU gate: zero gradient where the pre-activation was negative
                let pre = &cache.preacts[li];
                for (d, &z) in delta.data_mut().iter_mut().zip(pre.data()) {
                    if z < 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.inputs[li];
            let dw = matmul(&x.transpose(), &delta)?;
            grads.layers[li].weight.add_scaled(&dw, 1.0)?;
            for i in 0..delta.rows() {
                let drow = delta.row(i).to_vec();
                for (b, d) in grads.layers[li].bias.row_mut(0).iter_mut().zip(&drow) {
                    *b += d;
                }
            }
            delta = matmul(&delta, &self.layers[li].weight.transpose())?;
        }
        Ok(delta)
    }

    /// Mutable views over every parameter matrix, stable order, for the
    /// optimizer and the gradient checker.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.weight"), &mut layer.weight));
            out.push((format!("layers.{i}.bias"), &mut layer.bias));
        }
        out
    }
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| Linear {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Matrix::zeros(1, l.bias.cols()),
                })
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn views(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect();
    Matrix::from_vec(fan_in, fan_out, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        for l in &mut mlp.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let (y, _) = mlp.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[2, 3], &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.25]]).unwrap();
        let (y, _) = mlp.forward(&x).unwrap();
        let mut expect = matmul(&x, &mlp.layers[0].weight).unwrap();
        for i in 0..expect.rows() {
            for j in 0..expect.cols() {
                let v = expect.get(i, j) + mlp.layers[0].bias.get(0, j);
                expect.set(i, j, v);
            }
        }
        assert_eq!(y, expect);
    }

    #[test]
    fn two_layer_matches_scalar_reevaluation() {
        // Independent per-element oracle: evaluate the same net with plain
        // scalar loops, no Matrix involved.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];

        let w0 = &mlp.layers[0].weight;
        let b0 = &mlp.layers[0].bias;
        let mut h = [0.0; 4];
        for j in 0..4 {
            let mut z = b0.get(0, j);
            for (i, xi) in x.iter().enumerate() {
                z += xi * w0.get(i, j);
            }
            h[j] = z.max(0.0);
        }
        let w1 = &mlp.layers[1].weight;
        let b1 = &mlp.layers[1].bias;
        let mut expect = [0.0; 2];
        for j in 0..2 {
            let mut z = b1.get(0, j);
            for (i, hi) in h.iter().enumerate() {
                z += hi * w1.get(i, j);
            }
            expect[j] = z;
        }

        let xm = Matrix::from_rows(&[x.to_vec()]).unwrap();
        let (y, _) = mlp.forward(&xm).unwrap();
        for j in 0..2 {
            assert!((y.get(0, j) - expect[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[1, 1, 1], &mut rng).unwrap();
        mlp.layers[0].weight.set(0, 0, 1.0);
        mlp.layers[0].bias.set(0, 0, -5.0); // pre-activation stays negative
        mlp.layers[1].weight.set(0, 0, 1.0);
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let (_, cache) = mlp.forward(&x).unwrap();
        let mut grads = MlpGrads::zeros_like(&mlp);
        let dy = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let dx = mlp.backward(&cache, &dy, &mut grads).unwrap();
        assert_eq!(dx.get(0, 0), 0.0);
        assert_eq!(grads.layers[0].weight.get(0, 0), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences_over_seeds() {
        let h = 1e-5;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
            let x = Matrix::from_vec(
                2,
                3,
                (0..6).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
            )
            .unwrap();

            // loss = sum of outputs
            let loss = |m: &Mlp| -> f64 { m.forward(&x).unwrap().0.sum() };

            let (y, cache) = mlp.forward(&x).unwrap();
            let mut grads = MlpGrads::zeros_like(&mlp);
            let mut dy = y.clone();
            dy.fill(1.0);
            mlp.backward(&cache, &dy, &mut grads).unwrap();
            let analytic: Vec<Matrix> = grads.views().into_iter().cloned().collect();

            let mut max_err: f64 = 0.0;
            for (pi, analytic_m) in analytic.iter().enumerate() {
                for e in 0..analytic_m.data().len() {
                    let mut plus = mlp.clone();
                    plus.params_mut()[pi].1.data_mut()[e] += h;
                    let mut minus = mlp.clone();
                    minus.params_mut()[pi].1.data_mut()[e] -= h;
                    let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    max_err = max_err.max(rel_error(analytic_m.data()[e], num));
                }
            }
            assert!(max_err <= 1e-5, "seed {} max rel err {}", seed, max_err);
        }
    }
}

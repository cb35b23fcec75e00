//! Small dense network with hand-written backpropagation.
//!
//! Every layer except the last applies `tanh`; the last is affine. The
//! forward pass caches activations so [`Mlp::backward`] can turn a gradient
//! with respect to the output into per-parameter gradients.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// One affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Per-layer parameter gradients, shaped exactly like the layers.
pub type Gradients = Vec<(DMatrix<f64>, DVector<f64>)>;

/// Forward-pass intermediates consumed by [`Mlp::backward`].
pub struct ForwardCache {
    /// `activations[0]` is the network input; `activations[i + 1]` the output
    /// of layer `i` (post-tanh for hidden layers, affine for the last).
    activations: Vec<DVector<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DVector<f64> {
        self.activations.last().unwrap()
    }
}

/// Fully-connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` = `[input, hidden..., output]`. Weights are drawn uniformly from
    /// `±1/sqrt(fan_in)`, biases start at zero.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "network needs at least one layer and nonzero widths",
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Rebuilds a network from explicit layers, validating the dimension chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[1].weight.ncols() != pair[0].weight.nrows() {
                return Err(Error::invalid("layer dimension mismatch"));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::invalid("bias dimension mismatch"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    /// `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = &layer.weight * h + &layer.bias;
            if i + 1 < self.layers.len() {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }

    pub fn forward_cached(&self, input: &DVector<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * activations.last().unwrap() + &layer.bias;
            if i + 1 < self.layers.len() {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        ForwardCache { activations }
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/doutput`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &DVector<f64>,
        grads: &mut Gradients,
    ) {
        let mut dz = output_grad.clone();
        for i in (0..self.layers.len()).rev() {
            // activations[i] is the input to layer i.
            grads[i].0.ger(1.0, &dz, &cache.activations[i], 1.0);
            grads[i].1 += &dz;
            if i > 0 {
                let mut dh = self.layers[i].weight.tr_mul(&dz);
                // activations[i] = tanh(z_{i-1}); tanh' = 1 - tanh².
                let a = &cache.activations[i];
                for j in 0..dh.len() {
                    dh[j] *= 1.0 - a[j] * a[j];
                }
                dz = dh;
            }
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.layers
            .iter()
            .map(|l| {
                (
                    DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    DVector::zeros(l.bias.len()),
                )
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flat parameter indexing (per layer: weight column-major, then bias) —
    /// used by optimizers and finite-difference tests.
    pub fn param(&self, index: usize) -> f64 {
        let (layer, offset) = self.locate(index);
        let l = &self.layers[layer];
        if offset < l.weight.len() {
            l.weight.as_slice()[offset]
        } else {
            l.bias.as_slice()[offset - l.weight.len()]
        }
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let (layer, offset) = self.locate(index);
        let l = &mut self.layers[layer];
        let wlen = l.weight.len();
        if offset < wlen {
            &mut l.weight.as_mut_slice()[offset]
        } else {
            &mut l.bias.as_mut_slice()[offset - wlen]
        }
    }

    /// Reads the flat-index entry of a gradient set (same layout as params).
    pub fn grad_entry(&self, grads: &Gradients, index: usize) -> f64 {
        let (layer, offset) = self.locate(index);
        let (gw, gb) = &grads[layer];
        if offset < gw.len() {
            gw.as_slice()[offset]
        } else {
            gb.as_slice()[offset - gw.len()]
        }
    }

    /// Visits every parameter with its flat index and matching gradient
    /// entry, in the same order as [`Mlp::param`]. Drives optimizer updates.
    pub fn update_params(
        &mut self,
        grads: &Gradients,
        mut f: impl FnMut(usize, &mut f64, f64),
    ) {
        let mut idx = 0;
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            for (p, g) in layer
                .weight
                .as_mut_slice()
                .iter_mut()
                .zip(gw.as_slice())
            {
                f(idx, p, *g);
                idx += 1;
            }
            for (p, g) in layer.bias.as_mut_slice().iter_mut().zip(gb.as_slice()) {
                f(idx, p, *g);
                idx += 1;
            }
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (i, l) in self.layers.iter().enumerate() {
            let size = l.weight.len() + l.bias.len();
            if index < size {
                return (i, index);
            }
            index -= size;
        }
        panic!("parameter index out of range");
    }

    /// Zeroes the last (output) layer so the network maps everything to 0.
    #[cfg(test)]
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_manual_two_layer_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut h = &l0.weight * &x + &l0.bias;
        h.apply(|v| *v = v.tanh());
        let y = &l1.weight * h + &l1.bias;
        let out = net.forward(&x);
        assert!((out[0] - y[0]).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences_on_sum_output() {
        // Loss = sum of outputs, so dL/doutput = ones.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[3, 5, 5, 2], &mut rng).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let cache = net.forward_cached(&x);
        let mut grads = net.zero_gradients();
        net.backward(&cache, &DVector::from_element(2, 1.0), &mut grads);
        let h = 1e-6;
        for idx in 0..net.param_count() {
            let orig = net.param(idx);
            *net.param_mut(idx) = orig + h;
            let plus = net.forward(&x).sum();
            *net.param_mut(idx) = orig - h;
            let minus = net.forward(&x).sum();
            *net.param_mut(idx) = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = net.grad_entry(&grads, idx);
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                "param {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn dimension_chain_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mlp::new(&[2, 3], &mut rng).unwrap();
        let b = Mlp::new(&[4, 1], &mut rng).unwrap();
        let layers = vec![a.layers()[0].clone(), b.layers()[0].clone()];
        assert!(Mlp::from_layers(layers).is_err());
        assert!(Mlp::new(&[2, 0, 1], &mut rng).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let build = |seed| Mlp::new(&[4, 8, 2], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }
}

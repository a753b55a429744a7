use ndarray::Array2;
use rand::Rng;

use crate::layer::{Cache, Layer, LayerSpec};
use crate::{NnError, Result};

/// A feed-forward stack of layers operating on `(batch, features)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

/// Activations recorded by [`Sequential::forward_trace`], consumed by
/// [`Sequential::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
}

/// Parameter gradients laid out like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Gradients {
    pub fn zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn slices(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).filter(|s| !s.is_empty()).collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl Sequential {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let layers = specs.into_iter().map(|s| Layer::new(s, rng)).collect::<Result<Vec<_>>>()?;
        Self::from_layers(input_dim, layers)
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            layer.spec.validate()?;
            if let Some(expected) = layer.spec.input_dim() {
                if expected != dim {
                    return Err(NnError::Spec(format!(
                        "layer {i} ({:?}) expects {expected} inputs, previous layer yields {dim}",
                        layer.spec
                    )));
                }
            }
            let (wn, bn) = layer.spec.param_shape();
            if layer.weight.len() != wn || layer.bias.len() != bn {
                return Err(NnError::Spec(format!("layer {i}: parameter lengths do not match spec")));
            }
            dim = layer.spec.output_dim(dim);
        }
        Ok(Sequential { layers, input_dim, output_dim: dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Array2<f32>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(NnError::Shape(format!("expected {} input features, got {}", self.input_dim, x.ncols())));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(h, false).0;
        }
        Ok(h)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_trace(&self, x: &Array2<f32>) -> Result<(Array2<f32>, Trace)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let (y, c) = layer.forward(h, true);
            caches.push(c);
            h = y;
        }
        Ok((h, Trace { caches }))
    }

    /// Backpropagate `gy` through the traced pass. Parameter gradients are
    /// accumulated into `grads` when given; the gradient with respect to
    /// the network input is returned when `input_grad` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        gy: Array2<f32>,
        mut grads: Option<&mut Gradients>,
        input_grad: bool,
    ) -> Result<Option<Array2<f32>>> {
        if gy.ncols() != self.output_dim {
            return Err(NnError::Shape(format!("expected {} output grads, got {}", self.output_dim, gy.ncols())));
        }
        if trace.caches.len() != self.layers.len() {
            return Err(NnError::Shape("trace does not belong to this network".into()));
        }
        let first_param = self.layers.iter().position(Layer::has_params);
        let mut g = gy;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let slot = match grads.as_deref_mut() {
                Some(gr) if layer.has_params() => {
                    let (w, b) = &mut gr.layers[i];
                    Some((w.as_mut_slice(), b.as_mut_slice()))
                }
                _ => None,
            };
            // Below the first parametric layer the input gradient is only
            // needed if the caller asked for it.
            let need = i > 0 && (input_grad || first_param.is_some_and(|p| p < i)) || (i == 0 && input_grad);
            match layer.backward(&trace.caches[i], &g, slot, need) {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(input_grad.then_some(g))
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { layers: self.layers.iter().map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()])).collect() }
    }

    /// Mutable parameter slices, in the same order as [`Gradients::slices`].
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).filter(|s| !s.is_empty()).collect()
    }
}

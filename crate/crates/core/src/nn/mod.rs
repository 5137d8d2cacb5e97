//! Network building blocks: parameter storage, conv layers, SPADE and its
//! wavelet variants, and the three networks of the framework.

mod discriminator;
mod generator;
mod layout;
mod spade;
mod unet;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, WaveletResBlock};
pub use layout::{argmax_channels, SemanticLayout};
pub use spade::{broadcast_latent, make_3d_noise, pixel_spade, sample_latent, wavelet_upsample, Spade};
pub use unet::{UNet, UNetConfig};

/// Slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, requiring identical names and shapes.
    pub fn load(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return shape_err(
                "load_params",
                format!("expected {} tensors, got {}", self.tensors.len(), values.len()),
            );
        }
        for ((name, t), (own_name, own)) in values.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != own_name || t.shape() != own.shape() {
                return shape_err(
                    "load_params",
                    format!(
                        "tensor `{own_name}` {:?} does not match `{name}` {:?}",
                        own.shape(),
                        t.shape()
                    ),
                );
            }
        }
        self.tensors = values.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Gradients accumulated on `tape` for each bound parameter.
    pub fn grads(&self, tape: &mut Tape<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| tape.take_grad(v)).collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in [`ParamStore`] order, e.g. from a caller that recorded the
    /// parameters itself.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Square-kernel convolution with `same` padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Weights and bias drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::rand_uniform(&[out_channels, in_channels, kernel, kernel], -bound, bound, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::rand_uniform(&[out_channels], -bound, bound, rng),
        );
        Self {
            weight,
            bias: Some(bias),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound.get(self.weight),
            self.bias.map(|b| bound.get(b)),
            self.stride,
            self.kernel / 2,
        )
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Float>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

pub(crate) fn lrelu<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.leaky_relu(x, T::lit(LEAKY_SLOPE))
}

//! Parameterized layers and the parameter registry.

use std::cell::RefCell;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha20Rng;

use crate::nn::{init, ops, Tensor};

/// Which submodule a parameter belongs to; training phases engage groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    EffectExtractor,
    EffectEncoder,
    VarianceAdaptor,
    Decoder,
    ContentClassifier,
    EffectClassifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Encoder,
        ParamGroup::EffectExtractor,
        ParamGroup::EffectEncoder,
        ParamGroup::VarianceAdaptor,
        ParamGroup::Decoder,
        ParamGroup::ContentClassifier,
        ParamGroup::EffectClassifier,
    ];
}

/// A named, grouped view of every trainable tensor in the model.
#[derive(Default)]
pub struct ParamRegistry {
    pub entries: Vec<(String, ParamGroup, Tensor)>,
}

impl ParamRegistry {
    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: &Tensor) {
        self.entries.push((name.into(), group, tensor.clone()));
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, _, t)| t.clone()).collect()
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        self.entries[index].1
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, t)| t)
    }
}

/// Same-length 1-D convolution layer.
pub struct Conv1dLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1dLayer {
    pub fn new(
        rng: &mut ChaCha20Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        Self {
            w: init::xavier_shaped(rng, &[kernel * c_in, c_out], kernel * c_in, c_out),
            b: init::zeros(c_out),
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        ops::conv1d(x, &self.w, &self.b, self.kernel, self.dilation)
    }

    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        reg.push(format!("{prefix}.w"), group, &self.w);
        reg.push(format!("{prefix}.b"), group, &self.b);
    }
}

/// Kernel-2 stride-2 transposed convolution layer.
pub struct UpsampleLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl UpsampleLayer {
    pub fn new(rng: &mut ChaCha20Rng, c_in: usize, c_out: usize) -> Self {
        Self {
            w: init::xavier_shaped(rng, &[2 * c_in, c_out], 2 * c_in, c_out),
            b: init::zeros(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        ops::conv1d_transpose2(x, &self.w, &self.b)
    }

    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        reg.push(format!("{prefix}.w"), group, &self.w);
        reg.push(format!("{prefix}.b"), group, &self.b);
    }
}

pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    pub fn new(rng: &mut ChaCha20Rng, c_in: usize, c_out: usize) -> Self {
        Self {
            w: init::xavier(rng, c_in, c_out),
            b: init::zeros(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        ops::linear(x, &self.w, &self.b)
    }

    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        reg.push(format!("{prefix}.w"), group, &self.w);
        reg.push(format!("{prefix}.b"), group, &self.b);
    }
}

pub struct LayerNormLayer {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            gain: init::ones(dim),
            bias: init::zeros(dim),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        ops::layer_norm(x, &self.gain, &self.bias, self.eps)
    }

    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        reg.push(format!("{prefix}.gain"), group, &self.gain);
        reg.push(format!("{prefix}.bias"), group, &self.bias);
    }
}

/// Batch normalization with running statistics.
///
/// Training mode normalizes by batch statistics and folds them into the
/// running buffers; inference mode uses the buffers as constants, which
/// also makes finite-difference gradient checks well-defined.
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Array1<f64>>,
    pub running_var: RefCell<Array1<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: init::ones(dim),
            beta: init::zeros(dim),
            running_mean: RefCell::new(Array1::zeros(dim)),
            running_var: RefCell::new(Array1::ones(dim)),
            momentum,
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        if train {
            let n = {
                let shape = x.shape();
                (shape[0] * shape[1]) as f64
            };
            let (out, mean, var) = ops::batch_norm_train(x, &self.gamma, &self.beta, self.eps);
            // Unbiased variance for the running buffer, per convention.
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            ndarray::Zip::from(&mut *rm).and(&mean).for_each(|r, &m| {
                *r = (1.0 - self.momentum) * *r + self.momentum * m;
            });
            ndarray::Zip::from(&mut *rv).and(&var).for_each(|r, &v| {
                *r = (1.0 - self.momentum) * *r + self.momentum * v * unbias;
            });
            out
        } else {
            ops::batch_norm_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            )
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        reg.push(format!("{prefix}.gamma"), group, &self.gamma);
        reg.push(format!("{prefix}.beta"), group, &self.beta);
    }
}

pub struct EmbeddingLayer {
    pub table: Tensor,
}

impl EmbeddingLayer {
    pub fn new(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Self {
        Self {
            table: init::embedding_table(rng, n, d),
        }
    }

    pub fn forward(&self, ids: &Array2<usize>) -> Tensor {
        ops::embedding(&self.table, ids)
    }

    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        reg.push(format!("{prefix}.table"), group, &self.table);
    }
}

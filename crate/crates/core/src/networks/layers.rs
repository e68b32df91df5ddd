use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics, updated in the forward pass.
    Buffer,
    /// Never updated.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named parameters of a model, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(n, p)| (n, &p.var))
    }

    /// Parameters whose name starts with `prefix`.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Param)> + 'a {
        self.entries.iter().filter(move |(n, _)| n.starts_with(prefix))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.var.elem_count()).sum()
    }

    fn insert(&mut self, name: String, param: Param) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, param);
        Ok(())
    }
}

/// Registers freshly initialized parameters under a dotted prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    kind: ParamKind,
    device: Device,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, device: &Device) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            kind: ParamKind::Trainable,
            device: device.clone(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            kind: self.kind,
            device: self.device.clone(),
        }
    }

    /// Everything registered through the returned builder is frozen.
    pub fn frozen(&mut self) -> Builder<'_> {
        Builder {
            store: self.store,
            rng: self.rng,
            prefix: self.prefix.clone(),
            kind: ParamKind::Frozen,
            device: self.device.clone(),
        }
    }

    fn register(&mut self, name: &str, data: Vec<f32>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        let tensor = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let kind = if self.kind == ParamKind::Frozen { ParamKind::Frozen } else { kind };
        self.store.insert(format!("{}.{name}", self.prefix), Param { var: var.clone(), kind })?;
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.register(name, data, shape, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape, ParamKind::Buffer)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    out_channels: usize,
    frozen: bool,
}

impl Conv2d {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f32;
        let weight = b.uniform("weight", &[cout, cin, kernel, kernel], (6.0 / fan_in).sqrt())?;
        let bias = if bias { Some(b.constant("bias", &[cout], 0.0)?) } else { None };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            out_channels: cout,
            frozen: b.kind == ParamKind::Frozen,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cin = x.dim(1)?;
        if cin != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        // Frozen weights are detached so backward skips their gradients.
        let param = |v: &Var| if self.frozen { v.as_tensor().detach() } else { v.as_tensor().clone() };
        let y = tensor_ops::conv2d(x, &param(&self.weight), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => tensor_ops::add_channel_bias(&y, &param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.constant("beta", &[channels], 0.0)?,
            running_mean: b.buffer("running_mean", &[channels], 0.0)?,
            running_var: b.buffer("running_var", &[channels], 1.0)?,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (b, _, h, w) = x.dims4()?;
                let (y, mean, var) =
                    tensor_ops::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let dev = x.device();
                let stat = |v: Vec<f64>, k: f64| Tensor::from_vec(v.into_iter().map(|v| (v * k) as f32).collect::<Vec<_>>(), self.channels, dev);
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + stat(mean, m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + stat(var, m * unbiased)?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                Ok(y)
            }
            Mode::Eval => {
                let inv = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
                let scale = (inv * self.gamma.as_tensor())?;
                let shift = (self.beta.as_tensor() - (self.running_mean.as_tensor() * &scale)?)?;
                tensor_ops::channel_affine(x, &scale, &shift)
            }
        }
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut b.pp("conv"), cin, cout, kernel, stride, false)?,
            bn: BatchNorm::new(&mut b.pp("bn"), cout)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }

    /// Convolution and normalization without the activation.
    pub fn forward_linear(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f32).sqrt();
        Ok(Self {
            weight: b.uniform("weight", &[output, input], bound)?,
            bias: b.uniform("bias", &[output], bound)?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

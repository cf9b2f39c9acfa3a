use candle_core::{Tensor, D};

use super::{Init, Scope};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.get("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?,
            bias: scope.get("bias", &[out_dim], Init::FanIn(in_dim))?,
        })
    }

    /// `x` is `(batch, in_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Self {
            weight: scope.get("weight", &[out_ch, in_ch, kernel, kernel], Init::FanIn(fan_in))?,
            bias: scope.get("bias", &[out_ch], Init::FanIn(fan_in))?,
            stride,
            padding,
        })
    }

    /// 3x3, stride 1, same padding.
    pub fn same(scope: &mut Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(scope, in_ch, out_ch, 3, 1, 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        let b = self.bias.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    /// Kernel 4, stride 2, padding 1: exactly doubles the spatial size.
    pub fn upsample2(scope: &mut Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        let fan_in = in_ch * 16;
        Ok(Self {
            weight: scope.get("weight", &[in_ch, out_ch, 4, 4], Init::FanIn(fan_in))?,
            bias: scope.get("bias", &[out_ch], Init::FanIn(fan_in))?,
            stride: 2,
            padding: 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv_transpose2d(x, &self.weight, self.stride, self.padding)?;
        let b = self.bias.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn group_norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.get("gamma", &[channels], Init::Ones)?,
            beta: scope.get("beta", &[channels], Init::Zeros)?,
            groups: group_norm_groups(channels),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

//! Group normalization.
//!
//! Each sample's channels are split into `G` groups. Within a group the
//! values are standardized with `μ = mean` and `σ = sqrt(var + ε)` taken
//! over every channel and position of the group, then scaled and shifted
//! per channel by `γ` and `β`.

use super::graph::{Graph, Op, Var};
use super::Tensor;
use crate::error::{config, Result};

/// Channels per group once a layer is wider than this.
pub const GROUP_SIZE_CAP: usize = 16;

pub const DEFAULT_GN_EPSILON: f64 = 1e-5;

/// Number of groups for a layer of `channels` channels.
///
/// Layers wider than `cap` use groups of exactly `cap` channels and must be
/// divisible by it; narrower layers normalize each channel on its own.
pub fn group_count(channels: usize, cap: usize) -> Result<usize> {
    if channels == 0 || cap == 0 {
        return config("group norm needs at least one channel and a positive group size");
    }
    if channels <= cap {
        return Ok(channels);
    }
    if channels % cap != 0 {
        return config(format!(
            "group norm: {channels} channels cannot be split into groups of {cap}"
        ));
    }
    Ok(channels / cap)
}

/// Affine parameters and settings of one group-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct GroupNormParams {
    pub gamma: Var,
    pub beta: Var,
    pub epsilon: f64,
    pub group_size_cap: usize,
}

impl GroupNormParams {
    pub fn new(gamma: Var, beta: Var, epsilon: f64) -> Self {
        Self {
            gamma,
            beta,
            epsilon,
            group_size_cap: GROUP_SIZE_CAP,
        }
    }
}

pub(crate) struct GroupNormContext {
    pub input: Var,
    pub gamma: Var,
    pub beta: Var,
    groups: usize,
    channels: usize,
    plane: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

pub(crate) struct GroupNormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) fn group_norm_backward(ctx: &GroupNormContext, gamma: &[f64], g: &[f64]) -> GroupNormGrads {
    let (c, plane) = (ctx.channels, ctx.plane);
    let cpg = c / ctx.groups;
    let m = (cpg * plane) as f64;
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let span = cpg * plane;
    for (gi, &inv_std) in ctx.inv_std.iter().enumerate() {
        let start = gi * span;
        let first_channel = (gi % ctx.groups) * cpg;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for i in 0..span {
            let ch = first_channel + i / plane;
            let gv = g[start + i];
            let xh = ctx.normalized[start + i];
            dgamma[ch] += gv * xh;
            dbeta[ch] += gv;
            let d = gv * gamma[ch];
            sum_d += d;
            sum_dx += d * xh;
        }
        let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
        for i in 0..span {
            let ch = first_channel + i / plane;
            let d = g[start + i] * gamma[ch];
            dx[start + i] = inv_std * (d - mean_d - ctx.normalized[start + i] * mean_dx);
        }
    }
    GroupNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

impl Graph {
    /// Group normalization of a `[B, C, ...]` tensor.
    pub fn group_normalize(&mut self, input: Var, params: GroupNormParams) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return config(format!("group_normalize: need [B, C, ...], got {shape:?}"));
        }
        if !(params.epsilon > 0.0) {
            return config(format!("group_normalize: epsilon must be positive, got {}", params.epsilon));
        }
        let (batch, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        let groups = group_count(c, params.group_size_cap)?;
        for (name, v) in [("gamma", params.gamma), ("beta", params.beta)] {
            if self.shape(v) != [c] {
                return config(format!(
                    "group_normalize: {name} shape {:?}, expected [{c}]",
                    self.shape(v)
                ));
            }
        }
        let cpg = c / groups;
        let span = cpg * plane;
        let x = self.value(input).data();
        let gamma = self.value(params.gamma).data();
        let beta = self.value(params.beta).data();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(batch * groups);
        for gi in 0..batch * groups {
            let start = gi * span;
            let block = &x[start..start + span];
            let mean = block.iter().sum::<f64>() / span as f64;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / span as f64;
            let istd = 1.0 / (var + params.epsilon).sqrt();
            inv_std.push(istd);
            let first_channel = (gi % groups) * cpg;
            for (i, &v) in block.iter().enumerate() {
                let ch = first_channel + i / plane;
                let xh = (v - mean) * istd;
                normalized[start + i] = xh;
                out[start + i] = gamma[ch] * xh + beta[ch];
            }
        }
        let value = Tensor::from_parts(shape, out);
        let ctx = GroupNormContext {
            input,
            gamma: params.gamma,
            beta: params.beta,
            groups,
            channels: c,
            plane,
            normalized,
            inv_std,
        };
        Ok(self.push(
            value,
            &[input, params.gamma, params.beta],
            Op::GroupNorm(Box::new(ctx)),
        ))
    }
}

//! The scale-adaptive self-attention counting network.
//!
//! Layout, from input to density map:
//!
//! 1. Pyramid context: a ten-convolution, three-pool VGG stem runs on the
//!    full image and, with the same weights, on a 4× average-pooled copy.
//!    The coarse features are upsampled back to stride 8, concatenated with
//!    the fine ones, channel-shuffled across the two sources and fused by a
//!    1×1 convolution.
//! 2. Three branches, each a 1×1 reduction to a quarter of the channels, a
//!    dilated 3×3 convolution and a self-attention block
//!    `Y = softmax(Q·Kᵀ)·V` with 1×1 convolutions producing `Q`, `K`, `V`.
//! 3. Hierarchical fusion: starting from the branch with the largest
//!    dilation, project the running map, add the next branch and refine
//!    with a 3×3 convolution. Two more 3×3 blocks and a 1×1 output
//!    convolution with a final ReLU give a non-negative stride-8 map.
//!
//! Stem convolutions are plain conv + ReLU, as in VGG, so converted VGG
//! weights can be loaded into them. Every later convolution except the
//! attention projections, the fusion projections and the output layer is
//! followed by group norm and ReLU.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use super::params::ModelParameters;
use crate::autodiff::{group_count, read_ckwt, write_ckwt, ConvOptions, Graph, GroupNormParams, Tensor, Var, GROUP_SIZE_CAP};
use crate::error::{config, Error, Result};

const STEM_WIDTHS: [usize; 10] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512];
/// Stem convolutions followed by a 2×2 max pool.
const POOL_AFTER: [usize; 3] = [1, 3, 6];

/// Spatial reduction from input image to density map.
pub const OUTPUT_STRIDE: usize = 8;
/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;
/// Downsampling factor of the coarse pyramid input, per side.
pub const PYRAMID_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `N(0, 2/fan_in)`, used for the stem which has no pretrained weights.
    He,
    /// `N(0, 1)` rescaled by the configured init scale.
    Scaled,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
    norm: bool,
    relu: bool,
    init: Init,
}

/// Output of a self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, C, H, W]`, same shape as the block input.
    pub output: Var,
    /// `[B, L, L]` row-stochastic attention matrix with `L = H·W`.
    pub weights: Var,
}

/// Model parameters recorded as leaves of one [`Graph`].
pub struct BoundParams {
    vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    /// Variables in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; parameters the output did not reach get zeros.
    pub fn gradients(&self, g: &mut Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                let shape = g.shape(v).to_vec();
                g.take_grad(v).unwrap_or_else(|| Tensor::zeros(&shape))
            })
            .collect()
    }
}

/// Which records of a weight file to accept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// The file must cover every parameter exactly.
    Full,
    /// The file may hold any subset of the `stem.` parameters; everything
    /// else keeps its current value.
    StemOnly,
}

#[derive(Clone, Debug)]
pub struct SacaModel {
    config: ModelConfig,
    params: ModelParameters,
    layers: HashMap<String, ConvLayer>,
    stem_names: Vec<String>,
    /// Branch indices ordered by decreasing dilation.
    fusion_order: [usize; 3],
    context_channels: usize,
    branch_channels: usize,
}

fn layer_names(layer: &str, norm: bool) -> Vec<String> {
    let mut v = vec![format!("{layer}.weight"), format!("{layer}.bias")];
    if norm {
        v.push(format!("{layer}.gn.gamma"));
        v.push(format!("{layer}.gn.beta"));
    }
    v
}

impl SacaModel {
    /// Builds the network with freshly initialized weights; deterministic in `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        if config.input_channels == 0 {
            return config_err("input_channels must be positive");
        }
        if config.dilations.iter().any(|&d| d == 0) {
            return config_err(format!("dilations must be positive, got {:?}", config.dilations));
        }
        if !(config.gn_epsilon > 0.0) {
            return config_err(format!("gn_epsilon must be positive, got {}", config.gn_epsilon));
        }
        if !(config.init_scale > 0.0 && config.init_scale.is_finite()) {
            return config_err(format!("init_scale must be positive, got {}", config.init_scale));
        }
        let width = |w: usize| {
            config.channel_scale.apply(w).ok_or_else(|| {
                Error::Config(format!(
                    "channel scale {} turns width {w} into a non-integer",
                    config.channel_scale
                ))
            })
        };
        let stem: Vec<usize> = STEM_WIDTHS.iter().map(|&w| width(w)).collect::<Result<_>>()?;
        let context = stem[stem.len() - 1];
        if context % 4 != 0 {
            return config_err(format!("branch reduction needs channels divisible by 4, got {context}"));
        }
        let branch = context / 4;

        let mut plan: Vec<(String, ConvLayer)> = Vec::new();
        let conv = |cin, cout, kernel, dilation, norm, relu, init| ConvLayer {
            cin,
            cout,
            kernel,
            dilation,
            norm,
            relu,
            init,
        };
        let mut cin = config.input_channels;
        for (i, &cout) in stem.iter().enumerate() {
            plan.push((format!("stem.conv{i}"), conv(cin, cout, 3, 1, false, true, Init::He)));
            cin = cout;
        }
        plan.push(("pyramid.fuse".into(), conv(2 * context, context, 1, 1, true, true, Init::Scaled)));
        for (j, &d) in config.dilations.iter().enumerate() {
            plan.push((format!("branch{j}.reduce"), conv(context, branch, 1, 1, true, true, Init::Scaled)));
            plan.push((format!("branch{j}.dilated"), conv(branch, branch, 3, d, true, true, Init::Scaled)));
            for proj in ["query", "key", "value"] {
                plan.push((format!("branch{j}.{proj}"), conv(branch, branch, 1, 1, false, false, Init::Scaled)));
            }
        }
        for s in 0..2 {
            plan.push((format!("fuse.stage{s}.project"), conv(branch, branch, 1, 1, false, false, Init::Scaled)));
            plan.push((format!("fuse.stage{s}.refine"), conv(branch, branch, 3, 1, true, true, Init::Scaled)));
        }
        for i in 0..2 {
            plan.push((format!("backend.conv{i}"), conv(branch, branch, 3, 1, true, true, Init::Scaled)));
        }
        plan.push(("head.output".into(), conv(branch, 1, 1, 1, false, true, Init::Scaled)));

        for (name, layer) in &plan {
            if layer.norm {
                group_count(layer.cout, GROUP_SIZE_CAP)
                    .map_err(|e| Error::Config(format!("layer `{name}`: {e}")))?;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ModelParameters::new();
        let mut stem_names = Vec::new();
        for (name, l) in &plan {
            let fan_in = l.cin * l.kernel * l.kernel;
            let std = match l.init {
                Init::He => (2.0 / fan_in as f64).sqrt(),
                Init::Scaled => config.init_scale,
            };
            let shape = [l.cout, l.cin, l.kernel, l.kernel];
            let weight = Tensor::from_fn(&shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            });
            let names = layer_names(name, l.norm);
            params.insert(names[0].clone(), weight)?;
            params.insert(names[1].clone(), Tensor::zeros(&[l.cout]))?;
            if l.norm {
                params.insert(names[2].clone(), Tensor::ones(&[l.cout]))?;
                params.insert(names[3].clone(), Tensor::zeros(&[l.cout]))?;
            }
            if name.starts_with("stem.") {
                stem_names.extend(names);
            }
        }

        let mut fusion_order = [0, 1, 2];
        fusion_order.sort_by(|&a, &b| config.dilations[b].cmp(&config.dilations[a]));

        Ok(Self {
            config,
            params,
            layers: plan.into_iter().collect(),
            stem_names,
            fusion_order,
            context_channels: context,
            branch_channels: branch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    /// Widths of the ten stem convolutions.
    pub fn stem_widths(&self) -> Vec<usize> {
        (0..STEM_WIDTHS.len())
            .map(|i| self.layers[&format!("stem.conv{i}")].cout)
            .collect()
    }

    /// Channels entering the branches.
    pub fn context_channels(&self) -> usize {
        self.context_channels
    }

    /// Channels inside each branch and through fusion.
    pub fn branch_channels(&self) -> usize {
        self.branch_channels
    }

    /// Records every parameter in `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut by_name = HashMap::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let v = g.leaf(t.clone(), trainable);
            vars.push(v);
            by_name.insert(name.to_string(), v);
        }
        BoundParams { vars, by_name }
    }

    /// Uses existing variables, one per parameter in parameter order, as the
    /// model's weights; handy for checking gradients against the tape.
    pub fn bind_vars(&self, g: &Graph, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return config_err(format!("expected {} parameter variables, got {}", self.params.len(), vars.len()));
        }
        let mut by_name = HashMap::with_capacity(vars.len());
        for ((name, t), &v) in self.params.iter().zip(vars) {
            if g.shape(v) != t.shape() {
                return config_err(format!("variable for `{name}` has shape {:?}, expected {:?}", g.shape(v), t.shape()));
            }
            by_name.insert(name.to_string(), v);
        }
        Ok(BoundParams { vars: vars.to_vec(), by_name })
    }

    fn apply(&self, g: &mut Graph, p: &BoundParams, layer: &str, x: Var) -> Result<Var> {
        let l = &self.layers[layer];
        let w = p.var(&format!("{layer}.weight"))?;
        let b = p.var(&format!("{layer}.bias"))?;
        let mut y = g.conv2d(x, w, Some(b), ConvOptions::same(l.kernel, l.dilation))?;
        if l.norm {
            let gamma = p.var(&format!("{layer}.gn.gamma"))?;
            let beta = p.var(&format!("{layer}.gn.beta"))?;
            y = g.group_normalize(y, GroupNormParams::new(gamma, beta, self.config.gn_epsilon))?;
        }
        if l.relu {
            y = g.relu(y);
        }
        Ok(y)
    }

    /// VGG stem: stride-8 features of `x`.
    pub fn stem_forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let mut y = x;
        for i in 0..STEM_WIDTHS.len() {
            y = self.apply(g, p, &format!("stem.conv{i}"), y)?;
            if POOL_AFTER.contains(&i) {
                y = g.max_pool2(y)?;
            }
        }
        Ok(y)
    }

    fn check_input(&self, g: &Graph, image: Var) -> Result<(usize, usize)> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != self.config.input_channels {
            return config_err(format!(
                "model expects {} input channels, image has {c}",
                self.config.input_channels
            ));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return config_err(format!(
                "input {h}x{w} must have height and width divisible by {INPUT_MULTIPLE}"
            ));
        }
        Ok((h, w))
    }

    /// Two-resolution shared-weight front end; `[B, C, H/8, W/8]`.
    pub fn pyramid_context_forward(&self, g: &mut Graph, p: &BoundParams, image: Var) -> Result<Var> {
        self.check_input(g, image)?;
        let fine = self.stem_forward(g, p, image)?;
        let small = g.avg_pool(image, PYRAMID_FACTOR)?;
        let coarse = self.stem_forward(g, p, small)?;
        let coarse = g.bilinear_upsample(coarse, PYRAMID_FACTOR)?;
        let joined = g.concat(&[fine, coarse], 1)?;
        let shuffled = channel_shuffle(g, joined, 2)?;
        self.apply(g, p, "pyramid.fuse", shuffled)
    }

    /// Self-attention over the spatial positions of `x` using the query,
    /// key and value projections of `branch`. No `1/√d` scaling is applied.
    pub fn self_attention(&self, g: &mut Graph, p: &BoundParams, branch: usize, x: Var) -> Result<AttentionOutput> {
        let (b, c, h, w) = g.value(x).dims4()?;
        let len = h * w;
        if len > self.config.attention_cap {
            return Err(Error::Usage(format!(
                "self-attention over {h}x{w} = {len} positions exceeds the cap of {}; \
                 use a smaller input or a smaller channel scale budget",
                self.config.attention_cap
            )));
        }
        let q = self.apply(g, p, &format!("branch{branch}.query"), x)?;
        let k = self.apply(g, p, &format!("branch{branch}.key"), x)?;
        let v = self.apply(g, p, &format!("branch{branch}.value"), x)?;
        let q = g.reshape(q, &[b, c, len])?;
        let k = g.reshape(k, &[b, c, len])?;
        let v = g.reshape(v, &[b, c, len])?;
        let qt = g.transpose(q, 1, 2)?;
        let scores = g.matmul(qt, k)?;
        let weights = g.softmax_rows(scores);
        let vt = g.transpose(v, 1, 2)?;
        let y = g.matmul(weights, vt)?;
        let y = g.transpose(y, 1, 2)?;
        let output = g.reshape(y, &[b, c, h, w])?;
        Ok(AttentionOutput { output, weights })
    }

    /// Reduction, dilated convolution and self-attention of one branch.
    pub fn sasa_branch_forward(&self, g: &mut Graph, p: &BoundParams, features: Var, branch: usize) -> Result<Var> {
        if branch >= 3 {
            return config_err(format!("branch index {branch} out of range 0..3"));
        }
        let x = self.apply(g, p, &format!("branch{branch}.reduce"), features)?;
        let x = self.apply(g, p, &format!("branch{branch}.dilated"), x)?;
        Ok(self.self_attention(g, p, branch, x)?.output)
    }

    /// Coarse-to-fine fusion of the branch outputs (indexed by branch) into
    /// a `[B, 1, h, w]` non-negative density map.
    pub fn hierarchical_fuse(&self, g: &mut Graph, p: &BoundParams, branches: [Var; 3]) -> Result<Var> {
        let shape = g.shape(branches[0]).to_vec();
        if branches.iter().any(|&v| g.shape(v) != shape.as_slice()) {
            return config_err("hierarchical fusion needs three branch outputs of one shape");
        }
        let mut acc = branches[self.fusion_order[0]];
        for (s, &next) in self.fusion_order[1..].iter().enumerate() {
            let projected = self.apply(g, p, &format!("fuse.stage{s}.project"), acc)?;
            let sum = g.add(projected, branches[next])?;
            acc = self.apply(g, p, &format!("fuse.stage{s}.refine"), sum)?;
        }
        for i in 0..2 {
            acc = self.apply(g, p, &format!("backend.conv{i}"), acc)?;
        }
        self.apply(g, p, "head.output", acc)
    }

    /// Full network: `[B, C, H, W]` image to `[B, 1, H/8, W/8]` density.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, image: Var) -> Result<Var> {
        let context = self.pyramid_context_forward(g, p, image)?;
        let mut outs = [context; 3];
        for (j, out) in outs.iter_mut().enumerate() {
            *out = self.sasa_branch_forward(g, p, context, j)?;
        }
        self.hierarchical_fuse(g, p, outs)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn write_weights<W: Write>(&self, w: W) -> Result<()> {
        write_ckwt(w, self.params.iter())?;
        Ok(())
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_weights(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Replaces parameters from a CKWT stream. Every record is validated
    /// before any parameter changes.
    pub fn read_weights<R: Read>(&mut self, r: R, mode: LoadMode) -> Result<()> {
        let records = read_ckwt(r)?;
        let mut seen = vec![false; self.params.len()];
        let mut updates = Vec::with_capacity(records.len());
        for (name, t) in records {
            let Some(i) = self.params.position(&name) else {
                return config_err(format!("weight file has unknown parameter `{name}`"));
            };
            if mode == LoadMode::StemOnly && !self.stem_names.contains(&name) {
                return config_err(format!("stem-only load got non-stem parameter `{name}`"));
            }
            let want = self.params.tensors()[i].shape();
            if t.shape() != want {
                return config_err(format!(
                    "parameter `{name}` has shape {:?} in the file, model expects {want:?}",
                    t.shape()
                ));
            }
            if std::mem::replace(&mut seen[i], true) {
                return config_err(format!("weight file repeats parameter `{name}`"));
            }
            updates.push((i, t));
        }
        if mode == LoadMode::Full {
            if let Some(i) = seen.iter().position(|s| !s) {
                return config_err(format!(
                    "weight file is missing parameter `{}`",
                    self.params.names()[i]
                ));
            }
        }
        let tensors = self.params.tensors_mut();
        for (i, t) in updates {
            tensors[i] = t;
        }
        Ok(())
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>, mode: LoadMode) -> Result<()> {
        self.read_weights(BufReader::new(File::open(path)?), mode)
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    config(msg)
}

/// Interleaves channels across `groups` equal groups: `[B, G·n, H, W]`
/// is viewed as `[B, G, n, H, W]` and the two group axes are swapped.
/// With `C = 2n`, `shuffle(shuffle(x, 2), n)` is the identity.
pub fn channel_shuffle(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    if groups == 0 || c % groups != 0 {
        return config(format!("channel shuffle: {c} channels do not split into {groups} groups"));
    }
    let v = g.reshape(x, &[b, groups, c / groups, h * w])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    g.reshape(v, &[b, c, h, w])
}

/// Integral of each density map in a `[B, 1, h, w]` batch.
pub fn predict_count(density: &Tensor) -> Result<Vec<f64>> {
    let (b, _, _, _) = density.dims4()?;
    let per = density.numel() / b;
    Ok(density.data().chunks(per).map(|c| c.iter().sum()).collect())
}

//! Fully connected network with residual blocks and a hand-written backward
//! pass.
//!
//! Layout, in declared order:
//!
//! ```text
//! z   = [x | temb] W_in + b_in
//! h_k = h_{k-1} + (silu(silu(h_{k-1}) W_k1 + b_k1)) W_k2 + b_k2     (per block)
//! out = silu(h_last) W_out + b_out
//! ```
//!
//! Weights are stored `fan_in x fan_out` so a batch of row vectors multiplies
//! from the left.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_EMBED: usize = 128;
pub const DEFAULT_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub blocks: usize,
}

impl NetConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: DEFAULT_HIDDEN,
            embed_dim: DEFAULT_EMBED,
            blocks: DEFAULT_BLOCKS,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_embed(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("network widths must be positive: {self:?}")));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding width must be even and positive, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let input = (self.input_dim + self.embed_dim) * self.hidden + self.hidden;
        let block = 2 * (self.hidden * self.hidden + self.hidden);
        let output = self.hidden * self.output_dim + self.output_dim;
        input + self.blocks * block + output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "NetRecord", try_from = "NetRecord")]
pub struct NetParams {
    config: NetConfig,
    pub input: Linear,
    pub blocks: Vec<ResBlock>,
    pub output: Linear,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn check_finite(a: &Array2<f64>, location: &str) -> Result<()> {
    if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(location, format!("encountered {bad}")));
    }
    Ok(())
}

fn silu_times(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &p| *g *= silu_grad(p));
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Array2<f64>,
    block_inputs: Vec<Array2<f64>>,
    block_inner: Vec<Array2<f64>>,
    last_hidden: Array2<f64>,
}

/// Output of a backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    /// Parameter gradients, absent when only input gradients were requested.
    pub grads: Option<NetParams>,
    /// Gradient with respect to `x` (the time embedding columns are dropped).
    pub input_grads: Array2<f64>,
}

impl NetParams {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        Ok(Self {
            input: Linear::zeros(config.input_dim + config.embed_dim, h),
            blocks: (0..config.blocks)
                .map(|_| ResBlock {
                    inner: Linear::zeros(h, h),
                    outer: Linear::zeros(h, h),
                })
                .collect(),
            output: Linear::zeros(h, config.output_dim),
            config,
        })
    }

    /// Uniform fan-in scaled weights everywhere except the output projection,
    /// which starts at zero.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let input = Linear::uniform(config.input_dim + config.embed_dim, h, rng);
        let blocks = (0..config.blocks)
            .map(|_| ResBlock {
                inner: Linear::uniform(h, h, rng),
                outer: Linear::uniform(h, h, rng),
            })
            .collect();
        Ok(Self {
            input,
            blocks,
            output: Linear::zeros(h, config.output_dim),
            config,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        for k in 0..self.blocks.len() {
            names.push(format!("block{k}.inner"));
            names.push(format!("block{k}.outer"));
        }
        names.push("output".to_string());
        names
    }

    pub fn layers(&self) -> Vec<&Linear> {
        let mut out = vec![&self.input];
        for b in &self.blocks {
            out.push(&b.inner);
            out.push(&b.outer);
        }
        out.push(&self.output);
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.input];
        for b in &mut self.blocks {
            out.push(&mut b.inner);
            out.push(&mut b.outer);
        }
        out.push(&mut self.output);
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// All parameters in declared layer order, each layer's weights row-major
    /// followed by its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn from_flat(config: NetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if flat.len() != p.num_params() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                p.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in p.layers_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(p)
    }

    /// Mutable access to one parameter by its position in [`Self::to_flat`].
    pub fn flat_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for l in self.layers_mut() {
            let wl = l.weight.len();
            if index < wl {
                return l.weight.as_slice_mut().map(|s| &mut s[index]);
            }
            index -= wl;
            if index < l.bias.len() {
                return Some(&mut l.bias[index]);
            }
            index -= l.bias.len();
        }
        None
    }

    fn check_inputs(&self, x: &ArrayView2<f64>, temb: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Config(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        if temb.ncols() != self.config.embed_dim {
            return Err(Error::Config(format!(
                "time embedding has {} columns, network expects {}",
                temb.ncols(),
                self.config.embed_dim
            )));
        }
        if x.nrows() != temb.nrows() {
            return Err(Error::Config(format!(
                "batch size mismatch: {} inputs, {} embeddings",
                x.nrows(),
                temb.nrows()
            )));
        }
        Ok(())
    }

    /// Batched forward pass; rows of `x` and `temb` are samples.
    pub fn forward(&self, x: ArrayView2<f64>, temb: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_cached(x, temb).map(|(out, _)| out)
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        temb: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_inputs(&x, &temb)?;
        let input = ndarray::concatenate(Axis(1), &[x, temb])
            .map_err(|e| Error::Config(format!("cannot join input and embedding: {e}")))?;
        let mut h = self.input.apply(&input.view());
        check_finite(&h, "input")?;

        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_inner = Vec::with_capacity(self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate() {
            let a = h.mapv(silu);
            let u = b.inner.apply(&a.view());
            check_finite(&u, &format!("block{k}.inner"))?;
            let v = u.mapv(silu);
            let f = b.outer.apply(&v.view());
            let next = &h + &f;
            check_finite(&next, &format!("block{k}.outer"))?;
            block_inputs.push(std::mem::replace(&mut h, next));
            block_inner.push(u);
        }

        let out = self.output.apply(&h.mapv(silu).view());
        check_finite(&out, "output")?;
        Ok((
            out,
            ForwardCache {
                input,
                block_inputs,
                block_inner,
                last_hidden: h,
            },
        ))
    }

    /// Reverse-mode pass for an upstream gradient `d_out` (batch x output_dim).
    /// Parameter gradients are summed over the batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: ArrayView2<f64>,
        param_grads: bool,
    ) -> Result<Backward> {
        if d_out.dim() != (cache.last_hidden.nrows(), self.config.output_dim) {
            return Err(Error::Config(format!(
                "upstream gradient has shape {:?}, expected ({}, {})",
                d_out.dim(),
                cache.last_hidden.nrows(),
                self.config.output_dim
            )));
        }
        let mut grads = param_grads.then(|| self.zeros_like());

        if let Some(g) = grads.as_mut() {
            let a = cache.last_hidden.mapv(silu);
            g.output.weight = a.t().dot(&d_out);
            g.output.bias = d_out.sum_axis(Axis(0));
        }
        let mut dh = d_out.dot(&self.output.weight.t());
        silu_times(&mut dh, &cache.last_hidden);
        check_finite(&dh, "output (backward)")?;

        for k in (0..self.blocks.len()).rev() {
            let b = &self.blocks[k];
            let h = &cache.block_inputs[k];
            let u = &cache.block_inner[k];
            if let Some(g) = grads.as_mut() {
                let v = u.mapv(silu);
                g.blocks[k].outer.weight = v.t().dot(&dh);
                g.blocks[k].outer.bias = dh.sum_axis(Axis(0));
            }
            let mut du = dh.dot(&b.outer.weight.t());
            silu_times(&mut du, u);
            if let Some(g) = grads.as_mut() {
                let a = h.mapv(silu);
                g.blocks[k].inner.weight = a.t().dot(&du);
                g.blocks[k].inner.bias = du.sum_axis(Axis(0));
            }
            let mut da = du.dot(&b.inner.weight.t());
            silu_times(&mut da, h);
            dh += &da;
            check_finite(&dh, &format!("block{k} (backward)"))?;
        }

        if let Some(g) = grads.as_mut() {
            g.input.weight = cache.input.t().dot(&dh);
            g.input.bias = dh.sum_axis(Axis(0));
        }
        let d_in = self.config.input_dim;
        let w_x = self.input.weight.slice(s![..d_in, ..]);
        let input_grads = dh.dot(&w_x.t());
        check_finite(&input_grads, "input (backward)")?;
        Ok(Backward { grads, input_grads })
    }
}

/// Result of [`net_grad`].
#[derive(Clone, Debug)]
pub struct NetGrad {
    pub loss: f64,
    pub grads: NetParams,
    pub input_grads: Array2<f64>,
}

/// Evaluates `loss_head` on the network output and differentiates it.
///
/// `loss_head` maps the batch output to `(loss, d loss / d output)`.
pub fn net_grad<F>(
    params: &NetParams,
    x: ArrayView2<f64>,
    temb: ArrayView2<f64>,
    loss_head: F,
) -> Result<NetGrad>
where
    F: FnOnce(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    let (out, cache) = params.forward_cached(x, temb)?;
    let (loss, d_out) = loss_head(out.view());
    if !loss.is_finite() {
        return Err(Error::numerical("loss head", format!("loss is {loss}")));
    }
    let back = params.backward(&cache, d_out.view(), true)?;
    Ok(NetGrad {
        loss,
        grads: back.grads.expect("parameter gradients requested"),
        input_grads: back.input_grads,
    })
}

/// Single-sample convenience wrapper around [`NetParams::forward`].
pub fn net_forward(params: &NetParams, x: &[f64], temb: &[f64]) -> Result<Vec<f64>> {
    let xv = ArrayView2::from_shape((1, x.len()), x)
        .map_err(|e| Error::Config(format!("bad input shape: {e}")))?;
    let tv = ArrayView2::from_shape((1, temb.len()), temb)
        .map_err(|e| Error::Config(format!("bad embedding shape: {e}")))?;
    Ok(params.forward(xv, tv)?.row(0).to_vec())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetRecord {
    pub config: NetConfig,
    pub layers: Vec<LayerRecord>,
}

impl From<NetParams> for NetRecord {
    fn from(p: NetParams) -> Self {
        let layers = p
            .layer_names()
            .into_iter()
            .zip(p.layers())
            .map(|(name, l)| LayerRecord {
                name,
                fan_in: l.fan_in(),
                fan_out: l.fan_out(),
                weight: l.weight.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        NetRecord {
            config: p.config.clone(),
            layers,
        }
    }
}

impl TryFrom<NetRecord> for NetParams {
    type Error = Error;

    fn try_from(rec: NetRecord) -> Result<Self> {
        let mut p = NetParams::zeros(rec.config)?;
        let names = p.layer_names();
        if rec.layers.len() != names.len() {
            return Err(Error::Schema(format!(
                "expected {} layers, found {}",
                names.len(),
                rec.layers.len()
            )));
        }
        for ((dst, name), src) in p.layers_mut().into_iter().zip(names).zip(rec.layers) {
            if src.name != name || src.fan_in != dst.fan_in() || src.fan_out != dst.fan_out() {
                return Err(Error::Schema(format!(
                    "layer {} ({}x{}) does not match expected {} ({}x{})",
                    src.name,
                    src.fan_in,
                    src.fan_out,
                    name,
                    dst.fan_in(),
                    dst.fan_out()
                )));
            }
            if src.weight.len() != dst.weight.len() || src.bias.len() != dst.bias.len() {
                return Err(Error::Schema(format!("layer {name} payload has the wrong length")));
            }
            dst.weight = Array2::from_shape_vec((src.fan_in, src.fan_out), src.weight)
                .map_err(|e| Error::Schema(e.to_string()))?;
            dst.bias = Array1::from(src.bias);
        }
        if !p.is_finite() {
            return Err(Error::Schema("checkpoint contains non-finite parameters".into()));
        }
        Ok(p)
    }
}

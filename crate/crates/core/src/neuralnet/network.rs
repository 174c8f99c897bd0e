//! Local encoder, optional global encoder and decoder, with explicit
//! forward caches and a hand-ordered backward pass.

use serde::{Deserialize, Serialize};

use super::ops::{
    batchnorm_backward, batchnorm_forward, broadcast_spatial, broadcast_spatial_backward, concat_channels,
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, resize_bilinear_tensor, split_channels, BnCache,
    ConvGeometry, Mode,
};
use super::tensor::{stack_images, unstack_image, Tensor};
use crate::error::{Error, Result};
use crate::imageio::{ImageF, LdrImage};
use crate::rng::SeededRng;

/// Local path filter counts at `width_scale = 1`, encoder levels then bottleneck.
pub const LOCAL_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];
/// The global path is 64 channels regardless of `width_scale`.
pub const GLOBAL_WIDTH: usize = 64;
pub const GLOBAL_INPUT_SIZE: usize = 128;
pub const GLOBAL_BLOCKS: usize = 5;
/// Four 2x2 poolings: spatial sizes must be divisible by this.
pub const SIZE_MULTIPLE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;

const LEVELS: usize = 4;
const CONV3: ConvGeometry = ConvGeometry::new(3, 1, 1);
const CONV4_VALID: ConvGeometry = ConvGeometry::new(4, 1, 0);
const UP4: ConvGeometry = ConvGeometry::new(4, 2, 1);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub use_global_encoder: bool,
    pub width_scale: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            use_global_encoder: true,
            width_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
}

/// One convolution, optionally followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

impl LayerSpec {
    fn new(name: String, kind: LayerKind, in_channels: usize, out_channels: usize, g: ConvGeometry) -> Self {
        Self {
            name,
            kind,
            in_channels,
            out_channels,
            kernel: g.kernel,
            stride: g.stride,
            padding: g.pad,
            batch_norm: true,
            relu: true,
        }
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel, self.stride, self.padding)
    }

    /// Inputs contributing to each output value; transposed convolutions
    /// only see `(kernel / stride)^2` taps per input channel.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.in_channels * self.kernel * self.kernel,
            LayerKind::TransposedConv => {
                let taps = self.kernel / self.stride;
                self.in_channels * taps * taps
            }
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            LayerKind::TransposedConv => vec![self.in_channels, self.out_channels, self.kernel, self.kernel],
        }
    }
}

impl ArchitectureConfig {
    pub fn without_global(width_scale: f64) -> Self {
        Self {
            use_global_encoder: false,
            width_scale,
        }
    }

    /// Scaled local widths; every one must be a positive integer.
    pub fn local_widths(&self) -> Result<[usize; 5]> {
        let s = self.width_scale;
        let base = LOCAL_WIDTHS[0] as f64 * s;
        if !s.is_finite() || s <= 0.0 || base < 1.0 || (base - base.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "width_scale {s} does not give an integer channel count of at least 1"
            )));
        }
        Ok(LOCAL_WIDTHS.map(|k| (k as f64 * s).round() as usize))
    }

    /// Every convolution in forward order: encoder, bottleneck, global
    /// branch, decoder, output.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        use LayerKind::{Conv, TransposedConv};
        let k = self.local_widths()?;
        let mut specs = Vec::new();
        let mut cin = IMAGE_CHANNELS;
        for (level, &width) in k[..LEVELS].iter().enumerate() {
            specs.push(LayerSpec::new(format!("enc{}.conv1", level + 1), Conv, cin, width, CONV3));
            specs.push(LayerSpec::new(format!("enc{}.conv2", level + 1), Conv, width, width, CONV3));
            cin = width;
        }
        specs.push(LayerSpec::new("bottleneck.conv1".into(), Conv, cin, k[4], CONV3));
        specs.push(LayerSpec::new("bottleneck.conv2".into(), Conv, k[4], k[4], CONV3));
        let mut fused = k[4];
        if self.use_global_encoder {
            let mut gin = IMAGE_CHANNELS;
            for b in 0..GLOBAL_BLOCKS {
                specs.push(LayerSpec::new(format!("global.conv{}", b + 1), Conv, gin, GLOBAL_WIDTH, CONV3));
                gin = GLOBAL_WIDTH;
            }
            specs.push(LayerSpec::new("global.head".into(), Conv, GLOBAL_WIDTH, GLOBAL_WIDTH, CONV4_VALID));
            fused += GLOBAL_WIDTH;
        }
        cin = fused;
        for stage in 0..LEVELS {
            let width = k[LEVELS - 1 - stage];
            let n = stage + 1;
            specs.push(LayerSpec::new(format!("dec{n}.up"), TransposedConv, cin, width, UP4));
            specs.push(LayerSpec::new(format!("dec{n}.conv1"), Conv, 2 * width, width, CONV3));
            specs.push(LayerSpec::new(format!("dec{n}.conv2"), Conv, width, width, CONV3));
            cin = width;
        }
        let mut out = LayerSpec::new("output.conv".into(), Conv, cin, IMAGE_CHANNELS, CONV3);
        out.batch_norm = false;
        specs.push(out);
        Ok(specs)
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
struct BnSlots {
    scale: usize,
    shift: usize,
    /// Running mean; the running variance is the next buffer.
    running: usize,
}

#[derive(Clone, Debug)]
struct Block {
    spec: LayerSpec,
    weight: usize,
    bias: usize,
    bn: Option<BnSlots>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Tensor,
    bn: Option<BnCache>,
    output: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    bottleneck: usize,
    global: Option<usize>,
    decoder: usize,
    output: usize,
}

struct Pooled {
    argmax: Vec<u32>,
    input_shape: [usize; 4],
}

/// Everything the backward pass needs from the last training forward.
struct Cache {
    blocks: Vec<Option<BlockCache>>,
    pools: Vec<Pooled>,
    global_pools: Vec<Pooled>,
    bottleneck_channels: usize,
}

pub struct Network {
    config: ArchitectureConfig,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    blocks: Vec<Block>,
    layout: Layout,
    cache: Option<Cache>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Builds and He-initializes a network.
pub fn build_network(config: ArchitectureConfig, rng: &mut SeededRng) -> Result<Network> {
    let specs = config.layer_specs()?;
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut blocks = Vec::with_capacity(specs.len());
    for spec in specs {
        let shape = spec.weight_shape();
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let len: usize = shape.iter().product();
        let value: Vec<f32> = (0..len).map(|_| rng.normal(0.0, std) as f32).collect();
        let weight = push_param(&mut params, format!("{}.weight", spec.name), shape, value);
        let c = spec.out_channels;
        let bias = push_param(&mut params, format!("{}.bias", spec.name), vec![c], vec![0.0; c]);
        let bn = spec.batch_norm.then(|| {
            let scale = push_param(&mut params, format!("{}.bn.scale", spec.name), vec![c], vec![1.0; c]);
            let shift = push_param(&mut params, format!("{}.bn.shift", spec.name), vec![c], vec![0.0; c]);
            let running = buffers.len();
            for (suffix, init) in [("running_mean", 0.0), ("running_var", 1.0)] {
                buffers.push(Buffer {
                    name: format!("{}.bn.{suffix}", spec.name),
                    shape: vec![c],
                    value: vec![init; c],
                });
            }
            BnSlots { scale, shift, running }
        });
        blocks.push(Block { spec, weight, bias, bn });
    }
    let bottleneck = 2 * LEVELS;
    let global = config.use_global_encoder.then_some(bottleneck + 2);
    let decoder = bottleneck + 2 + if global.is_some() { GLOBAL_BLOCKS + 1 } else { 0 };
    let layout = Layout {
        bottleneck,
        global,
        decoder,
        output: decoder + 3 * LEVELS,
    };
    debug_assert_eq!(layout.output + 1, blocks.len());
    Ok(Network {
        config,
        params,
        buffers,
        blocks,
        layout,
        cache: None,
    })
}

fn push_param(params: &mut Vec<Param>, name: String, shape: Vec<usize>, value: Vec<f32>) -> usize {
    let grad = vec![0.0; value.len()];
    params.push(Param {
        name,
        shape,
        value,
        grad,
    });
    params.len() - 1
}

fn block_forward(
    block: &Block,
    params: &[Param],
    buffers: &mut [Buffer],
    x: Tensor,
    mode: Mode,
    keep: bool,
) -> Result<(Tensor, Option<BlockCache>)> {
    let (w, b) = (&params[block.weight].value, &params[block.bias].value);
    let g = block.spec.geometry();
    let mut y = match block.spec.kind {
        LayerKind::Conv => conv2d_forward(&x, w, b, g)?,
        LayerKind::TransposedConv => conv_transpose2d_forward(&x, w, b, g)?,
    };
    let mut bn_cache = None;
    if let Some(bn) = block.bn {
        let (mean, var) = buffers[bn.running..].split_at_mut(1);
        let (out, cache) = batchnorm_forward(
            &y,
            &params[bn.scale].value,
            &params[bn.shift].value,
            &mut mean[0].value,
            &mut var[0].value,
            mode,
        )?;
        y = out;
        bn_cache = Some(cache);
    }
    if block.spec.relu {
        y = relu_forward(&y);
    }
    let cache = keep.then(|| BlockCache {
        input: x,
        bn: bn_cache,
        output: y.clone(),
    });
    Ok((y, cache))
}

fn block_backward(
    block: &Block,
    params: &mut [Param],
    cache: BlockCache,
    grad_out: Tensor,
    want_input: bool,
) -> Option<Tensor> {
    let mut g = if block.spec.relu {
        relu_backward(&grad_out, &cache.output)
    } else {
        grad_out
    };
    if let (Some(bn), Some(bn_cache)) = (block.bn, cache.bn.as_ref()) {
        let c = block.spec.out_channels;
        let (mut dscale, mut dshift) = (vec![0.0; c], vec![0.0; c]);
        g = batchnorm_backward(&g, &params[bn.scale].value, bn_cache, &mut dscale, &mut dshift);
        add_into(&mut params[bn.scale].grad, &dscale);
        add_into(&mut params[bn.shift].grad, &dshift);
    }
    let mut dbias = vec![0.0; block.spec.out_channels];
    let geometry = block.spec.geometry();
    let Param { value, grad, .. } = &mut params[block.weight];
    let dx = match block.spec.kind {
        LayerKind::Conv => conv2d_backward(&cache.input, value, &g, geometry, grad, &mut dbias, want_input),
        LayerKind::TransposedConv => {
            conv_transpose2d_backward(&cache.input, value, &g, geometry, grad, &mut dbias, want_input)
        }
    };
    add_into(&mut params[block.bias].grad, &dbias);
    dx
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn add_tensor(dst: &mut Tensor, src: &Tensor) {
    add_into(dst.data_mut(), src.data());
}

impl Network {
    pub fn config(&self) -> ArchitectureConfig {
        self.config
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.blocks.iter().map(|b| b.spec.clone()).collect()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let [n, c, h, w] = x.shape();
        if n == 0 || c != IMAGE_CHANNELS || h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Input(format!(
                "network input must be (n, 3, h, w) with h and w positive multiples of {SIZE_MULTIPLE}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training or evaluation forward pass. In training mode the batch
    /// statistics update the running estimates and the activations are kept
    /// for [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => {
                self.cache = None;
                self.predict(x)
            }
            Mode::Train => {
                Self::check_input(x)?;
                let (out, cache) = run(&self.blocks, self.layout, &self.params, &mut self.buffers, x, x, mode, true)?;
                self.cache = cache;
                Ok(out)
            }
        }
    }

    /// Evaluation-mode forward; a pure function of the parameters and input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_with_global(x, x)
    }

    /// Evaluation forward where the global branch sees `global_source`
    /// (resized to the global input size) instead of `x`.
    pub fn predict_with_global(&self, x: &Tensor, global_source: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let mut buffers = self.buffers.clone();
        let (out, _) = run(
            &self.blocks,
            self.layout,
            &self.params,
            &mut buffers,
            x,
            global_source,
            Mode::Eval,
            false,
        )?;
        Ok(out)
    }

    /// The `(n, 64, 1, 1)` global feature in evaluation mode, or `None`
    /// without a global branch.
    pub fn global_feature(&self, x: &Tensor) -> Result<Option<Tensor>> {
        let Some(start) = self.layout.global else {
            return Ok(None);
        };
        let mut buffers = self.buffers.clone();
        let (g, _, _) = run_global(&self.blocks, start, &self.params, &mut buffers, x, Mode::Eval, false)?;
        Ok(Some(g))
    }

    /// Hash of every ReLU on/off decision and max-pool choice made by the
    /// last training forward. Two forwards with equal signatures lie on the
    /// same smooth piece of the network function, which is what makes a
    /// central difference between them meaningful.
    pub fn activation_signature(&self) -> Option<u64> {
        use std::hash::{Hash, Hasher};
        let cache = self.cache.as_ref()?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for c in cache.blocks.iter().flatten() {
            for chunk in c.output.data().chunks(64) {
                let mask = chunk.iter().enumerate().fold(0u64, |m, (i, &v)| m | (u64::from(v > 0.0) << i));
                mask.hash(&mut h);
            }
        }
        for p in cache.pools.iter().chain(&cache.global_pools) {
            p.argmax.hash(&mut h);
        }
        Some(h.finish())
    }

    /// Accumulates parameter gradients for `grad_out` (the loss gradient
    /// with respect to the last training forward's output).
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Config("backward called without a training forward pass".into()))?;
        let expected = cache.blocks[self.layout.output].as_ref().map(|c| c.output.shape());
        if expected != Some(grad_out.shape()) {
            return Err(Error::Input(format!(
                "gradient shape {:?} does not match the network output",
                grad_out.shape()
            )));
        }
        let Layout {
            bottleneck,
            global,
            decoder,
            output,
        } = self.layout;
        let Cache {
            blocks: mut block_caches,
            pools,
            global_pools,
            bottleneck_channels,
        } = cache;
        let blocks = &self.blocks;
        let params = &mut self.params;
        let mut back = |i: usize, g: Tensor, want: bool| -> Option<Tensor> {
            let c = block_caches[i].take().expect("block cached by the training forward");
            block_backward(&blocks[i], params, c, g, want)
        };

        let mut g = back(output, grad_out.clone(), true).expect("input gradient");
        let mut skip_grads: Vec<Option<Tensor>> = (0..LEVELS).map(|_| None).collect();
        for stage in (0..LEVELS).rev() {
            let base = decoder + 3 * stage;
            g = back(base + 2, g, true).expect("input gradient");
            g = back(base + 1, g, true).expect("input gradient");
            let up_channels = blocks[base].spec.out_channels;
            let (g_up, g_skip) = split_channels(&g, up_channels);
            skip_grads[LEVELS - 1 - stage] = Some(g_skip);
            g = back(base, g_up, true).expect("input gradient");
        }
        if let Some(start) = global {
            let (g_local, g_global) = split_channels(&g, bottleneck_channels);
            g = g_local;
            let mut gg = broadcast_spatial_backward(&g_global);
            gg = back(start + GLOBAL_BLOCKS, gg, true).expect("input gradient");
            for b in (0..GLOBAL_BLOCKS).rev() {
                let pooled = &global_pools[b];
                gg = maxpool2x2_backward(&gg, &pooled.argmax, pooled.input_shape);
                // The resized image is not a function of any parameter.
                match back(start + b, gg, b > 0) {
                    Some(next) => gg = next,
                    None => break,
                }
            }
        }
        g = back(bottleneck + 1, g, true).expect("input gradient");
        g = back(bottleneck, g, true).expect("input gradient");
        for level in (0..LEVELS).rev() {
            let pooled = &pools[level];
            g = maxpool2x2_backward(&g, &pooled.argmax, pooled.input_shape);
            add_tensor(&mut g, skip_grads[level].as_ref().expect("skip gradient"));
            g = back(2 * level + 1, g, true).expect("input gradient");
            match back(2 * level, g, level > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }
}

type GlobalOutput = (Tensor, Vec<Option<BlockCache>>, Vec<Pooled>);

fn run_global(
    blocks: &[Block],
    start: usize,
    params: &[Param],
    buffers: &mut [Buffer],
    source: &Tensor,
    mode: Mode,
    keep: bool,
) -> Result<GlobalOutput> {
    if source.channels() != IMAGE_CHANNELS {
        return Err(Error::Input("global source must have 3 channels".into()));
    }
    let mut g = resize_bilinear_tensor(source, GLOBAL_INPUT_SIZE, GLOBAL_INPUT_SIZE);
    let mut caches = Vec::with_capacity(GLOBAL_BLOCKS + 1);
    let mut pools = Vec::with_capacity(GLOBAL_BLOCKS);
    for b in 0..GLOBAL_BLOCKS {
        let (y, c) = block_forward(&blocks[start + b], params, buffers, g, mode, keep)?;
        caches.push(c);
        let (p, argmax) = maxpool2x2_forward(&y)?;
        pools.push(Pooled {
            argmax,
            input_shape: y.shape(),
        });
        g = p;
    }
    let (g, c) = block_forward(&blocks[start + GLOBAL_BLOCKS], params, buffers, g, mode, keep)?;
    caches.push(c);
    debug_assert_eq!(&g.shape()[1..], &[GLOBAL_WIDTH, 1, 1]);
    Ok((g, caches, pools))
}

#[allow(clippy::too_many_arguments)]
fn run(
    blocks: &[Block],
    layout: Layout,
    params: &[Param],
    buffers: &mut [Buffer],
    x: &Tensor,
    global_source: &Tensor,
    mode: Mode,
    keep: bool,
) -> Result<(Tensor, Option<Cache>)> {
    let mut caches: Vec<Option<BlockCache>> = (0..blocks.len()).map(|_| None).collect();
    let mut pools = Vec::with_capacity(LEVELS);
    let mut skips = Vec::with_capacity(LEVELS);
    let mut h = x.clone();
    let step = |i: usize, input: Tensor, buffers: &mut [Buffer], caches: &mut [Option<BlockCache>]| -> Result<Tensor> {
        let (y, c) = block_forward(&blocks[i], params, buffers, input, mode, keep)?;
        caches[i] = c;
        Ok(y)
    };
    for level in 0..LEVELS {
        h = step(2 * level, h, buffers, &mut caches)?;
        h = step(2 * level + 1, h, buffers, &mut caches)?;
        let (p, argmax) = maxpool2x2_forward(&h)?;
        pools.push(Pooled {
            argmax,
            input_shape: h.shape(),
        });
        skips.push(h);
        h = p;
    }
    h = step(layout.bottleneck, h, buffers, &mut caches)?;
    h = step(layout.bottleneck + 1, h, buffers, &mut caches)?;
    let bottleneck_channels = h.channels();
    let mut global_pools = Vec::new();
    if let Some(start) = layout.global {
        if global_source.batch() != x.batch() {
            return Err(Error::Input("global source batch differs from the input batch".into()));
        }
        let (g, gcaches, gpools) = run_global(blocks, start, params, buffers, global_source, mode, keep)?;
        for (i, c) in gcaches.into_iter().enumerate() {
            caches[start + i] = c;
        }
        global_pools = gpools;
        h = concat_channels(&h, &broadcast_spatial(&g, h.height(), h.width()))?;
    }
    for stage in 0..LEVELS {
        let base = layout.decoder + 3 * stage;
        let up = step(base, h, buffers, &mut caches)?;
        h = concat_channels(&up, &skips[LEVELS - 1 - stage])?;
        h = step(base + 1, h, buffers, &mut caches)?;
        h = step(base + 2, h, buffers, &mut caches)?;
    }
    let out = step(layout.output, h, buffers, &mut caches)?;
    let cache = keep.then(|| Cache {
        blocks: caches,
        pools,
        global_pools,
        bottleneck_channels,
    });
    Ok((out, cache))
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period.max(1));
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Enhances an 8-bit image of any size of at least 16x16.
///
/// The image is reflect-padded to multiples of 16 (extra row or column on
/// the bottom/right), the global branch sees the unpadded image, and the
/// result is cropped, clamped to `[0, 1]` and quantized.
pub fn enhance_image(net: &Network, img: &LdrImage) -> Result<LdrImage> {
    let (w, h) = (img.width, img.height);
    if w < SIZE_MULTIPLE || h < SIZE_MULTIPLE {
        return Err(Error::Input(format!(
            "image {w}x{h} is smaller than the minimum {SIZE_MULTIPLE}x{SIZE_MULTIPLE}"
        )));
    }
    let float = img.to_float();
    let (pw, ph) = (w.next_multiple_of(SIZE_MULTIPLE), h.next_multiple_of(SIZE_MULTIPLE));
    let (left, top) = ((pw - w) / 2, (ph - h) / 2);
    let mut padded = ImageF::new(pw, ph, IMAGE_CHANNELS);
    for y in 0..ph {
        let sy = reflect(y as isize - top as isize, h);
        for x in 0..pw {
            let sx = reflect(x as isize - left as isize, w);
            padded.pixel_mut(x, y).copy_from_slice(float.pixel(sx, sy));
        }
    }
    let x = stack_images(&[&padded])?;
    let source = stack_images(&[&float])?;
    let out = net.predict_with_global(&x, &source)?;
    let out = unstack_image(&out, 0).crop(left, top, w, h);
    Ok(LdrImage::from_float(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::gradcheck::{check_network_gradients, random_tensor};

    fn small(global: bool, seed: u64) -> Network {
        let cfg = ArchitectureConfig {
            use_global_encoder: global,
            width_scale: 0.125,
        };
        build_network(cfg, &mut SeededRng::from_seed(seed)).unwrap()
    }

    #[test]
    fn full_width_channel_plan() {
        let specs = ArchitectureConfig::default().layer_specs().unwrap();
        let outs: Vec<usize> = specs.iter().filter(|s| !s.name.starts_with("global")).map(|s| s.out_channels).collect();
        assert_eq!(
            outs,
            [32, 32, 64, 64, 128, 128, 256, 256, 512, 512, 256, 256, 256, 128, 128, 128, 64, 64, 64, 32, 32, 32, 3]
        );
        let global: Vec<&LayerSpec> = specs.iter().filter(|s| s.name.starts_with("global")).collect();
        assert_eq!(global.len(), 6);
        assert!(global.iter().all(|s| s.out_channels == GLOBAL_WIDTH));
        assert_eq!(global[5].kernel, 4);
        assert_eq!(global[5].padding, 0);
        let up = specs.iter().find(|s| s.name == "dec1.up").unwrap();
        assert_eq!(up.in_channels, 512 + 64);
    }

    #[test]
    fn invalid_width_scales_are_rejected() {
        for s in [0.0, -1.0, 0.01, 0.3, f64::NAN] {
            let cfg = ArchitectureConfig {
                use_global_encoder: true,
                width_scale: s,
            };
            assert!(matches!(cfg.layer_specs(), Err(Error::Config(_))), "{s}");
        }
        assert!(ArchitectureConfig::without_global(0.25).layer_specs().is_ok());
    }

    #[test]
    fn ablation_differs_only_in_global_branch_and_first_decoder_input() {
        let with = small(true, 1);
        let without = small(false, 1);
        let names = |n: &Network| -> Vec<(String, Vec<usize>)> {
            n.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect()
        };
        let a = names(&with);
        let b = names(&without);
        assert!(b.iter().all(|(n, _)| !n.starts_with("global")));
        let a_local: Vec<_> = a.iter().filter(|(n, _)| !n.starts_with("global")).collect();
        assert_eq!(a_local.len(), b.len());
        for ((na, sa), (nb, sb)) in a_local.into_iter().zip(&b) {
            assert_eq!(na, nb);
            if na == "dec1.up.weight" {
                assert_eq!(sa[0], sb[0] + GLOBAL_WIDTH);
            } else {
                assert_eq!(sa, sb, "{na}");
            }
        }
    }

    #[test]
    fn repeated_builds_are_identical() {
        let a = small(true, 9);
        let b = small(true, 9);
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.value == q.value));
    }

    #[test]
    fn he_initialization_variance() {
        let net = build_network(ArchitectureConfig::default(), &mut SeededRng::from_seed(3)).unwrap();
        for spec in net.layer_specs().iter().filter(|s| s.fan_in() >= 512) {
            let p = net.params().iter().find(|p| p.name == format!("{}.weight", spec.name)).unwrap();
            let var = p.value.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / p.value.len() as f64;
            let expected = 2.0 / spec.fan_in() as f64;
            assert!((var / expected - 1.0).abs() < 0.1, "{}: {var} vs {expected}", spec.name);
        }
    }

    #[test]
    fn shape_contract_and_global_feature() {
        let net = small(true, 4);
        for (h, w) in [(64, 64), (32, 48)] {
            let x = random_tensor([2, 3, h, w], 5).map_values(|v| v.abs().min(1.0));
            let y = net.predict(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|&v| v >= 0.0));
            assert_eq!(net.global_feature(&x).unwrap().unwrap().shape(), [2, 64, 1, 1]);
        }
        assert!(matches!(net.predict(&Tensor::zeros([1, 3, 24, 32])), Err(Error::Input(_))));
        assert!(small(false, 4).global_feature(&Tensor::zeros([1, 3, 16, 16])).unwrap().is_none());
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut net = small(true, 6);
        let x = random_tensor([1, 3, 32, 32], 7).map_values(f32::abs);
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert!(matches!(net.backward(&a), Err(Error::Config(_))));
    }

    #[test]
    fn training_forward_moves_running_statistics() {
        let mut net = small(false, 8);
        let before = net.buffers()[0].value.clone();
        net.forward(&random_tensor([2, 3, 16, 16], 9), Mode::Train).unwrap();
        assert_ne!(net.buffers()[0].value, before);
    }

    // One random entry per tensor keeps this quick; the acceptance suite
    // checks more.
    fn end_to_end_gradients(global: bool) {
        let mut net = small(global, 10);
        let x = random_tensor([2, 3, 32, 32], 11).map_values(|v| 0.5 + 0.25 * v);
        let target = random_tensor([2, 3, 32, 32], 12).map_values(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let r = check_network_gradients(&mut net, &x, |y| crate::training::mse_loss(y, &target), 1, &[1e-3, 3e-4, 1e-4], 13)
            .unwrap();
        assert!(r.checked >= r.tensors_total / 2, "{r:?}");
        assert!(r.rel_error < 1e-2, "{r:?}");
    }

    #[test]
    fn end_to_end_gradients_with_global_branch() {
        end_to_end_gradients(true);
    }

    #[test]
    fn end_to_end_gradients_without_global_branch() {
        end_to_end_gradients(false);
    }

    #[test]
    fn enhance_keeps_dimensions() {
        let net = small(true, 13);
        let img = LdrImage::new(50, 37, (0..50 * 37 * 3).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
        let out = enhance_image(&net, &img).unwrap();
        assert_eq!((out.width, out.height), (50, 37));
        assert_eq!(out, enhance_image(&net, &img).unwrap());
        assert!(matches!(enhance_image(&net, &LdrImage::filled(15, 40, [0; 3])), Err(Error::Input(_))));
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }
}

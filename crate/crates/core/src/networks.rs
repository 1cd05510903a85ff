//! Denoising networks: the dual-encoder direct-mask UNet, the noise-predicting
//! UNet, and the plain segmentation UNet used as a fallback pre-segmenter.
//!
//! All three share one backbone. Each resolution level holds a block of two
//! 3×3 convolutions with instance normalization and LeakyReLU; levels after
//! the first downsample with a stride-2 first convolution, and the decoder
//! upsamples with 2×2 transposed convolutions and concatenates skips. The
//! timestep enters every backbone block additively after its first
//! normalization. For the direct-mask model an auxiliary image encoder with
//! the same level hierarchy runs on the MRI slice and its features are added
//! to the backbone encoder outputs at matching scales.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel hierarchy of the full-resolution encoder.
pub const FULL_HIERARCHY: [usize; 6] = [64, 64, 128, 256, 512, 64];
pub const DEFAULT_TIME_DIM: usize = 256;
pub const DEFAULT_LEAKY_SLOPE: f32 = 0.01;
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Direct `x0` prediction with an auxiliary image encoder.
    #[serde(alias = "spine_seg_diff")]
    SpineSegDiff,
    /// Noise prediction from `[x_t, y]`.
    Iisdm,
    /// Plain supervised segmentation UNet, no diffusion.
    #[serde(alias = "unet_preseg")]
    Unet,
}

impl ModelKind {
    pub fn is_diffusion(self) -> bool {
        !matches!(self, ModelKind::Unet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SpineSegDiff => "spinesegdiff",
            ModelKind::Iisdm => "iisdm",
            ModelKind::Unet => "unet",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spinesegdiff" => Ok(ModelKind::SpineSegDiff),
            "iisdm" => Ok(ModelKind::Iisdm),
            "unet" | "unet_preseg" => Ok(ModelKind::Unet),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Everything needed to rebuild parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ModelKind,
    pub classes: usize,
    pub image_channels: usize,
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub time_dim: usize,
    pub leaky_slope: f32,
    pub norm: String,
}

impl ArchDescriptor {
    pub fn full(kind: ModelKind) -> Self {
        ArchDescriptor {
            kind,
            classes: NUM_CLASSES,
            image_channels: 1,
            channels: FULL_HIERARCHY.to_vec(),
            image_size: 320,
            time_dim: DEFAULT_TIME_DIM,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            norm: "instance".into(),
        }
    }

    /// Desk-scale preset: three levels of [16, 32, 64] channels on 64×64 inputs.
    pub fn small(kind: ModelKind) -> Self {
        ArchDescriptor {
            channels: vec![16, 32, 64],
            image_size: 64,
            ..Self::full(kind)
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channel hierarchy must be non-empty and positive".into()));
        }
        if self.classes < 2 || self.image_channels < 1 {
            return Err(Error::Config("need >= 2 classes and >= 1 image channel".into()));
        }
        let div = 1usize << (self.levels() - 1);
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by {div}",
                self.image_size
            )));
        }
        if self.kind.is_diffusion() && (self.time_dim == 0 || self.time_dim % 2 != 0) {
            return Err(Error::Config("time embedding dimension must be even and positive".into()));
        }
        if self.norm != "instance" {
            return Err(Error::Config(format!("unsupported normalization {:?}", self.norm)));
        }
        Ok(())
    }

    fn backbone_in_channels(&self) -> usize {
        match self.kind {
            ModelKind::Unet => self.image_channels,
            _ => self.classes + self.image_channels,
        }
    }
}

/// Sinusoidal timestep embedding: `D/2` sines followed by `D/2` cosines.
pub fn embed_time(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidRange(format!("time embedding dimension {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Affine {
        Affine {
            w: self.add(format!("{name}.weight"), vec![cout, cin, k, k], Init::He { fan_in: cin * k * k }),
            b: self.add(format!("{name}.bias"), vec![cout], Init::Zeros),
        }
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) -> Affine {
        Affine {
            w: self.add(format!("{name}.weight"), vec![cin, cout, 2, 2], Init::He { fan_in: cin }),
            b: self.add(format!("{name}.bias"), vec![cout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Affine {
        Affine {
            w: self.add(format!("{name}.gamma"), vec![c], Init::Ones),
            b: self.add(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Affine {
        Affine {
            w: self.add(format!("{name}.weight"), vec![dout, din], Init::He { fan_in: din }),
            b: self.add(format!("{name}.bias"), vec![dout], Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize, time_dim: Option<usize>) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            norm1: self.norm(&format!("{name}.norm1"), cout),
            time: time_dim.map(|d| self.linear(&format!("{name}.time"), d, cout)),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            stride,
        }
    }

    fn encoder(&mut self, name: &str, cin: usize, channels: &[usize], time_dim: Option<usize>) -> Vec<Block> {
        let mut prev = cin;
        channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let b = self.block(&format!("{name}.level{i}"), prev, c, stride, time_dim);
                prev = c;
                b
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Affine,
    norm1: Affine,
    time: Option<Affine>,
    conv2: Affine,
    norm2: Affine,
    stride: usize,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Affine,
    block: Block,
}

#[derive(Debug, Clone)]
struct Layout {
    time_mlp: Option<(Affine, Affine)>,
    encoder: Vec<Block>,
    aux_encoder: Option<Vec<Block>>,
    decoder: Vec<UpLevel>,
    head: Affine,
}

impl Layout {
    fn build(desc: &ArchDescriptor) -> (Layout, Vec<ParamSpec>) {
        let mut r = Registry::default();
        let time_dim = desc.kind.is_diffusion().then_some(desc.time_dim);
        let time_mlp = time_dim.map(|d| (r.linear("time.fc1", d, d), r.linear("time.fc2", d, d)));
        let encoder = r.encoder("unet.enc", desc.backbone_in_channels(), &desc.channels, time_dim);
        let aux_encoder = matches!(desc.kind, ModelKind::SpineSegDiff)
            .then(|| r.encoder("image_encoder", desc.image_channels, &desc.channels, None));
        let ch = &desc.channels;
        let decoder = (0..ch.len() - 1)
            .rev()
            .map(|i| UpLevel {
                up: r.upconv(&format!("unet.dec.level{i}.up"), ch[i + 1], ch[i]),
                block: r.block(&format!("unet.dec.level{i}"), 2 * ch[i], ch[i], 1, time_dim),
            })
            .collect();
        let head = r.conv("unet.head", ch[0], desc.classes, 1);
        (
            Layout {
                time_mlp,
                encoder,
                aux_encoder,
                decoder,
                head,
            },
            r.specs,
        )
    }
}

/// Parameters of one network together with the descriptor that shaped them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    descriptor: ArchDescriptor,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ModelParams {
    /// Freshly initialized parameters (He-normal convolutions, unit norms, zero biases).
    pub fn init(descriptor: ArchDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let (layout, specs) = Layout::build(&descriptor);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::He { fan_in } => {
                    Tensor::randn(&spec.shape, &mut rng).scale((2.0 / fan_in as f32).sqrt())
                }
            };
            names.push(spec.name);
            tensors.push(Arc::new(t));
        }
        Ok(ModelParams {
            descriptor,
            layout,
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from stored tensors, checking every shape against the descriptor.
    pub fn from_tensors(descriptor: ArchDescriptor, tensors: Vec<Tensor>) -> Result<Self> {
        descriptor.validate()?;
        let (layout, specs) = Layout::build(&descriptor);
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "descriptor expects {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            descriptor,
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    /// Parameter names and shapes implied by a descriptor, without allocating tensors.
    pub fn describe(descriptor: &ArchDescriptor) -> Vec<(String, Vec<usize>)> {
        Layout::build(descriptor)
            .1
            .into_iter()
            .map(|s| (s.name, s.shape))
            .collect()
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[index])
    }

    fn check_image(&self, shape: &[usize], channels: usize) -> Result<()> {
        let s = self.descriptor.image_size;
        match shape {
            [_, c, h, w] if *c == channels && *h == s && *w == s => Ok(()),
            _ => Err(Error::ShapeMismatch {
                expected: vec![shape.first().copied().unwrap_or(1), channels, s, s],
                got: shape.to_vec(),
            }),
        }
    }

    fn block(&self, g: &mut Graph, p: &[Var], b: &Block, x: Var, temb: Option<Var>) -> Var {
        let slope = self.descriptor.leaky_slope;
        let mut h = g.conv2d(x, p[b.conv1.w], p[b.conv1.b], b.stride, 1);
        h = g.instance_norm(h, p[b.norm1.w], p[b.norm1.b]);
        if let (Some(tp), Some(e)) = (b.time, temb) {
            let proj = g.linear(e, p[tp.w], p[tp.b]);
            h = g.add_channel_bias(h, proj);
        }
        h = g.leaky_relu(h, slope);
        h = g.conv2d(h, p[b.conv2.w], p[b.conv2.b], 1, 1);
        h = g.instance_norm(h, p[b.norm2.w], p[b.norm2.b]);
        g.leaky_relu(h, slope)
    }

    fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t))
            .collect()
    }

    fn time_embedding(&self, g: &mut Graph, p: &[Var], timesteps: &[usize]) -> Result<Option<Var>> {
        let Some((fc1, fc2)) = self.layout.time_mlp else {
            return Ok(None);
        };
        let d = self.descriptor.time_dim;
        let mut data = Vec::with_capacity(timesteps.len() * d);
        for &t in timesteps {
            data.extend(embed_time(t, d)?);
        }
        let e = g.input(Tensor::new(&[timesteps.len(), d], data)?);
        let h = g.linear(e, p[fc1.w], p[fc1.b]);
        let h = g.leaky_relu(h, self.descriptor.leaky_slope);
        Ok(Some(g.linear(h, p[fc2.w], p[fc2.b])))
    }

    fn encode(&self, g: &mut Graph, p: &[Var], blocks: &[Block], x: Var, temb: Option<Var>) -> Vec<Var> {
        let mut feats = Vec::with_capacity(blocks.len());
        let mut h = x;
        for b in blocks {
            h = self.block(g, p, b, h, temb);
            feats.push(h);
        }
        feats
    }

    /// Batched forward pass recorded on `g`.
    ///
    /// `x_t` is `[N, C, H, W]` in mask space (ignored by the plain UNet, pass `None`),
    /// `image` is `[N, 1, H, W]` scaled to [-1, 1]. Returns the `[N, C, H, W]` output
    /// node: `x0` logits, noise estimates, or segmentation logits depending on the kind.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_t: Option<&Tensor>,
        timesteps: &[usize],
        image: &Tensor,
    ) -> Result<Var> {
        let desc = &self.descriptor;
        self.check_image(image.shape(), desc.image_channels)?;
        let n = image.shape()[0];
        let input = match (desc.kind, x_t) {
            (ModelKind::Unet, _) => image.clone(),
            (_, Some(x)) => {
                self.check_image(x.shape(), desc.classes)?;
                if x.shape()[0] != n || timesteps.len() != n {
                    return Err(Error::shape(&[n], &[x.shape()[0], timesteps.len()]));
                }
                Tensor::concat_channels(x, image)?
            }
            (_, None) => return Err(Error::Missing("diffusion models need a noised mask input".into())),
        };
        let p = self.register(g);
        let temb = if desc.kind.is_diffusion() {
            self.time_embedding(g, &p, timesteps)?
        } else {
            None
        };
        let xin = g.input(input);
        let mut skips = Vec::with_capacity(desc.levels());
        let mut h = xin;
        let aux = match &self.layout.aux_encoder {
            Some(blocks) => {
                let yi = g.input(image.clone());
                Some(self.encode(g, &p, blocks, yi, None))
            }
            None => None,
        };
        for (i, b) in self.layout.encoder.iter().enumerate() {
            h = self.block(g, &p, b, h, temb);
            if let Some(aux) = &aux {
                h = g.add(h, aux[i]);
            }
            skips.push(h);
        }
        for (k, lvl) in self.layout.decoder.iter().enumerate() {
            let skip = skips[desc.levels() - 2 - k];
            let up = g.upconv(h, p[lvl.up.w], p[lvl.up.b]);
            let cat = g.concat(up, skip);
            h = self.block(g, &p, &lvl.block, cat, temb);
        }
        Ok(g.conv2d(h, p[self.layout.head.w], p[self.layout.head.b], 1, 0))
    }

    fn single(&self, x_t: Option<&Tensor>, t: usize, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let y4 = batch_of_one(&scale_image(y))?;
        let x4 = x_t.map(batch_of_one).transpose()?;
        let out = self.forward(&mut g, x4.as_ref(), &[t], &y4)?;
        let v = g.value(out).clone();
        let shape = v.shape()[1..].to_vec();
        v.reshape(&shape)
    }

    /// Direct `x0` logits `[C, H, W]` for one slice. `y` is the `[1, H, W]` image in [0, 255].
    pub fn predict_mask(&self, x_t: &Tensor, t: usize, y: &Tensor) -> Result<Tensor> {
        self.expect_kind(ModelKind::SpineSegDiff)?;
        self.single(Some(x_t), t, y)
    }

    /// Noise estimate with the shape of `x_t`.
    pub fn predict_noise(&self, x_t: &Tensor, t: usize, y: &Tensor) -> Result<Tensor> {
        self.expect_kind(ModelKind::Iisdm)?;
        self.single(Some(x_t), t, y)
    }

    /// Segmentation logits of the plain UNet.
    pub fn segment(&self, y: &Tensor) -> Result<Tensor> {
        self.expect_kind(ModelKind::Unet)?;
        self.single(None, 0, y)
    }

    /// Multi-scale features of the auxiliary image encoder, one `[C_l, H/2^l, W/2^l]` map per level.
    pub fn encode_image(&self, y: &Tensor) -> Result<Vec<Tensor>> {
        let blocks = self
            .layout
            .aux_encoder
            .as_ref()
            .ok_or_else(|| Error::Config("this model has no image encoder".into()))?;
        let y4 = batch_of_one(&scale_image(y))?;
        self.check_image(y4.shape(), self.descriptor.image_channels)?;
        let mut g = Graph::inference();
        let p = self.register(&mut g);
        let yi = g.input(y4);
        let feats = self.encode(&mut g, &p, blocks, yi, None);
        feats
            .into_iter()
            .map(|v| {
                let t = g.value(v).clone();
                let shape = t.shape()[1..].to_vec();
                t.reshape(&shape)
            })
            .collect()
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.descriptor.kind != kind {
            return Err(Error::Config(format!(
                "operation needs a {} model, checkpoint holds {}",
                kind.as_str(),
                self.descriptor.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Maps an image in [0, 255] to the network input range [-1, 1].
pub fn scale_image(y: &Tensor) -> Tensor {
    y.map(|v| v / 127.5 - 1.0)
}

fn batch_of_one(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

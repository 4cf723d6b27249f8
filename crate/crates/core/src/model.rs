//! The convolutional autoencoder and its residual-loss training wrapper.
//!
//! Encoder: four `3×3 conv → ReLU → 2×2 max-pool` stages with 32, 64, 128
//! and 256 filters, then a linear `3×3` bottleneck conv to 64 channels.
//! Decoder: four `2×2` stride-2 transposed convs with ReLU (256, 128, 64, 32
//! filters), then a `3×3` stride-1 transposed conv to 3 channels and a
//! sigmoid. Spatial extents shrink by 16 and grow back by 16.
//!
//! During training the wrapper also emits the residual `r = x − d` and the
//! loss is `L = L_r + w·L_i` with `L_r = mse(d, x)` and `L_i = mse(r, 0)`.
//! Inference uses [`encode`] and [`decode`] alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ops, Graph, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;
pub const LATENT_CHANNELS: usize = 64;
/// Spatial reduction between image and latent.
pub const SPATIAL_FACTOR: usize = 16;

pub const ENCODER_FILTERS: [usize; 4] = [32, 64, 128, 256];
pub const DECODER_FILTERS: [usize; 4] = [256, 128, 64, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// conv (stride 1, same padding) → ReLU → 2×2 max-pool
    DownStage,
    /// conv without activation
    Bottleneck,
    /// transposed conv (stride 2) → ReLU
    UpStage,
    /// transposed conv (stride 1, same padding) → sigmoid
    Output,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerDef {
    pub name: &'static str,
    pub half: Half,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerDef {
    #[allow(clippy::too_many_arguments)]
    const fn new(
        name: &'static str,
        half: Half,
        kind: LayerKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerDef {
            name,
            half,
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn is_transposed(&self) -> bool {
        matches!(self.kind, LayerKind::UpStage | LayerKind::Output)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel;
        if self.is_transposed() {
            [self.in_channels, self.out_channels, k, k]
        } else {
            [self.out_channels, self.in_channels, k, k]
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel * self.kernel
    }
}

use Half::{Decoder, Encoder};
use LayerKind::{Bottleneck, DownStage, Output, UpStage};

/// Every layer in canonical order: encoder first, then decoder.
pub const ARCHITECTURE: [LayerDef; 10] = [
    LayerDef::new("encoder.conv1", Encoder, DownStage, 3, 32, 3, 1, 1),
    LayerDef::new("encoder.conv2", Encoder, DownStage, 32, 64, 3, 1, 1),
    LayerDef::new("encoder.conv3", Encoder, DownStage, 64, 128, 3, 1, 1),
    LayerDef::new("encoder.conv4", Encoder, DownStage, 128, 256, 3, 1, 1),
    LayerDef::new("encoder.bottleneck", Encoder, Bottleneck, 256, 64, 3, 1, 1),
    LayerDef::new("decoder.up1", Decoder, UpStage, 64, 256, 2, 2, 0),
    LayerDef::new("decoder.up2", Decoder, UpStage, 256, 128, 2, 2, 0),
    LayerDef::new("decoder.up3", Decoder, UpStage, 128, 64, 2, 2, 0),
    LayerDef::new("decoder.up4", Decoder, UpStage, 64, 32, 2, 2, 0),
    LayerDef::new("decoder.output", Decoder, Output, 32, 3, 3, 1, 1),
];

pub fn layers(half: Half) -> impl Iterator<Item = &'static LayerDef> {
    ARCHITECTURE.iter().filter(move |l| l.half == half)
}

/// Which half of the network owns a parameter, judged by its name prefix.
pub fn half_of(name: &str) -> Option<Half> {
    if name.starts_with("encoder.") {
        Some(Encoder)
    } else if name.starts_with("decoder.") {
        Some(Decoder)
    } else {
        None
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, tensor) in named {
            if names.contains(&name) {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(ModelParams { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn layer(&self, layer: &LayerDef) -> Result<(&Tensor, &Tensor)> {
        let weight = self.get(&layer.weight_name())?;
        let bias = self.get(&layer.bias_name())?;
        if weight.shape() != layer.weight_shape() {
            return Err(Error::dim(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                layer.weight_name(),
                weight.shape(),
                layer.weight_shape()
            )));
        }
        if bias.shape() != [layer.out_channels] {
            return Err(Error::dim(format!(
                "parameter `{}` has shape {:?}, expected [{}]",
                layer.bias_name(),
                bias.shape(),
                layer.out_channels
            )));
        }
        Ok((weight, bias))
    }
}

/// He-uniform (fan-in) weights for ReLU layers and the linear bottleneck,
/// Xavier-uniform for the sigmoid output layer, zero biases.
pub fn init_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::with_capacity(2 * ARCHITECTURE.len());
    for layer in &ARCHITECTURE {
        let bound = match layer.kind {
            Output => (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt(),
            _ => (6.0 / layer.fan_in() as f64).sqrt(),
        } as f32;
        let weight = Tensor::uniform(&layer.weight_shape(), -bound, bound, &mut rng);
        named.push((layer.weight_name(), weight));
        named.push((layer.bias_name(), Tensor::zeros(&[layer.out_channels])));
    }
    ModelParams::from_named(named).expect("architecture names are unique")
}

/// Partitions parameters into the encoder-owned and decoder-owned subsets.
pub fn split_params(params: &ModelParams) -> Result<(ModelParams, ModelParams)> {
    let mut enc = Vec::new();
    let mut dec = Vec::new();
    for (name, t) in params.iter() {
        match half_of(name) {
            Some(Encoder) => enc.push((name.to_string(), t.clone())),
            Some(Decoder) => dec.push((name.to_string(), t.clone())),
            None => {
                return Err(Error::Config(format!(
                    "parameter `{name}` belongs to neither encoder nor decoder"
                )))
            }
        }
    }
    Ok((ModelParams::from_named(enc)?, ModelParams::from_named(dec)?))
}

/// Inverse of [`split_params`]: encoder tensors first, then decoder.
pub fn merge_params(encoder: &ModelParams, decoder: &ModelParams) -> Result<ModelParams> {
    let named = encoder
        .iter()
        .chain(decoder.iter())
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    ModelParams::from_named(named)
}

/// Encoder output: `N×64×(H/16)×(W/16)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    tensor: Tensor,
}

impl LatentCode {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, c, h, w) = tensor.dims4()?;
        if c != LATENT_CHANNELS || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "latent must be N×{LATENT_CHANNELS}×h×w, found {:?}",
                tensor.shape()
            )));
        }
        Ok(LatentCode { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

fn check_image(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::dim(format!(
            "image channel axis (1) must be {IMAGE_CHANNELS}, found {c}"
        )));
    }
    if h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
        return Err(Error::dim(format!(
            "image height and width must be positive multiples of {SPATIAL_FACTOR}, found {h}×{w}"
        )));
    }
    Ok((n, c, h, w))
}

fn apply_layer(layer: &LayerDef, x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let (w, b) = params.layer(layer)?;
    Ok(match layer.kind {
        DownStage => {
            let h = ops::relu(&ops::conv2d_forward(x, w, b, layer.stride, layer.padding)?);
            ops::maxpool2d_forward(&h)?.0
        }
        Bottleneck => ops::conv2d_forward(x, w, b, layer.stride, layer.padding)?,
        UpStage => ops::relu(&ops::conv_transpose2d_forward(x, w, b, layer.stride, layer.padding, 0)?),
        Output => ops::sigmoid(&ops::conv_transpose2d_forward(x, w, b, layer.stride, layer.padding, 0)?),
    })
}

/// Compresses `N×3×H×W` images in `[0, 1]` to latent codes. Needs only the
/// encoder parameters.
pub fn encode(x: &Tensor, params: &ModelParams) -> Result<LatentCode> {
    check_image(x)?;
    let mut h = x.clone();
    for layer in layers(Encoder) {
        h = apply_layer(layer, &h, params)?;
    }
    LatentCode::new(h)
}

/// Reconstructs `N×3×16h×16w` images in `(0, 1)`. Needs only the decoder parameters.
pub fn decode(latent: &LatentCode, params: &ModelParams) -> Result<Tensor> {
    let mut h = latent.tensor.clone();
    for layer in layers(Decoder) {
        h = apply_layer(layer, &h, params)?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainForwardOutput {
    /// `d`
    pub reconstruction: Tensor,
    /// `r = x − d`
    pub residual: Tensor,
}

/// Reconstruction plus residual, both derived from the same `d`.
pub fn forward_train(x: &Tensor, params: &ModelParams) -> Result<TrainForwardOutput> {
    let reconstruction = decode(&encode(x, params)?, params)?;
    let residual = ops::sub(x, &reconstruction)?;
    Ok(TrainForwardOutput {
        reconstruction,
        residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// `L`
    pub total: f32,
    /// `L_r`
    pub reconstruction: f32,
    /// `L_i`
    pub residual: f32,
}

/// `(L, L_r, L_i)` with unit residual weight.
pub fn total_loss(x: &Tensor, out: &TrainForwardOutput) -> Result<LossTerms> {
    weighted_loss(x, out, 1.0)
}

/// `L = L_r + residual_weight·L_i`.
pub fn weighted_loss(x: &Tensor, out: &TrainForwardOutput, residual_weight: f32) -> Result<LossTerms> {
    let reconstruction = ops::mse_loss(&out.reconstruction, x)?;
    let residual = ops::mse_loss(&out.residual, &Tensor::zeros(out.residual.shape()))?;
    Ok(LossTerms {
        total: combine(reconstruction, residual, residual_weight),
        reconstruction,
        residual,
    })
}

fn combine(reconstruction: f32, residual: f32, residual_weight: f32) -> f32 {
    if residual_weight == 0.0 {
        reconstruction
    } else {
        reconstruction + residual_weight * residual
    }
}

/// Loss terms and the gradient of `L` for every parameter, in parameter order.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossTerms,
    pub grads: Vec<Tensor>,
}

/// Records the training forward pass on a tape and differentiates
/// `L = L_r + residual_weight·L_i`. With `residual_weight == 0` the residual
/// branch is left out of the graph.
pub fn loss_and_grads(x: &Tensor, params: &ModelParams, residual_weight: f32) -> Result<StepOutput> {
    check_image(x)?;
    let mut g = Graph::new();
    let param_vars: Vec<Var> = params.tensors().iter().map(|t| g.leaf(t.clone())).collect();
    let lookup = |name: &str| -> Result<Var> {
        params
            .names()
            .iter()
            .position(|n| n == name)
            .map(|i| param_vars[i])
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    };
    let input = g.leaf(x.clone());
    let mut h = input;
    for layer in &ARCHITECTURE {
        params.layer(layer)?;
        let w = lookup(&layer.weight_name())?;
        let b = lookup(&layer.bias_name())?;
        h = match layer.kind {
            DownStage => {
                let c = g.conv2d(h, w, b, layer.stride, layer.padding)?;
                let a = g.relu(c);
                g.maxpool2d(a)?
            }
            Bottleneck => g.conv2d(h, w, b, layer.stride, layer.padding)?,
            UpStage => {
                let c = g.conv_transpose2d(h, w, b, layer.stride, layer.padding, 0)?;
                g.relu(c)
            }
            Output => {
                let c = g.conv_transpose2d(h, w, b, layer.stride, layer.padding, 0)?;
                g.sigmoid(c)
            }
        };
    }
    let d = h;
    let recon = g.mse(d, input)?;
    let residual = g.sub(input, d)?;
    let zeros = g.leaf(Tensor::zeros(x.shape()));
    let res_loss = g.mse(residual, zeros)?;
    let total = if residual_weight == 0.0 {
        recon
    } else {
        let weighted = g.scale(res_loss, residual_weight);
        g.add(recon, weighted)?
    };
    let loss = LossTerms {
        total: g.value(total).item()?,
        reconstruction: g.value(recon).item()?,
        residual: g.value(res_loss).item()?,
    };
    g.backward(total)?;
    let grads = param_vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(StepOutput { loss, grads })
}

/// `(H·W·3) / ((H/16)·(W/16)·64)`; 12 for every valid size.
pub fn element_ratio(height: usize, width: usize) -> Result<f64> {
    check_image(&Tensor::zeros(&[0, IMAGE_CHANNELS, height, width]))?;
    let input = height * width * IMAGE_CHANNELS;
    let latent = (height / SPATIAL_FACTOR) * (width / SPATIAL_FACTOR) * LATENT_CHANNELS;
    Ok(input as f64 / latent as f64)
}

//! The dual-branch encoder and the decoder.
//!
//! ```text
//! image (1ch) ── conv1 ──┬── detail: d1 ─ d2 ─ d3 ─ d4 (dense) ──── 64ch ─┐
//!                        └── semantic: s1 ─ s2 ─ s3 (stride 2) ─ x8 ─ 64ch ┴─ latent 128ch
//! latent ── dec1 ─ dec2 ─ dec3 ─ dec4 ── image (1ch)
//! ```
//!
//! Every convolution is 3x3 with zero padding 1 and is followed by Mish,
//! except the last decoder layer, which is linear.
//!
//! The architecture is written once against [`Forward`], which has an eager
//! implementation for inference and a recording one for training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dbfw::{self, Entry};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionStrategy};
use crate::tensor::{kernels, Graph, Scalar, Shape, Tensor, Var};

/// Spatial dimensions must be multiples of this (three stride-2 layers
/// followed by a x8 upsample).
pub const SPATIAL_MULTIPLE: usize = 8;
pub const LATENT_CHANNELS: usize = 128;
pub const DETAIL_CHANNELS: usize = 64;
const UPSAMPLE_FACTOR: usize = 8;

/// The learned convolutions in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    EncConv1,
    DetailD1,
    DetailD2,
    DetailD3,
    DetailD4,
    SemanticS1,
    SemanticS2,
    SemanticS3,
    DecConv1,
    DecConv2,
    DecConv3,
    DecConv4,
}

impl Layer {
    pub const ALL: [Layer; 12] = [
        Layer::EncConv1,
        Layer::DetailD1,
        Layer::DetailD2,
        Layer::DetailD3,
        Layer::DetailD4,
        Layer::SemanticS1,
        Layer::SemanticS2,
        Layer::SemanticS3,
        Layer::DecConv1,
        Layer::DecConv2,
        Layer::DecConv3,
        Layer::DecConv4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::EncConv1 => "enc.conv1",
            Layer::DetailD1 => "detail.d1",
            Layer::DetailD2 => "detail.d2",
            Layer::DetailD3 => "detail.d3",
            Layer::DetailD4 => "detail.d4",
            Layer::SemanticS1 => "semantic.s1",
            Layer::SemanticS2 => "semantic.s2",
            Layer::SemanticS3 => "semantic.s3",
            Layer::DecConv1 => "dec.conv1",
            Layer::DecConv2 => "dec.conv2",
            Layer::DecConv3 => "dec.conv3",
            Layer::DecConv4 => "dec.conv4",
        }
    }

    /// `(c_in, c_out, stride)`.
    pub fn spec(self) -> (usize, usize, usize) {
        match self {
            Layer::EncConv1 => (1, 32, 1),
            Layer::DetailD1 => (32, 16, 1),
            Layer::DetailD2 => (16, 16, 1),
            Layer::DetailD3 => (32, 16, 1),
            Layer::DetailD4 => (48, 16, 1),
            Layer::SemanticS1 => (32, 64, 2),
            Layer::SemanticS2 => (64, 128, 2),
            Layer::SemanticS3 => (128, 64, 2),
            Layer::DecConv1 => (128, 64, 1),
            Layer::DecConv2 => (64, 32, 1),
            Layer::DecConv3 => (32, 16, 1),
            Layer::DecConv4 => (16, 1, 1),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Kernel, bias and stride of one 3x3 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    /// `(c_out, c_in, 3, 3)`.
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            kernel: Tensor::zeros(Shape::new(c_out, c_in, 3, 3)),
            bias: vec![T::zero(); c_out],
            stride,
        }
    }

    /// Kaiming-uniform kernel (fan-in, gain sqrt 2) and zero bias.
    pub fn kaiming(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (c_in * 9) as f64).sqrt();
        let shape = Shape::new(c_out, c_in, 3, 3);
        let kernel = Tensor::from_fn(shape, |_, _, _, _| {
            T::from_f64_lossy(rng.random_range(-bound..bound))
        });
        Self {
            kernel,
            bias: vec![T::zero(); c_out],
            stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.len()
    }

    pub fn bias_tensor(&self) -> Tensor<T> {
        Tensor::new(Shape::new(1, self.bias.len(), 1, 1), self.bias.clone()).expect("bias shape")
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::conv2d(input, &self.kernel, &self.bias, self.stride)
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            kernel: self.kernel.cast(),
            bias: self
                .bias
                .iter()
                .map(|b| U::from(*b).expect("finite cast"))
                .collect(),
            stride: self.stride,
        }
    }
}

/// All encoder and decoder parameters, one [`ConvParams`] per [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Scalar = f32> {
    layers: Vec<ConvParams<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn zeros() -> Self {
        Self {
            layers: Layer::ALL
                .iter()
                .map(|l| {
                    let (c_in, c_out, stride) = l.spec();
                    ConvParams::zeros(c_in, c_out, stride)
                })
                .collect(),
        }
    }

    /// Seeded Kaiming-uniform initialisation with zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: Layer::ALL
                .iter()
                .map(|l| {
                    let (c_in, c_out, stride) = l.spec();
                    ConvParams::kaiming(c_in, c_out, stride, &mut rng)
                })
                .collect(),
        }
    }

    pub fn layer(&self, layer: Layer) -> &ConvParams<T> {
        &self.layers[layer.index()]
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut ConvParams<T> {
        &mut self.layers[layer.index()]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvParams::param_count).sum()
    }

    /// Every parameter buffer in a fixed order: for each layer, kernel then bias.
    pub fn buffers(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|p| [p.kernel.data(), p.bias.as_slice()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|p| [p.kernel.data_mut(), p.bias.as_mut_slice()])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            layers: self.layers.iter().map(ConvParams::cast).collect(),
        }
    }
}

impl ModelWeights<f32> {
    /// Named entries in layer order: `<layer>.weight` then `<layer>.bias`.
    pub fn to_entries(&self) -> Vec<Entry> {
        Layer::ALL
            .iter()
            .flat_map(|&l| conv_entries(l.name(), self.layer(l)))
            .collect()
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut weights = Self::zeros();
        for l in Layer::ALL {
            let (c_in, c_out, stride) = l.spec();
            *weights.layer_mut(l) = conv_from_entries(entries, l.name(), c_in, c_out, stride)?;
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        dbfw::write_file(path, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(&dbfw::read_file(path)?)
    }
}

pub(crate) fn conv_entries(name: &str, p: &ConvParams<f32>) -> [Entry; 2] {
    let k = p.kernel.shape();
    [
        Entry::new(
            format!("{name}.weight"),
            vec![k.n, k.c, k.h, k.w],
            p.kernel.data().to_vec(),
        ),
        Entry::new(format!("{name}.bias"), vec![p.bias.len()], p.bias.clone()),
    ]
}

/// Reads `<name>.weight` and `<name>.bias`; `expected` is `(c_in, c_out)` when
/// the channel counts are fixed.
pub(crate) fn conv_from_entries(
    entries: &[Entry],
    name: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
) -> Result<ConvParams<f32>> {
    let kernel_name = format!("{name}.weight");
    let bias_name = format!("{name}.bias");
    let kernel = dbfw::find(entries, &kernel_name)?;
    let bias = dbfw::find(entries, &bias_name)?;
    let want = [c_out, c_in, 3, 3];
    if kernel.dims != want {
        return Err(Error::Malformed(format!(
            "{kernel_name} has dims {:?}, expected {want:?}",
            kernel.dims
        )));
    }
    if bias.dims != [c_out] {
        return Err(Error::Malformed(format!(
            "{bias_name} has dims {:?}, expected [{c_out}]",
            bias.dims
        )));
    }
    Ok(ConvParams {
        kernel: Tensor::new(Shape::new(c_out, c_in, 3, 3), kernel.data.clone())?,
        bias: bias.data.clone(),
        stride,
    })
}

// ---------------------------------------------------------------------------
// Architecture

/// Primitive operations the architecture is expressed in.
pub trait Forward<T: Scalar> {
    type Value;

    fn conv(&mut self, layer: Layer, x: &Self::Value) -> Result<Self::Value>;
    fn mish(&mut self, x: &Self::Value) -> Self::Value;
    fn concat(&mut self, xs: &[&Self::Value]) -> Result<Self::Value>;
    fn upsample(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value>;
    fn shape(&self, x: &Self::Value) -> Shape;
}

fn conv_mish<T: Scalar, F: Forward<T>>(f: &mut F, layer: Layer, x: &F::Value) -> Result<F::Value> {
    let y = f.conv(layer, x)?;
    Ok(f.mish(&y))
}

pub fn check_input(shape: Shape) -> Result<()> {
    if shape.c != 1 {
        return Err(Error::invalid(
            "encode",
            format!("expected a single-channel image, got {shape}"),
        ));
    }
    if shape.h == 0
        || shape.w == 0
        || !shape.h.is_multiple_of(SPATIAL_MULTIPLE)
        || !shape.w.is_multiple_of(SPATIAL_MULTIPLE)
    {
        return Err(Error::Divisibility {
            required: SPATIAL_MULTIPLE,
            height: shape.h,
            width: shape.w,
        });
    }
    Ok(())
}

/// Encoder: shared stem, dense detail branch and downsampling semantic branch.
pub fn encode_with<T: Scalar, F: Forward<T>>(f: &mut F, image: &F::Value) -> Result<F::Value> {
    check_input(f.shape(image))?;
    let x0 = conv_mish(f, Layer::EncConv1, image)?;

    // Dense block over the branch's own outputs (16, 32, 48 input channels).
    let x1 = conv_mish(f, Layer::DetailD1, &x0)?;
    let x2 = conv_mish(f, Layer::DetailD2, &x1)?;
    let c12 = f.concat(&[&x1, &x2])?;
    let x3 = conv_mish(f, Layer::DetailD3, &c12)?;
    let c123 = f.concat(&[&x1, &x2, &x3])?;
    let x4 = conv_mish(f, Layer::DetailD4, &c123)?;
    let detail = f.concat(&[&x1, &x2, &x3, &x4])?;

    let s1 = conv_mish(f, Layer::SemanticS1, &x0)?;
    let s2 = conv_mish(f, Layer::SemanticS2, &s1)?;
    let s3 = conv_mish(f, Layer::SemanticS3, &s2)?;
    let semantic = f.upsample(&s3, UPSAMPLE_FACTOR)?;

    f.concat(&[&detail, &semantic])
}

pub fn decode_with<T: Scalar, F: Forward<T>>(f: &mut F, latent: &F::Value) -> Result<F::Value> {
    let s = f.shape(latent);
    if s.c != LATENT_CHANNELS {
        return Err(Error::invalid(
            "decode",
            format!("latent must have {LATENT_CHANNELS} channels, got {s}"),
        ));
    }
    let y = conv_mish(f, Layer::DecConv1, latent)?;
    let y = conv_mish(f, Layer::DecConv2, &y)?;
    let y = conv_mish(f, Layer::DecConv3, &y)?;
    f.conv(Layer::DecConv4, &y)
}

/// One recorded step of an eager forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub op: String,
    pub input: Shape,
    pub output: Shape,
}

/// Direct evaluation on tensors, optionally recording a shape trace.
pub struct Eager<'w, T: Scalar> {
    weights: &'w ModelWeights<T>,
    trace: Option<Vec<TraceRow>>,
}

impl<'w, T: Scalar> Eager<'w, T> {
    pub fn new(weights: &'w ModelWeights<T>) -> Self {
        Self {
            weights,
            trace: None,
        }
    }

    pub fn tracing(weights: &'w ModelWeights<T>) -> Self {
        Self {
            weights,
            trace: Some(Vec::new()),
        }
    }

    pub fn into_trace(self) -> Vec<TraceRow> {
        self.trace.unwrap_or_default()
    }

    fn record(&mut self, op: &str, input: Shape, output: Shape) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRow {
                op: op.to_string(),
                input,
                output,
            });
        }
    }
}

impl<T: Scalar> Forward<T> for Eager<'_, T> {
    type Value = Tensor<T>;

    fn conv(&mut self, layer: Layer, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.weights.layer(layer).forward(x)?;
        self.record(layer.name(), x.shape(), y.shape());
        Ok(y)
    }

    fn mish(&mut self, x: &Tensor<T>) -> Tensor<T> {
        kernels::mish(x)
    }

    fn concat(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        kernels::concat_channels(xs)
    }

    fn upsample(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        let y = kernels::bilinear_upsample(x, factor)?;
        self.record("semantic.upsample", x.shape(), y.shape());
        Ok(y)
    }

    fn shape(&self, x: &Tensor<T>) -> Shape {
        x.shape()
    }
}

/// Model parameters placed in a graph as leaves.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    vars: Vec<(Var, Var)>,
}

impl BoundWeights {
    /// Adds every kernel and bias to `graph`, as trainable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<T: Scalar>(
        graph: &mut Graph<T>,
        weights: &ModelWeights<T>,
        trainable: bool,
    ) -> Self {
        let vars = Layer::ALL
            .iter()
            .map(|&l| {
                let p = weights.layer(l);
                let (k, b) = (p.kernel.clone(), p.bias_tensor());
                if trainable {
                    (graph.leaf(k), graph.leaf(b))
                } else {
                    (graph.constant(k), graph.constant(b))
                }
            })
            .collect();
        Self { vars }
    }

    pub fn layer(&self, layer: Layer) -> (Var, Var) {
        self.vars[layer.index()]
    }

    /// Parameter variables in [`ModelWeights::buffers`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(k, b)| [k, b]).collect()
    }
}

/// Records the forward pass in a graph for training.
pub struct Recorded<'g, T: Scalar> {
    pub graph: &'g mut Graph<T>,
    pub params: &'g BoundWeights,
}

impl<T: Scalar> Forward<T> for Recorded<'_, T> {
    type Value = Var;

    fn conv(&mut self, layer: Layer, x: &Var) -> Result<Var> {
        let (k, b) = self.params.layer(layer);
        self.graph.conv2d(*x, k, b, layer.spec().2)
    }

    fn mish(&mut self, x: &Var) -> Var {
        self.graph.mish(*x)
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let vars: Vec<Var> = xs.iter().map(|v| **v).collect();
        self.graph.concat_channels(&vars)
    }

    fn upsample(&mut self, x: &Var, factor: usize) -> Result<Var> {
        self.graph.bilinear_upsample(*x, factor)
    }

    fn shape(&self, x: &Var) -> Shape {
        self.graph.shape(*x)
    }
}

/// Differentiable `decode(encode(image))`.
pub fn reconstruct_graph<T: Scalar>(
    graph: &mut Graph<T>,
    params: &BoundWeights,
    image: Var,
) -> Result<Var> {
    let mut f = Recorded { graph, params };
    let latent = encode_with(&mut f, &image)?;
    decode_with(&mut f, &latent)
}

// ---------------------------------------------------------------------------
// Inference

/// The 128-channel latent map: channels `0..64` come from the detail branch,
/// `64..128` from the upsampled semantic branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeatures<T: Scalar = f32>(Tensor<T>);

impl<T: Scalar> LatentFeatures<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().c != LATENT_CHANNELS {
            return Err(Error::invalid(
                "latent",
                format!(
                    "expected {LATENT_CHANNELS} channels, got {}",
                    tensor.shape()
                ),
            ));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// `(detail, semantic)` halves.
    pub fn split(&self) -> (Tensor<T>, Tensor<T>) {
        let mut parts = kernels::split_channels(
            &self.0,
            &[DETAIL_CHANNELS, LATENT_CHANNELS - DETAIL_CHANNELS],
        )
        .expect("latent has 128 channels");
        let semantic = parts.pop().expect("two parts");
        (parts.pop().expect("two parts"), semantic)
    }
}

pub fn encode<T: Scalar>(
    image: &Tensor<T>,
    weights: &ModelWeights<T>,
) -> Result<LatentFeatures<T>> {
    LatentFeatures::new(encode_with(&mut Eager::new(weights), image)?)
}

pub fn decode<T: Scalar>(
    latent: &LatentFeatures<T>,
    weights: &ModelWeights<T>,
) -> Result<Tensor<T>> {
    decode_with(&mut Eager::new(weights), latent.tensor())
}

pub fn forward_reconstruct<T: Scalar>(
    image: &Tensor<T>,
    weights: &ModelWeights<T>,
) -> Result<Tensor<T>> {
    decode(&encode(image, weights)?, weights)
}

/// Every convolution and the upsample of a full reconstruction, in order.
pub fn trace_shapes<T: Scalar>(
    image: &Tensor<T>,
    weights: &ModelWeights<T>,
) -> Result<Vec<TraceRow>> {
    let mut f = Eager::tracing(weights);
    let latent = encode_with(&mut f, image)?;
    decode_with(&mut f, &latent)?;
    Ok(f.into_trace())
}

/// Siamese encoding of both sources, feature fusion, then decoding.
pub fn fuse_images<T: Scalar>(
    ir: &Tensor<T>,
    vis: &Tensor<T>,
    weights: &ModelWeights<T>,
    strategy: FusionStrategy,
) -> Result<Tensor<T>> {
    if ir.shape() != vis.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse_images",
            left: ir.shape(),
            right: vis.shape(),
        });
    }
    let f_ir = encode(ir, weights)?;
    let f_vi = encode(vis, weights)?;
    let fused = fusion::fuse(f_ir.tensor(), f_vi.tensor(), strategy)?;
    decode(&LatentFeatures::new(fused)?, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            (((y * 7 + x * 3) % 17) as f32 / 16.0) * 0.8 + 0.1
        })
    }

    #[test]
    fn encode_shapes() {
        let w = ModelWeights::<f32>::init(1);
        let latent = encode(&image(128, 128), &w).unwrap();
        assert_eq!(latent.tensor().shape(), Shape::new(1, 128, 128, 128));
        let (detail, semantic) = latent.split();
        assert_eq!(detail.shape().c, 64);
        assert_eq!(semantic.shape().c, 64);
        let big = encode(&image(256, 256), &w).unwrap();
        assert_eq!(big.tensor().shape(), Shape::new(1, 128, 256, 256));
    }

    #[test]
    fn encode_rejects_indivisible_sizes() {
        let w = ModelWeights::<f32>::init(1);
        let err = encode(&image(100, 100), &w).expect_err("100 is not a multiple of 8");
        assert!(
            matches!(err, Error::Divisibility { required: 8, .. }),
            "{err}"
        );
        assert!(encode(&image(128, 124), &w).is_err());
        assert!(encode(&image(120, 120), &w).is_ok());
    }

    #[test]
    fn decode_shapes_and_zero_case() {
        let zero = ModelWeights::<f32>::zeros();
        let latent = LatentFeatures::new(Tensor::zeros(Shape::new(1, 128, 128, 128))).unwrap();
        let out = decode(&latent, &zero).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 128, 128));
        assert!(out.data().iter().all(|&v| v == 0.0));

        let w = ModelWeights::<f32>::init(3);
        let small = LatentFeatures::new(Tensor::full(Shape::new(1, 128, 64, 64), 0.1)).unwrap();
        assert_eq!(
            decode(&small, &w).unwrap().shape(),
            Shape::new(1, 1, 64, 64)
        );
        assert!(LatentFeatures::new(Tensor::<f32>::zeros(Shape::new(1, 64, 8, 8))).is_err());
    }

    #[test]
    fn eager_and_recorded_paths_agree_bitwise() {
        let w = ModelWeights::<f32>::init(5);
        let x = image(16, 24);
        let eager = forward_reconstruct(&x, &w).unwrap();
        let mut g = Graph::new();
        let params = BoundWeights::bind(&mut g, &w, true);
        let xv = g.constant(x.clone());
        let y = reconstruct_graph(&mut g, &params, xv).unwrap();
        assert_eq!(g.value(y), &eager);
        assert_eq!(eager.shape(), x.shape());
    }

    #[test]
    fn parameter_count_matches_layer_table() {
        let w = ModelWeights::<f32>::zeros();
        assert_eq!(w.param_count(), 281_985);
        assert_eq!(w.buffers().len(), 24);
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(ModelWeights::<f32>::init(7), ModelWeights::<f32>::init(7));
        assert_ne!(ModelWeights::<f32>::init(7), ModelWeights::<f32>::init(8));
        let w = ModelWeights::<f32>::init(7);
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(w
            .layer(Layer::EncConv1)
            .kernel
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
        assert!(w.layer(Layer::EncConv1).bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn entries_round_trip() {
        let w = ModelWeights::<f32>::init(11);
        let back = ModelWeights::from_entries(&w.to_entries()).unwrap();
        assert_eq!(back, w);
        let mut entries = w.to_entries();
        entries.retain(|e| e.name != "dec.conv4.bias");
        assert!(matches!(
            ModelWeights::from_entries(&entries),
            Err(Error::MissingEntry(name)) if name == "dec.conv4.bias"
        ));
    }

    #[test]
    fn channel_fusion_of_identical_inputs_reproduces_reconstruction() {
        let w = ModelWeights::<f32>::init(9);
        let x = image(32, 40);
        let fused = fuse_images(&x, &x, &w, FusionStrategy::Channel).unwrap();
        assert_eq!(fused, forward_reconstruct(&x, &w).unwrap());
        assert!(fuse_images(&x, &image(32, 32), &w, FusionStrategy::Channel).is_err());
        let pair = fuse_images(
            &image(128, 128),
            &image(128, 128),
            &w,
            FusionStrategy::Addition,
        )
        .unwrap();
        assert_eq!(pair.shape(), Shape::new(1, 1, 128, 128));
    }

    #[test]
    fn addition_with_zero_visible_input() {
        let mut w = ModelWeights::<f32>::init(4);
        for l in Layer::ALL {
            w.layer_mut(l).bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let ir = image(16, 16);
        let zeros = Tensor::zeros(ir.shape());
        let f_ir = encode(&ir, &w).unwrap();
        let f_zero = encode(&zeros, &w).unwrap();
        assert!(f_zero.tensor().data().iter().all(|&v| v == 0.0));
        let direct = kernels::add(f_ir.tensor(), f_zero.tensor()).unwrap();
        let expected = decode(&LatentFeatures::new(direct).unwrap(), &w).unwrap();
        assert_eq!(
            fuse_images(&ir, &zeros, &w, FusionStrategy::Addition).unwrap(),
            expected
        );
    }

    #[test]
    fn saved_weights_give_identical_fusion() {
        let w = ModelWeights::<f32>::init(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dbfw");
        w.save(&path).unwrap();
        let back = ModelWeights::load(&path).unwrap();
        let (a, b) = (image(16, 16), image(16, 16).map(|v| 1.0 - v));
        let before = fuse_images(&a, &b, &w, FusionStrategy::Channel).unwrap();
        let after = fuse_images(&a, &b, &back, FusionStrategy::Channel).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn latent_extent_scales_with_input() {
        let w = ModelWeights::<f32>::init(2);
        for (h, wd) in [(8, 16), (24, 8)] {
            let small = encode(&image(h, wd), &w).unwrap();
            let large = encode(&image(2 * h, 2 * wd), &w).unwrap();
            let (s, l) = (small.tensor().shape(), large.tensor().shape());
            assert_eq!((l.h, l.w), (2 * s.h, 2 * s.w));
        }
    }

    #[test]
    fn pixel_loss_gradient_matches_finite_differences() {
        let w = ModelWeights::<f32>::init(21).cast::<f64>();
        let x = image(16, 16).cast::<f64>();
        let target = x.map(|v| 0.9 - 0.5 * v);
        let loss = |w: &ModelWeights<f64>| {
            kernels::mse(&forward_reconstruct(&x, w).unwrap(), &target).unwrap()
        };

        let mut g = Graph::new();
        let params = BoundWeights::bind(&mut g, &w, true);
        let xv = g.constant(x.clone());
        let tv = g.constant(target.clone());
        let y = reconstruct_graph(&mut g, &params, xv).unwrap();
        let l = g.mse(y, tv).unwrap();
        g.backward(l).unwrap();
        let grads: Vec<Vec<f64>> = params
            .vars()
            .iter()
            .map(|&v| g.grad(v).unwrap().data().to_vec())
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let step = 1e-6;
        let mut checked = 0;
        while checked < 10 {
            let b = rng.random_range(0..grads.len());
            let i = rng.random_range(0..grads[b].len());
            let analytic = grads[b][i];
            if analytic.abs() <= 1e-6 {
                continue;
            }
            let mut plus = w.clone();
            plus.buffers_mut()[b][i] += step;
            let mut minus = w.clone();
            minus.buffers_mut()[b][i] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs());
            assert!(
                rel < 1e-3,
                "buffer {b} index {i}: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
    }
}

//! Feedforward ReLU classifiers.
//!
//! A [`Network`] is an ordered list of [`Layer`]s over a fixed image shape.
//! Images use the pixel domain `[0,1]` and are flattened row-major,
//! channel-last: index `(r * W + c) * C + ch`. The same order is used for
//! Dense inputs, Flatten and the lowered [`AffineNetwork`].

mod affine;
mod format;

pub use affine::{AffineNetwork, AffineStage};
pub use format::{LayerFile, ModelFile};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Image dimensions `(height, width, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An image with pixels in `[0,1]`, stored flat in channel-last order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} ({} values)", shape, shape.len()),
                actual: format!("{} values", pixels.len()),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::PixelRange { index, value });
        }
        Ok(Self { shape, pixels })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            pixels: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[self.shape.index(row, col, ch)]
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Flat `[out][in][kh][kw]`.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[inline]
    pub fn kernel(&self, oc: usize, ic: usize, kr: usize, kc: usize) -> f64 {
        self.kernels[((oc * self.in_channels + ic) * self.kernel_h + kr) * self.kernel_w + kc]
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let oh = (input.height + 2 * self.padding - self.kernel_h) / self.stride + 1;
        let ow = (input.width + 2 * self.padding - self.kernel_w) / self.stride + 1;
        Shape::new(oh, ow, self.out_channels)
    }

    /// Visits every `(input index, weight)` pair feeding output unit
    /// `(orow, ocol, oc)`. Taps that fall into the zero padding are skipped.
    pub(crate) fn for_each_tap(
        &self,
        input: Shape,
        orow: usize,
        ocol: usize,
        oc: usize,
        mut f: impl FnMut(usize, f64),
    ) {
        for kr in 0..self.kernel_h {
            let r = (orow * self.stride + kr) as isize - self.padding as isize;
            if r < 0 || r >= input.height as isize {
                continue;
            }
            for kc in 0..self.kernel_w {
                let c = (ocol * self.stride + kc) as isize - self.padding as isize;
                if c < 0 || c >= input.width as isize {
                    continue;
                }
                for ic in 0..self.in_channels {
                    let idx = input.index(r as usize, c as usize, ic);
                    f(idx, self.kernel(oc, ic, kr, kc));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weights` is `out × in`; an image-shaped input is flattened implicitly.
    Dense { weights: Matrix, bias: Vec<f64> },
    Conv2d(Conv2d),
    Relu,
    Flatten,
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ActShape {
    Image(Shape),
    Flat(usize),
}

impl ActShape {
    pub(crate) fn len(self) -> usize {
        match self {
            ActShape::Image(s) => s.len(),
            ActShape::Flat(n) => n,
        }
    }
}

/// A validated feedforward classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Shape,
    layers: Vec<Layer>,
    label_count: usize,
}

impl Network {
    /// Validates layer dimensions, parameter finiteness and the label count.
    pub fn new(input_shape: Shape, layers: Vec<Layer>, label_count: usize) -> Result<Self> {
        if input_shape.is_empty() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                message: format!("empty input shape {input_shape}"),
            });
        }
        if label_count < 2 {
            return Err(Error::ModelSyntax(format!(
                "label_count must be at least 2, got {label_count}"
            )));
        }
        let mut shape = ActShape::Image(input_shape);
        for (i, layer) in layers.iter().enumerate() {
            shape = check_layer(i, layer, shape)?;
        }
        if shape.len() != label_count {
            return Err(Error::DimensionMismatch {
                layer: layers.len().saturating_sub(1),
                message: format!(
                    "final output has {} units but label_count is {label_count}",
                    shape.len()
                ),
            });
        }
        Ok(Self {
            input_shape,
            layers,
            label_count,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// Parses and validates a JSON model document.
    pub fn from_json(source: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(source).map_err(|e| Error::ModelSyntax(e.to_string()))?;
        file.try_into()
    }

    pub fn load(mut source: impl std::io::Read) -> Result<Self> {
        let mut text = String::new();
        source.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile::from(self)).expect("model serialization cannot fail")
    }

    pub fn forward(&self, image: &Image) -> Result<Logits> {
        if image.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.to_string(),
                actual: image.shape().to_string(),
            });
        }
        Ok(Logits(self.forward_flat(image.pixels())))
    }

    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        Ok(self.forward(image)?.prediction())
    }

    /// Evaluates the layers directly on a flat channel-last buffer.
    ///
    /// Panics if `input.len() != self.input_dim()`.
    pub fn forward_flat(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim());
        let mut shape = ActShape::Image(self.input_shape);
        let mut x = input.to_vec();
        for layer in &self.layers {
            match layer {
                Layer::Dense { weights, bias } => {
                    x = weights.affine(&x, bias);
                    shape = ActShape::Flat(x.len());
                }
                Layer::Conv2d(conv) => {
                    let ActShape::Image(ins) = shape else {
                        unreachable!("validated at construction")
                    };
                    let outs = conv.output_shape(ins);
                    let mut y = vec![0.0; outs.len()];
                    for orow in 0..outs.height {
                        for ocol in 0..outs.width {
                            for oc in 0..outs.channels {
                                let mut acc = conv.bias[oc];
                                conv.for_each_tap(ins, orow, ocol, oc, |i, w| acc += w * x[i]);
                                y[outs.index(orow, ocol, oc)] = acc;
                            }
                        }
                    }
                    x = y;
                    shape = ActShape::Image(outs);
                }
                Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
                Layer::Flatten => shape = ActShape::Flat(x.len()),
            }
        }
        x
    }
}

fn check_layer(index: usize, layer: &Layer, shape: ActShape) -> Result<ActShape> {
    let mismatch = |message: String| Error::DimensionMismatch {
        layer: index,
        message,
    };
    match layer {
        Layer::Dense { weights, bias } => {
            if weights.cols() != shape.len() {
                return Err(mismatch(format!(
                    "dense layer expects {} inputs but receives {}",
                    weights.cols(),
                    shape.len()
                )));
            }
            if bias.len() != weights.rows() {
                return Err(mismatch(format!(
                    "dense layer has {} rows but {} biases",
                    weights.rows(),
                    bias.len()
                )));
            }
            if weights.rows() == 0 {
                return Err(mismatch("dense layer has no outputs".into()));
            }
            if !weights.as_slice().iter().chain(bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: index });
            }
            Ok(ActShape::Flat(weights.rows()))
        }
        Layer::Conv2d(conv) => {
            let ActShape::Image(ins) = shape else {
                return Err(mismatch("conv2d layer requires an image-shaped input".into()));
            };
            if conv.stride == 0 {
                return Err(mismatch("conv2d stride must be at least 1".into()));
            }
            if conv.in_channels != ins.channels {
                return Err(mismatch(format!(
                    "conv2d expects {} input channels but receives {}",
                    conv.in_channels, ins.channels
                )));
            }
            if conv.out_channels == 0 || conv.kernel_h == 0 || conv.kernel_w == 0 {
                return Err(mismatch("conv2d has an empty kernel".into()));
            }
            if conv.kernel_h > ins.height + 2 * conv.padding
                || conv.kernel_w > ins.width + 2 * conv.padding
            {
                return Err(mismatch(format!(
                    "conv2d kernel {}x{} exceeds padded input {}x{}",
                    conv.kernel_h,
                    conv.kernel_w,
                    ins.height + 2 * conv.padding,
                    ins.width + 2 * conv.padding
                )));
            }
            if conv.bias.len() != conv.out_channels {
                return Err(mismatch(format!(
                    "conv2d has {} output channels but {} biases",
                    conv.out_channels,
                    conv.bias.len()
                )));
            }
            let expected =
                conv.out_channels * conv.in_channels * conv.kernel_h * conv.kernel_w;
            if conv.kernels.len() != expected {
                return Err(mismatch("conv2d kernel tensor is ragged".into()));
            }
            if !conv.kernels.iter().chain(&conv.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: index });
            }
            Ok(ActShape::Image(conv.output_shape(ins)))
        }
        Layer::Relu => Ok(shape),
        Layer::Flatten => Ok(ActShape::Flat(shape.len())),
    }
}

/// Raw class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

/// Predicted class and its margin over the best other class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub margin: f64,
}

impl Logits {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the maximum logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn prediction(&self) -> Prediction {
        let label = self.argmax();
        Prediction {
            label,
            margin: margin_of(&self.0, label),
        }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `values[target] - max_{j != target} values[j]`.
pub fn margin_of(values: &[f64], target: usize) -> f64 {
    let other = values
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    values[target] - other
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[Vec<f64>], bias: &[f64]) -> Layer {
        Layer::Dense {
            weights: Matrix::from_rows(rows).unwrap(),
            bias: bias.to_vec(),
        }
    }

    #[test]
    fn zero_weights_output_bias() {
        let net = Network::new(
            Shape::new(1, 2, 1),
            vec![dense(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0.1, 0.9])],
            2,
        )
        .unwrap();
        let img = Image::new(Shape::new(1, 2, 1), vec![0.3, 0.7]).unwrap();
        let logits = net.forward(&img).unwrap();
        assert_eq!(logits.values(), &[0.1, 0.9]);
        assert_eq!(logits.argmax(), 1);
        let p = net.predict(&img).unwrap();
        assert_eq!(p.label, 1);
        assert!((p.margin - 0.8).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_relu_net() {
        let net = Network::new(
            Shape::new(1, 2, 1),
            vec![
                dense(&[vec![1.0, -1.0], vec![-1.0, 1.0]], &[0.0, 0.0]),
                Layer::Relu,
                dense(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]),
            ],
            2,
        )
        .unwrap();
        let img = Image::new(Shape::new(1, 2, 1), vec![1.0, 0.0]).unwrap();
        let logits = net.forward(&img).unwrap();
        assert_eq!(logits.values(), &[1.0, 0.0]);
        assert_eq!(logits.argmax(), 0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let l = Logits(vec![0.5, 0.5, 0.5]);
        assert_eq!(l.argmax(), 0);
        let p = l.prediction();
        assert_eq!((p.label, p.margin), (0, 0.0));
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let err = Network::new(
            Shape::new(1, 2, 1),
            vec![
                dense(&vec![vec![1.0, 0.0]; 4], &[0.0; 4]),
                Layer::Relu,
                dense(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], &[0.0, 0.0]),
            ],
            2,
        )
        .unwrap_err();
        match err {
            Error::DimensionMismatch { layer, .. } => assert_eq!(layer, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_weight_rejected() {
        let err = Network::new(
            Shape::new(1, 2, 1),
            vec![dense(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]], &[0.0, 0.0])],
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 0 }));
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let net = Network::new(
            Shape::new(1, 2, 1),
            vec![dense(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0])],
            2,
        )
        .unwrap();
        let img = Image::zeros(Shape::new(2, 1, 1));
        assert!(matches!(net.forward(&img), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(matches!(
            Image::new(Shape::new(1, 2, 1), vec![0.0, 1.5]),
            Err(Error::PixelRange { index: 1, .. })
        ));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = Network::new(
            Shape::new(2, 2, 1),
            vec![
                dense(&vec![vec![0.3, -0.7, 0.11, 0.9]; 3], &[0.1, -0.2, 0.05]),
                Layer::Relu,
                dense(&vec![vec![0.5, -1.0, 0.25]; 2], &[0.0, 0.3]),
            ],
            2,
        )
        .unwrap();
        let img = Image::new(Shape::new(2, 2, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

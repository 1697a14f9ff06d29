//! JSON model file schema. See `model-format.md` at the repository root.

use serde::{Deserialize, Serialize};

use super::{Conv2d, Layer, Network, Shape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    /// `[H, W, C]`.
    pub input_shape: [usize; 3],
    pub label_count: usize,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerFile {
    Dense {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        /// `kernels[out_ch][in_ch][kh][kw]`.
        kernels: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

impl TryFrom<ModelFile> for Network {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        let [h, w, c] = file.input_shape;
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| layer_from_file(i, l))
            .collect::<Result<Vec<_>>>()?;
        Network::new(Shape::new(h, w, c), layers, file.label_count)
    }
}

fn layer_from_file(index: usize, layer: LayerFile) -> Result<Layer> {
    let ragged = |what: &str| Error::DimensionMismatch {
        layer: index,
        message: format!("ragged {what}"),
    };
    Ok(match layer {
        LayerFile::Dense { weights, bias } => {
            let weights = Matrix::from_rows(&weights).ok_or_else(|| ragged("weight rows"))?;
            Layer::Dense { weights, bias }
        }
        LayerFile::Conv2d {
            kernels,
            bias,
            stride,
            padding,
        } => {
            let out_channels = kernels.len();
            let in_channels = kernels.first().map_or(0, Vec::len);
            let kernel_h = kernels.first().and_then(|k| k.first()).map_or(0, Vec::len);
            let kernel_w = kernels
                .first()
                .and_then(|k| k.first())
                .and_then(|k| k.first())
                .map_or(0, Vec::len);
            let mut flat = Vec::with_capacity(out_channels * in_channels * kernel_h * kernel_w);
            for per_out in &kernels {
                if per_out.len() != in_channels {
                    return Err(ragged("kernel input channels"));
                }
                for per_in in per_out {
                    if per_in.len() != kernel_h {
                        return Err(ragged("kernel rows"));
                    }
                    for row in per_in {
                        if row.len() != kernel_w {
                            return Err(ragged("kernel columns"));
                        }
                        flat.extend_from_slice(row);
                    }
                }
            }
            Layer::Conv2d(Conv2d {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                kernels: flat,
                bias,
                stride,
                padding,
            })
        }
        LayerFile::Relu => Layer::Relu,
        LayerFile::Flatten => Layer::Flatten,
    })
}

impl From<&Network> for ModelFile {
    fn from(net: &Network) -> Self {
        let s = net.input_shape();
        let layers = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Dense { weights, bias } => LayerFile::Dense {
                    weights: weights.to_rows(),
                    bias: bias.clone(),
                },
                Layer::Conv2d(conv) => LayerFile::Conv2d {
                    kernels: (0..conv.out_channels)
                        .map(|oc| {
                            (0..conv.in_channels)
                                .map(|ic| {
                                    (0..conv.kernel_h)
                                        .map(|kr| {
                                            (0..conv.kernel_w)
                                                .map(|kc| conv.kernel(oc, ic, kr, kc))
                                                .collect()
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect(),
                    bias: conv.bias.clone(),
                    stride: conv.stride,
                    padding: conv.padding,
                },
                Layer::Relu => LayerFile::Relu,
                Layer::Flatten => LayerFile::Flatten,
            })
            .collect();
        ModelFile {
            input_shape: [s.height, s.width, s.channels],
            label_count: net.label_count(),
            layers,
        }
    }
}

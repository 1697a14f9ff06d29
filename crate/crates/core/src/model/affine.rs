use super::{ActShape, Layer, Network};
use crate::linalg::Matrix;

/// One `relu?(W x + b)` step of a lowered network.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStage {
    pub matrix: Matrix,
    pub bias: Vec<f64>,
    pub relu_after: bool,
}

impl AffineStage {
    pub fn identity(n: usize, relu_after: bool) -> Self {
        Self {
            matrix: Matrix::identity(n),
            bias: vec![0.0; n],
            relu_after,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.affine(x, &self.bias);
        if self.relu_after {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        y
    }
}

/// A network rewritten as a chain of dense affine stages with optional ReLU.
///
/// The last stage never has `relu_after`, so its outputs are the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineNetwork {
    pub input_dim: usize,
    pub stages: Vec<AffineStage>,
}

impl AffineNetwork {
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim);
        let mut x = input.to_vec();
        for stage in &self.stages {
            x = stage.apply(&x);
        }
        x
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(self.input_dim, AffineStage::out_dim)
    }
}

impl Network {
    /// Expands convolutions into explicit matrices and folds ReLUs into the
    /// preceding stage.
    pub fn lower_to_affine(&self) -> AffineNetwork {
        let mut stages: Vec<AffineStage> = Vec::new();
        let mut shape = ActShape::Image(self.input_shape());
        for layer in self.layers() {
            match layer {
                Layer::Dense { weights, bias } => {
                    stages.push(AffineStage {
                        matrix: weights.clone(),
                        bias: bias.clone(),
                        relu_after: false,
                    });
                    shape = ActShape::Flat(weights.rows());
                }
                Layer::Conv2d(conv) => {
                    let ActShape::Image(ins) = shape else {
                        unreachable!("validated at construction")
                    };
                    let outs = conv.output_shape(ins);
                    let mut matrix = Matrix::zeros(outs.len(), ins.len());
                    let mut bias = vec![0.0; outs.len()];
                    for orow in 0..outs.height {
                        for ocol in 0..outs.width {
                            for oc in 0..outs.channels {
                                let row = outs.index(orow, ocol, oc);
                                bias[row] = conv.bias[oc];
                                let dst = matrix.row_mut(row);
                                conv.for_each_tap(ins, orow, ocol, oc, |i, w| dst[i] += w);
                            }
                        }
                    }
                    stages.push(AffineStage {
                        matrix,
                        bias,
                        relu_after: false,
                    });
                    shape = ActShape::Image(outs);
                }
                Layer::Relu => match stages.last_mut() {
                    Some(last) => last.relu_after = true,
                    None => stages.push(AffineStage::identity(shape.len(), true)),
                },
                Layer::Flatten => shape = ActShape::Flat(shape.len()),
            }
        }
        if !matches!(stages.last(), Some(s) if !s.relu_after) {
            stages.push(AffineStage::identity(shape.len(), false));
        }
        AffineNetwork {
            input_dim: self.input_dim(),
            stages,
        }
    }
}

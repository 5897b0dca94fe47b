//! Layer catalogue and sequential composition.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::graph::{Gradients, Graph, Mode, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Zero padding of `kernel / 2` on each side (odd kernels keep the size at stride 1).
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Per-channel temporal convolution over `[n, t, channels]`, always valid padding.
    DepthwiseConv1d {
        channels: usize,
        kernel: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        rate: f64,
    },
    Flatten,
    Upsample2x,
}

impl LayerSpec {
    pub fn conv3x3(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        }
    }

    fn padding_amount(padding: Padding, kernel: usize) -> usize {
        match padding {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        }
    }

    /// Output shape for a given input shape (leading batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| Err(EngineError::shape(what, format!("input shape {input:?}")));
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4 || input[1] != in_ch || stride == 0 {
                    return bad("conv2d");
                }
                let p = Self::padding_amount(padding, kernel);
                if input[2] + 2 * p < kernel || input[3] + 2 * p < kernel {
                    return bad("conv2d");
                }
                Ok(vec![
                    input[0],
                    out_ch,
                    (input[2] + 2 * p - kernel) / stride + 1,
                    (input[3] + 2 * p - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if input.len() != 4 || input[2] < kernel || input[3] < kernel || stride == 0 {
                    return bad("max_pool2d");
                }
                Ok(vec![
                    input[0],
                    input[1],
                    (input[2] - kernel) / stride + 1,
                    (input[3] - kernel) / stride + 1,
                ])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != 2 || input[1] != inputs {
                    return bad("dense");
                }
                Ok(vec![input[0], outputs])
            }
            LayerSpec::DepthwiseConv1d { channels, kernel } => {
                if input.len() != 3 || input[2] != channels || input[1] < kernel {
                    return bad("depthwise_conv1d");
                }
                Ok(vec![input[0], input[1] - kernel + 1, channels])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return bad("flatten");
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::Upsample2x => {
                if input.len() != 4 {
                    return bad("upsample2x");
                }
                Ok(vec![input[0], input[1], input[2] * 2, input[3] * 2])
            }
        }
    }

    /// `(suffix, shape, fan_in)` for every trainable tensor of the layer.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel),
                ("bias", vec![out_ch], 0),
            ],
            LayerSpec::Dense { inputs, outputs } => vec![
                ("weight", vec![outputs, inputs], inputs),
                ("bias", vec![outputs], 0),
            ],
            LayerSpec::DepthwiseConv1d { channels, kernel } => vec![
                ("weight", vec![channels, kernel], kernel),
                ("bias", vec![channels], 0),
            ],
            _ => Vec::new(),
        }
    }
}

/// He-normal weights, zero biases.
pub fn init_layer<R: Rng>(
    name: &str,
    spec: &LayerSpec,
    params: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    for (suffix, shape, fan_in) in spec.param_shapes() {
        let t = if fan_in == 0 {
            Tensor::zeros(&shape)
        } else {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            Tensor::from_fn(&shape, |_| normal.sample(rng))
        };
        params.insert(format!("{name}.{suffix}"), t)?;
    }
    Ok(())
}

/// Applies one catalogue layer on a graph node. Parameters are looked up as
/// `{name}.weight` / `{name}.bias`.
pub fn apply_layer(
    g: &mut Graph,
    params: &ParamStore,
    name: &str,
    spec: &LayerSpec,
    x: NodeId,
) -> Result<NodeId> {
    let rename = |e: EngineError| match e {
        EngineError::Shape { detail, .. } => EngineError::Shape {
            layer: name.to_string(),
            detail,
        },
        EngineError::Numeric { .. } => EngineError::Numeric {
            layer: name.to_string(),
        },
        other => other,
    };
    let wb = |g: &mut Graph| -> Result<(NodeId, NodeId)> {
        Ok((
            g.param(params, &format!("{name}.weight"))?,
            g.param(params, &format!("{name}.bias"))?,
        ))
    };
    match *spec {
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => {
            spec.output_shape(g.value(x).shape()).map_err(rename)?;
            let (w, b) = wb(g)?;
            g.conv2d(x, w, b, stride, LayerSpec::padding_amount(padding, kernel))
        }
        LayerSpec::MaxPool2d { kernel, stride } => g.max_pool2d(x, kernel, stride),
        LayerSpec::Dense { .. } => {
            spec.output_shape(g.value(x).shape()).map_err(rename)?;
            let (w, b) = wb(g)?;
            g.dense(x, w, b)
        }
        LayerSpec::DepthwiseConv1d { .. } => {
            spec.output_shape(g.value(x).shape()).map_err(rename)?;
            let (w, b) = wb(g)?;
            g.depthwise_conv1d(x, w, b)
        }
        LayerSpec::Relu => g.relu(x),
        LayerSpec::Sigmoid => g.sigmoid(x),
        LayerSpec::Dropout { rate } => g.dropout(x, rate),
        LayerSpec::Flatten => g.flatten(x),
        LayerSpec::Upsample2x => g.upsample2x(x),
    }
    .map_err(rename)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

/// A chain of named catalogue layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: impl Into<String>, spec: LayerSpec) -> Self {
        self.layers.push(Layer {
            name: name.into(),
            spec,
        });
        self
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.layers {
            shape = l.spec.output_shape(&shape).map_err(|e| match e {
                EngineError::Shape { detail, .. } => EngineError::Shape {
                    layer: l.name.clone(),
                    detail,
                },
                other => other,
            })?;
        }
        Ok(shape)
    }

    pub fn init_params<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in &self.layers {
            init_layer(&l.name, &l.spec, params, rng)?;
        }
        Ok(())
    }

    pub fn apply(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.layers
            .iter()
            .try_fold(x, |x, l| apply_layer(g, params, &l.name, &l.spec, x))
    }
}

/// A recorded forward pass through a [`Sequential`].
pub struct Forward {
    pub graph: Graph,
    pub input: NodeId,
    pub output: NodeId,
}

impl Forward {
    pub fn output(&self) -> &Tensor {
        self.graph.value(self.output)
    }

    /// Backpropagates `upstream` into `params` and returns the input gradient.
    pub fn backward(&self, upstream: &Tensor, params: &mut ParamStore) -> Result<Tensor> {
        let grads: Gradients = self.graph.backward(self.output, upstream, params)?;
        Ok(grads
            .input(self.input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.graph.value(self.input).shape())))
    }
}

pub fn forward(
    layers: &Sequential,
    params: &ParamStore,
    input: &Tensor,
    mode: Mode,
    seed: u64,
) -> Result<Forward> {
    let mut graph = Graph::new(mode, seed);
    let input = graph.input(input.clone())?;
    let output = layers.apply(&mut graph, params, input)?;
    Ok(Forward {
        graph,
        input,
        output,
    })
}

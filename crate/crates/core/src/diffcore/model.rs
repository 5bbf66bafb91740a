use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::kernels::{Pad2d, PadMode};
use super::{Graph, GraphError, NodeId, Result, Tensor};

/// One layer of a feed-forward classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Input geometry plus the ordered layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-sample input shape `[channels, height, width]`, or `[features]`
    /// for dense-only models.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Small conv net used throughout the desk-scale experiments: two 3x3
    /// convolutions (the second with stride 2) and a dense head.
    pub fn toy_convnet(channels: usize, size: usize, width: usize, classes: usize) -> Self {
        let half = size.div_ceil(2);
        Self {
            input: vec![channels, size, size],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: width,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    pad_mode: PadMode::Zero,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: width,
                    out_channels: width,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    pad_mode: PadMode::Zero,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: width * half * half,
                    outputs: classes,
                },
            ],
        }
    }

    /// Per-sample output shape of every layer, validating the stack.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let err = |message: String| GraphError::Layer {
                index,
                kind: layer.kind().to_string(),
                message,
            };
            cur = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if cur != [inputs] {
                        return Err(err(format!("expects [{inputs}] per sample, got {cur:?}")));
                    }
                    vec![outputs]
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(err(format!("expects [{in_channels}, H, W] per sample, got {cur:?}")));
                    }
                    let oh = super::kernels::conv_out_extent(cur[1] + 2 * padding, kernel, stride);
                    let ow = super::kernels::conv_out_extent(cur[2] + 2 * padding, kernel, stride);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![out_channels, oh, ow],
                        _ => return Err(err(format!("kernel {kernel} does not fit {cur:?}"))),
                    }
                }
                LayerSpec::Relu => cur,
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            out.push(cur.clone());
        }
        match out.last() {
            Some(last) if last.len() == 1 => Ok(out),
            Some(last) => Err(GraphError::Layer {
                index: self.layers.len() - 1,
                kind: self.layers.last().map(|l| l.kind()).unwrap_or("none").into(),
                message: format!("final output must be a logit vector, got {last:?}"),
            }),
            None => Err(GraphError::Shape("architecture has no layers".into())),
        }
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(|s| s[0]).unwrap_or(0))
    }

    /// Parameter names and shapes, in layer order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    out.push((format!("layer{i}.weight"), vec![inputs, outputs]));
                    out.push((format!("layer{i}.bias"), vec![1, outputs]));
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        format!("layer{i}.weight"),
                        vec![out_channels, in_channels, kernel, kernel],
                    ));
                    out.push((format!("layer{i}.bias"), vec![1, out_channels, 1, 1]));
                }
                LayerSpec::Relu | LayerSpec::Flatten => {}
            }
        }
        out
    }
}

/// A classifier: architecture plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: BTreeMap<String, Tensor>,
}

/// Graph nodes bound to a model's parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    nodes: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|(_, id)| *id).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

impl Model {
    /// He-normal weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in arch.param_specs() {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            params.insert(name, Tensor::new(shape, values)?);
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.shapes()?;
        for (name, shape) in arch.param_specs() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(GraphError::Shape(format!(
                        "parameter {name} has shape {:?}, architecture needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(GraphError::UnknownParam(name)),
            }
        }
        if params.len() != arch.param_specs().len() {
            return Err(GraphError::Shape("checkpoint has extra parameters".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes().unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g` as a variable.
    pub fn bind(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            nodes: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), g.variable(t.clone())))
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            nodes: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    /// Logits node `[batch, classes]` for a batched input node
    /// `[batch, ..input]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamNodes, x: NodeId) -> Result<NodeId> {
        let xs = g.shape(x).to_vec();
        if xs.len() != self.arch.input.len() + 1 || xs[1..] != self.arch.input[..] {
            return Err(GraphError::Layer {
                index: 0,
                kind: "input".into(),
                message: format!(
                    "expected [batch, {}], got {xs:?}",
                    self.arch
                        .input
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            });
        }
        let batch = xs[0];
        let mut h = x;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let wrap = |e: GraphError| GraphError::Layer {
                index: i,
                kind: layer.kind().into(),
                message: e.to_string(),
            };
            h = match *layer {
                LayerSpec::Dense { outputs, .. } => {
                    let w = params.get(&format!("layer{i}.weight"))?;
                    let b = params.get(&format!("layer{i}.bias"))?;
                    let y = g.matmul(h, w).map_err(wrap)?;
                    let bb = g.broadcast_to(b, &[batch, outputs]).map_err(wrap)?;
                    g.add(y, bb).map_err(wrap)?
                }
                LayerSpec::Conv2d {
                    stride,
                    padding,
                    pad_mode,
                    ..
                } => {
                    let w = params.get(&format!("layer{i}.weight"))?;
                    let b = params.get(&format!("layer{i}.bias"))?;
                    let p = g.pad2d(h, Pad2d::uniform(padding, pad_mode)).map_err(wrap)?;
                    let y = g.conv2d(p, w, stride).map_err(wrap)?;
                    let ys = g.shape(y).to_vec();
                    let bb = g.broadcast_to(b, &ys).map_err(wrap)?;
                    g.add(y, bb).map_err(wrap)?
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::Flatten => {
                    let n: usize = g.shape(h)[1..].iter().product();
                    g.reshape(h, &[batch, n]).map_err(wrap)?
                }
            };
        }
        Ok(h)
    }

    /// Inference-only logits for a batched input tensor.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xn)?;
        Ok(g.value(out).clone())
    }

    /// Sign pattern of every relu input, used to detect kink crossings in
    /// finite-difference probes.
    pub fn relu_pattern(&self, x: &Tensor) -> Result<Vec<bool>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let xn = g.constant(x.clone());
        let start = g.len();
        self.forward(&mut g, &p, xn)?;
        let mut pattern = Vec::new();
        for i in start..g.len() {
            if let super::Op::Relu(a) = g.node(NodeId(i)).op {
                pattern.extend(g.value(a).values().iter().map(|&v| v > 0.0));
            }
        }
        Ok(pattern)
    }

    /// Sum of squared parameters.
    pub fn squared_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.values().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dense() {
        let arch = Architecture {
            input: vec![2],
            layers: vec![LayerSpec::Dense { inputs: 2, outputs: 2 }],
        };
        let mut params = BTreeMap::new();
        params.insert(
            "layer0.weight".to_string(),
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        params.insert("layer0.bias".to_string(), Tensor::zeros(&[1, 2]));
        let m = Model::from_params(arch, params).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(m.logits(&x).unwrap().values(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_dot_product() {
        let arch = Architecture {
            input: vec![2],
            layers: vec![LayerSpec::Dense { inputs: 2, outputs: 1 }],
        };
        let mut params = BTreeMap::new();
        params.insert(
            "layer0.weight".to_string(),
            Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap(),
        );
        params.insert("layer0.bias".to_string(), Tensor::zeros(&[1, 1]));
        let m = Model::from_params(arch, params).unwrap();
        let x = Tensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap();
        assert_eq!(m.logits(&x).unwrap().values(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let arch = Architecture {
            input: vec![1, 8, 8],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 60, outputs: 3 }],
        };
        match Model::init(arch, 0) {
            Err(GraphError::Layer { index, kind, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(kind, "dense");
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = Model::init(Architecture::toy_convnet(1, 8, 2, 3), 0).unwrap();
        let bad = Tensor::zeros(&[1, 1, 9, 8]);
        let err = m.logits(&bad).unwrap_err();
        assert!(matches!(err, GraphError::Layer { index: 0, .. }), "{err}");
    }

    #[test]
    fn toy_convnet_shapes() {
        let a = Architecture::toy_convnet(1, 32, 4, 10);
        let s = a.shapes().unwrap();
        assert_eq!(s[0], vec![4, 32, 32]);
        assert_eq!(s[2], vec![4, 16, 16]);
        assert_eq!(s.last().unwrap(), &vec![10]);
        let odd = Architecture::toy_convnet(1, 7, 2, 3);
        assert!(odd.shapes().is_ok());
    }
}

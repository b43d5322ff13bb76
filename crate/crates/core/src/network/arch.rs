//! Architecture descriptions and shape propagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::out_extent;

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    /// Square convolution, optionally followed by ReLU.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    /// Two 3x3 convolutions, each followed by ReLU, then a skip-add. The skip
    /// is the identity when shapes are preserved, otherwise a 1x1 convolution
    /// with the block's stride.
    ResidualBlock { out_channels: usize, stride: usize },
    GlobalAvgPool,
    /// Fully connected layer over the flattened input. The last dense layer
    /// produces the logits.
    Dense { out_dim: usize },
    /// Probabilities of the logits. Only valid in the head, after the logits.
    Softmax,
    /// One-hot encoding of the predicted class. Only valid in the head.
    OneHotArgmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::ResidualBlock { .. } => "residual_block",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
            LayerKind::OneHotArgmax => "one_hot_argmax",
        }
    }

    fn is_head(&self) -> bool {
        matches!(self, LayerKind::Softmax | LayerKind::OneHotArgmax)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub layer: LayerKind,
    /// Tap this layer's output as the next checkpoint.
    #[serde(default)]
    pub checkpoint: bool,
}

impl LayerSpec {
    pub fn new(layer: LayerKind) -> Self {
        LayerSpec { layer, checkpoint: false }
    }

    pub fn tapped(layer: LayerKind) -> Self {
        LayerSpec { layer, checkpoint: true }
    }
}

/// Sequential network description. The raw input is always checkpoint 1;
/// tapped layers follow as checkpoints 2, 3, ... in layer order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    /// Input shape, channels first.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// A checkpoint location with its representation shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Checkpoint {
    /// 1-based id.
    pub id: usize,
    /// Layer index the tap follows, `None` for the input.
    pub layer: Option<usize>,
    pub label: String,
    pub shape: Vec<usize>,
}

impl Checkpoint {
    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Result of shape propagation over a spec.
#[derive(Debug, Clone)]
pub struct ShapePlan {
    /// Input shape of each layer.
    pub inputs: Vec<Vec<usize>>,
    /// Output shape of each layer.
    pub outputs: Vec<Vec<usize>>,
    pub checkpoints: Vec<Checkpoint>,
    /// Index of the dense layer that produces the logits.
    pub logits_layer: usize,
    pub classes: usize,
}

impl ArchitectureSpec {
    /// Propagates shapes through every layer, validating the spec.
    pub fn plan(&self) -> Result<ShapePlan> {
        if self.input.contains(&0) {
            return Err(Error::Architecture(format!("input extents must be positive: {:?}", self.input)));
        }
        let mut shape = self.input.to_vec();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut checkpoints = vec![Checkpoint {
            id: 1,
            layer: None,
            label: "input".to_string(),
            shape: shape.clone(),
        }];
        let mut logits: Option<(usize, Vec<usize>)> = None;
        let mut in_head = false;

        for (idx, spec) in self.layers.iter().enumerate() {
            let layer = &spec.layer;
            let fail = |msg: String| Error::Architecture(format!("layer {idx} ({}): {msg}", layer.name()));
            if in_head && !layer.is_head() {
                return Err(fail("only softmax/one_hot_argmax may follow the head".into()));
            }
            inputs.push(shape.clone());
            let out = match *layer {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let [_, h, w] = spatial(&shape).map_err(fail)?;
                    if out_channels == 0 || stride == 0 {
                        return Err(fail("channels and stride must be positive".into()));
                    }
                    let oh = out_extent(h, kernel, stride, pad).map_err(|e| fail(e.to_string()))?;
                    let ow = out_extent(w, kernel, stride, pad).map_err(|e| fail(e.to_string()))?;
                    vec![out_channels, oh, ow]
                }
                LayerKind::ResidualBlock { out_channels, stride } => {
                    let [_, h, w] = spatial(&shape).map_err(fail)?;
                    if out_channels == 0 || stride == 0 {
                        return Err(fail("channels and stride must be positive".into()));
                    }
                    let oh = out_extent(h, 3, stride, 1).map_err(|e| fail(e.to_string()))?;
                    let ow = out_extent(w, 3, stride, 1).map_err(|e| fail(e.to_string()))?;
                    let sh = out_extent(h, 1, stride, 0).map_err(|e| fail(e.to_string()))?;
                    let sw = out_extent(w, 1, stride, 0).map_err(|e| fail(e.to_string()))?;
                    if (sh, sw) != (oh, ow) {
                        return Err(fail("skip path and main path disagree on output size".into()));
                    }
                    vec![out_channels, oh, ow]
                }
                LayerKind::GlobalAvgPool => {
                    let [c, _, _] = spatial(&shape).map_err(fail)?;
                    vec![c]
                }
                LayerKind::Dense { out_dim } => {
                    if out_dim == 0 {
                        return Err(fail("out_dim must be positive".into()));
                    }
                    logits = Some((idx, vec![out_dim]));
                    vec![out_dim]
                }
                LayerKind::Softmax | LayerKind::OneHotArgmax => {
                    let Some((logits_idx, logits_shape)) = &logits else {
                        return Err(fail("head layers need a preceding dense layer".into()));
                    };
                    if !in_head && *logits_idx + 1 != idx {
                        return Err(fail("head layers must directly follow the logits".into()));
                    }
                    in_head = true;
                    logits_shape.clone()
                }
            };
            if spec.checkpoint {
                checkpoints.push(Checkpoint {
                    id: checkpoints.len() + 1,
                    layer: Some(idx),
                    label: layer.name().to_string(),
                    shape: out.clone(),
                });
            }
            outputs.push(out.clone());
            shape = out;
        }

        let Some((logits_layer, logits_shape)) = logits else {
            return Err(Error::Architecture("no dense layer produces logits".into()));
        };
        let trailing_body = self.layers[logits_layer + 1..].iter().any(|l| !l.layer.is_head());
        if trailing_body {
            return Err(Error::Architecture("the last dense layer must produce the logits".into()));
        }
        if logits_shape[0] < 2 {
            return Err(Error::Architecture("at least two classes are required".into()));
        }
        Ok(ShapePlan {
            inputs,
            outputs,
            checkpoints,
            logits_layer,
            classes: logits_shape[0],
        })
    }

    /// Desk-scale residual network with 8 checkpoints: input, stem, two
    /// blocks, pool, logits, softmax, one-hot.
    pub fn small_net() -> Self {
        use LayerKind::*;
        ArchitectureSpec {
            input: [3, 32, 32],
            layers: vec![
                LayerSpec::tapped(Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    relu: true,
                }),
                LayerSpec::tapped(ResidualBlock {
                    out_channels: 32,
                    stride: 2,
                }),
                LayerSpec::tapped(ResidualBlock {
                    out_channels: 64,
                    stride: 2,
                }),
                LayerSpec::tapped(GlobalAvgPool),
                LayerSpec::tapped(Dense { out_dim: 10 }),
                LayerSpec::tapped(Softmax),
                LayerSpec::tapped(OneHotArgmax),
            ],
        }
    }

    /// ResNet-18-style network (four stages of two blocks, no batch
    /// normalization) with 10 checkpoints: input, stem, after each stage,
    /// pool, logits, softmax, one-hot.
    pub fn resnet18() -> Self {
        use LayerKind::*;
        let mut layers = vec![LayerSpec::tapped(Conv {
            out_channels: 64,
            kernel: 3,
            stride: 1,
            pad: 1,
            relu: true,
        })];
        for (channels, stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
            layers.push(LayerSpec::new(ResidualBlock {
                out_channels: channels,
                stride,
            }));
            layers.push(LayerSpec::tapped(ResidualBlock {
                out_channels: channels,
                stride: 1,
            }));
        }
        layers.push(LayerSpec::tapped(GlobalAvgPool));
        layers.push(LayerSpec::tapped(Dense { out_dim: 10 }));
        layers.push(LayerSpec::tapped(Softmax));
        layers.push(LayerSpec::tapped(OneHotArgmax));
        ArchitectureSpec {
            input: [3, 32, 32],
            layers,
        }
    }

    /// Single dense layer over the flattened input.
    pub fn linear(input: [usize; 3], classes: usize) -> Self {
        ArchitectureSpec {
            input,
            layers: vec![LayerSpec::tapped(LayerKind::Dense { out_dim: classes })],
        }
    }
}

fn spatial(shape: &[usize]) -> std::result::Result<[usize; 3], String> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expects a CxHxW input, got {shape:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet18_checkpoint_dimensions() {
        let plan = ArchitectureSpec::resnet18().plan().unwrap();
        let dims: Vec<usize> = plan.checkpoints.iter().map(Checkpoint::dim).collect();
        assert_eq!(dims, [3072, 65536, 65536, 32768, 16384, 8192, 512, 10, 10, 10]);
        assert_eq!(plan.checkpoints[4].shape, [256, 8, 8]);
        assert_eq!(plan.checkpoints[5].shape, [512, 4, 4]);
    }

    #[test]
    fn small_net_checkpoint_shapes() {
        let plan = ArchitectureSpec::small_net().plan().unwrap();
        let shapes: Vec<Vec<usize>> = plan.checkpoints.iter().map(|c| c.shape.clone()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![3, 32, 32],
                vec![16, 32, 32],
                vec![32, 16, 16],
                vec![64, 8, 8],
                vec![64],
                vec![10],
                vec![10],
                vec![10]
            ]
        );
        let ids: Vec<usize> = plan.checkpoints.iter().map(|c| c.id).collect();
        assert_eq!(ids, (1..=8).collect::<Vec<_>>());
        assert_eq!(plan.classes, 10);
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = ArchitectureSpec::small_net();
        spec.layers.swap(4, 5);
        assert!(spec.plan().is_err());

        let spec = ArchitectureSpec {
            input: [3, 32, 32],
            layers: vec![LayerSpec::new(LayerKind::GlobalAvgPool)],
        };
        assert!(spec.plan().is_err());

        let spec = ArchitectureSpec {
            input: [3, 32, 32],
            layers: vec![
                LayerSpec::new(LayerKind::Dense { out_dim: 10 }),
                LayerSpec::new(LayerKind::GlobalAvgPool),
            ],
        };
        assert!(spec.plan().is_err());

        // 5x5 kernel on a 2x2 input
        let spec = ArchitectureSpec {
            input: [3, 2, 2],
            layers: vec![
                LayerSpec::new(LayerKind::Conv {
                    out_channels: 4,
                    kernel: 5,
                    stride: 1,
                    pad: 0,
                    relu: true,
                }),
                LayerSpec::new(LayerKind::Dense { out_dim: 2 }),
            ],
        };
        assert!(spec.plan().is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = ArchitectureSpec::small_net();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ArchitectureSpec>(&text).unwrap(), spec);
    }
}

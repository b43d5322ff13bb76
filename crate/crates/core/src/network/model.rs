//! Parameterized network: initialization, forward pass with checkpoint taps,
//! prediction and gradients.

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::network::arch::{ArchitectureSpec, Checkpoint, LayerKind, ShapePlan};
use crate::ops;
use crate::tensor::Tensor;

/// Scalar objective differentiated with respect to the network input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Softmax cross-entropy against the label.
    CrossEntropy { label: usize },
    /// Untargeted margin `max(Z_y - max_{i != y} Z_i, -kappa)`.
    Margin { label: usize, kappa: f64 },
}

/// Value and input gradient of an [`Objective`].
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub value: f64,
    pub gradient: Tensor,
    pub logits: Tensor,
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    plan_checkpoints: Vec<Checkpoint>,
    classes: usize,
    logits_layer: usize,
    params: Vec<Tensor>,
    /// Parameter index range owned by each layer.
    layout: Vec<Range<usize>>,
    pub seed: u64,
    pub epochs_trained: usize,
}

/// Shapes of the parameter tensors owned by each layer, in storage order.
pub(crate) fn parameter_shapes(spec: &ArchitectureSpec, plan: &ShapePlan) -> Vec<Vec<Vec<usize>>> {
    spec.layers
        .iter()
        .zip(&plan.inputs)
        .map(|(l, input)| match l.layer {
            LayerKind::Conv {
                out_channels, kernel, ..
            } => vec![vec![out_channels, input[0], kernel, kernel], vec![out_channels]],
            LayerKind::ResidualBlock { out_channels, stride } => {
                let mut shapes = vec![
                    vec![out_channels, input[0], 3, 3],
                    vec![out_channels],
                    vec![out_channels, out_channels, 3, 3],
                    vec![out_channels],
                ];
                if stride != 1 || input[0] != out_channels {
                    shapes.push(vec![out_channels, input[0], 1, 1]);
                    shapes.push(vec![out_channels]);
                }
                shapes
            }
            LayerKind::Dense { out_dim } => {
                vec![vec![out_dim, input.iter().product()], vec![out_dim]]
            }
            LayerKind::GlobalAvgPool | LayerKind::Softmax | LayerKind::OneHotArgmax => Vec::new(),
        })
        .collect()
}

/// Nodes recorded for one forward pass.
pub(crate) struct Recorded {
    pub input: NodeId,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
    /// Node per body checkpoint (head checkpoints are derived from logits).
    pub taps: Vec<Option<NodeId>>,
}

impl Model {
    /// Builds a model with He-uniform weights (bound `sqrt(6 / fan_in)`) and
    /// zero biases, drawn from ChaCha8 seeded with `seed`, layer by layer.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let shapes = parameter_shapes(&spec, &plan);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for shape in shapes.iter().flatten() {
            if shape.len() == 1 {
                params.push(Tensor::zeros(shape));
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                params.push(Tensor::from_parts(shape.clone(), data));
            }
        }
        Self::from_parts(spec, params, seed, 0)
    }

    /// Assembles a model from explicit parameters, checking their shapes.
    pub fn from_parts(spec: ArchitectureSpec, params: Vec<Tensor>, seed: u64, epochs_trained: usize) -> Result<Self> {
        let plan = spec.plan()?;
        let shapes = parameter_shapes(&spec, &plan);
        let expected: usize = shapes.iter().map(Vec::len).sum();
        if params.len() != expected {
            return Err(Error::Architecture(format!(
                "architecture needs {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let mut layout = Vec::with_capacity(shapes.len());
        let mut start = 0;
        for layer_shapes in &shapes {
            for (offset, shape) in layer_shapes.iter().enumerate() {
                let got = params[start + offset].shape();
                if got != shape.as_slice() {
                    return Err(Error::Architecture(format!(
                        "parameter {} has shape {got:?}, expected {shape:?}",
                        start + offset
                    )));
                }
            }
            layout.push(start..start + layer_shapes.len());
            start += layer_shapes.len();
        }
        Ok(Model {
            plan_checkpoints: plan.checkpoints,
            classes: plan.classes,
            logits_layer: plan.logits_layer,
            spec,
            params,
            layout,
            seed,
            epochs_trained,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.plan_checkpoints
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.spec.input {
            return Err(Error::shape(
                "forward",
                format!("model expects {:?}, got {:?}", self.spec.input, input.shape()),
            ));
        }
        Ok(())
    }

    /// Records the body of the network (input to logits) on `tape`.
    pub(crate) fn record<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        input: NodeId,
        track_params: bool,
    ) -> Result<Recorded> {
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if track_params {
                    tape.variable_ref(p)
                } else {
                    tape.constant_ref(p)
                }
            })
            .collect();
        let mut taps = Vec::new();
        let mut x = input;
        for (idx, spec) in self.spec.layers[..=self.logits_layer].iter().enumerate() {
            let p = &params[self.layout[idx].clone()];
            x = match spec.layer {
                LayerKind::Conv { stride, pad, relu, .. } => {
                    let y = tape.conv2d(x, p[0], p[1], stride, pad)?;
                    if relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                LayerKind::ResidualBlock { stride, .. } => {
                    let h = tape.conv2d(x, p[0], p[1], stride, 1)?;
                    let h = tape.relu(h);
                    let h = tape.conv2d(h, p[2], p[3], 1, 1)?;
                    let h = tape.relu(h);
                    let skip = if p.len() == 6 {
                        tape.conv2d(x, p[4], p[5], stride, 0)?
                    } else {
                        x
                    };
                    tape.add(h, skip)?
                }
                LayerKind::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerKind::Dense { .. } => tape.dense(x, p[0], p[1])?,
                LayerKind::Softmax | LayerKind::OneHotArgmax => unreachable!("head layers follow the logits"),
            };
            if spec.checkpoint {
                taps.push(Some(x));
            }
        }
        Ok(Recorded {
            input,
            logits: x,
            params,
            taps,
        })
    }

    /// Runs the network, returning the logits and one tensor per checkpoint
    /// (checkpoint 1 is the input itself).
    pub fn forward_with_checkpoints(&self, input: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant_ref(input);
        let rec = self.record(&mut tape, x, false)?;
        let logits = tape.value(rec.logits).clone();
        let mut taps = Vec::with_capacity(self.plan_checkpoints.len());
        taps.push(input.clone());
        let mut body = rec.taps.into_iter();
        for spec in &self.spec.layers {
            if !spec.checkpoint {
                continue;
            }
            let tap = match spec.layer {
                LayerKind::Softmax => ops::softmax(&logits),
                LayerKind::OneHotArgmax => ops::one_hot_argmax(&logits),
                _ => {
                    let id = body.next().flatten().expect("one body tap per body checkpoint");
                    tape.value(id).clone()
                }
            };
            taps.push(tap);
        }
        Ok((logits, taps))
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant_ref(input);
        let rec = self.record(&mut tape, x, false)?;
        Ok(tape.value(rec.logits).clone())
    }

    /// Predicted class: argmax of the logits, lowest index on ties.
    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.logits(input)?.argmax())
    }

    /// Objective value and its gradient with respect to the input.
    pub fn input_gradient(&self, input: &Tensor, objective: Objective) -> Result<InputGradient> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.variable_ref(input);
        let rec = self.record(&mut tape, x, false)?;
        let root = match objective {
            Objective::CrossEntropy { label } => tape.cross_entropy(rec.logits, label)?,
            Objective::Margin { label, kappa } => tape.margin(rec.logits, label, kappa)?,
        };
        let mut grads = tape.backward(root)?;
        Ok(InputGradient {
            value: tape.value(root).item(),
            gradient: grads.take(rec.input).expect("input is a variable"),
            logits: tape.value(rec.logits).clone(),
        })
    }

    /// Cross-entropy loss and its gradient for every parameter tensor.
    pub fn loss_and_param_grads(&self, input: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant_ref(input);
        let rec = self.record(&mut tape, x, true)?;
        let root = tape.cross_entropy(rec.logits, label)?;
        let mut grads = tape.backward(root)?;
        let param_grads = rec
            .params
            .iter()
            .map(|&id| grads.take(id).expect("parameters are variables"))
            .collect();
        Ok((tape.value(root).item(), param_grads))
    }
}

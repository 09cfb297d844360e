//! Main-network architectures evaluated against externally supplied weights.
//!
//! A [`NetworkSpec`] only describes structure. Weights arrive as tape
//! variables (from any posterior sampler) or as a concrete [`WeightSet`], so
//! the same forward pass serves training, evaluation and attacks.

use crate::autograd::{Padding, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    MaxPool2,
    Flatten,
}

/// A layer that owns a kernel and a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightLayer {
    pub kernel_name: String,
    pub bias_name: String,
    pub kernel_shape: Vec<usize>,
    /// Number of kernel entries feeding one output unit or channel.
    pub fan_in: usize,
    /// Output units (dense) or channels (conv).
    pub outputs: usize,
    pub is_conv: bool,
}

impl WeightLayer {
    /// Kernel plus bias size.
    pub fn size(&self) -> usize {
        self.fan_in * self.outputs + self.outputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Per-example input shape, e.g. `[784]` or `[28, 28, 1]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    weight_layers: Vec<WeightLayer>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut weight_layers = Vec::new();
        // Track the running per-example shape to validate extents.
        let mut shape = input_shape.clone();
        for layer in &layers {
            match layer {
                Layer::Dense { inputs, outputs } => {
                    if shape != [*inputs] {
                        return Err(Error::Shape {
                            op: "dense layer input",
                            lhs: shape,
                            rhs: vec![*inputs],
                        });
                    }
                    let i = weight_layers.len();
                    weight_layers.push(WeightLayer {
                        kernel_name: format!("layer{i}.kernel"),
                        bias_name: format!("layer{i}.bias"),
                        kernel_shape: vec![*inputs, *outputs],
                        fan_in: *inputs,
                        outputs: *outputs,
                        is_conv: false,
                    });
                    shape = vec![*outputs];
                }
                Layer::Conv {
                    kernel: (kh, kw),
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                } => {
                    let &[h, w, c] = shape.as_slice() else {
                        return Err(contract(format!("conv layer needs an H×W×C input, got {shape:?}")));
                    };
                    if c != *in_channels || *stride == 0 {
                        return Err(Error::Shape {
                            op: "conv layer input",
                            lhs: shape,
                            rhs: vec![*kh, *kw, *in_channels],
                        });
                    }
                    let out = |len: usize, k: usize| match padding {
                        Padding::Valid if k <= len => Some((len - k) / stride + 1),
                        Padding::Valid => None,
                        Padding::Same => Some(len.div_ceil(*stride)),
                    };
                    let (Some(oh), Some(ow)) = (out(h, *kh), out(w, *kw)) else {
                        return Err(Error::Shape {
                            op: "conv layer (kernel larger than input)",
                            lhs: shape,
                            rhs: vec![*kh, *kw],
                        });
                    };
                    let i = weight_layers.len();
                    weight_layers.push(WeightLayer {
                        kernel_name: format!("layer{i}.kernel"),
                        bias_name: format!("layer{i}.bias"),
                        kernel_shape: vec![*kh, *kw, *in_channels, *out_channels],
                        fan_in: kh * kw * in_channels,
                        outputs: *out_channels,
                        is_conv: true,
                    });
                    shape = vec![oh, ow, *out_channels];
                }
                Layer::Relu => {}
                Layer::MaxPool2 => {
                    let &[h, w, c] = shape.as_slice() else {
                        return Err(contract(format!("max-pool needs an H×W×C input, got {shape:?}")));
                    };
                    if h < 2 || w < 2 {
                        return Err(contract(format!("max-pool input {shape:?} too small")));
                    }
                    shape = vec![h / 2, w / 2, c];
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
            }
        }
        Ok(Self {
            input_shape,
            layers,
            weight_layers,
        })
    }

    pub fn weight_layers(&self) -> &[WeightLayer] {
        &self.weight_layers
    }

    /// Kernel and bias of every weight layer, in layer order.
    pub fn params(&self) -> Vec<ParamSpec> {
        self.weight_layers
            .iter()
            .flat_map(|l| {
                [
                    ParamSpec {
                        name: l.kernel_name.clone(),
                        shape: l.kernel_shape.clone(),
                    },
                    ParamSpec {
                        name: l.bias_name.clone(),
                        shape: vec![l.outputs],
                    },
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.weight_layers.iter().map(WeightLayer::size).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.weight_layers.last().map_or(0, |l| l.outputs)
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Dense layers with ReLU between hidden layers and a linear output.
pub fn build_mlp(extents: &[usize]) -> Result<NetworkSpec> {
    if extents.len() < 2 {
        return Err(contract(format!("an MLP needs at least two extents, got {extents:?}")));
    }
    if extents.contains(&0) {
        return Err(contract("MLP extents must be positive"));
    }
    let mut layers = Vec::new();
    for (i, w) in extents.windows(2).enumerate() {
        if i > 0 {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense {
            inputs: w[0],
            outputs: w[1],
        });
    }
    NetworkSpec::new(vec![extents[0]], layers)
}

/// Caffe-style LeNet for 28×28×1 inputs.
pub fn build_lenet(num_classes: usize) -> Result<NetworkSpec> {
    if num_classes < 2 {
        return Err(contract(format!("LeNet needs at least two classes, got {num_classes}")));
    }
    let conv = |cin, cout| Layer::Conv {
        kernel: (5, 5),
        in_channels: cin,
        out_channels: cout,
        stride: 1,
        padding: Padding::Valid,
    };
    NetworkSpec::new(
        vec![28, 28, 1],
        vec![
            conv(1, 20),
            Layer::Relu,
            Layer::MaxPool2,
            conv(20, 50),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense {
                inputs: 800,
                outputs: 500,
            },
            Layer::Relu,
            Layer::Dense {
                inputs: 500,
                outputs: num_classes,
            },
        ],
    )
}

/// Concrete weights for a [`NetworkSpec`], in the order of [`NetworkSpec::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    entries: Vec<(String, Tensor)>,
}

impl WeightSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    /// Zero-initialized weights matching `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self::new(
            spec.params()
                .into_iter()
                .map(|p| (p.name, Tensor::zeros(p.shape)))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// All weights flattened in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Checks names and shapes against `spec`.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let params = spec.params();
        for p in &params {
            match self.get(&p.name) {
                None => return Err(contract(format!("weight set is missing `{}`", p.name))),
                Some(t) if t.shape() != p.shape.as_slice() => {
                    return Err(contract(format!(
                        "weight `{}` has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.entries.len() != params.len() {
            return Err(contract(format!(
                "weight set has {} tensors, spec needs {}",
                self.entries.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Records these weights as constants on `tape`, in spec order.
    pub fn to_tape(&self, tape: &Tape, spec: &NetworkSpec) -> Result<Vec<Var>> {
        self.validate(spec)?;
        Ok(spec
            .params()
            .iter()
            .map(|p| tape.constant(self.get(&p.name).expect("validated").clone()))
            .collect())
    }

    pub fn from_tape(tape: &Tape, spec: &NetworkSpec, vars: &[Var]) -> Self {
        Self::new(
            spec.params()
                .into_iter()
                .zip(vars)
                .map(|(p, v)| (p.name, tape.value(*v).clone()))
                .collect(),
        )
    }
}

/// Forward pass of `spec` with weights `weights` (spec order) on a batch `input`.
///
/// `input` may be `N × input_numel` or `N × input_shape`; it is reshaped as needed.
pub fn apply_network(tape: &Tape, spec: &NetworkSpec, weights: &[Var], input: Var) -> Result<Var> {
    let params = spec.params();
    if weights.len() != params.len() {
        return Err(contract(format!(
            "network needs {} weight tensors, got {}",
            params.len(),
            weights.len()
        )));
    }
    for (p, w) in params.iter().zip(weights) {
        let shape = tape.shape(*w);
        if shape != p.shape {
            return Err(contract(format!(
                "weight `{}` has shape {:?}, expected {:?}",
                p.name, shape, p.shape
            )));
        }
    }

    let in_shape = tape.shape(input);
    let n = *in_shape.first().ok_or_else(|| contract("network input has no batch axis"))?;
    let per_example: usize = in_shape[1..].iter().product();
    if per_example != spec.input_numel() {
        return Err(Error::Shape {
            op: "network input",
            lhs: in_shape,
            rhs: spec.input_shape.clone(),
        });
    }
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let mut x = if tape.shape(input) == shape {
        input
    } else {
        tape.reshape(input, shape)?
    };

    let mut next = 0;
    for layer in &spec.layers {
        x = match layer {
            Layer::Dense { .. } => {
                let h = tape.matmul(x, weights[next])?;
                let h = tape.add_bias(h, weights[next + 1])?;
                next += 2;
                h
            }
            Layer::Conv { stride, padding, .. } => {
                let h = tape.conv2d(x, weights[next], *stride, *padding)?;
                let h = tape.add_bias(h, weights[next + 1])?;
                next += 2;
                h
            }
            Layer::Relu => tape.relu(x),
            Layer::MaxPool2 => tape.max_pool2(x)?,
            Layer::Flatten => {
                let s = tape.shape(x);
                let rest: usize = s[1..].iter().product();
                tape.reshape(x, vec![s[0], rest])?
            }
        };
    }
    Ok(x)
}

/// Evaluates `spec` on concrete weights without tracking gradients.
pub fn forward(spec: &NetworkSpec, weights: &WeightSet, input: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let w = weights.to_tape(&tape, spec)?;
    let x = tape.constant(input.clone());
    let out = apply_network(&tape, spec, &w, x)?;
    let value = tape.value(out).clone();
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_parameter_counts() {
        let toy = build_mlp(&[1, 50, 1]).unwrap();
        assert_eq!(toy.num_params(), 151);
        assert_eq!(toy.layers.iter().filter(|l| **l == Layer::Relu).count(), 1);
        assert_eq!(toy.weight_layers().len(), 2);
        assert_eq!(build_mlp(&[784, 100, 10]).unwrap().num_params(), 79_510);
        assert!(build_mlp(&[5]).is_err());
        assert!(build_mlp(&[]).is_err());
    }

    #[test]
    fn lenet_shape_and_count() {
        let spec = build_lenet(10).unwrap();
        assert_eq!(spec.num_params(), 431_080);
        assert!(build_lenet(1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = WeightSet::zeros(&spec);
        for (_, t) in w.entries.iter_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.0, 0.05, &mut rng);
        }
        let x = Tensor::randn(vec![2, 784], 0.5, 0.2, &mut rng);
        let out = forward(&spec, &w, &x).unwrap();
        assert_eq!(out.shape(), &[2, 10]);
    }

    #[test]
    fn parameter_names_are_unique() {
        let spec = build_lenet(10).unwrap();
        let names: std::collections::HashSet<_> = spec.params().into_iter().map(|p| p.name).collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn identity_mlp_passes_input_through() {
        let spec = build_mlp(&[3, 3, 3]).unwrap();
        let mut w = WeightSet::zeros(&spec);
        *w.get_mut("layer0.kernel").unwrap() = Tensor::eye(3);
        *w.get_mut("layer1.kernel").unwrap() = Tensor::eye(3);
        let x = Tensor::matrix(2, 3, vec![0.1, 2.0, 3.5, 1.0, 0.0, 4.0]).unwrap();
        assert_eq!(forward(&spec, &w, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = build_mlp(&[4, 8, 10]).unwrap();
        let w = WeightSet::zeros(&spec);
        let x = Tensor::full(vec![3, 4], 0.7);
        let out = forward(&spec, &w, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_weights_are_named() {
        let spec = build_mlp(&[4, 8, 2]).unwrap();
        let mut w = WeightSet::zeros(&spec);
        *w.get_mut("layer1.bias").unwrap() = Tensor::zeros(vec![3]);
        let err = forward(&spec, &w, &Tensor::zeros(vec![1, 4])).unwrap_err();
        assert!(err.to_string().contains("layer1.bias"), "{err}");
        let w = WeightSet::new(vec![]);
        let err = forward(&spec, &w, &Tensor::zeros(vec![1, 4])).unwrap_err();
        assert!(err.to_string().contains("layer0.kernel"), "{err}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = build_mlp(&[5, 7, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut w = WeightSet::zeros(&spec);
        for (_, t) in w.entries.iter_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.0, 0.8, &mut rng);
        }
        let x = Tensor::randn(vec![4, 5], 0.0, 1.0, &mut rng);
        let err = gradient_check(
            |t, v| {
                let wv = w.to_tape(t, &spec)?;
                let logits = apply_network(t, &spec, &wv, v)?;
                t.softmax_cross_entropy(logits, &[0, 2, 1, 1])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn composite_mlp_weight_gradient() {
        let spec = build_mlp(&[3, 6, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::randn(vec![5, 3], 0.0, 1.0, &mut rng);
        let k0 = Tensor::randn(vec![3, 6], 0.0, 0.9, &mut rng);
        let rest: Vec<Tensor> = spec.params()[1..]
            .iter()
            .map(|p| Tensor::randn(p.shape.clone(), 0.0, 0.9, &mut rng))
            .collect();
        let err = gradient_check(
            |t, v| {
                let mut ws = vec![v];
                ws.extend(rest.iter().map(|r| t.constant(r.clone())));
                let xv = t.constant(x.clone());
                let logits = apply_network(t, &spec, &ws, xv)?;
                t.softmax_cross_entropy(logits, &[0, 1, 2, 3, 0])
            },
            &k0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

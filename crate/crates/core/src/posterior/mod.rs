//! Variational posterior families over the weights of a [`NetworkSpec`].
//!
//! Every family owns a flat list of learnable tensors ([`Parameters`]) and a
//! sampling rule that turns those tensors, recorded on a tape, into weight
//! sets. Training differentiates through the sampling rule; evaluation uses
//! the same rule on constants.

mod baselines;
mod hypernet;

pub use baselines::{reparam_sample, softplus, DropoutPosterior, FactorizedGaussianPosterior, PointPosterior};
pub use hypernet::{make_noise, Architecture, HypernetConfig, HypernetPosterior, NoiseAssignment, NoiseMode};

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::nets::{NetworkSpec, WeightSet};
use crate::tensor::Tensor;

/// Named learnable tensors of a posterior.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a differentiable leaf.
    pub fn register<'a>(&'a self, tape: &Tape<'a>) -> Vec<Var> {
        self.values.iter().map(|v| tape.param_ref(v)).collect()
    }

    pub fn register_constants<'a>(&'a self, tape: &Tape<'a>) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant_ref(v)).collect()
    }
}

/// Weights of one sample, recorded on a tape in [`NetworkSpec::params`] order.
pub type TapeWeights = Vec<Var>;

#[derive(Clone, Debug, PartialEq)]
pub enum Posterior {
    Hypernet(HypernetPosterior),
    Gaussian(FactorizedGaussianPosterior),
    Dropout(DropoutPosterior),
    Point(PointPosterior),
    Ensemble(Vec<PointPosterior>),
}

impl Posterior {
    pub fn spec(&self) -> &NetworkSpec {
        match self {
            Posterior::Hypernet(p) => p.spec(),
            Posterior::Gaussian(p) => p.spec(),
            Posterior::Dropout(p) => p.spec(),
            Posterior::Point(p) => p.spec(),
            Posterior::Ensemble(members) => members[0].spec(),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Posterior::Hypernet(_) => "hypernet",
            Posterior::Gaussian(_) => "factorized_gaussian",
            Posterior::Dropout(_) => "dropout",
            Posterior::Point(_) => "point",
            Posterior::Ensemble(_) => "ensemble",
        }
    }

    /// All learnable tensors; ensemble members are prefixed with `member{i}.`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn single(p: &Parameters) -> Vec<(String, &Tensor)> {
            p.iter().map(|(n, t)| (n.to_string(), t)).collect()
        }
        match self {
            Posterior::Hypernet(p) => single(p.parameters()),
            Posterior::Gaussian(p) => single(p.parameters()),
            Posterior::Dropout(p) => single(p.parameters()),
            Posterior::Point(p) => single(p.parameters()),
            Posterior::Ensemble(members) => members
                .iter()
                .enumerate()
                .flat_map(|(i, m)| m.parameters().iter().map(move |(n, t)| (format!("member{i}.{n}"), t)))
                .collect(),
        }
    }

    /// Mutable access in the same order as [`Posterior::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Posterior::Hypernet(p) => p.parameters_mut().values_mut().iter_mut().collect(),
            Posterior::Gaussian(p) => p.parameters_mut().values_mut().iter_mut().collect(),
            Posterior::Dropout(p) => p.parameters_mut().values_mut().iter_mut().collect(),
            Posterior::Point(p) => p.parameters_mut().values_mut().iter_mut().collect(),
            Posterior::Ensemble(members) => members
                .iter_mut()
                .flat_map(|m| m.parameters_mut().values_mut().iter_mut())
                .collect(),
        }
    }

    /// Parameters of a single-member family. Ensembles have none of their own.
    pub fn parameters(&self) -> Option<&Parameters> {
        match self {
            Posterior::Hypernet(p) => Some(p.parameters()),
            Posterior::Gaussian(p) => Some(p.parameters()),
            Posterior::Dropout(p) => Some(p.parameters()),
            Posterior::Point(p) => Some(p.parameters()),
            Posterior::Ensemble(_) => None,
        }
    }

    pub fn parameters_mut(&mut self) -> Option<&mut Parameters> {
        match self {
            Posterior::Hypernet(p) => Some(p.parameters_mut()),
            Posterior::Gaussian(p) => Some(p.parameters_mut()),
            Posterior::Dropout(p) => Some(p.parameters_mut()),
            Posterior::Point(p) => Some(p.parameters_mut()),
            Posterior::Ensemble(_) => None,
        }
    }

    /// Draws `count` weight sets on `tape` from parameters previously registered there.
    pub fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &[Var],
        rng: &mut R,
        count: usize,
    ) -> Result<Vec<TapeWeights>> {
        if count == 0 {
            return Err(contract("sample count must be at least 1"));
        }
        match self {
            Posterior::Hypernet(p) => p.sample_on_tape(tape, params, rng, count),
            Posterior::Gaussian(p) => p.sample_on_tape(tape, params, rng, count),
            Posterior::Dropout(p) => p.sample_on_tape(tape, params, rng, count),
            Posterior::Point(_) => Ok(vec![params.to_vec(); count]),
            Posterior::Ensemble(_) => Err(contract(
                "ensembles are sampled member by member; register a member instead",
            )),
        }
    }

    /// Draws `count` concrete weight sets. Ensembles cycle through their members.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<WeightSet>> {
        if count == 0 {
            return Err(contract("sample count must be at least 1"));
        }
        if let Posterior::Ensemble(members) = self {
            return Ok((0..count)
                .map(|i| members[i % members.len()].weights())
                .collect());
        }
        let params = self.parameters().expect("single-member family");
        let spec = self.spec();
        let mut out = Vec::with_capacity(count);
        // One tape per sample keeps peak memory flat for large hypernets.
        for _ in 0..count {
            let tape = Tape::new();
            let vars = params.register_constants(&tape);
            let sample = self.sample_on_tape(&tape, &vars, rng, 1)?;
            out.push(WeightSet::from_tape(&tape, spec, &sample[0]));
        }
        Ok(out)
    }
}

/// He-style initialization of a weight set.
pub(crate) fn init_weights<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> WeightSet {
    let mut entries = Vec::new();
    for layer in spec.weight_layers() {
        let std = (2.0 / layer.fan_in as f64).sqrt();
        entries.push((
            layer.kernel_name.clone(),
            Tensor::randn(layer.kernel_shape.clone(), 0.0, std, rng),
        ));
        entries.push((layer.bias_name.clone(), Tensor::zeros(vec![layer.outputs])));
    }
    WeightSet::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_lenet, build_mlp};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn families(spec: &NetworkSpec, seed: u64) -> Vec<Posterior> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![
            Posterior::Point(PointPosterior::new(spec.clone(), &mut rng)),
            Posterior::Gaussian(FactorizedGaussianPosterior::new(spec.clone(), &mut rng)),
            Posterior::Dropout(DropoutPosterior::new(spec.clone(), 0.5, &mut rng).unwrap()),
        ];
        for arch in [Architecture::Single, Architecture::LayerWise, Architecture::SlicedLayerWise] {
            for mode in [NoiseMode::Shared, NoiseMode::Independent] {
                let cfg = HypernetConfig {
                    architecture: arch,
                    hidden: vec![8, 6],
                    noise_dim: 2,
                    noise_mode: mode,
                };
                out.push(Posterior::Hypernet(HypernetPosterior::new(spec.clone(), cfg, &mut rng).unwrap()));
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn samples_always_match_the_spec(
            extents in prop::collection::vec(1usize..6, 2..5),
            seed in 0u64..1000,
        ) {
            let spec = build_mlp(&extents).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for post in families(&spec, seed) {
                for w in post.sample_weights(&mut rng, 2).unwrap() {
                    prop_assert!(w.validate(&spec).is_ok(), "{}", post.family_name());
                }
            }
        }
    }

    #[test]
    fn conv_specs_sample_valid_weights() {
        let spec = NetworkSpec::new(
            vec![6, 6, 1],
            vec![
                crate::nets::Layer::Conv {
                    kernel: (3, 3),
                    in_channels: 1,
                    out_channels: 2,
                    stride: 1,
                    padding: crate::autograd::Padding::Valid,
                },
                crate::nets::Layer::Relu,
                crate::nets::Layer::MaxPool2,
                crate::nets::Layer::Flatten,
                crate::nets::Layer::Dense { inputs: 8, outputs: 3 },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for post in families(&spec, 4) {
            let w = post.sample_weights(&mut rng, 1).unwrap();
            w[0].validate(&spec).unwrap();
        }
        assert_eq!(build_lenet(10).unwrap().weight_layers().len(), 4);
    }

    #[test]
    fn point_samples_repeat_the_weights() {
        let spec = build_mlp(&[2, 3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Posterior::Point(PointPosterior::new(spec, &mut rng));
        let s = p.sample_weights(&mut rng, 3).unwrap();
        assert_eq!(s[0], s[1]);
        assert_eq!(s[1], s[2]);
    }

    #[test]
    fn zero_count_is_rejected() {
        let spec = build_mlp(&[2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Posterior::Point(PointPosterior::new(spec, &mut rng));
        assert!(p.sample_weights(&mut rng, 0).is_err());
    }
}

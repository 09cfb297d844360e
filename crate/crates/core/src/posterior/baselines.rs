use rand::Rng;

use super::{init_weights, Parameters, TapeWeights};
use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::nets::{NetworkSpec, WeightSet};
use crate::tensor::Tensor;

/// Overflow-safe `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Reparametrized Gaussian draw `mu + softplus(rho) * eps`.
pub fn reparam_sample(mu: f64, rho: f64, eps: f64) -> f64 {
    mu + softplus(rho) * eps
}

/// Initial `rho` of a fresh factorized Gaussian; `softplus(-3) ≈ 0.049`.
pub const INITIAL_RHO: f64 = -3.0;

/// Fully factorized Gaussian over every weight, `sigma = softplus(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedGaussianPosterior {
    spec: NetworkSpec,
    params: Parameters,
}

impl FactorizedGaussianPosterior {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let mu = init_weights(&spec, rng);
        Self::from_mean(spec, &mu, INITIAL_RHO)
    }

    pub fn from_mean(spec: NetworkSpec, mu: &WeightSet, rho: f64) -> Self {
        let mut params = Parameters::new();
        for (name, t) in mu.entries() {
            params.push(format!("{name}.mu"), t.clone());
            params.push(format!("{name}.rho"), Tensor::full(t.shape().to_vec(), rho));
        }
        Self { spec, params }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Means of every weight coordinate, flattened in parameter order.
    pub fn means(&self) -> Vec<f64> {
        self.params.values().iter().step_by(2).flat_map(|t| t.data().to_vec()).collect()
    }

    /// Standard deviations of every weight coordinate, flattened in parameter order.
    pub fn sigmas(&self) -> Vec<f64> {
        self.params
            .values()
            .iter()
            .skip(1)
            .step_by(2)
            .flat_map(|t| t.data().iter().map(|&r| softplus(r)).collect::<Vec<_>>())
            .collect()
    }

    /// Weights `mu + softplus(rho) * eps` for explicit noise, one tensor per weight.
    pub fn sample_with_noise(&self, tape: &Tape, params: &[Var], eps: &[Tensor]) -> Result<TapeWeights> {
        if eps.len() * 2 != params.len() {
            return Err(contract(format!(
                "expected {} noise tensors, got {}",
                params.len() / 2,
                eps.len()
            )));
        }
        params
            .chunks(2)
            .zip(eps)
            .map(|(pair, e)| {
                let sigma = tape.softplus(pair[1]);
                let e = tape.constant(e.clone());
                let scaled = tape.mul(sigma, e)?;
                tape.add(pair[0], scaled)
            })
            .collect()
    }

    pub(crate) fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &[Var],
        rng: &mut R,
        count: usize,
    ) -> Result<Vec<TapeWeights>> {
        let sigmas: Vec<Var> = params.chunks(2).map(|pair| tape.softplus(pair[1])).collect();
        (0..count)
            .map(|_| {
                params
                    .chunks(2)
                    .zip(&sigmas)
                    .map(|(pair, &sigma)| {
                        let eps = Tensor::randn(tape.shape(pair[0]), 0.0, 1.0, rng);
                        let e = tape.constant(eps);
                        let scaled = tape.mul(sigma, e)?;
                        tape.add(pair[0], scaled)
                    })
                    .collect()
            })
            .collect()
    }

    /// Closed-form `KL(q || N(0, 1))` summed over all weights, on the tape.
    pub fn analytical_kl(&self, tape: &Tape, params: &[Var]) -> Result<Var> {
        let mut terms = Vec::with_capacity(params.len() / 2);
        for pair in params.chunks(2) {
            let sigma = tape.softplus(pair[1]);
            let log_sigma = tape.log(sigma)?;
            let var = tape.square(sigma);
            let mu2 = tape.square(pair[0]);
            let quad = tape.add(var, mu2)?;
            let half = tape.scale(quad, 0.5);
            let kl = tape.sub(half, log_sigma)?;
            let kl = tape.add_scalar(kl, -0.5);
            terms.push(tape.sum(kl));
        }
        let flat = tape.concat(&terms);
        Ok(tape.sum(flat))
    }
}

/// Point weights with inverted dropout applied at sampling time.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutPosterior {
    spec: NetworkSpec,
    rate: f64,
    params: Parameters,
}

impl DropoutPosterior {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rate: f64, rng: &mut R) -> Result<Self> {
        let w = init_weights(&spec, rng);
        Self::from_weights(spec, &w, rate)
    }

    pub fn from_weights(spec: NetworkSpec, weights: &WeightSet, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        weights.validate(&spec)?;
        let mut params = Parameters::new();
        for (n, t) in weights.entries() {
            params.push(n.clone(), t.clone());
        }
        Ok(Self { spec, rate, params })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub(crate) fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &[Var],
        rng: &mut R,
        count: usize,
    ) -> Result<Vec<TapeWeights>> {
        if self.rate == 0.0 {
            return Ok(vec![params.to_vec(); count]);
        }
        let keep_scale = 1.0 / (1.0 - self.rate);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut sample = Vec::with_capacity(params.len());
            for (layer, pair) in self.spec.weight_layers().iter().zip(params.chunks(2)) {
                let kernel_len = layer.fan_in * layer.outputs;
                if layer.is_conv {
                    // Whole output channels survive or vanish together.
                    let keep: Vec<f64> = (0..layer.outputs)
                        .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep_scale })
                        .collect();
                    let kmask: Vec<f64> = (0..kernel_len).map(|i| keep[i % layer.outputs]).collect();
                    let kmask = tape.constant(Tensor::new(layer.kernel_shape.clone(), kmask)?);
                    let bmask = tape.constant(Tensor::vector(keep));
                    sample.push(tape.mul(pair[0], kmask)?);
                    sample.push(tape.mul(pair[1], bmask)?);
                } else {
                    // Dropping input unit i zeroes row i of the kernel.
                    let keep: Vec<f64> = (0..layer.fan_in)
                        .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep_scale })
                        .collect();
                    let kmask: Vec<f64> = (0..kernel_len).map(|i| keep[i / layer.outputs]).collect();
                    let kmask = tape.constant(Tensor::new(layer.kernel_shape.clone(), kmask)?);
                    sample.push(tape.mul(pair[0], kmask)?);
                    sample.push(pair[1]);
                }
            }
            out.push(sample);
        }
        Ok(out)
    }
}

/// A single point estimate; sampling returns it verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPosterior {
    spec: NetworkSpec,
    params: Parameters,
}

impl PointPosterior {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let w = init_weights(&spec, rng);
        Self::from_weights(spec, &w)
    }

    pub fn from_weights(spec: NetworkSpec, weights: &WeightSet) -> Self {
        let mut params = Parameters::new();
        for (n, t) in weights.entries() {
            params.push(n.clone(), t.clone());
        }
        Self { spec, params }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn weights(&self) -> WeightSet {
        WeightSet::new(
            self.params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_mlp;
    use crate::posterior::Posterior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reparam_fixtures() {
        assert_eq!(reparam_sample(2.0, 17.3, 0.0), 2.0);
        assert!((reparam_sample(0.0, 0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);

        let tape = Tape::new();
        let rho = tape.param(Tensor::scalar(0.0));
        let mu = tape.constant(Tensor::scalar(0.0));
        let spec = build_mlp(&[1, 1]).unwrap();
        let q = FactorizedGaussianPosterior::from_mean(spec.clone(), &WeightSet::zeros(&spec), 0.0);
        // Single kernel weight: d w / d rho at (0, 0, 1) = sigmoid(0).
        let bias_rho = tape.constant(Tensor::vector(vec![0.0]));
        let bias_mu = tape.constant(Tensor::vector(vec![0.0]));
        let k_mu = tape.reshape(mu, vec![1, 1]).unwrap();
        let k_rho = tape.reshape(rho, vec![1, 1]).unwrap();
        let eps = [Tensor::full(vec![1, 1], 1.0), Tensor::vector(vec![0.0])];
        let w = q.sample_with_noise(&tape, &[k_mu, k_rho, bias_mu, bias_rho], &eps).unwrap();
        let g = tape.backward(tape.sum(w[0])).unwrap();
        assert!((g.wrt(rho).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_returns_the_means() {
        let spec = build_mlp(&[3, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = FactorizedGaussianPosterior::new(spec.clone(), &mut rng);
        let tape = Tape::new();
        let vars = q.parameters().register_constants(&tape);
        let eps: Vec<Tensor> = spec.params().into_iter().map(|p| Tensor::zeros(p.shape)).collect();
        let w = q.sample_with_noise(&tape, &vars, &eps).unwrap();
        let ws = WeightSet::from_tape(&tape, &spec, &w);
        let means: Vec<f64> = ws.flatten();
        assert_eq!(means, q.means());
    }

    #[test]
    fn gaussian_moments_over_many_draws() {
        let spec = build_mlp(&[1, 1]).unwrap();
        let mu = WeightSet::new(vec![
            ("layer0.kernel".into(), Tensor::full(vec![1, 1], 0.7)),
            ("layer0.bias".into(), Tensor::vector(vec![0.0])),
        ]);
        let q = FactorizedGaussianPosterior::from_mean(spec, &mu, 0.3);
        let sigma = softplus(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::new();
        let vars = q.parameters().register_constants(&tape);
        let n = 100_000;
        let samples = q.sample_on_tape(&tape, &vars, &mut rng, n).unwrap();
        let xs: Vec<f64> = samples.iter().map(|s| tape.item(s[0])).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 0.7).abs() < 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!((std / sigma - 1.0).abs() < 0.03, "std {std} vs {sigma}");
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_rate_is_validated() {
        let spec = build_mlp(&[3, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DropoutPosterior::new(spec.clone(), 0.0, &mut rng).unwrap();
        let point: WeightSet = WeightSet::new(
            d.parameters().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        );
        let s = Posterior::Dropout(d).sample_weights(&mut rng, 2).unwrap();
        assert_eq!(s[0], point);
        assert!(DropoutPosterior::new(spec.clone(), 1.0, &mut rng).is_err());
        assert!(DropoutPosterior::new(spec, -0.1, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let spec = build_mlp(&[2, 2]).unwrap();
        let w = WeightSet::new(vec![
            ("layer0.kernel".into(), Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap()),
            ("layer0.bias".into(), Tensor::vector(vec![0.1, 0.2])),
        ]);
        let d = DropoutPosterior::from_weights(spec, &w, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let vars = d.parameters().register_constants(&tape);
        let n = 100_000;
        let samples = d.sample_on_tape(&tape, &vars, &mut rng, n).unwrap();
        let mut sums = [0.0; 4];
        for s in &samples {
            for (acc, v) in sums.iter_mut().zip(tape.value(s[0]).data()) {
                *acc += v;
            }
        }
        for (i, &target) in [1.0, -2.0, 0.5, 3.0].iter().enumerate() {
            // Each draw is 0 or 2w: std = |w|.
            let se = f64::abs(target) / (n as f64).sqrt();
            let mean = sums[i] / n as f64;
            assert!((mean - target).abs() < 4.0 * se, "coord {i}: {mean}");
        }
    }

    #[test]
    fn dropout_zeroes_whole_input_rows() {
        let spec = build_mlp(&[6, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DropoutPosterior::new(spec, 0.5, &mut rng).unwrap();
        let s = Posterior::Dropout(d).sample_weights(&mut rng, 5).unwrap();
        for w in s {
            let k = w.get("layer0.kernel").unwrap();
            for r in 0..6 {
                let row = k.row(r);
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                assert!(zeros == 0 || zeros == 3);
            }
        }
    }
}

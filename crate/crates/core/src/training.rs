//! Variational training: minibatch ELBO assembly, KL annealing, Adam.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::{batch_iter, BatchTargets, Dataset};
use crate::divergence::{per_coordinate_knn_kl, stack_samples, Discriminator, DiscriminatorSchedule, PriorSpec};
use crate::error::{contract, Error, Result};
use crate::nets::{apply_network, NetworkSpec};
use crate::posterior::{
    DropoutPosterior, FactorizedGaussianPosterior, HypernetConfig, HypernetPosterior, PointPosterior, Posterior,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Bbh,
    Bbb,
    BbbKernel,
    BbbAvb,
    Dropout,
    Map,
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Bbh,
        Method::Bbb,
        Method::BbbKernel,
        Method::BbbAvb,
        Method::Dropout,
        Method::Map,
        Method::Ensemble,
    ];

    pub fn default_lr(self) -> f64 {
        match self {
            Method::Bbh => 1e-4,
            _ => 1e-3,
        }
    }

    pub fn default_anneal_fraction(self) -> f64 {
        match self {
            Method::Bbh => 0.5,
            _ => 0.0,
        }
    }

    /// Whether the KL term needs several posterior samples per step.
    pub fn uses_kernel_kl(self) -> bool {
        matches!(self, Method::Bbh | Method::BbbKernel)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Bbh => "bbh",
            Method::Bbb => "bbb",
            Method::BbbKernel => "bbb_kernel",
            Method::BbbAvb => "bbb_avb",
            Method::Dropout => "dropout",
            Method::Map => "map",
            Method::Ensemble => "ensemble",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method `{s}` (bbh | bbb | bbb_kernel | bbb_avb | dropout | map | ensemble)"))
    }
}

/// How the summed KL is weighed against the mean minibatch NLL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KlScale {
    /// `1/N` for a training set of `N` examples.
    PerExample,
    Fixed(f64),
}

impl KlScale {
    pub fn value(self, n: usize) -> f64 {
        match self {
            KlScale::PerExample => 1.0 / n.max(1) as f64,
            KlScale::Fixed(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Posterior samples per step for the kernel KL.
    pub kl_samples: usize,
    /// Prior samples per weight for the kernel KL.
    pub prior_samples: usize,
    pub prior: PriorSpec,
    pub anneal_fraction: f64,
    pub kl_scale: KlScale,
    pub seed: u64,
    pub ensemble_size: usize,
    pub dropout_rate: f64,
    pub hypernet: HypernetConfig,
    pub discriminator: DiscriminatorSchedule,
    /// Drop the likelihood and optimize the KL alone.
    pub data_free: bool,
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            lr: method.default_lr(),
            steps: 1000,
            batch_size: 100,
            kl_samples: 5,
            prior_samples: 5,
            prior: PriorSpec::StandardNormal,
            anneal_fraction: method.default_anneal_fraction(),
            kl_scale: KlScale::PerExample,
            seed: 0,
            ensemble_size: 5,
            dropout_rate: 0.5,
            hypernet: HypernetConfig::default(),
            discriminator: DiscriminatorSchedule::default(),
            data_free: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: &str| Error::ConfigField {
            field: f.to_string(),
            msg: msg.to_string(),
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(field("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(field("train.batch_size", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(field("train.steps", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(field("train.anneal_fraction", "must lie in [0, 1]"));
        }
        if self.method.uses_kernel_kl() && self.kl_samples < 2 {
            return Err(field("train.kl_samples", "kernel KL needs at least 2 samples"));
        }
        if self.prior_samples == 0 {
            return Err(field("train.prior_samples", "must be at least 1"));
        }
        if let KlScale::Fixed(v) = self.kl_scale {
            if !(v > 0.0) {
                return Err(field("train.kl_scale", "must be positive"));
            }
        }
        if self.method == Method::Ensemble && self.ensemble_size == 0 {
            return Err(field("ensemble.size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(field("dropout.rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to 1 over the first `fraction` of training.
pub fn anneal_factor(step: usize, total_steps: usize, fraction: f64) -> f64 {
    let ramp = fraction * total_steps as f64;
    if ramp <= 0.0 {
        1.0
    } else {
        (step as f64 / ramp).min(1.0)
    }
}

pub fn elbo_loss(nll: f64, kl: f64, anneal: f64, kl_scale: f64) -> f64 {
    nll + anneal * kl_scale * kl
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(contract(format!(
            "adam got {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((w, &g), m), v) in iter {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub nll: f64,
    pub kl: f64,
    pub anneal: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub posterior: Posterior,
    pub log: Vec<StepLog>,
}

/// The untrained posterior family used by `method`.
pub fn init_posterior(config: &TrainConfig, spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Posterior> {
    Ok(match config.method {
        Method::Bbh => Posterior::Hypernet(HypernetPosterior::new(spec.clone(), config.hypernet.clone(), rng)?),
        Method::Bbb | Method::BbbKernel | Method::BbbAvb => {
            Posterior::Gaussian(FactorizedGaussianPosterior::new(spec.clone(), rng))
        }
        Method::Dropout => Posterior::Dropout(DropoutPosterior::new(spec.clone(), config.dropout_rate, rng)?),
        Method::Map => Posterior::Point(PointPosterior::new(spec.clone(), rng)),
        Method::Ensemble => Posterior::Ensemble(
            (0..config.ensemble_size)
                .map(|_| PointPosterior::new(spec.clone(), rng))
                .collect(),
        ),
    })
}

pub fn train(config: &TrainConfig, spec: &NetworkSpec, data: &Dataset) -> Result<Trained> {
    train_with(config, spec, data, |_| {})
}

/// Like [`train`], reporting every step to `on_step` as it completes.
pub fn train_with(
    config: &TrainConfig,
    spec: &NetworkSpec,
    data: &Dataset,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Trained> {
    config.validate()?;
    if config.method == Method::Ensemble {
        let (members, log) = train_ensemble_with(config, spec, data, config.ensemble_size, &mut on_step)?;
        return Ok(Trained {
            posterior: Posterior::Ensemble(members),
            log,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut posterior = init_posterior(config, spec, &mut rng)?;
    let log = fit(&mut posterior, config, data, &mut rng, &mut on_step)?;
    Ok(Trained { posterior, log })
}

/// `k` MAP runs seeded `seed, seed+1, …`; the log concatenates the members' logs.
pub fn train_ensemble(
    config: &TrainConfig,
    spec: &NetworkSpec,
    data: &Dataset,
    k: usize,
) -> Result<(Vec<PointPosterior>, Vec<StepLog>)> {
    train_ensemble_with(config, spec, data, k, &mut |_| {})
}

fn train_ensemble_with(
    config: &TrainConfig,
    spec: &NetworkSpec,
    data: &Dataset,
    k: usize,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(Vec<PointPosterior>, Vec<StepLog>)> {
    if k == 0 {
        return Err(contract("ensemble needs at least one member"));
    }
    let mut members = Vec::with_capacity(k);
    let mut log = Vec::new();
    for i in 0..k {
        let member_cfg = TrainConfig {
            method: Method::Map,
            seed: config.seed + i as u64,
            ..config.clone()
        };
        let trained = train_with(&member_cfg, spec, data, &mut *on_step)?;
        let Posterior::Point(p) = trained.posterior else {
            unreachable!("map trains a point posterior")
        };
        members.push(p);
        log.extend(trained.log);
    }
    Ok((members, log))
}

fn nll_term(tape: &Tape, spec: &NetworkSpec, weights: &[Var], x: &Tensor, y: &BatchTargets) -> Result<Var> {
    let input = tape.constant(x.clone());
    let out = apply_network(tape, spec, weights, input)?;
    match y {
        BatchTargets::Classes(labels) => tape.softmax_cross_entropy(out, labels),
        BatchTargets::Values(t) => {
            // Unit-variance Gaussian likelihood, constant dropped.
            let target = tape.constant(t.clone());
            let diff = tape.sub(out, target)?;
            Ok(tape.scale(tape.mean(tape.square(diff)), 0.5))
        }
        BatchTargets::Unlabeled => Err(contract("cannot train on an unlabeled dataset")),
    }
}

fn check(step: usize, term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { step, term, value })
    }
}

/// The three recorded terms of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub nll: Var,
    pub kl: Var,
    /// `nll + kl_weight · kl`.
    pub loss: Var,
}

/// Records one step's loss on `tape` for parameters already registered there.
///
/// `disc` is required for `bbb_avb`, and is trained `steps_per_update` times on
/// the current posterior sample before it scores that sample.
#[allow(clippy::too_many_arguments)]
pub fn elbo_on_tape<R: Rng + ?Sized>(
    tape: &Tape,
    posterior: &Posterior,
    params: &[Var],
    config: &TrainConfig,
    (x, y): (&Tensor, &BatchTargets),
    kl_weight: f64,
    disc: Option<&mut Discriminator>,
    rng: &mut R,
) -> Result<LossTerms> {
    let spec = posterior.spec();
    let count = if config.method.uses_kernel_kl() {
        config.kl_samples + 1
    } else {
        1
    };
    let samples = posterior.sample_on_tape(tape, params, rng, count)?;

    let nll = if config.data_free {
        tape.constant(Tensor::scalar(0.0))
    } else {
        nll_term(tape, spec, &samples[0], x, y)?
    };

    let kl = match (config.method, posterior) {
        (Method::Bbh | Method::BbbKernel, _) => {
            let q = stack_samples(tape, &samples[1..])?;
            let k = tape.shape(q)[1];
            let p = config.prior.sample(config.prior_samples, k, rng);
            per_coordinate_knn_kl(tape, q, &p)?
        }
        (Method::Bbb, Posterior::Gaussian(g)) => g.analytical_kl(tape, params)?,
        (Method::BbbAvb, _) => {
            let d = disc.ok_or_else(|| contract("bbb_avb needs a discriminator"))?;
            let w = tape.concat(&samples[0]);
            let q = tape.value(w).data().to_vec();
            for _ in 0..config.discriminator.steps_per_update {
                let p = config.prior.sample(1, q.len(), rng).into_data();
                d.train_step(&q, &p, rng)?;
            }
            d.kl_on_tape(tape, w, rng)?
        }
        (Method::Dropout | Method::Map, _) => {
            // Negative standard-normal log prior, constant dropped.
            let terms: Vec<Var> = params.iter().map(|&p| tape.sum(tape.square(p))).collect();
            let flat = tape.concat(&terms);
            tape.scale(tape.sum(flat), 0.5)
        }
        (m, p) => {
            return Err(contract(format!("method {m} cannot train a {} posterior", p.family_name())));
        }
    };

    let weighted = tape.scale(kl, kl_weight);
    let loss = tape.add(nll, weighted)?;
    Ok(LossTerms { nll, kl, loss })
}

/// Optimizes an existing posterior in place.
pub fn fit(
    posterior: &mut Posterior,
    config: &TrainConfig,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    config.validate()?;
    if data.is_empty() {
        return Err(contract("training set is empty"));
    }
    if matches!(posterior, Posterior::Ensemble(_)) {
        return Err(contract("fit ensemble members one at a time"));
    }
    let kl_scale = config.kl_scale.value(data.len());
    let mut adam = AdamState::new(posterior.parameters().expect("single family").values());

    let mut disc = if config.method == Method::BbbAvb {
        let mut d = Discriminator::new(config.discriminator.clone(), rng);
        for _ in 0..config.discriminator.pretrain_steps {
            let q = posterior.sample_weights(rng, 1)?.remove(0).flatten();
            let p = config.prior.sample(1, q.len(), rng).into_data();
            d.train_step(&q, &p, rng)?;
        }
        Some(d)
    } else {
        None
    };

    let mut log = Vec::with_capacity(config.steps);
    let mut epoch = 0u64;
    let mut batches = batch_iter(data.len(), config.batch_size, config.seed, epoch)?.into_iter();

    for step in 0..config.steps {
        let index = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = batch_iter(data.len(), config.batch_size, config.seed, epoch)?.into_iter();
                batches.next().expect("non-empty dataset")
            }
        };
        let (x, y) = data.batch(&index)?;

        let tape = Tape::new();
        let params = posterior.parameters().expect("single family").register(&tape);
        let anneal = anneal_factor(step, config.steps, config.anneal_fraction);
        let terms = elbo_on_tape(
            &tape,
            posterior,
            &params,
            config,
            (&x, &y),
            anneal * kl_scale,
            disc.as_mut(),
            rng,
        )?;
        let (nll, kl, loss) = (terms.nll, terms.kl, terms.loss);

        let entry = StepLog {
            step,
            nll: check(step, "nll", tape.item(nll))?,
            kl: check(step, "kl", tape.item(kl))?,
            anneal,
            loss: check(step, "loss", tape.item(loss))?,
        };
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params
            .iter()
            .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(tape.shape(p))))
            .collect();
        drop(tape);
        if let Some(bad) = g.iter().position(|t| !t.all_finite()) {
            return Err(Error::Diverged {
                step,
                term: "gradient",
                value: g[bad].data().iter().copied().find(|v| !v.is_finite()).unwrap_or(f64::NAN),
            });
        }
        adam_step(posterior.tensors_mut(), &g, &mut adam, config.lr)?;
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn anneal_fixtures() {
        assert_eq!(anneal_factor(0, 100, 0.5), 0.0);
        assert_eq!(anneal_factor(50, 100, 0.5), 1.0);
        assert_eq!(anneal_factor(80, 100, 0.5), 1.0);
        assert_abs_diff_eq!(anneal_factor(25 / 2, 100, 0.5), 0.24, epsilon = 1e-12);
        assert_abs_diff_eq!(anneal_factor(25, 200, 0.5), 0.25, epsilon = 1e-12);
        assert_eq!(anneal_factor(0, 100, 0.0), 1.0);
    }

    #[test]
    fn elbo_fixtures() {
        assert_eq!(elbo_loss(2.0, 10.0, 0.0, 0.01), 2.0);
        assert_abs_diff_eq!(elbo_loss(2.0, 10.0, 1.0, 1.0 / 100.0), 2.1, epsilon = 1e-15);
        assert_eq!(elbo_loss(2.0, 0.0, 1.0, 0.5), 2.0);
    }

    #[test]
    fn adam_fixtures() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p);
        adam_step(p.iter_mut(), &[Tensor::zeros(vec![2])], &mut s, 0.001).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step(), 1);

        let mut p = vec![Tensor::vector(vec![0.0, 3.0])];
        let mut s = AdamState::new(&p);
        adam_step(p.iter_mut(), &[Tensor::vector(vec![0.5, 0.5])], &mut s, 0.001).unwrap();
        // Hand execution: m̂ = 0.5, v̂ = 0.25, Δ = -η m̂ / (√v̂ + ε).
        let delta = -0.001 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert_abs_diff_eq!(delta, -0.001 * (1.0 - 2e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0].data()[0], delta, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0].data()[1] - 3.0, delta, epsilon = 1e-12);

        let mut s = AdamState::new(&p);
        assert!(adam_step(p.iter_mut(), &[Tensor::zeros(vec![3])], &mut s, 0.001).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("bayes".parse::<Method>().is_err());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut c = TrainConfig::for_method(Method::Bbh);
        c.lr = -1.0;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("train.lr"), "{err}");
        let mut c = TrainConfig::for_method(Method::Bbh);
        c.kl_samples = 1;
        assert!(c.validate().is_err());
    }
}

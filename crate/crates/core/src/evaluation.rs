//! Posterior-averaged prediction, predictive entropy and its CDF area,
//! FGSM sweeps, and sample statistics of generated weights.

use rand::Rng;

use crate::autograd::Tape;
use crate::data::{BatchTargets, Dataset};
use crate::error::{contract, Error, Result};
use crate::nets::{apply_network, forward, NetworkSpec, WeightSet};
use crate::posterior::Posterior;
use crate::tensor::Tensor;

/// Rows evaluated per forward pass.
const CHUNK: usize = 1000;

/// Weight sets representing the posterior: `s` draws, one set for point
/// estimates, every member of an ensemble.
pub fn draw_weights<R: Rng + ?Sized>(posterior: &Posterior, s: usize, rng: &mut R) -> Result<Vec<WeightSet>> {
    if s == 0 {
        return Err(contract("sample count must be at least 1"));
    }
    match posterior {
        Posterior::Point(_) => posterior.sample_weights(rng, 1),
        Posterior::Ensemble(m) => posterior.sample_weights(rng, m.len()),
        _ => posterior.sample_weights(rng, s),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    pub probs: Tensor,
    pub samples: usize,
    /// Normalized predictive entropy per example.
    pub entropy: Vec<f64>,
}

impl PredictiveResult {
    pub fn predictions(&self) -> Vec<usize> {
        let (n, c) = self.probs.dims2().expect("probabilities are a matrix");
        (0..n)
            .map(|i| {
                let row = &self.probs.data()[i * c..(i + 1) * c];
                (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.predictions().iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len().max(1) as f64
    }

    pub fn mean_entropy(&self) -> f64 {
        self.entropy.iter().sum::<f64>() / self.entropy.len().max(1) as f64
    }
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(vec![n, c], out)
}

fn rows(inputs: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let per: usize = inputs.shape()[1..].iter().product();
    let mut shape = inputs.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, inputs.data()[start * per..end * per].to_vec())
}

/// Mean softmax output over the given weight sets.
pub fn predictive_from_weights(spec: &NetworkSpec, weights: &[WeightSet], inputs: &Tensor) -> Result<PredictiveResult> {
    if weights.is_empty() {
        return Err(contract("no weight sets to average"));
    }
    let n = *inputs.shape().first().ok_or_else(|| contract("inputs need an example axis"))?;
    let c = spec.output_dim();
    let mut probs = vec![0.0; n * c];
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let x = rows(inputs, start, end)?;
        for w in weights {
            let p = softmax_rows(&forward(spec, w, &x)?)?;
            for (acc, v) in probs[start * c..end * c].iter_mut().zip(p.data()) {
                *acc += v;
            }
        }
    }
    let s = weights.len() as f64;
    probs.iter_mut().for_each(|v| *v /= s);
    let entropy = probs
        .chunks(c)
        .map(|row| predictive_entropy(row, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictiveResult {
        probs: Tensor::new(vec![n, c], probs)?,
        samples: weights.len(),
        entropy,
    })
}

pub fn predictive_distribution<R: Rng + ?Sized>(
    posterior: &Posterior,
    inputs: &Tensor,
    s: usize,
    rng: &mut R,
) -> Result<PredictiveResult> {
    let weights = draw_weights(posterior, s, rng)?;
    predictive_from_weights(posterior.spec(), &weights, inputs)
}

/// Predictive mean and standard deviation of a single-output regression network.
pub fn predictive_regression<R: Rng + ?Sized>(
    posterior: &Posterior,
    inputs: &Tensor,
    s: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = posterior.spec();
    if spec.output_dim() != 1 {
        return Err(contract("regression needs a single network output"));
    }
    let weights = draw_weights(posterior, s, rng)?;
    let outs: Vec<Tensor> = weights
        .iter()
        .map(|w| forward(spec, w, inputs))
        .collect::<Result<_>>()?;
    let n = outs[0].len();
    let k = outs.len() as f64;
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for i in 0..n {
        let m = outs.iter().map(|o| o.data()[i]).sum::<f64>() / k;
        let v = outs.iter().map(|o| (o.data()[i] - m).powi(2)).sum::<f64>() / k;
        mean[i] = m;
        std[i] = v.sqrt();
    }
    Ok((mean, std))
}

/// `−Σ p log p`, optionally divided by `log C`. Results are clamped into `[0, 1]`
/// when normalized to absorb rounding.
pub fn predictive_entropy(probs: &[f64], normalize: bool) -> Result<f64> {
    if let Some(p) = probs.iter().find(|&&p| p < 0.0 || p.is_nan()) {
        return Err(contract(format!("negative probability {p}")));
    }
    let h: f64 = 0.0 - probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    if !normalize {
        return Ok(h.max(0.0));
    }
    if probs.len() < 2 {
        return Ok(0.0);
    }
    Ok((h / (probs.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Area under the empirical CDF of `entropies` over `[0, 1]`.
pub fn entropy_cdf_auc(entropies: &[f64]) -> Result<f64> {
    if entropies.is_empty() {
        return Err(contract("AUC of an empty entropy set"));
    }
    if let Some(e) = entropies.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(contract(format!("entropy {e} outside [0, 1]")));
    }
    // The step F(t) = #{e ≤ t}/N integrates to the mean of (1 − e).
    Ok(entropies.iter().map(|e| 1.0 - e).sum::<f64>() / entropies.len() as f64)
}

/// Mean over weight sets of the input gradient of the cross-entropy.
pub fn input_gradient(spec: &NetworkSpec, weights: &[WeightSet], x: &Tensor, y: &[usize]) -> Result<Tensor> {
    if weights.is_empty() {
        return Err(contract("no weight sets to average"));
    }
    let n = x.shape()[0];
    if n != y.len() {
        return Err(contract(format!("{n} inputs but {} labels", y.len())));
    }
    let mut grad = vec![0.0; x.len()];
    let per = x.len() / n.max(1);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let xb = rows(x, start, end)?;
        for w in weights {
            let tape = Tape::new();
            let wv = w.to_tape(&tape, spec)?;
            let xv = tape.param(xb.clone());
            let out = apply_network(&tape, spec, &wv, xv)?;
            let loss = tape.softmax_cross_entropy(out, &y[start..end])?;
            let g = tape.backward(loss)?;
            for (acc, v) in grad[start * per..end * per].iter_mut().zip(g.wrt(xv).data()) {
                *acc += v;
            }
        }
    }
    let s = weights.len() as f64;
    grad.iter_mut().for_each(|v| *v /= s);
    Tensor::new(x.shape().to_vec(), grad)
}

/// `clip(x + ε·sign(g), 0, 1)` with `sign(0) = 0`.
pub fn perturb(x: &Tensor, grad: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(contract(format!("perturbation {eps} must be non-negative")));
    }
    if x.shape() != grad.shape() {
        return Err(Error::Shape {
            op: "perturb",
            lhs: x.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v + eps * s).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn fgsm_attack<R: Rng + ?Sized>(
    posterior: &Posterior,
    x: &Tensor,
    y: &[usize],
    eps: f64,
    s: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let weights = draw_weights(posterior, s, rng)?;
    let g = input_gradient(posterior.spec(), &weights, x, y)?;
    perturb(x, &g, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSweep {
    pub epsilons: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub entropy: Vec<f64>,
}

pub fn default_epsilons() -> Vec<f64> {
    (0..=8).map(|i| i as f64 / 20.0).collect()
}

/// Accuracy and mean normalized entropy under FGSM at every ε. One set of `s`
/// weight draws serves both the attack gradient and the predictions.
pub fn adversarial_sweep<R: Rng + ?Sized>(
    posterior: &Posterior,
    data: &Dataset,
    epsilons: &[f64],
    s: usize,
    rng: &mut R,
) -> Result<AdversarialSweep> {
    if epsilons.is_empty() {
        return Err(contract("empty perturbation grid"));
    }
    for w in epsilons.windows(2) {
        if !(w[1] > w[0]) {
            return Err(contract("perturbations must be strictly increasing"));
        }
    }
    if epsilons[0] < 0.0 {
        return Err(contract("perturbations must be non-negative"));
    }
    let index: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&index)?;
    let BatchTargets::Classes(labels) = y else {
        return Err(contract("adversarial sweep needs class labels"));
    };
    let spec = posterior.spec();
    let weights = draw_weights(posterior, s, rng)?;
    let g = input_gradient(spec, &weights, &x, &labels)?;
    let mut accuracy = Vec::with_capacity(epsilons.len());
    let mut entropy = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let adv = perturb(&x, &g, eps)?;
        let pred = predictive_from_weights(spec, &weights, &adv)?;
        accuracy.push(pred.accuracy(&labels));
        entropy.push(pred.mean_entropy());
    }
    Ok(AdversarialSweep {
        epsilons: epsilons.to_vec(),
        accuracy,
        entropy,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 64;

impl Histogram {
    /// Equal-width bins over the observed range; a constant sample fills bin 0.
    pub fn of(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightDiagnostics {
    /// `tensor[flat index]` per selected coordinate.
    pub names: Vec<String>,
    /// `samples[k]` holds the draws of coordinate `k`.
    pub samples: Vec<Vec<f64>>,
    pub histograms: Vec<Histogram>,
    pub correlation: Vec<Vec<f64>>,
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if a.is_empty() || constant(a) || constant(b) {
        return 0.0;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

pub fn correlation_matrix(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = samples.len();
    let mut c = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let r = pearson(&samples[i], &samples[j]);
            c[i][j] = r;
            c[j][i] = r;
        }
    }
    c
}

/// A weight selection: comma-separated `name` or `name:start..end` (flat indices).
pub fn parse_selector(selector: &str, spec: &NetworkSpec) -> Result<Vec<(String, usize)>> {
    let params = spec.params();
    let mut out = Vec::new();
    for part in selector.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, range) = match part.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (part, None),
        };
        let p = params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| contract(format!("no weight tensor named `{name}`")))?;
        let len: usize = p.shape.iter().product();
        let (start, end) = match range {
            None => (0, len),
            Some(r) => {
                let (a, b) = r
                    .split_once("..")
                    .ok_or_else(|| contract(format!("range `{r}` must look like start..end")))?;
                let a: usize = a.parse().map_err(|_| contract(format!("bad range start `{a}`")))?;
                let b: usize = b.parse().map_err(|_| contract(format!("bad range end `{b}`")))?;
                (a, b)
            }
        };
        if start >= end || end > len {
            return Err(contract(format!("range {start}..{end} invalid for `{name}` of {len} values")));
        }
        out.extend((start..end).map(|i| (name.to_string(), i)));
    }
    if out.is_empty() {
        return Err(contract("empty weight selection"));
    }
    Ok(out)
}

pub fn weight_diagnostics<R: Rng + ?Sized>(
    posterior: &Posterior,
    s: usize,
    selector: &str,
    rng: &mut R,
) -> Result<WeightDiagnostics> {
    if s < 2 {
        return Err(contract("diagnostics need at least 2 samples"));
    }
    let coords = parse_selector(selector, posterior.spec())?;
    let draws = if let Posterior::Point(_) = posterior {
        vec![posterior.sample_weights(rng, 1)?.remove(0); s]
    } else {
        posterior.sample_weights(rng, s)?
    };
    let samples: Vec<Vec<f64>> = coords
        .iter()
        .map(|(name, i)| {
            draws
                .iter()
                .map(|w| w.get(name).expect("selector names exist").data()[*i])
                .collect()
        })
        .collect();
    Ok(WeightDiagnostics {
        names: coords.iter().map(|(n, i)| format!("{n}[{i}]")).collect(),
        histograms: samples.iter().map(|v| Histogram::of(v, HISTOGRAM_BINS)).collect(),
        correlation: correlation_matrix(&samples),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_mlp;
    use crate::posterior::{FactorizedGaussianPosterior, PointPosterior};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_fixtures() {
        assert_abs_diff_eq!(predictive_entropy(&[0.1; 10], true).unwrap(), 1.0, epsilon = 1e-12);
        let mut onehot = [0.0; 10];
        onehot[3] = 1.0;
        assert_eq!(predictive_entropy(&onehot, true).unwrap(), 0.0);
        assert_abs_diff_eq!(predictive_entropy(&[0.5, 0.5], false).unwrap(), 0.693147, epsilon = 1e-6);
        assert!(predictive_entropy(&[1.5, -0.5], false).is_err());
    }

    /// Riemann sum of the empirical CDF, independent of the closed form.
    fn auc_oracle(e: &[f64]) -> f64 {
        let steps = 100_000;
        let h = 1.0 / steps as f64;
        (0..steps)
            .map(|k| {
                let t = (k as f64 + 0.5) * h;
                e.iter().filter(|&&v| v <= t).count() as f64 / e.len() as f64 * h
            })
            .sum()
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(entropy_cdf_auc(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(entropy_cdf_auc(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(entropy_cdf_auc(&[0.0, 1.0]).unwrap(), 0.5);
        assert!(entropy_cdf_auc(&[]).is_err());
        assert!(entropy_cdf_auc(&[1.2]).is_err());
        let e = [0.1, 0.35, 0.35, 0.8, 0.99];
        assert_abs_diff_eq!(entropy_cdf_auc(&e).unwrap(), auc_oracle(&e), epsilon = 1e-4);
    }

    proptest! {
        #[test]
        fn auc_is_monotone(base in prop::collection::vec(0.0f64..1.0, 1..40), bump in prop::collection::vec(0.0f64..1.0, 40)) {
            let higher: Vec<f64> = base.iter().zip(&bump).map(|(b, d)| (b + d * (1.0 - b)).min(1.0)).collect();
            prop_assert!(entropy_cdf_auc(&higher).unwrap() <= entropy_cdf_auc(&base).unwrap() + 1e-12);
        }
    }

    fn random_x(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn point_posterior_prediction_is_one_forward_pass() {
        let spec = build_mlp(&[4, 5, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PointPosterior::new(spec.clone(), &mut rng);
        let x = random_x(6, 4, &mut rng);
        let direct = softmax_rows(&forward(&spec, &p.weights(), &x).unwrap()).unwrap();
        let post = Posterior::Point(p);
        let r = predictive_distribution(&post, &x, 7, &mut rng).unwrap();
        assert_eq!(r.probs, direct);
        assert_eq!(r.samples, 1);
    }

    #[test]
    fn averaging_two_confident_samples() {
        // Two linear nets that put all mass on class 0 and class 1 respectively.
        let spec = build_mlp(&[1, 3]).unwrap();
        let w = |c: usize| {
            let mut b = vec![0.0; 3];
            b[c] = 1000.0;
            WeightSet::new(vec![
                ("layer0.kernel".into(), Tensor::zeros(vec![1, 3])),
                ("layer0.bias".into(), Tensor::vector(b)),
            ])
        };
        let x = Tensor::zeros(vec![1, 1]);
        let r = predictive_from_weights(&spec, &[w(0), w(1)], &x).unwrap();
        assert_abs_diff_eq!(r.probs.data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.probs.data()[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.probs.data()[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rows_sum_to_one() {
        let spec = build_mlp(&[4, 8, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let post = Posterior::Gaussian(FactorizedGaussianPosterior::new(spec, &mut rng));
        let x = random_x(20, 4, &mut rng);
        let r = predictive_distribution(&post, &x, 9, &mut rng).unwrap();
        for row in r.probs.data().chunks(5) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
        assert!(r.entropy.iter().all(|e| (0.0..=1.0).contains(e)));
    }

    #[test]
    fn fgsm_stays_in_the_ball_and_box() {
        let spec = build_mlp(&[6, 8, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = Posterior::Gaussian(FactorizedGaussianPosterior::new(spec, &mut rng));
        let x = random_x(30, 6, &mut rng);
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert_eq!(fgsm_attack(&post, &x, &y, 0.0, 3, &mut rng).unwrap(), x);
        for eps in [0.01, 0.1, 0.3, 2.0] {
            let adv = fgsm_attack(&post, &x, &y, eps, 3, &mut rng).unwrap();
            for (a, b) in adv.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= eps + 1e-15);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn fgsm_on_a_linear_model_raises_the_loss() {
        // Logits (w·x, 0) with w > 0 and true class 1: the loss grows with x.
        let spec = build_mlp(&[1, 2]).unwrap();
        let w = WeightSet::new(vec![
            ("layer0.kernel".into(), Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ]);
        let post = Posterior::Point(PointPosterior::from_weights(spec.clone(), &w));
        let x = Tensor::new(vec![1, 1], vec![0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adv = fgsm_attack(&post, &x, &[1], 0.1, 1, &mut rng).unwrap();
        assert_abs_diff_eq!(adv.data()[0], 0.3, epsilon = 1e-15);
        let loss = |x: f64| (1.0 + (2.0 * x).exp()).ln();
        assert!(loss(adv.data()[0]) >= loss(0.2));
        let clipped = fgsm_attack(&post, &x, &[1], 5.0, 1, &mut rng).unwrap();
        assert_eq!(clipped.data()[0], 1.0);
    }

    #[test]
    fn sweep_shapes_and_clean_accuracy() {
        let spec = build_mlp(&[4, 6, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PointPosterior::new(spec, &mut rng);
        let x = random_x(40, 4, &mut rng);
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let data = Dataset::new(
            x.clone(),
            crate::data::Targets::Classes {
                labels: labels.clone(),
                classes: 3,
            },
            "t",
            "",
        )
        .unwrap();
        let post = Posterior::Point(p);
        let sweep = adversarial_sweep(&post, &data, &[0.0], 1, &mut rng).unwrap();
        let clean = predictive_distribution(&post, &x, 1, &mut rng).unwrap();
        assert_eq!(sweep.accuracy, vec![clean.accuracy(&labels)]);
        let eps = default_epsilons();
        let sweep = adversarial_sweep(&post, &data, &eps, 1, &mut rng).unwrap();
        assert_eq!(sweep.accuracy.len(), eps.len());
        assert_eq!(sweep.entropy.len(), eps.len());
        assert!(adversarial_sweep(&post, &data, &[0.1, 0.1], 1, &mut rng).is_err());
    }

    #[test]
    fn point_diagnostics_are_spikes_without_correlation() {
        let spec = build_mlp(&[3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let post = Posterior::Point(PointPosterior::new(spec, &mut rng));
        let d = weight_diagnostics(&post, 10, "layer0.kernel", &mut rng).unwrap();
        assert_eq!(d.names.len(), 6);
        for h in &d.histograms {
            assert_eq!(h.counts[0], 10);
            assert_eq!(h.counts.iter().sum::<usize>(), 10);
        }
        assert!(d.correlation.iter().flatten().all(|&c| c == 0.0));
        assert!(weight_diagnostics(&post, 1, "layer0.kernel", &mut rng).is_err());
    }

    #[test]
    fn scaled_copies_correlate_perfectly() {
        let a: Vec<f64> = vec![0.3, -1.2, 2.0, 0.7];
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert_abs_diff_eq!(pearson(&a, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn factorized_gaussian_coordinates_are_uncorrelated() {
        let spec = build_mlp(&[2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let post = Posterior::Gaussian(FactorizedGaussianPosterior::new(spec, &mut rng));
        let d = weight_diagnostics(&post, 10_000, "layer0.kernel,layer0.bias:0..1", &mut rng).unwrap();
        for i in 0..d.names.len() {
            for j in 0..d.names.len() {
                if i != j {
                    assert!(d.correlation[i][j].abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn selector_errors() {
        let spec = build_mlp(&[3, 2]).unwrap();
        assert_eq!(parse_selector("layer0.kernel:1..3", &spec).unwrap().len(), 2);
        assert!(parse_selector("layer9.kernel", &spec).is_err());
        assert!(parse_selector("layer0.kernel:4..9", &spec).is_err());
        assert!(parse_selector("layer0.kernel:x", &spec).is_err());
    }
}

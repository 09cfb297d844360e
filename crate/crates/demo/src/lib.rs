//! Browser demo: kernel-KL explorer, toy regression bands, weight histograms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use bbh::cli::plot::toy_svg;
use bbh::cli::runner::{extrapolation_ratio, toy_predictive};
use bbh::cli::ToySource;
use bbh::data::{cubic, toy_regression, Dataset, Targets};
use bbh::divergence::{gaussian_kl_analytical, knn_kl_estimate, normal_draws, SampleBatch};
use bbh::evaluation::{weight_diagnostics, Histogram};
use bbh::nets::build_mlp;
use bbh::posterior::Posterior;
use bbh::training::{train, Method, TrainConfig};

fn js(e: bbh::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Closed-form KL of N(mu, sigma) to N(0, 1) and the spread of `repeats` kernel estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct KlSummary {
    pub analytical: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn kl_summary(mu: f64, sigma: f64, n: usize, m: usize, repeats: usize, seed: u64) -> bbh::Result<KlSummary> {
    let analytical = gaussian_kl_analytical(mu, sigma, 0.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let q = normal_draws(n, mu, sigma, &mut rng);
        let p = normal_draws(m, 0.0, 1.0, &mut rng);
        est.push(knn_kl_estimate(&SampleBatch::scalar(&q, &p)?));
    }
    let k = est.len() as f64;
    let mean = est.iter().sum::<f64>() / k;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / k;
    Ok(KlSummary {
        analytical,
        mean,
        std: var.sqrt(),
        min: est.iter().copied().fold(f64::INFINITY, f64::min),
        max: est.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// `[analytical, mean, std, min, max]`.
#[wasm_bindgen]
pub fn kl_explorer(mu: f64, sigma: f64, n: u32, m: u32, repeats: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    let s = kl_summary(mu, sigma, n as usize, m as usize, repeats as usize, seed as u64).map_err(js)?;
    Ok(vec![s.analytical, s.mean, s.std, s.min, s.max])
}

/// A model trained on the cubic toy set.
#[wasm_bindgen]
pub struct ToyRun {
    posterior: Posterior,
    source: ToySource,
    data: Dataset,
    final_loss: f64,
}

impl ToyRun {
    pub fn fit(method: &str, steps: usize, seed: u64) -> bbh::Result<Self> {
        let method: Method = method.parse().map_err(bbh::Error::Contract)?;
        let source = ToySource::default();
        let data = toy_regression(source.points, source.x_lo, source.x_hi, source.noise_std, source.seed)?;
        let mut cfg = TrainConfig::for_method(method);
        cfg.steps = steps;
        cfg.batch_size = source.points;
        cfg.seed = seed;
        cfg.hypernet.hidden = vec![32, 64, 128];
        let trained = train(&cfg, &build_mlp(&[1, 50, 1])?, &data)?;
        let final_loss = trained.log.last().map_or(f64::NAN, |s| s.loss);
        Ok(Self {
            posterior: trained.posterior,
            source,
            data,
            final_loss,
        })
    }

    pub fn chart(&self, samples: usize) -> bbh::Result<String> {
        let p = toy_predictive(&self.posterior, &self.source, samples, 0)?;
        let truth: Vec<f64> = p.x.iter().map(|&x| cubic(x)).collect();
        let ys = match self.data.targets() {
            Targets::Values(v) => v.clone(),
            _ => unreachable!("toy targets are values"),
        };
        toy_svg(&p.x, &p.mean, &p.std, &truth, (self.data.inputs().data(), &ys))
    }

    pub fn std_ratio(&self, samples: usize) -> bbh::Result<f64> {
        let p = toy_predictive(&self.posterior, &self.source, samples, 0)?;
        Ok(extrapolation_ratio(&p, &self.source))
    }

    /// Histogram of one weight over `samples` posterior draws.
    pub fn weight_histogram(&self, name: &str, index: usize, samples: usize, bins: usize) -> bbh::Result<Histogram> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = weight_diagnostics(&self.posterior, samples, &format!("{name}:{index}..{}", index + 1), &mut rng)?;
        Ok(Histogram::of(&d.samples[0], bins))
    }
}

#[wasm_bindgen]
impl ToyRun {
    #[wasm_bindgen(constructor)]
    pub fn new(method: &str, steps: u32, seed: u32) -> Result<ToyRun, JsError> {
        Self::fit(method, steps as usize, seed as u64).map_err(js)
    }

    pub fn svg(&self, samples: u32) -> Result<String, JsError> {
        self.chart(samples as usize).map_err(js)
    }

    pub fn ratio(&self, samples: u32) -> Result<f64, JsError> {
        self.std_ratio(samples as usize).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn loss(&self) -> f64 {
        self.final_loss
    }

    /// `[lo, hi, count_0, …]`.
    pub fn histogram(&self, name: &str, index: u32, samples: u32, bins: u32) -> Result<Vec<f64>, JsError> {
        let h = self
            .weight_histogram(name, index as usize, samples as usize, bins as usize)
            .map_err(js)?;
        let mut out = vec![h.lo, h.hi];
        out.extend(h.counts.iter().map(|&c| c as f64));
        Ok(out)
    }
}

//! KL divergence estimators: closed-form Gaussian KL, the nearest-neighbour
//! sample estimator, its per-weight one-dimensional reduction, and a
//! discriminator (density-ratio) estimator.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::posterior::{Parameters, Posterior, TapeWeights};
use crate::tensor::Tensor;
use crate::training::{adam_step, AdamState};

/// Distances below this are replaced by it before taking logs.
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Posterior samples `w_q` (n×d) and prior samples `w_p` (m×d).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    w_q: Tensor,
    w_p: Tensor,
}

impl SampleBatch {
    pub fn new(w_q: Tensor, w_p: Tensor) -> Result<Self> {
        let (n, d) = w_q.dims2()?;
        let (m, dp) = w_p.dims2()?;
        if n < 2 {
            return Err(contract(format!("kernel KL needs at least 2 posterior samples, got {n}")));
        }
        if m < 1 {
            return Err(contract("kernel KL needs at least 1 prior sample"));
        }
        if d != dp || d == 0 {
            return Err(contract(format!("sample dimensions differ: {d} vs {dp}")));
        }
        Ok(Self { w_q, w_p })
    }

    /// Builds a one-dimensional batch from plain slices.
    pub fn scalar(w_q: &[f64], w_p: &[f64]) -> Result<Self> {
        Self::new(
            Tensor::matrix(w_q.len(), 1, w_q.to_vec())?,
            Tensor::matrix(w_p.len(), 1, w_p.to_vec())?,
        )
    }

    pub fn n(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.w_p.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn w_q(&self) -> &Tensor {
        &self.w_q
    }

    pub fn w_p(&self) -> &Tensor {
        &self.w_p
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PriorSpec {
    #[default]
    StandardNormal,
}

impl PriorSpec {
    /// `rows × cols` independent prior draws.
    pub fn sample<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Tensor {
        match self {
            PriorSpec::StandardNormal => Tensor::randn(vec![rows, cols], 0.0, 1.0, rng),
        }
    }
}

pub fn knn_kl_estimate(batch: &SampleBatch) -> f64 {
    knn_kl_with_grad(batch).0
}

/// Estimate and its gradient with respect to `w_q` (n×d).
pub fn knn_kl_with_grad(batch: &SampleBatch) -> (f64, Tensor) {
    let (n, d) = (batch.n(), batch.d());
    let mut grad = vec![0.0; n * d];
    let value = if d == 1 && n * batch.m() > 4096 {
        knn_1d_sorted(batch.w_q.data(), batch.w_p.data(), &mut grad)
    } else {
        knn_naive(batch.w_q.data(), batch.w_p.data(), d, &mut grad)
    };
    (value, Tensor::new(vec![n, d], grad).expect("gradient shape"))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Accumulates the log-ratio term of sample `i` and its gradient.
#[allow(clippy::too_many_arguments)]
fn accumulate_term(
    q: &[f64],
    d: usize,
    i: usize,
    p_row: &[f64],
    nu: f64,
    j: usize,
    rho: f64,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let qi = &q[i * d..(i + 1) * d];
    if nu >= DISTANCE_FLOOR {
        for k in 0..d {
            grad[i * d + k] += scale * (qi[k] - p_row[k]) / (nu * nu);
        }
    }
    if rho >= DISTANCE_FLOOR {
        for k in 0..d {
            let t = scale * (qi[k] - q[j * d + k]) / (rho * rho);
            grad[i * d + k] -= t;
            grad[j * d + k] += t;
        }
    }
    (nu.max(DISTANCE_FLOOR) / rho.max(DISTANCE_FLOOR)).ln()
}

fn knn_naive(q: &[f64], p: &[f64], d: usize, grad: &mut [f64]) -> f64 {
    let n = q.len() / d;
    let m = p.len() / d;
    let scale = d as f64 / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let (mut jp, mut nu) = (0, f64::INFINITY);
        for j in 0..m {
            let r = dist(qi, &p[j * d..(j + 1) * d]);
            if r < nu {
                jp = j;
                nu = r;
            }
        }
        let (mut jq, mut rho) = (0, f64::INFINITY);
        for j in (0..n).filter(|&j| j != i) {
            let r = dist(qi, &q[j * d..(j + 1) * d]);
            if r < rho {
                jq = j;
                rho = r;
            }
        }
        acc += accumulate_term(q, d, i, &p[jp * d..(jp + 1) * d], nu, jq, rho, scale, grad);
    }
    scale * acc + (m as f64 / (n - 1) as f64).ln()
}

/// Same result as the naive scan for d=1, in O((n+m) log(n+m)).
fn knn_1d_sorted(q: &[f64], p: &[f64], grad: &mut [f64]) -> f64 {
    let n = q.len();
    let m = p.len();
    let scale = 1.0 / n as f64;

    let mut ps: Vec<(f64, usize)> = p.iter().copied().zip(0..).collect();
    ps.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // Lowest original index among equal prior values.
    let mut p_first = vec![0; m];
    for r in 0..m {
        p_first[r] = if r > 0 && ps[r].0 == ps[r - 1].0 { p_first[r - 1] } else { ps[r].1 };
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)));
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    // First sorted position holding each value, so ties resolve to the lowest index.
    let mut group_start = vec![0; n];
    for r in 1..n {
        group_start[r] = if q[order[r]] == q[order[r - 1]] { group_start[r - 1] } else { r };
    }

    let mut acc = 0.0;
    for i in 0..n {
        let x = q[i];
        let pos = ps.partition_point(|&(v, _)| v < x);
        let mut best_p: Option<(f64, usize, f64)> = None;
        for c in [pos.wrapping_sub(1), pos] {
            if let Some(&(v, _)) = ps.get(c) {
                let (r, j) = ((x - v).abs(), p_first[c]);
                if best_p.is_none_or(|(bd, bj, _)| r < bd || (r == bd && j < bj)) {
                    best_p = Some((r, j, v));
                }
            }
        }
        let (nu, _, pv) = best_p.expect("m >= 1");

        let r = rank[i];
        let g = group_start[r];
        let has_dup = (r > g) || (r + 1 < n && q[order[r + 1]] == x);
        let (rho, jq) = if has_dup {
            // Lowest other index holding the same value.
            let first = order[g];
            (0.0, if first != i { first } else { order[g + 1] })
        } else {
            let left = (r > 0).then(|| order[group_start[r - 1]]);
            let right = (r + 1 < n).then(|| order[r + 1]);
            match (left, right) {
                (Some(a), Some(b)) => {
                    let (da, db) = (x - q[a], q[b] - x);
                    if da < db || (da == db && a < b) {
                        (da, a)
                    } else {
                        (db, b)
                    }
                }
                (Some(a), None) => (x - q[a], a),
                (None, Some(b)) => (q[b] - x, b),
                (None, None) => unreachable!("n >= 2"),
            }
        };
        acc += accumulate_term(q, 1, i, &[pv], nu, jq, rho, scale, grad);
    }
    scale * acc + (m as f64 / (n - 1) as f64).ln()
}

/// Per-coordinate d=1 estimates over the columns of `q` (n×K) against prior draws `p` (m×K), summed.
pub fn per_coordinate_knn_kl(tape: &Tape, q: Var, p: &Tensor) -> Result<Var> {
    let (value, local) = {
        let qv = tape.value(q);
        let (n, k) = qv.dims2()?;
        let (m, kp) = p.dims2()?;
        if k != kp {
            return Err(contract(format!("prior has {kp} coordinates, posterior {k}")));
        }
        if n < 2 {
            return Err(contract(format!("kernel KL needs at least 2 posterior samples, got {n}")));
        }
        if m < 1 {
            return Err(contract("kernel KL needs at least 1 prior sample"));
        }
        let (qd, pd) = (qv.data(), p.data());
        let mut local = vec![0.0; n * k];
        let mut qc = vec![0.0; n];
        let mut pc = vec![0.0; m];
        let mut gc = vec![0.0; n];
        let mut total = 0.0;
        for c in 0..k {
            for i in 0..n {
                qc[i] = qd[i * k + c];
            }
            for j in 0..m {
                pc[j] = pd[j * k + c];
            }
            gc.fill(0.0);
            total += if n * m > 4096 {
                knn_1d_sorted(&qc, &pc, &mut gc)
            } else {
                knn_naive(&qc, &pc, 1, &mut gc)
            };
            for i in 0..n {
                local[i * k + c] = gc[i];
            }
        }
        (total, Tensor::new(vec![n, k], local)?)
    };
    tape.scalar_with_grad(q, value, local)
}

/// Stacks each sample's weights into one row of an n×K matrix.
pub fn stack_samples(tape: &Tape, samples: &[TapeWeights]) -> Result<Var> {
    let rows: Vec<Var> = samples.iter().map(|w| tape.concat(w)).collect();
    tape.stack(&rows)
}

/// Per-weight kernel KL of recorded samples against `m` fresh prior draws per coordinate.
pub fn per_weight_knn_kl_on_tape<R: Rng + ?Sized>(
    tape: &Tape,
    samples: &[TapeWeights],
    prior: PriorSpec,
    m: usize,
    rng: &mut R,
) -> Result<Var> {
    let q = stack_samples(tape, samples)?;
    let k = tape.shape(q)[1];
    let p = prior.sample(m, k, rng);
    per_coordinate_knn_kl(tape, q, &p)
}

/// Per-weight kernel KL of `n` posterior draws, without gradients.
pub fn per_weight_knn_kl<R: Rng + ?Sized>(
    posterior: &Posterior,
    prior: PriorSpec,
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    if n < 2 {
        return Err(contract(format!("kernel KL needs at least 2 posterior samples, got {n}")));
    }
    let draws = posterior.sample_weights(rng, n)?;
    let tape = Tape::new();
    let samples: Vec<TapeWeights> = draws
        .iter()
        .map(|w| w.tensors().map(|t| tape.constant(t.clone())).collect())
        .collect();
    let kl = per_weight_knn_kl_on_tape(&tape, &samples, prior, m, rng)?;
    Ok(tape.item(kl))
}

/// KL(N(μ1, σ1²) ‖ N(μ2, σ2²)).
pub fn gaussian_kl_analytical(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(contract(format!("standard deviations must be positive, got {sigma1} and {sigma2}")));
    }
    Ok((sigma2 / sigma1).ln() + (sigma1 * sigma1 + (mu1 - mu2).powi(2)) / (2.0 * sigma2 * sigma2) - 0.5)
}

/// Trapezoidal integral of `q (log q − log p)` over `[lo, hi]` with `points` nodes.
pub fn quadrature_kl_oracle(
    log_q: impl Fn(f64) -> f64,
    log_p: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> f64 {
    let h = (hi - lo) / (points - 1) as f64;
    let f = |x: f64| {
        let lq = log_q(x);
        let q = lq.exp();
        if q == 0.0 {
            0.0
        } else {
            q * (lq - log_p(x))
        }
    };
    let inner: f64 = (1..points - 1).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSchedule {
    pub pretrain_steps: usize,
    /// Discriminator updates per main-network update.
    pub steps_per_update: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Coordinates drawn from each class per discriminator update.
    pub batch: usize,
    /// Coordinates evaluated when estimating the KL of a full weight vector.
    pub estimate_coords: usize,
}

impl Default for DiscriminatorSchedule {
    fn default() -> Self {
        Self {
            pretrain_steps: 100,
            steps_per_update: 5,
            hidden: vec![64, 64],
            lr: 1e-3,
            batch: 256,
            estimate_coords: 4096,
        }
    }
}

/// Scalar classifier telling posterior weights (label 1) from prior weights (label 0).
/// Its logit approximates `log q(w) − log p(w)`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: Parameters,
    adam: AdamState,
    schedule: DiscriminatorSchedule,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(schedule: DiscriminatorSchedule, rng: &mut R) -> Self {
        let mut dims = vec![1];
        dims.extend(&schedule.hidden);
        dims.push(1);
        let mut params = Parameters::new();
        for (j, w) in dims.windows(2).enumerate() {
            let std = (2.0 / w[0] as f64).sqrt();
            params.push(format!("disc.layer{j}.kernel"), Tensor::randn(vec![w[0], w[1]], 0.0, std, rng));
            params.push(format!("disc.layer{j}.bias"), Tensor::zeros(vec![w[1]]));
        }
        let adam = AdamState::new(params.values());
        Self { params, adam, schedule }
    }

    pub fn schedule(&self) -> &DiscriminatorSchedule {
        &self.schedule
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    fn logits_on_tape(&self, tape: &Tape, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let n = params.len() / 2;
        for (j, pair) in params.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_bias(h, pair[1])?;
            if j + 1 < n {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn logits(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let params = self.params.register_constants(&tape);
        let x = tape.constant(Tensor::matrix(xs.len(), 1, xs.to_vec())?);
        let out = self.logits_on_tape(&tape, &params, x)?;
        let v = tape.value(out).data().to_vec();
        Ok(v)
    }

    /// Mean logit over `q` samples.
    pub fn estimate(&self, q: &[f64]) -> Result<f64> {
        if q.is_empty() {
            return Err(contract("estimate over zero samples"));
        }
        Ok(self.logits(q)?.iter().sum::<f64>() / q.len() as f64)
    }

    /// One cross-entropy update on minibatches drawn with replacement from `q` and `p`.
    pub fn train_step<R: Rng + ?Sized>(&mut self, q: &[f64], p: &[f64], rng: &mut R) -> Result<f64> {
        if q.is_empty() || p.is_empty() {
            return Err(contract("discriminator needs samples from both classes"));
        }
        let b = self.schedule.batch;
        let pick = |src: &[f64], rng: &mut R| -> Vec<f64> {
            if src.len() <= b {
                src.to_vec()
            } else {
                (0..b).map(|_| src[rng.random_range(0..src.len())]).collect()
            }
        };
        let qb = pick(q, rng);
        let pb = pick(p, rng);
        let tape = Tape::new();
        let params = self.params.register(&tape);
        let xq = tape.constant(Tensor::matrix(qb.len(), 1, qb)?);
        let xp = tape.constant(Tensor::matrix(pb.len(), 1, pb)?);
        let lq = self.logits_on_tape(&tape, &params, xq)?;
        let lp = self.logits_on_tape(&tape, &params, xp)?;
        let loss_q = tape.mean(tape.softplus(tape.neg(lq)));
        let loss_p = tape.mean(tape.softplus(lp));
        let loss = tape.add(loss_q, loss_p)?;
        let value = tape.item(loss);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params.iter().map(|&v| grads.wrt(v).clone()).collect();
        adam_step(self.params.values_mut().iter_mut(), &g, &mut self.adam, self.schedule.lr)?;
        Ok(value)
    }

    /// Summed per-coordinate log density ratio of a weight vector, estimated on a
    /// random coordinate subset and rescaled; differentiable w.r.t. `weights`.
    pub fn kl_on_tape<R: Rng + ?Sized>(&self, tape: &Tape, weights: Var, rng: &mut R) -> Result<Var> {
        let k = tape.value(weights).len();
        let b = self.schedule.estimate_coords.min(k);
        let x = if b == k {
            tape.reshape(weights, vec![k, 1])?
        } else {
            let index: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let g = tape.gather(weights, &index)?;
            tape.reshape(g, vec![b, 1])?
        };
        // Copied rather than borrowed: the caller's tape outlives this call.
        let params: Vec<Var> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let logits = self.logits_on_tape(tape, &params, x)?;
        Ok(tape.scale(tape.sum(logits), k as f64 / b as f64))
    }
}

/// Trains a fresh discriminator for `schedule.pretrain_steps` updates on fresh
/// draws of both samplers and returns the mean logit over a final `q` draw.
pub fn discriminator_kl_estimate<R, Q, P>(
    mut q_sampler: Q,
    mut p_sampler: P,
    schedule: DiscriminatorSchedule,
    rng: &mut R,
) -> Result<(f64, Discriminator)>
where
    R: Rng + ?Sized,
    Q: FnMut(&mut R) -> Vec<f64>,
    P: FnMut(&mut R) -> Vec<f64>,
{
    let mut disc = Discriminator::new(schedule, rng);
    for _ in 0..disc.schedule.pretrain_steps {
        let q = q_sampler(rng);
        let p = p_sampler(rng);
        disc.train_step(&q, &p, rng)?;
    }
    let q = q_sampler(rng);
    let estimate = disc.estimate(&q)?;
    Ok((estimate, disc))
}

/// Standard normal draws, a convenience sampler for the discriminator.
pub fn normal_draws<R: Rng + ?Sized>(count: usize, mean: f64, std: f64, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

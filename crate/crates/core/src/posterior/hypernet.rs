//! Hypernetwork posterior: weights are the output of a generator network fed
//! with Gaussian noise, `w = G(z | θ)`, so the weight distribution is implicit.
//!
//! Three layouts are supported:
//!
//! * `Single`: one generator produces every weight slice (one slice per output
//!   unit or channel of every layer) from `[z, one_hot(slice)]`.
//! * `LayerWise`: one generator per layer emits the whole flattened layer from `z`.
//! * `SlicedLayerWise`: one generator per layer emits one output-unit slice at a
//!   time from `[z, one_hot(unit)]`.
//!
//! A slice holds the `fan_in` kernel entries feeding one output unit followed
//! by that unit's bias. A layer-wise output holds the row-major kernel followed
//! by the bias vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Parameters, TapeWeights};
use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::nets::NetworkSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Single,
    LayerWise,
    SlicedLayerWise,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Single => "single",
            Architecture::LayerWise => "layer_wise",
            Architecture::SlicedLayerWise => "sliced_layer_wise",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(Architecture::Single),
            "layer_wise" => Ok(Architecture::LayerWise),
            "sliced_layer_wise" => Ok(Architecture::SlicedLayerWise),
            other => Err(format!(
                "unknown architecture `{other}` (single | layer_wise | sliced_layer_wise)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// One `z` per weight sample, reused by every generator call.
    Shared,
    /// A fresh `z` for every generator call.
    Independent,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Shared => "shared",
            NoiseMode::Independent => "independent",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shared" => Ok(NoiseMode::Shared),
            "independent" => Ok(NoiseMode::Independent),
            other => Err(format!("unknown noise mode `{other}` (shared | independent)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypernetConfig {
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
    pub noise_dim: usize,
    pub noise_mode: NoiseMode,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::LayerWise,
            hidden: vec![64, 256, 512],
            noise_dim: 1,
            noise_mode: NoiseMode::Independent,
        }
    }
}

/// What one generator is responsible for.
#[derive(Clone, Debug, PartialEq)]
struct GeneratorLayout {
    cond_len: usize,
    out_len: usize,
    /// `(weight layer, first conditioning index)` for every layer this generator emits.
    targets: Vec<(usize, usize)>,
}

impl GeneratorLayout {
    fn calls(&self) -> usize {
        self.cond_len.max(1)
    }
}

fn layouts(spec: &NetworkSpec, arch: Architecture) -> Vec<GeneratorLayout> {
    let layers = spec.weight_layers();
    match arch {
        Architecture::LayerWise => layers
            .iter()
            .enumerate()
            .map(|(l, wl)| GeneratorLayout {
                cond_len: 0,
                out_len: wl.size(),
                targets: vec![(l, 0)],
            })
            .collect(),
        Architecture::SlicedLayerWise => layers
            .iter()
            .enumerate()
            .map(|(l, wl)| GeneratorLayout {
                cond_len: wl.outputs,
                out_len: wl.fan_in + 1,
                targets: vec![(l, 0)],
            })
            .collect(),
        Architecture::Single => {
            let mut targets = Vec::new();
            let mut offset = 0;
            for (l, wl) in layers.iter().enumerate() {
                targets.push((l, offset));
                offset += wl.outputs;
            }
            vec![GeneratorLayout {
                cond_len: offset,
                out_len: layers.iter().map(|wl| wl.fan_in + 1).max().unwrap_or(0),
                targets,
            }]
        }
    }
}

/// Noise vectors for every generator call of one weight sample, indexed `[generator][call]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseAssignment {
    pub calls: Vec<Vec<Vec<f64>>>,
}

/// Draws unit Gaussian noise for one weight sample.
pub fn make_noise<R: Rng + ?Sized>(config: &HypernetConfig, spec: &NetworkSpec, rng: &mut R) -> NoiseAssignment {
    let d = config.noise_dim;
    let mut draw = || -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    let layouts = layouts(spec, config.architecture);
    let calls = match config.noise_mode {
        NoiseMode::Shared => {
            let z = draw();
            layouts.iter().map(|g| vec![z.clone(); g.calls()]).collect()
        }
        NoiseMode::Independent => layouts
            .iter()
            .map(|g| (0..g.calls()).map(|_| draw()).collect())
            .collect(),
    };
    NoiseAssignment { calls }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypernetPosterior {
    spec: NetworkSpec,
    config: HypernetConfig,
    layouts: Vec<GeneratorLayout>,
    params: Parameters,
}

/// Standard deviation of the generator output weights at initialization.
pub const OUTPUT_INIT_STD: f64 = 0.01;

impl HypernetPosterior {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, config: HypernetConfig, rng: &mut R) -> Result<Self> {
        if config.noise_dim == 0 {
            return Err(contract("hypernet noise dimension must be positive"));
        }
        if config.hidden.contains(&0) {
            return Err(contract("hypernet hidden extents must be positive"));
        }
        let layouts = layouts(&spec, config.architecture);
        let mut params = Parameters::new();
        for (g, layout) in layouts.iter().enumerate() {
            let mut dims = vec![config.noise_dim + layout.cond_len];
            dims.extend(&config.hidden);
            dims.push(layout.out_len);
            let last = dims.len() - 2;
            for (j, w) in dims.windows(2).enumerate() {
                let (kernel, bias) = if j == 0 && layout.cond_len > 0 {
                    // A one-hot row is live in a single call. Noise rows start small so that
                    // early draws sit near the mean, as in the unconditioned generators.
                    let mut k = Tensor::randn(vec![w[0], w[1]], 0.0, 1.0, rng);
                    let z_std = OUTPUT_INIT_STD * (2.0 / config.noise_dim as f64).sqrt();
                    for (r, row) in k.data_mut().chunks_mut(w[1]).enumerate() {
                        let std = if r < config.noise_dim { z_std } else { 2f64.sqrt() };
                        row.iter_mut().for_each(|v| *v *= std);
                    }
                    (k, Tensor::zeros(vec![w[1]]))
                } else if j < last {
                    let std = (2.0 / w[0] as f64).sqrt();
                    (Tensor::randn(vec![w[0], w[1]], 0.0, std, rng), Tensor::zeros(vec![w[1]]))
                } else if layout.cond_len > 0 {
                    // Rescaled by `calibrate` once the hidden stack exists.
                    (Tensor::randn(vec![w[0], w[1]], 0.0, 1.0, rng), Tensor::zeros(vec![w[1]]))
                } else {
                    (
                        Tensor::randn(vec![w[0], w[1]], 0.0, OUTPUT_INIT_STD, rng),
                        output_bias_init(&spec, layout, rng),
                    )
                };
                params.push(format!("gen{g}.layer{j}.kernel"), kernel);
                params.push(format!("gen{g}.layer{j}.bias"), bias);
            }
        }
        let mut post = Self {
            spec,
            config,
            layouts,
            params,
        };
        for g in 0..post.layouts.len() {
            if post.layouts[g].cond_len > 0 {
                post.calibrate(g, rng)?;
            }
        }
        Ok(post)
    }

    /// Sets the output layer of a conditioned generator so that its slices are centred across
    /// units and have the fan-in-scaled spread of the widest target layer. The output bias is
    /// shared by every slice; it cancels the component common to all units.
    fn calibrate<R: Rng + ?Sized>(&mut self, g: usize, rng: &mut R) -> Result<()> {
        let layout = &self.layouts[g];
        let wl = self.spec.weight_layers();
        let fan_in = layout.targets.iter().map(|&(l, _)| wl[l].fan_in).max().unwrap_or(1);
        let target = (2.0 / fan_in as f64).sqrt();
        let (d, calls, out_len) = (self.config.noise_dim, layout.calls(), layout.out_len);
        let width = d + layout.cond_len;
        let mut input = Vec::with_capacity(calls * width);
        for c in 0..calls {
            input.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            input.extend((0..layout.cond_len).map(|k| if k == c { 1.0 } else { 0.0 }));
        }
        let out = {
            let tape = Tape::new();
            let params = self.params.register_constants(&tape);
            let out = self.run_generator(&tape, &params, g, Tensor::matrix(calls, width, input)?)?;
            let row = tape.value(out).data().to_vec();
            row
        };
        let mut mean = vec![0.0; out_len];
        for row in out.chunks(out_len) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / calls as f64);
        }
        let ss: f64 = out
            .chunks(out_len)
            .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)))
            .sum();
        let rms = (ss / out.len() as f64).sqrt();
        let scale = if rms > 0.0 && rms.is_finite() { target / rms } else { 1.0 };
        let per = 2 * (self.config.hidden.len() + 1);
        let values = self.params.values_mut();
        values[g * per + per - 2].data_mut().iter_mut().for_each(|x| *x *= scale);
        let bias = values[g * per + per - 1].data_mut();
        bias.iter_mut().zip(&mean).for_each(|(b, m)| *b = -m * scale);
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn num_generators(&self) -> usize {
        self.layouts.len()
    }

    /// Conditioning length and output length of generator `g`.
    pub fn generator_io(&self, g: usize) -> (usize, usize) {
        (self.layouts[g].cond_len, self.layouts[g].out_len)
    }

    fn generator_params<'a>(&self, params: &'a [Var], g: usize) -> &'a [Var] {
        let per = 2 * (self.config.hidden.len() + 1);
        &params[g * per..(g + 1) * per]
    }

    fn run_generator(&self, tape: &Tape, params: &[Var], g: usize, input: Tensor) -> Result<Var> {
        let gp = self.generator_params(params, g);
        let mut h = tape.constant(input);
        let n = gp.len() / 2;
        for (j, pair) in gp.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_bias(h, pair[1])?;
            if j + 1 < n {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn check_inputs(&self, g: usize, z: &[f64], cond: &[f64]) -> Result<()> {
        let layout = self
            .layouts
            .get(g)
            .ok_or_else(|| contract(format!("no generator {g}")))?;
        if z.len() != self.config.noise_dim {
            return Err(contract(format!(
                "noise has length {}, expected {}",
                z.len(),
                self.config.noise_dim
            )));
        }
        if cond.len() != layout.cond_len {
            return Err(contract(format!(
                "conditioning has length {}, expected {}",
                cond.len(),
                layout.cond_len
            )));
        }
        if layout.cond_len > 0 {
            let ones = cond.iter().filter(|&&c| c == 1.0).count();
            let zeros = cond.iter().filter(|&&c| c == 0.0).count();
            if ones != 1 || ones + zeros != cond.len() {
                return Err(contract("conditioning must be one-hot"));
            }
        }
        Ok(())
    }

    /// One generator call on the tape: output row for input `[z, cond]`.
    pub fn generate_on_tape(&self, tape: &Tape, params: &[Var], g: usize, z: &[f64], cond: &[f64]) -> Result<Var> {
        self.check_inputs(g, z, cond)?;
        let mut row = z.to_vec();
        row.extend_from_slice(cond);
        let width = row.len();
        let out = self.run_generator(tape, params, g, Tensor::matrix(1, width, row)?)?;
        let len = self.layouts[g].out_len;
        tape.reshape(out, vec![len])
    }

    /// One generator call on the current parameters, without gradients.
    pub fn generate(&self, g: usize, z: &[f64], cond: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.params.register_constants(&tape);
        let out = self.generate_on_tape(&tape, &params, g, z, cond)?;
        let v = tape.value(out).clone();
        Ok(v)
    }

    /// Assembles one weight set per noise assignment, batching all calls of a generator.
    pub fn generate_with_noise(
        &self,
        tape: &Tape,
        params: &[Var],
        noise: &[NoiseAssignment],
    ) -> Result<Vec<TapeWeights>> {
        let s_count = noise.len();
        let d = self.config.noise_dim;
        let wl = self.spec.weight_layers();
        let mut samples: Vec<TapeWeights> = vec![vec![params[0]; 2 * wl.len()]; s_count];

        for (g, layout) in self.layouts.iter().enumerate() {
            let calls = layout.calls();
            let width = d + layout.cond_len;
            let mut input = Vec::with_capacity(s_count * calls * width);
            for assignment in noise {
                let zs = assignment
                    .calls
                    .get(g)
                    .filter(|c| c.len() == calls)
                    .ok_or_else(|| contract("noise assignment does not match the generator layout"))?;
                for (c, z) in zs.iter().enumerate() {
                    if z.len() != d {
                        return Err(contract(format!("noise has length {}, expected {d}", z.len())));
                    }
                    input.extend_from_slice(z);
                    if layout.cond_len > 0 {
                        input.extend((0..layout.cond_len).map(|k| if k == c { 1.0 } else { 0.0 }));
                    }
                }
            }
            let input = Tensor::matrix(s_count * calls, width, input)?;
            let out = self.run_generator(tape, params, g, input)?;
            let out_len = layout.out_len;

            for (s, sample) in samples.iter_mut().enumerate() {
                for &(l, cond_offset) in &layout.targets {
                    let layer = &wl[l];
                    let (f, c) = (layer.fan_in, layer.outputs);
                    let (kernel, bias) = if layout.cond_len == 0 {
                        let base = s * out_len;
                        (
                            tape.slice(out, base, layer.kernel_shape.clone())?,
                            tape.slice(out, base + f * c, vec![c])?,
                        )
                    } else {
                        // Rows are output units; transpose so kernel rows lead.
                        let base = (s * calls + cond_offset) * out_len;
                        let block = tape.slice(out, base, vec![c, out_len])?;
                        let t = tape.transpose(block)?;
                        (
                            tape.slice(t, 0, layer.kernel_shape.clone())?,
                            tape.slice(t, f * c, vec![c])?,
                        )
                    };
                    sample[2 * l] = kernel;
                    sample[2 * l + 1] = bias;
                }
            }
        }
        Ok(samples)
    }

    pub(crate) fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &[Var],
        rng: &mut R,
        count: usize,
    ) -> Result<Vec<TapeWeights>> {
        let noise: Vec<_> = (0..count)
            .map(|_| make_noise(&self.config, &self.spec, rng))
            .collect();
        self.generate_with_noise(tape, params, &noise)
    }
}

/// Output bias of a layer-wise generator: fan-in-scaled Gaussian over kernel positions, zero for biases.
fn output_bias_init<R: Rng + ?Sized>(spec: &NetworkSpec, layout: &GeneratorLayout, rng: &mut R) -> Tensor {
    let layer = &spec.weight_layers()[layout.targets[0].0];
    let mut b = vec![0.0; layout.out_len];
    let std = (2.0 / layer.fan_in as f64).sqrt();
    for v in &mut b[..layer.fan_in * layer.outputs] {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
    Tensor::vector(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradient_check;
    use crate::nets::{build_mlp, WeightSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(arch: Architecture, mode: NoiseMode, d: usize) -> HypernetPosterior {
        let spec = build_mlp(&[3, 4, 2]).unwrap();
        let cfg = HypernetConfig {
            architecture: arch,
            hidden: vec![5, 7],
            noise_dim: d,
            noise_mode: mode,
        };
        HypernetPosterior::new(spec, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn layouts_follow_the_architecture() {
        let spec = build_mlp(&[3, 4, 2]).unwrap();
        let single = layouts(&spec, Architecture::Single);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].cond_len, 6);
        assert_eq!(single[0].out_len, 5);
        let lw = layouts(&spec, Architecture::LayerWise);
        assert_eq!(lw.iter().map(|g| (g.cond_len, g.out_len)).collect::<Vec<_>>(), vec![(0, 16), (0, 10)]);
        let sl = layouts(&spec, Architecture::SlicedLayerWise);
        assert_eq!(sl.iter().map(|g| (g.cond_len, g.out_len)).collect::<Vec<_>>(), vec![(4, 4), (2, 5)]);
    }

    #[test]
    fn shared_noise_repeats_one_scalar() {
        let h = small(Architecture::SlicedLayerWise, NoiseMode::Shared, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = make_noise(h.config(), h.spec(), &mut rng);
        let all: Vec<f64> = n.calls.iter().flatten().map(|z| z[0]).collect();
        assert_eq!(all.len(), 6);
        assert!(all.iter().all(|&v| v == all[0]));
    }

    #[test]
    fn independent_noise_is_distinct_per_call() {
        let spec = build_mlp(&[3, 4, 4, 4, 2]).unwrap();
        let cfg = HypernetConfig {
            noise_dim: 8,
            ..HypernetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = make_noise(&cfg, &spec, &mut rng);
        let zs: Vec<&Vec<f64>> = n.calls.iter().flatten().collect();
        assert_eq!(zs.len(), 4);
        for i in 0..4 {
            assert_eq!(zs[i].len(), 8);
            for j in i + 1..4 {
                assert_ne!(zs[i], zs[j]);
            }
        }
    }

    #[test]
    fn noise_is_reproducible_from_a_seed() {
        let h = small(Architecture::LayerWise, NoiseMode::Independent, 3);
        let a = make_noise(h.config(), h.spec(), &mut ChaCha8Rng::seed_from_u64(42));
        let b = make_noise(h.config(), h.spec(), &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn generate_is_deterministic_and_shaped() {
        for arch in [Architecture::Single, Architecture::LayerWise, Architecture::SlicedLayerWise] {
            let h = small(arch, NoiseMode::Independent, 2);
            for g in 0..h.num_generators() {
                let (cond_len, out_len) = h.generator_io(g);
                let mut cond = vec![0.0; cond_len];
                if cond_len > 0 {
                    cond[cond_len - 1] = 1.0;
                }
                let a = h.generate(g, &[0.3, -1.2], &cond).unwrap();
                let b = h.generate(g, &[0.3, -1.2], &cond).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.len(), out_len);
            }
        }
    }

    #[test]
    fn wrong_input_lengths_are_rejected() {
        let h = small(Architecture::SlicedLayerWise, NoiseMode::Independent, 2);
        assert!(h.generate(0, &[0.1], &[1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(h.generate(0, &[0.1, 0.2], &[1.0, 0.0]).is_err());
        assert!(h.generate(0, &[0.1, 0.2], &[1.0, 1.0, 0.0, 0.0]).is_err());
        let lw = small(Architecture::LayerWise, NoiseMode::Independent, 2);
        assert!(lw.generate(0, &[0.1, 0.2], &[1.0]).is_err());
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let h = small(Architecture::SlicedLayerWise, NoiseMode::Independent, 2);
        let target = h.parameters().values()[2].clone(); // gen0.layer1.kernel
        let err = gradient_check(
            |t, v| {
                let mut params = h.parameters().register_constants(t);
                params[2] = v;
                let out = h.generate_on_tape(t, &params, 0, &[0.7, -0.4], &[0.0, 1.0, 0.0, 0.0])?;
                let sq = t.square(out);
                Ok(t.sum(sq))
            },
            &target,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sliced_assembly_places_slices_as_kernel_columns() {
        let h = small(Architecture::SlicedLayerWise, NoiseMode::Shared, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = make_noise(h.config(), h.spec(), &mut rng);
        let z = noise.calls[0][0].clone();
        let tape = Tape::new();
        let params = h.parameters().register_constants(&tape);
        let w = h.generate_with_noise(&tape, &params, &[noise]).unwrap();
        let ws = WeightSet::from_tape(&tape, h.spec(), &w[0]);
        // Unit 2 of layer 0: kernel column 2 then bias[2].
        let slice = h.generate(0, &z, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        let k = ws.get("layer0.kernel").unwrap();
        for i in 0..3 {
            assert_eq!(k.data()[i * 4 + 2], slice.data()[i]);
        }
        assert_eq!(ws.get("layer0.bias").unwrap().data()[2], slice.data()[3]);
    }

    #[test]
    fn single_generator_serves_every_layer() {
        let h = small(Architecture::Single, NoiseMode::Shared, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = make_noise(h.config(), h.spec(), &mut rng);
        let z = noise.calls[0][0].clone();
        let tape = Tape::new();
        let params = h.parameters().register_constants(&tape);
        let w = h.generate_with_noise(&tape, &params, &[noise]).unwrap();
        let ws = WeightSet::from_tape(&tape, h.spec(), &w[0]);
        // Layer 1 unit 1 is global slice 4 + 1 = 5; its fan-in is 4.
        let mut cond = vec![0.0; 6];
        cond[5] = 1.0;
        let slice = h.generate(0, &z, &cond).unwrap();
        let k = ws.get("layer1.kernel").unwrap();
        for i in 0..4 {
            assert_eq!(k.data()[i * 2 + 1], slice.data()[i]);
        }
        assert_eq!(ws.get("layer1.bias").unwrap().data()[1], slice.data()[4]);
    }

    #[test]
    fn shared_vs_independent_sampling() {
        for arch in [Architecture::Single, Architecture::LayerWise, Architecture::SlicedLayerWise] {
            let shared = small(arch, NoiseMode::Shared, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let noise = make_noise(shared.config(), shared.spec(), &mut rng);
            let tape = Tape::new();
            let params = shared.parameters().register_constants(&tape);
            let w = shared
                .generate_with_noise(&tape, &params, &[noise.clone(), noise])
                .unwrap();
            let a = WeightSet::from_tape(&tape, shared.spec(), &w[0]);
            let b = WeightSet::from_tape(&tape, shared.spec(), &w[1]);
            assert_eq!(a, b);

            let indep = small(arch, NoiseMode::Independent, 2);
            let tape = Tape::new();
            let params = indep.parameters().register_constants(&tape);
            let w = indep.sample_on_tape(&tape, &params, &mut rng, 2).unwrap();
            let a = WeightSet::from_tape(&tape, indep.spec(), &w[0]);
            let b = WeightSet::from_tape(&tape, indep.spec(), &w[1]);
            assert_ne!(a.flatten(), b.flatten());
        }
    }
}

//! Central finite-difference verification of every differentiable op and of
//! the full training loss, in double precision.
//!
//! The relative error of an analytic gradient `a` against its numeric
//! estimate `n` is `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries
//! whose true gradient is (near) zero from reporting cancellation noise as
//! a large relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{cbam, channel_attention, spatial_attention, AttentionParams, AttentionShape};
use crate::enhancer::{build_forward, init_params, recursive_update, EnhancerConfig, TraceVars};
use crate::error::Result;
use crate::imageio::{to_unit_tensor, RawImage};
use crate::losses::{loss_brightness, loss_global_chroma, loss_local_color, loss_smoothness, loss_total, ChromaMode, LossConfig};
use crate::nn::{BoundParams, Graph, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

type Scalar<'f> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'f;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: f64,
    pub floor: f64,
    /// Entries checked per input tensor; tensors at most this large are
    /// checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3, max_coords: 16, seed: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(f: &Scalar<'_>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

impl GradCheck {
    fn coords(&self, numel: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if numel <= self.max_coords {
            (0..numel).collect()
        } else {
            (0..self.max_coords).map(|_| rng.random_range(0..numel)).collect()
        }
    }

    fn analytic(&self, f: &Scalar<'_>, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }

    /// Compares gradients of the scalar `f` with respect to every input
    /// tensor, sampling coordinates of large inputs.
    pub fn check(&self, name: &str, inputs: &[Tensor<f64>], f: &Scalar<'_>) -> Result<GradCheckEntry> {
        let grads = self.analytic(f, inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut entry = GradCheckEntry { name: name.to_string(), checked: 0, max_rel_err: 0.0, max_abs_err: 0.0 };
        let mut work = inputs.to_vec();
        for i in 0..inputs.len() {
            for k in self.coords(inputs[i].numel(), &mut rng) {
                let x = inputs[i].data()[k];
                work[i].data_mut()[k] = x + self.step;
                let plus = eval(f, &work)?;
                work[i].data_mut()[k] = x - self.step;
                let minus = eval(f, &work)?;
                work[i].data_mut()[k] = x;
                let numeric = (plus - minus) / (2.0 * self.step);
                let analytic = grads[i].data()[k];
                entry.checked += 1;
                entry.max_abs_err = entry.max_abs_err.max((analytic - numeric).abs());
                entry.max_rel_err = entry.max_rel_err.max(relative_error(analytic, numeric, self.floor));
            }
        }
        Ok(entry)
    }

    /// Compares `∇f · d` with the central difference of `f` along a random
    /// direction `d` spanning every input at once.
    pub fn check_directional(&self, name: &str, inputs: &[Tensor<f64>], f: &Scalar<'_>) -> Result<GradCheckEntry> {
        let grads = self.analytic(f, inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xD1EC);
        let dirs: Vec<Tensor<f64>> =
            inputs.iter().map(|t| Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0))).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            inputs.iter().zip(&dirs).map(|(t, d)| t.zip_same(d, |x, dx| x + sign * self.step * dx)).collect()
        };
        let numeric = (eval(f, &shifted(1.0))? - eval(f, &shifted(-1.0))?) / (2.0 * self.step);
        Ok(GradCheckEntry {
            name: name.to_string(),
            checked: 1,
            max_rel_err: relative_error(analytic, numeric, self.floor),
            max_abs_err: (analytic - numeric).abs(),
        })
    }
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.random_range(lo..hi))
    }

    /// Values in `±[0.1, 1]`, away from the kinks of abs and relu at zero.
    fn signed(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.random_range(0.1..1.0);
            if self.0.random_bool(0.5) { m } else { -m }
        })
    }
}

/// Sums `out` weighted by fixed pseudo-random coefficients so that every
/// output entry contributes a distinct amount.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(g.shape(out), |_| rng.random_range(0.5..1.5));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn attention_inputs(s: &mut Sampler, shape: &AttentionShape) -> Vec<Tensor<f64>> {
    shape.layout("attn").iter().map(|(_, dims)| s.uniform(dims, -0.5, 0.5)).collect()
}

fn attention_params(shape: &AttentionShape, vars: &[Var]) -> Result<AttentionParams> {
    let names = shape.layout("attn").into_iter().map(|(n, _)| n);
    let bound = BoundParams::from_pairs(names.zip(vars.iter().copied()));
    AttentionParams::from_bound(&bound, "attn", shape.spatial_kernel)
}

/// Every differentiable graph op, the attention blocks, the recursive
/// update and each loss term, on small random inputs.
pub fn check_ops(checker: &GradCheck) -> Result<Vec<GradCheckEntry>> {
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(checker.seed));
    let x4 = [2, 3, 4, 5];
    let mut entries = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &Scalar<'_>| -> Result<()> {
        entries.push(checker.check(name, &inputs, f)?);
        Ok(())
    };

    macro_rules! unary {
        ($name:expr, $input:expr, |$g:ident, $x:ident| $body:expr) => {
            run($name, vec![$input], &|$g: &mut Graph<f64>, v: &[Var]| {
                let $x = v[0];
                let y = $body;
                weighted_sum($g, y, 1)
            })?;
        };
    }
    macro_rules! binary {
        ($name:expr, $a:expr, $b:expr, $op:ident) => {
            run($name, vec![$a, $b], &|g: &mut Graph<f64>, v: &[Var]| {
                let y = g.$op(v[0], v[1])?;
                weighted_sum(g, y, 2)
            })?;
        };
    }

    binary!("add", s.uniform(&x4, -1.0, 1.0), s.uniform(&x4, -1.0, 1.0), add);
    binary!("add_broadcast", s.uniform(&x4, -1.0, 1.0), s.uniform(&[1, 3, 1, 1], -1.0, 1.0), add);
    binary!("sub_broadcast", s.uniform(&x4, -1.0, 1.0), s.uniform(&[2, 1, 4, 5], -1.0, 1.0), sub);
    binary!("mul", s.uniform(&x4, -1.0, 1.0), s.uniform(&x4, -1.0, 1.0), mul);
    binary!("mul_broadcast", s.uniform(&x4, -1.0, 1.0), s.uniform(&[2, 1, 1, 1], -1.0, 1.0), mul);
    binary!("div", s.uniform(&x4, -1.0, 1.0), s.uniform(&x4, 0.5, 1.5), div);
    binary!("div_broadcast", s.uniform(&x4, -1.0, 1.0), s.uniform(&[1, 3, 1, 1], 0.5, 1.5), div);
    unary!("scale", s.uniform(&x4, -1.0, 1.0), |g, x| g.scale(x, -2.5));
    unary!("neg", s.uniform(&x4, -1.0, 1.0), |g, x| g.neg(x));
    unary!("add_scalar", s.uniform(&x4, -1.0, 1.0), |g, x| g.add_scalar(x, 0.3));
    unary!("logistic", s.uniform(&x4, -1.0, 1.0), |g, x| g.logistic(x, 10.0));
    unary!("sigmoid", s.uniform(&x4, -3.0, 3.0), |g, x| g.sigmoid(x));
    unary!("sharp_sigmoid", s.uniform(&x4, -0.3, 0.3), |g, x| g.sharp_sigmoid(x));
    unary!("silu", s.uniform(&x4, -3.0, 3.0), |g, x| g.silu(x));
    unary!("relu", s.signed(&x4), |g, x| g.relu(x));
    unary!("abs", s.signed(&x4), |g, x| g.abs(x));
    unary!("square", s.uniform(&x4, -1.0, 1.0), |g, x| g.square(x));
    // signed() avoids |x| < 0.1, so bounds at ±0.05 are never within a step
    unary!("clamp", s.signed(&x4), |g, x| g.clamp(x, -0.05, 0.05));
    unary!("clamp_unit", s.signed(&x4), |g, x| g.clamp(x, 0.0, 2.0));
    unary!("sum", s.uniform(&x4, -1.0, 1.0), |g, x| g.sum(x));
    unary!("mean", s.uniform(&x4, -1.0, 1.0), |g, x| g.mean(x));
    unary!("mean_spatial", s.uniform(&x4, -1.0, 1.0), |g, x| g.mean_spatial(x)?);
    unary!("max_spatial", s.uniform(&x4, -1.0, 1.0), |g, x| g.max_spatial(x)?);
    unary!("sum_channels", s.uniform(&x4, -1.0, 1.0), |g, x| g.sum_channels(x)?);
    unary!("mean_channels", s.uniform(&x4, -1.0, 1.0), |g, x| g.mean_channels(x)?);
    unary!("max_channels", s.uniform(&x4, -1.0, 1.0), |g, x| g.max_channels(x)?);
    unary!("spatial_gradient_x", s.uniform(&x4, -1.0, 1.0), |g, x| g.spatial_gradient(x)?.0);
    unary!("spatial_gradient_y", s.uniform(&x4, -1.0, 1.0), |g, x| g.spatial_gradient(x)?.1);

    run(
        "concat_channels",
        vec![s.uniform(&x4, -1.0, 1.0), s.uniform(&[2, 2, 4, 5], -1.0, 1.0)],
        &|g, v| {
            let y = g.concat_channels(v)?;
            weighted_sum(g, y, 3)
        },
    )?;
    for (name, stride, padding) in [("conv2d_same", 1, 1), ("conv2d_strided", 2, 0), ("conv2d_padded_strided", 2, 2)] {
        let inputs = vec![s.uniform(&x4, -1.0, 1.0), s.uniform(&[4, 3, 3, 3], -1.0, 1.0), s.uniform(&[4], -1.0, 1.0)];
        run(name, inputs, &|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, padding)?;
            weighted_sum(g, y, 4)
        })?;
    }
    run(
        "conv2d_pointwise",
        vec![s.uniform(&x4, -1.0, 1.0), s.uniform(&[2, 3, 1, 1], -1.0, 1.0), s.uniform(&[2], -1.0, 1.0)],
        &|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
            weighted_sum(g, y, 5)
        },
    )?;

    let shape = AttentionShape { channels: 6, reduction: 4, spatial_kernel: 3 };
    type Block = fn(&mut Graph<f64>, Var, &AttentionParams) -> Result<Var>;
    let blocks: [(&str, Block); 3] =
        [("channel_attention", channel_attention), ("spatial_attention", spatial_attention), ("cbam", cbam)];
    for (name, block) in blocks {
        let mut inputs = vec![s.uniform(&[2, 6, 5, 5], -1.0, 1.0)];
        inputs.extend(attention_inputs(&mut s, &shape));
        run(name, inputs, &|g, v| {
            let p = attention_params(&shape, &v[1..])?;
            let y = block(g, v[0], &p)?;
            weighted_sum(g, y, 6)
        })?;
    }

    let img = [2, 3, 4, 4];
    run(
        "recursive_update",
        vec![s.uniform(&img, 0.05, 0.6), s.uniform(&img, 0.05, 0.95), s.uniform(&img, 0.2, 1.0)],
        &|g, v| {
            let y = recursive_update(g, v[0], v[1], v[2])?;
            weighted_sum(g, y, 7)
        },
    )?;
    run("loss_local_color", vec![s.uniform(&img, 0.05, 1.0), s.uniform(&img, 0.05, 1.0)], &|g, v| {
        loss_local_color(g, v[0], v[1])
    })?;
    for (name, mode) in [("loss_chroma_factor_map", ChromaMode::FactorMap), ("loss_chroma_channel_mean", ChromaMode::ChannelMean)] {
        run(name, vec![s.uniform(&img, 0.05, 1.0)], &|g, v| loss_global_chroma(g, v[0], mode))?;
    }
    // the exposure target is a constant derived from the input, so only the
    // output is differentiated
    let low = s.uniform(&img, 0.05, 1.0);
    run("loss_brightness", vec![s.uniform(&img, 0.05, 1.0)], &|g, v| {
        let input = g.constant(low.clone());
        loss_brightness(g, input, v[0], 0.6)
    })?;
    run(
        "loss_smoothness",
        (0..4).map(|_| s.uniform(&img, 0.0, 1.0)).collect(),
        &|g, v| {
            let (s1, s2) = loss_smoothness(g, &[(v[0], v[1]), (v[2], v[3])])?;
            let s2 = g.scale(s2, 0.7);
            g.add(s1, s2)
        },
    )?;
    Ok(entries)
}

fn random_image(size: usize, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RawImage::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()]);
    to_unit_tensor(&img)
}

/// Total training loss of `config` on one random `size × size` image,
/// differentiated with respect to every parameter tensor, plus one
/// directional check across all parameters together.
pub fn check_model(checker: &GradCheck, name: &str, config: &EnhancerConfig, size: usize) -> Result<Vec<GradCheckEntry>> {
    let store = init_params::<f64>(config, checker.seed)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    // small non-zero biases so that bias gradients are exercised away from
    // the symmetric initial point
    let mut rng = ChaCha8Rng::seed_from_u64(checker.seed ^ 0xB1A5);
    for t in inputs.iter_mut().filter(|t| t.shape().len() == 1) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let image = random_image(size, checker.seed)?;
    let loss = LossConfig::default();
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let x = g.constant(image.clone());
        let trace: TraceVars = build_forward(g, &bound, config, x, None)?;
        Ok(loss_total(g, &trace, &loss)?.total)
    };
    let mut entries = Vec::with_capacity(names.len() + 1);
    for (i, pname) in names.iter().enumerate() {
        // perturb one tensor at a time; the others enter as constants
        let fixed: Vec<Tensor<f64>> = inputs.clone();
        let single = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let vars: Vec<Var> = fixed
                .iter()
                .enumerate()
                .map(|(j, t)| if j == i { v[0] } else { g.constant(t.clone()) })
                .collect();
            f(g, &vars)
        };
        entries.push(checker.check(&format!("{name}/{pname}"), &[inputs[i].clone()], &single)?);
    }
    entries.push(checker.check_directional(&format!("{name}/directional"), &inputs, &f)?);
    Ok(entries)
}

/// Ops plus the full loss for the default model and its no-decomposition
/// variant on `size × size` inputs.
pub fn run_suite(size: usize, seed: u64) -> Result<GradCheckReport> {
    let checker = GradCheck { seed, ..Default::default() };
    let mut entries = check_ops(&checker)?;
    let base = EnhancerConfig::default();
    entries.extend(check_model(&checker, "model", &base, size)?);
    let lifted = EnhancerConfig { self_information: false, ..base };
    entries.extend(check_model(&checker, "model_no_simm", &lifted, size)?);
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-3), 0.5);
        assert_eq!(relative_error(1e-9, 0.0, 1e-3), 1e-6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x·|x| with |x| detached from the graph: the analytic gradient is
        // |x| while the true derivative is 2|x|
        let checker = GradCheck::default();
        let x = Tensor::new(&[1, 1, 1, 2], vec![-0.5, 0.7]).unwrap();
        let entry = checker
            .check("frozen", &[x], &|g, v| {
                let k = g.value(v[0]).map(|a| a.abs());
                let k = g.constant(k);
                let y = g.mul(v[0], k)?;
                Ok(g.sum(y))
            })
            .unwrap();
        assert!(entry.max_rel_err > 0.1, "{entry:?}");
    }

    #[test]
    fn ops_pass() {
        let report = GradCheckReport { entries: check_ops(&GradCheck::default()).unwrap() };
        for e in &report.entries {
            assert!(e.max_rel_err < TOLERANCE, "{e:?}");
        }
    }
}

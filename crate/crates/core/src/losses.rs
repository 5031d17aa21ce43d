//! Zero-reference training losses.
//!
//! With colour factors `F^c = I^c / (Σ_c I^c + ε)`:
//!
//! * local colour: `Σ_c mean_px |F^c_in − F^c_out|`
//! * global chroma: `Σ_c (φ^c − 1/3)²`, `φ^c` the spatial mean of `F^c_out`
//!   (or of the raw output channel, see [`ChromaMode`])
//! * brightness: `mean_px (B − Σ_c I^c_out)²` with the per-image target
//!   `B = 3E · (1 − Σ_c rms_px(F^c_in − 1/3))`
//! * smoothness: `(1/N) Σ_c ‖∇L‖²` for each curve map, averaged over stages
//!
//! Every term is averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::enhancer::TraceVars;
use crate::error::{Result, SimiError};
use crate::nn::{Graph, Real, Tensor, Var};

/// Offset in the colour-factor denominator.
pub const FACTOR_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 200.0, beta: 300.0, gamma: 1.0, delta1: 200.0, delta2: 1000.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0, delta1: 0.0, delta2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta1, self.delta2];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(SimiError::InvalidConfig(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// What the global chroma term averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChromaMode {
    #[default]
    FactorMap,
    ChannelMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Target exposure `E` of the brightness term.
    pub exposure: f64,
    pub chroma: ChromaMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), exposure: 0.6, chroma: ChromaMode::FactorMap }
    }
}

/// Term values and their weighted total for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lc: f64,
    pub g: f64,
    pub lu: f64,
    pub s1: f64,
    pub s2: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.lc + w.beta * self.g + w.gamma * self.lu + w.delta1 * self.s1 + w.delta2 * self.s2
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lc: Var,
    pub g: Var,
    pub lu: Var,
    pub s1: Var,
    pub s2: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).item().as_f64();
        LossReport { lc: v(self.lc), g: v(self.g), lu: v(self.lu), s1: v(self.s1), s2: v(self.s2), total: v(self.total) }
    }
}

fn check_rgb<T: Real>(g: &Graph<T>, x: Var) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if c != 3 {
        return Err(SimiError::ChannelCountMismatch(c));
    }
    Ok((n, h, w))
}

fn check_same<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(SimiError::ShapeMismatch(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `F^c = I^c / (Σ_c I^c + ε)`, same shape as `img`.
pub fn color_factors<T: Real>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    check_rgb(g, img)?;
    let total = g.sum_channels(img)?;
    let denom = g.add_scalar(total, T::of(FACTOR_EPS));
    g.div(img, denom)
}

pub fn loss_local_color<T: Real>(g: &mut Graph<T>, input: Var, output: Var) -> Result<Var> {
    check_same(g, input, output)?;
    let fi = color_factors(g, input)?;
    let fo = color_factors(g, output)?;
    let d = g.sub(fi, fo)?;
    let d = g.abs(d);
    let m = g.mean(d);
    Ok(g.scale(m, T::of(3.0)))
}

pub fn loss_global_chroma<T: Real>(g: &mut Graph<T>, output: Var, mode: ChromaMode) -> Result<Var> {
    check_rgb(g, output)?;
    let source = match mode {
        ChromaMode::FactorMap => color_factors(g, output)?,
        ChromaMode::ChannelMean => output,
    };
    let phi = g.mean_spatial(source)?;
    let d = g.add_scalar(phi, T::of(-1.0 / 3.0));
    let sq = g.square(d);
    let m = g.mean(sq);
    Ok(g.scale(m, T::of(3.0)))
}

/// Per-image brightness target `B`, shaped `(N, 1, 1, 1)`.
pub fn brightness_target<T: Real>(input: &Tensor<T>, exposure: f64) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if c != 3 {
        return Err(SimiError::ChannelCountMismatch(c));
    }
    let hw = h * w;
    let third = 1.0 / 3.0;
    let targets = (0..n)
        .map(|b| {
            let px = &input.data()[b * 3 * hw..(b + 1) * 3 * hw];
            let mut sq = [0.0f64; 3];
            for p in 0..hw {
                let v = [px[p].as_f64(), px[hw + p].as_f64(), px[2 * hw + p].as_f64()];
                let s = v[0] + v[1] + v[2] + FACTOR_EPS;
                for ch in 0..3 {
                    sq[ch] += (v[ch] / s - third).powi(2);
                }
            }
            let deviation: f64 = sq.iter().map(|s| (s / hw as f64).sqrt()).sum();
            T::of(3.0 * exposure * (1.0 - deviation))
        })
        .collect();
    Tensor::new(&[n, 1, 1, 1], targets)
}

pub fn loss_brightness<T: Real>(g: &mut Graph<T>, input: Var, output: Var, exposure: f64) -> Result<Var> {
    check_same(g, input, output)?;
    let target = brightness_target(g.value(input), exposure)?;
    let target = g.constant(target);
    let sum = g.sum_channels(output)?;
    let d = g.sub(sum, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `(s1, s2)` smoothness of the illumination and structure maps.
pub fn loss_smoothness<T: Real>(g: &mut Graph<T>, curves: &[(Var, Var)]) -> Result<(Var, Var)> {
    if curves.is_empty() {
        return Err(SimiError::EmptyTrace);
    }
    let (n, _, h, w) = g.value(curves[0].0).dims4()?;
    // sum over channels, mean over pixels, batch and stages
    let norm = T::one() / T::of((curves.len() * n * h * w) as f64);
    let mut sums = [Vec::new(), Vec::new()];
    for &(l1, l2) in curves {
        for (slot, map) in sums.iter_mut().zip([l1, l2]) {
            let (dx, dy) = g.spatial_gradient(map)?;
            let (sx, sy) = (g.square(dx), g.square(dy));
            let (sx, sy) = (g.sum(sx), g.sum(sy));
            slot.push(g.add(sx, sy)?);
        }
    }
    let mut out = [None, None];
    for (o, terms) in out.iter_mut().zip(sums) {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        *o = Some(g.scale(acc, norm));
    }
    Ok((out[0].expect("set"), out[1].expect("set")))
}

/// All terms plus the weighted total over a forward trace (uses `I_D`).
pub fn loss_total<T: Real>(g: &mut Graph<T>, trace: &TraceVars, config: &LossConfig) -> Result<LossVars> {
    let (input, output) = (trace.input(), trace.output());
    let lc = loss_local_color(g, input, output)?;
    let gl = loss_global_chroma(g, output, config.chroma)?;
    let lu = loss_brightness(g, input, output, config.exposure)?;
    let (s1, s2) = loss_smoothness(g, &trace.curves)?;
    let w = &config.weights;
    let terms = [(lc, w.alpha), (gl, w.beta), (lu, w.gamma), (s1, w.delta1), (s2, w.delta2)];
    let mut total = g.scale(terms[0].0, T::of(terms[0].1));
    for &(v, k) in &terms[1..] {
        let s = g.scale(v, T::of(k));
        total = g.add(total, s)?;
    }
    Ok(LossVars { lc, g: gl, lu, s1, s2, total })
}

//! The enhancement network.
//!
//! ```text
//! input ─ decompose ─ S × (conv3×3, SiLU) ─┐
//!   │                                      concat (24 + 3) ─ CBAM ─ stem conv
//!   └──────────────────────────────────────┘                          │
//!                               D × (curve block ─ recursive update) ─┘
//! ```
//!
//! Each curve block refines the feature trunk residually and predicts an
//! illumination map `L1 ∈ (0, 1)` and a structure map `L2 ∈ [ε, 1)`, both
//! `(N, 3, H, W)`. Stage `i` updates the image with its own curves:
//!
//! ```text
//! I_i = clamp(I + I·(L1 − I)·L1 / (σ₁₀(L2 − I − 0.1)·L2), 0, 1)
//! σ₁₀(x) = 1 / (1 + e^{−10x})
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::attention::{cbam, AttentionParams, AttentionShape};
use crate::decompose::{decompose_batch, DecompositionMode, STACK_CHANNELS};
use crate::error::{Result, SimiError};
use crate::nn::checkpoint::{self, Digest};
use crate::nn::params::init_layout;
use crate::nn::{BoundParams, Graph, ParamStore, Real, Tensor, Var};

/// Offset inside the gate of the recursive update.
pub const GATE_OFFSET: f64 = 0.1;
/// Sharpness of the gate logistic.
pub const GATE_SHARPNESS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerConfig {
    /// Number of curve blocks / recursive updates (D).
    pub stages: usize,
    /// Number of conv + SiLU smoothing units over the planes (S).
    pub smoothing_units: usize,
    pub feature_channels: usize,
    pub decomposition: DecompositionMode,
    /// When false the planes are replaced by a learned 1×1 lift of the RGB
    /// input (the "without self-information" ablation).
    pub self_information: bool,
    pub epsilon_floor: f64,
    pub attention_reduction: usize,
    pub attention_kernel: usize,
    pub seed: u64,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            stages: 7,
            smoothing_units: 2,
            feature_channels: 16,
            decomposition: DecompositionMode::BitPlane,
            self_information: true,
            epsilon_floor: 1e-3,
            attention_reduction: 4,
            attention_kernel: 7,
            seed: 0,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(SimiError::InvalidConfig("stages (D) must be at least 1".into()));
        }
        if self.feature_channels == 0 {
            return Err(SimiError::InvalidConfig("feature_channels must be positive".into()));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 1.0) {
            return Err(SimiError::InvalidConfig(format!(
                "epsilon_floor must lie in (0, 1), got {}",
                self.epsilon_floor
            )));
        }
        self.decomposition.validate()?;
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionShape {
        AttentionShape {
            channels: STACK_CHANNELS + 3,
            reduction: self.attention_reduction,
            spatial_kernel: self.attention_kernel,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> Digest {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    /// Parameter names and shapes in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (p, f) = (STACK_CHANNELS, self.feature_channels);
        let conv = |name: String, out: usize, inp: usize, k: usize| {
            [(format!("{name}.weight"), vec![out, inp, k, k]), (format!("{name}.bias"), vec![out])]
        };
        let mut layout = Vec::new();
        if !self.self_information {
            layout.extend(conv("lift".into(), p, 3, 1));
        }
        for i in 0..self.smoothing_units {
            layout.extend(conv(format!("smooth.{i}"), p, p, 3));
        }
        layout.extend(self.attention().layout("attn"));
        layout.extend(conv("stem".into(), f, p + 3, 3));
        for i in 0..self.stages {
            layout.extend(conv(format!("dea.{i}.trunk1"), f, f, 3));
            layout.extend(conv(format!("dea.{i}.trunk2"), f, f, 3));
            layout.extend(conv(format!("dea.{i}.l1"), 3, f, 3));
            layout.extend(conv(format!("dea.{i}.l2"), 3, f, 3));
        }
        layout
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Deterministic Kaiming-uniform initialisation of every parameter.
pub fn init_params<T: Real>(config: &EnhancerConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    init_layout(&config.layout(), seed)
}

/// Illumination (`L1`) and structure (`L2`) maps of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePair<T> {
    pub illumination: Tensor<T>,
    pub structure: Tensor<T>,
}

/// `I_0 … I_D` and the curves that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementTrace<T> {
    pub images: Vec<Tensor<T>>,
    pub curves: Vec<CurvePair<T>>,
}

impl<T: Real> EnhancementTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.images.last().expect("trace holds I_0")
    }
}

/// Graph handles of a forward pass.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub images: Vec<Var>,
    /// `(L1, L2)` per stage.
    pub curves: Vec<(Var, Var)>,
}

impl TraceVars {
    pub fn input(&self) -> Var {
        self.images[0]
    }

    pub fn output(&self) -> Var {
        *self.images.last().expect("trace holds I_0")
    }

    pub fn materialize<T: Real>(&self, g: &Graph<T>) -> EnhancementTrace<T> {
        EnhancementTrace {
            images: self.images.iter().map(|&v| g.value(v).clone()).collect(),
            curves: self
                .curves
                .iter()
                .map(|&(l1, l2)| CurvePair {
                    illumination: g.value(l1).clone(),
                    structure: g.value(l2).clone(),
                })
                .collect(),
        }
    }
}

/// Replaces the curves of stage `i` given `I_{i-1}` and the predicted pair.
pub type CurveHook<'h, T> = dyn Fn(&mut Graph<T>, usize, Var, (Var, Var)) -> Result<(Var, Var)> + 'h;

fn conv<T: Real>(g: &mut Graph<T>, bound: &BoundParams, name: &str, x: Var, padding: usize) -> Result<Var> {
    let w = bound.get(&format!("{name}.weight"))?;
    let b = bound.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, 1, padding)
}

/// `S` sequential (3×3 same-padded conv, SiLU) units; `S = 0` is the identity.
pub fn smoothing_stack<T: Real>(g: &mut Graph<T>, bound: &BoundParams, planes: Var, units: usize) -> Result<Var> {
    let mut x = planes;
    for i in 0..units {
        let y = conv(g, bound, &format!("smooth.{i}"), x, 1)?;
        x = g.silu(y);
    }
    Ok(x)
}

/// One curve block: residual trunk plus the two curve heads.
pub fn dea_block<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    stage: usize,
    features: Var,
    epsilon_floor: f64,
) -> Result<(Var, (Var, Var))> {
    let t = conv(g, bound, &format!("dea.{stage}.trunk1"), features, 1)?;
    let t = g.silu(t);
    let t = conv(g, bound, &format!("dea.{stage}.trunk2"), t, 1)?;
    let features = g.add(features, t)?;
    let l1 = conv(g, bound, &format!("dea.{stage}.l1"), features, 1)?;
    let l1 = g.sigmoid(l1);
    let l2 = conv(g, bound, &format!("dea.{stage}.l2"), features, 1)?;
    let l2 = g.sigmoid(l2);
    let l2 = g.scale(l2, T::of(1.0 - epsilon_floor));
    let l2 = g.add_scalar(l2, T::of(epsilon_floor));
    Ok((features, (l1, l2)))
}

/// One recursive enhancement step, clamped to `[0, 1]`.
pub fn recursive_update<T: Real>(g: &mut Graph<T>, prev: Var, l1: Var, l2: Var) -> Result<Var> {
    let diff = g.sub(l1, prev)?;
    let gate_arg = g.sub(l2, prev)?;
    let gate_arg = g.add_scalar(gate_arg, T::of(-GATE_OFFSET));
    let gate = g.logistic(gate_arg, T::of(GATE_SHARPNESS));
    let denom = g.mul(gate, l2)?;
    let modulation = g.div(l1, denom)?;
    let delta = g.mul(prev, diff)?;
    let delta = g.mul(delta, modulation)?;
    let next = g.add(prev, delta)?;
    Ok(g.clamp(next, T::zero(), T::one()))
}

/// Builds the forward pass for a `(N, 3, H, W)` input node.
pub fn build_forward<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    config: &EnhancerConfig,
    input: Var,
    hook: Option<&CurveHook<'_, T>>,
) -> Result<TraceVars> {
    let (_, c, _, _) = g.value(input).dims4()?;
    if c != 3 {
        return Err(SimiError::ChannelCountMismatch(c));
    }
    let planes = if config.self_information {
        let stack = decompose_batch(g.value(input), &config.decomposition)?;
        g.constant(stack)
    } else {
        conv(g, bound, "lift", input, 0)?
    };
    let smoothed = smoothing_stack(g, bound, planes, config.smoothing_units)?;
    let fused = g.concat_channels(&[smoothed, input])?;
    let attn = AttentionParams::from_bound(bound, "attn", config.attention_kernel)?;
    let attended = cbam(g, fused, &attn)?;
    let mut features = conv(g, bound, "stem", attended, 1)?;

    let mut images = vec![input];
    let mut curves = Vec::with_capacity(config.stages);
    for stage in 0..config.stages {
        let (next_features, predicted) = dea_block(g, bound, stage, features, config.epsilon_floor)?;
        features = next_features;
        let prev = *images.last().expect("non-empty");
        let (l1, l2) = match hook {
            Some(h) => h(g, stage, prev, predicted)?,
            None => predicted,
        };
        images.push(recursive_update(g, prev, l1, l2)?);
        curves.push((l1, l2));
    }
    Ok(TraceVars { images, curves })
}

fn check_input<T: Real>(input: &Tensor<T>) -> Result<()> {
    let (_, c, _, _) = input.dims4()?;
    if c != 3 {
        return Err(SimiError::ChannelCountMismatch(c));
    }
    if let Some(v) = input.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(SimiError::InvalidConfig(format!("input value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Inference: runs the network on an image batch in `[0, 1]`.
pub fn forward<T: Real>(input: &Tensor<T>, store: &ParamStore<T>, config: &EnhancerConfig) -> Result<EnhancementTrace<T>> {
    forward_with_hook(input, store, config, None)
}

pub fn forward_with_hook<T: Real>(
    input: &Tensor<T>,
    store: &ParamStore<T>,
    config: &EnhancerConfig,
    hook: Option<&CurveHook<'_, T>>,
) -> Result<EnhancementTrace<T>> {
    check_input(input)?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let x = g.constant(input.clone());
    Ok(build_forward(&mut g, &bound, config, x, hook)?.materialize(&g))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: EnhancerConfig,
}

/// A model configuration with its parameters and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: EnhancerConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&CheckpointMeta { model: self.config.clone() }).expect("config serializes");
        checkpoint::encode(&self.store, &self.config.digest(), &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let data = checkpoint::decode::<T>(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&data.meta).map_err(|e| SimiError::CorruptCheckpoint(e.to_string()))?;
        if meta.model.digest() != data.digest {
            return Err(SimiError::CorruptCheckpoint("stored digest does not match stored config".into()));
        }
        let expected = meta.model.layout();
        let matches = expected.len() == data.store.len()
            && expected
                .iter()
                .zip(data.store.iter())
                .all(|((n, s), (name, p))| n == name && s.as_slice() == p.value.shape());
        if !matches {
            return Err(SimiError::CorruptCheckpoint("parameters do not match the stored config".into()));
        }
        Ok(Self { config: meta.model, store: data.store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(SimiError::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EnhancerConfig {
        EnhancerConfig { stages: 2, smoothing_units: 1, feature_channels: 4, ..Default::default() }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| f64::from(rng.random_range(0u8..=255)) / 255.0)
    }

    fn eval_update(prev: f64, l1: f64, l2: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let t = |v| Tensor::scalar(v).reshape(&[1, 1, 1, 1]).unwrap();
        let (p, a, b) = (g.constant(t(prev)), g.constant(t(l1)), g.constant(t(l2)));
        let out = recursive_update(&mut g, p, a, b).unwrap();
        g.value(out).item()
    }

    #[test]
    fn update_worked_example() {
        // σ₁₀(0.5 − 0.2 − 0.1) = 1 / (1 + e^{-2})
        let gate = 1.0 / (1.0 + (-2.0f64).exp());
        let expected = 0.2 + 0.2 * 0.3 * (0.5 / (gate * 0.5));
        assert!((eval_update(0.2, 0.5, 0.5) - expected).abs() < 1e-15);
        assert!((expected - 0.268120).abs() < 1e-6);
    }

    #[test]
    fn update_fixed_points() {
        assert_eq!(eval_update(0.37, 0.37, 0.9), 0.37);
        assert_eq!(eval_update(0.0, 0.8, 0.2), 0.0);
    }

    #[test]
    fn update_rejects_zero_structure_map() {
        let mut g = Graph::<f64>::new();
        let t = |v| Tensor::scalar(v).reshape(&[1, 1, 1, 1]).unwrap();
        let (p, a, b) = (g.constant(t(0.5)), g.constant(t(0.5)), g.constant(t(0.0)));
        assert!(matches!(recursive_update(&mut g, p, a, b), Err(SimiError::DivisionRangeViolation { .. })));
    }

    #[test]
    fn default_budget() {
        let count = EnhancerConfig::default().parameter_count();
        assert!(count <= 200_000, "{count}");
        let store = init_params::<f32>(&EnhancerConfig::default(), 0).unwrap();
        assert_eq!(store.num_parameters(), count);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params::<f32>(&tiny(), 3).unwrap();
        assert_eq!(a, init_params::<f32>(&tiny(), 3).unwrap());
        assert_ne!(a, init_params::<f32>(&tiny(), 4).unwrap());
    }

    #[test]
    fn forward_shapes_ranges_and_determinism() {
        let cfg = tiny();
        let store = init_params::<f64>(&cfg, 1).unwrap();
        let x = random_image(6, 7, 2);
        let trace = forward(&x, &store, &cfg).unwrap();
        assert_eq!(trace.images.len(), cfg.stages + 1);
        assert_eq!(trace.images[0], x);
        assert_eq!(trace.output().shape(), x.shape());
        assert!(trace.output().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for pair in &trace.curves {
            assert!(pair.illumination.data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(pair.structure.data().iter().all(|&v| (1e-3..1.0).contains(&v)));
        }
        assert_eq!(trace, forward(&x, &store, &cfg).unwrap());
    }

    #[test]
    fn zero_heads_give_constant_curves() {
        let cfg = tiny();
        let mut store = init_params::<f64>(&cfg, 1).unwrap();
        for name in ["dea.0.l1.weight", "dea.0.l2.weight"] {
            let p = store.param_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
        let trace = forward(&random_image(4, 4, 0), &store, &cfg).unwrap();
        let eps = cfg.epsilon_floor;
        assert!(trace.curves[0].illumination.data().iter().all(|&v| v == 0.5));
        assert!(trace.curves[0].structure.data().iter().all(|&v| (v - (eps + (1.0 - eps) / 2.0)).abs() < 1e-15));
    }

    #[test]
    fn smoothing_edge_cases() {
        let cfg = EnhancerConfig { smoothing_units: 2, ..tiny() };
        let mut store = init_params::<f64>(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let zeros = g.constant(Tensor::zeros(&[1, 24, 4, 4]));
        let out = smoothing_stack(&mut g, &bound, zeros, 2).unwrap();
        assert_eq!(g.shape(out), &[1, 24, 4, 4]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let same = smoothing_stack(&mut g, &bound, zeros, 0).unwrap();
        assert_eq!(same, zeros);
        store.zero_grads();
    }

    #[test]
    fn hooked_fixed_point_returns_input() {
        let cfg = tiny();
        let store = init_params::<f32>(&cfg, 1).unwrap();
        let x = random_image(5, 5, 8).cast::<f32>();
        let hook = |_: &mut Graph<f32>, _: usize, prev: Var, (_, l2): (Var, Var)| Ok((prev, l2));
        let trace = forward_with_hook(&x, &store, &cfg, Some(&hook)).unwrap();
        assert_eq!(trace.output(), &x);
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let cfg = tiny();
        let store = init_params::<f64>(&cfg, 1).unwrap();
        assert!(forward(&Tensor::full(&[1, 3, 2, 2], 1.5), &store, &cfg).is_err());
        assert!(matches!(
            forward(&Tensor::zeros(&[1, 2, 2, 2]), &store, &cfg),
            Err(SimiError::ChannelCountMismatch(2))
        ));
        assert!(EnhancerConfig { stages: 0, ..tiny() }.validate().is_err());
        assert!(EnhancerConfig { epsilon_floor: 0.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let ckpt = Checkpoint { config: cfg.clone(), store: init_params::<f32>(&cfg, 2).unwrap() };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert_ne!(cfg.digest(), EnhancerConfig { stages: 3, ..cfg.clone() }.digest());
    }
}

//! CBAM-style attention: a channel gate followed by a spatial gate.
//!
//! The channel gate is `σ(MLP(avgpool x) + MLP(maxpool x))` with a shared
//! two-layer MLP (1×1 convolutions, ReLU between). The spatial gate is
//! `σ(conv([mean_c x, max_c x]))` with a `k × k` kernel. Both gates lie in
//! `(0, 1)`, so the block never amplifies a response.

use crate::error::{Result, SimiError};
use crate::nn::{BoundParams, Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub channels: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl AttentionShape {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 {
            return Err(SimiError::InvalidConfig("attention needs channels and reduction > 0".into()));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(SimiError::InvalidConfig(format!(
                "spatial attention kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }

    /// Hidden width of the channel MLP, `floor(C / r)` but at least one.
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    pub fn layout(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let (c, h, k) = (self.channels, self.hidden(), self.spatial_kernel);
        vec![
            (format!("{prefix}.mlp1.weight"), vec![h, c, 1, 1]),
            (format!("{prefix}.mlp1.bias"), vec![h]),
            (format!("{prefix}.mlp2.weight"), vec![c, h, 1, 1]),
            (format!("{prefix}.mlp2.bias"), vec![c]),
            (format!("{prefix}.spatial.weight"), vec![1, 2, k, k]),
            (format!("{prefix}.spatial.bias"), vec![1]),
        ]
    }
}

/// Graph handles for one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub mlp1_weight: Var,
    pub mlp1_bias: Var,
    pub mlp2_weight: Var,
    pub mlp2_bias: Var,
    pub spatial_weight: Var,
    pub spatial_bias: Var,
    pub spatial_kernel: usize,
}

impl AttentionParams {
    pub fn from_bound(bound: &BoundParams, prefix: &str, spatial_kernel: usize) -> Result<Self> {
        Ok(Self {
            mlp1_weight: bound.get(&format!("{prefix}.mlp1.weight"))?,
            mlp1_bias: bound.get(&format!("{prefix}.mlp1.bias"))?,
            mlp2_weight: bound.get(&format!("{prefix}.mlp2.weight"))?,
            mlp2_bias: bound.get(&format!("{prefix}.mlp2.bias"))?,
            spatial_weight: bound.get(&format!("{prefix}.spatial.weight"))?,
            spatial_bias: bound.get(&format!("{prefix}.spatial.bias"))?,
            spatial_kernel,
        })
    }
}

fn shared_mlp<T: Real>(g: &mut Graph<T>, descriptor: Var, p: &AttentionParams) -> Result<Var> {
    let hidden = g.conv2d(descriptor, p.mlp1_weight, p.mlp1_bias, 1, 0)?;
    let hidden = g.relu(hidden);
    g.conv2d(hidden, p.mlp2_weight, p.mlp2_bias, 1, 0)
}

/// Per-channel gate shaped `(N, C, 1, 1)`.
pub fn channel_gate<T: Real>(g: &mut Graph<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    let avg = g.mean_spatial(x)?;
    let max = g.max_spatial(x)?;
    let a = shared_mlp(g, avg, p)?;
    let m = shared_mlp(g, max, p)?;
    let logits = g.add(a, m)?;
    Ok(g.sigmoid(logits))
}

pub fn channel_attention<T: Real>(g: &mut Graph<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    let gate = channel_gate(g, x, p)?;
    g.mul(x, gate)
}

/// Per-pixel gate shaped `(N, 1, H, W)`.
pub fn spatial_gate<T: Real>(g: &mut Graph<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    let mean = g.mean_channels(x)?;
    let max = g.max_channels(x)?;
    let pooled = g.concat_channels(&[mean, max])?;
    let logits = g.conv2d(pooled, p.spatial_weight, p.spatial_bias, 1, p.spatial_kernel / 2)?;
    Ok(g.sigmoid(logits))
}

pub fn spatial_attention<T: Real>(g: &mut Graph<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    let gate = spatial_gate(g, x, p)?;
    g.mul(x, gate)
}

/// Channel attention, then spatial attention.
pub fn cbam<T: Real>(g: &mut Graph<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    let x = channel_attention(g, x, p)?;
    spatial_attention(g, x, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{params::init_layout, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SHAPE: AttentionShape = AttentionShape { channels: 4, reduction: 2, spatial_kernel: 3 };

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn zero_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, shape) in SHAPE.layout("attn") {
            s.insert(name, Tensor::zeros(&shape)).unwrap();
        }
        s
    }

    fn run(
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        f: fn(&mut Graph<f64>, Var, &AttentionParams) -> Result<Var>,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let p = AttentionParams::from_bound(&bound, "attn", SHAPE.spatial_kernel).unwrap();
        let xv = g.constant(x.clone());
        let out = f(&mut g, xv, &p).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn zero_params_halve_and_quarter() {
        let store = zero_store();
        let x = random(&[2, 4, 5, 6], 1);
        let half = x.map(|v| 0.5 * v);
        assert!(run(&store, &x, channel_attention).max_abs_diff(&half) < 1e-15);
        assert!(run(&store, &x, spatial_attention).max_abs_diff(&half) < 1e-15);
        let out = run(&store, &x, cbam);
        assert_eq!(out.shape(), x.shape());
        assert!(out.max_abs_diff(&x.map(|v| 0.25 * v)) < 1e-15);
    }

    #[test]
    fn gates_bounded_and_output_shrinks() {
        let store = init_layout::<f64>(&SHAPE.layout("attn"), 5).unwrap();
        let x = random(&[1, 4, 6, 6], 2);
        let gc = run(&store, &x, channel_gate);
        let gs = run(&store, &x, spatial_gate);
        assert_eq!(gc.shape(), &[1, 4, 1, 1]);
        assert_eq!(gs.shape(), &[1, 1, 6, 6]);
        assert!(gc.data().iter().chain(gs.data()).all(|&v| v > 0.0 && v < 1.0));
        let out = run(&store, &x, cbam);
        assert!(out.data().iter().zip(x.data()).all(|(o, i)| o.abs() <= i.abs()));
    }

    #[test]
    fn channel_gate_permutation_equivariant() {
        let store = init_layout::<f64>(&SHAPE.layout("attn"), 9).unwrap();
        let x = random(&[1, 4, 5, 5], 3);
        let perm = [2usize, 0, 3, 1];
        let hw = 25;
        let px = Tensor::from_fn(x.shape(), |k| x.data()[perm[k / hw] * hw + k % hw]);
        // permute MLP input columns and output rows consistently
        let mut ps = store.clone();
        let h = SHAPE.hidden();
        let w1 = store.get("attn.mlp1.weight").unwrap();
        ps.param_mut("attn.mlp1.weight").unwrap().value =
            Tensor::from_fn(w1.shape(), |k| w1.data()[(k / 4) * 4 + perm[k % 4]]);
        let w2 = store.get("attn.mlp2.weight").unwrap();
        ps.param_mut("attn.mlp2.weight").unwrap().value =
            Tensor::from_fn(w2.shape(), |k| w2.data()[perm[k / h] * h + k % h]);
        let b2 = store.get("attn.mlp2.bias").unwrap();
        ps.param_mut("attn.mlp2.bias").unwrap().value = Tensor::from_fn(b2.shape(), |k| b2.data()[perm[k]]);
        let g = run(&store, &x, channel_gate);
        let pg = run(&ps, &px, channel_gate);
        for (k, &p) in perm.iter().enumerate() {
            assert!((pg.data()[k] - g.data()[p]).abs() < 1e-14);
        }
    }

    #[test]
    fn spatial_gate_shift_equivariant() {
        let store = init_layout::<f64>(&SHAPE.layout("attn"), 4).unwrap();
        let (h, w) = (10, 10);
        let big = random(&[1, 4, h, w + 1], 6);
        // x and its copy translated one column right
        let x = Tensor::from_fn(&[1, 4, h, w], |k| big.data()[(k / w) * (w + 1) + k % w]);
        let shifted = Tensor::from_fn(&[1, 4, h, w], |k| big.data()[(k / w) * (w + 1) + k % w + 1]);
        let g0 = run(&store, &x, spatial_gate);
        let g1 = run(&store, &shifted, spatial_gate);
        let r = SHAPE.spatial_kernel / 2;
        for y in r..h - r {
            for c in r + 1..w - r {
                assert!((g0.data()[y * w + c] - g1.data()[y * w + c - 1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn kernel_must_be_odd() {
        let bad = AttentionShape { spatial_kernel: 4, ..SHAPE };
        assert!(bad.validate().is_err());
        assert_eq!(AttentionShape { channels: 27, reduction: 4, spatial_kernel: 7 }.hidden(), 6);
    }
}

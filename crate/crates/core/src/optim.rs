//! Adam with per-group learning-rate scaling, L2 decay on weight matrices,
//! L1 pressure on structural parameters and projection onto [0, 1].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-depth learning-rate factor.
pub const DEPTH_DECAY: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Bias,
    TunnelGate,
    HighwayGateWeight,
    HighwayGateBias,
    Gamma,
}

impl ParamRole {
    /// Architecture-encoding parameters living in [0, 1].
    pub fn is_structural(self) -> bool {
        matches!(self, ParamRole::TunnelGate | ParamRole::Gamma)
    }

    /// Weight matrices, the only parameters that get L2 decay.
    pub fn is_weight_matrix(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::HighwayGateWeight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroup {
    pub role: ParamRole,
    pub depth_index: usize,
    pub lr_scale: f64,
}

impl ParamGroup {
    pub fn new(role: ParamRole, depth_index: usize, depth_decay: bool) -> Self {
        let lr_scale = if depth_decay {
            DEPTH_DECAY.powi(depth_index as i32)
        } else {
            1.0
        };
        ParamGroup {
            role,
            depth_index,
            lr_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Moments below this are set to 0. A moment that keeps decaying under zero
/// gradients would otherwise pass through the subnormal range, where
/// arithmetic is orders of magnitude slower; its effect on any update is
/// far below f64 resolution.
const MOMENT_FLOOR: f64 = 1e-300;

fn flush_tiny(x: f64) -> f64 {
    if x.abs() < MOMENT_FLOOR {
        0.0
    } else {
        x
    }
}

/// One bias-corrected Adam update of `p` in place.
pub fn adam_step(config: &AdamConfig, state: &mut AdamState, p: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if p.len() != grad.len() || state.m.len() != p.len() {
        return Err(Error::Config(format!(
            "adam: parameter has {} values, gradient {}, state {}",
            p.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at index {i}")));
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let inv_c1 = 1.0 / (1.0 - b1.powi(state.t as i32));
    let inv_c2 = 1.0 / (1.0 - b2.powi(state.t as i32));
    for (((w, &g), m), v) in p.iter_mut().zip(grad).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = flush_tiny(b1 * *m + (1.0 - b1) * g);
        *v = flush_tiny(b2 * *v + (1.0 - b2) * g * g);
        *w -= lr * (*m * inv_c1) / ((*v * inv_c2).sqrt() + config.epsilon);
    }
    Ok(())
}

/// Adds the L1 subgradient of the structural penalty: `+λ` for tunnel
/// gates (penalty `λ Σ g`), `-λ` for leafness (penalty `λ Σ (1-γ)`).
/// Highway gates get none.
pub fn apply_structural_penalty(role: ParamRole, grad: &mut [f64], lambda: f64) {
    let delta = match role {
        ParamRole::TunnelGate => lambda,
        ParamRole::Gamma => -lambda,
        _ => return,
    };
    grad.iter_mut().for_each(|g| *g += delta);
}

pub fn project_unit_interval(value: f64) -> f64 {
    value.clamp(0.0, 1.0)
}

/// `grad += 2c·p` for weight matrices; other roles are left alone.
pub fn l2_decay(role: ParamRole, p: &[f64], grad: &mut [f64], c: f64) {
    if !role.is_weight_matrix() || c == 0.0 {
        return;
    }
    for (g, &w) in grad.iter_mut().zip(p) {
        *g += 2.0 * c * w;
    }
}

/// Identifies a parameter tensor across steps, e.g. `("hidden.w", 3)`.
pub type ParamKey = (&'static str, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub lambda: f64,
    pub l2: f64,
}

/// Adam state for every parameter tensor of a model, created lazily so
/// parameters that appear mid-training (budding growth) start fresh.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    pub config: AdamConfig,
    states: HashMap<ParamKey, AdamState>,
}

impl Optimizer {
    pub fn new(config: AdamConfig) -> Self {
        Optimizer {
            config,
            states: HashMap::new(),
        }
    }

    /// Regularizes `grad`, takes an Adam step at `base_lr * group.lr_scale`
    /// and projects structural parameters back into [0, 1].
    pub fn update(
        &mut self,
        key: ParamKey,
        group: ParamGroup,
        p: &mut [f64],
        grad: &[f64],
        base_lr: f64,
        reg: Regularization,
    ) -> Result<()> {
        let mut g = grad.to_vec();
        l2_decay(group.role, p, &mut g, reg.l2);
        apply_structural_penalty(group.role, &mut g, reg.lambda);
        let state = self.states.entry(key).or_insert_with(|| AdamState::new(p.len()));
        if state.m.len() != p.len() {
            *state = AdamState::new(p.len());
        }
        adam_step(&self.config, state, p, &g, base_lr * group.lr_scale).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!(
                "{msg} in parameter {}[{}] ({:?}, depth {})",
                key.0, key.1, group.role, group.depth_index
            )),
            other => other,
        })?;
        if group.role.is_structural() {
            p.iter_mut().for_each(|v| *v = project_unit_interval(*v));
        }
        Ok(())
    }

    pub fn state(&self, key: ParamKey) -> Option<&AdamState> {
        self.states.get(&key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decaying_moments_skip_the_subnormal_range() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(1);
        let mut p = [0.5];
        adam_step(&cfg, &mut st, &mut p, &[1.0], 0.001).unwrap();
        for _ in 0..10_000 {
            adam_step(&cfg, &mut st, &mut p, &[0.0], 0.001).unwrap();
            assert!(st.m[0] == 0.0 || st.m[0].is_normal());
            assert!(st.v[0] == 0.0 || st.v[0].is_normal());
        }
        assert_eq!(st.m[0], 0.0);
    }

    const NO_REG: Regularization = Regularization { lambda: 0.0, l2: 0.0 };

    #[test]
    fn first_adam_step_by_hand() {
        let mut state = AdamState::new(1);
        let mut p = [0.0];
        adam_step(&AdamConfig::default(), &mut state, &mut p, &[1.0], 0.001).unwrap();
        // m̂ = 1, v̂ = 1, step = lr / (1 + 1e-8)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] + 0.000_999_999_99).abs() < 1e-12);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn second_adam_step_by_hand() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(1);
        let mut p = [0.5];
        adam_step(&cfg, &mut state, &mut p, &[2.0], 0.01).unwrap();
        adam_step(&cfg, &mut state, &mut p, &[-1.0], 0.01).unwrap();
        let m1 = 0.1 * 2.0;
        let v1 = 0.001 * 4.0;
        let p1 = 0.5 - 0.01 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let m2 = 0.9 * m1 - 0.1;
        let v2 = 0.999 * v1 + 0.001 * 1.0;
        let p2 = p1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p[0] - p2).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut state = AdamState::new(3);
        let mut p = [0.1, -0.2, 0.3];
        for _ in 0..50 {
            adam_step(&AdamConfig::default(), &mut state, &mut p, &[0.0; 3], 0.01).unwrap();
        }
        assert_eq!(p, [0.1, -0.2, 0.3]);
    }

    #[test]
    fn non_finite_gradient_names_the_group() {
        let mut opt = Optimizer::default();
        let group = ParamGroup::new(ParamRole::Bias, 2, true);
        let err = opt
            .update(("hidden.b", 2), group, &mut [0.0], &[f64::NAN], 0.01, NO_REG)
            .unwrap_err();
        assert!(err.to_string().contains("hidden.b[2]"), "{err}");
    }

    #[test]
    fn structural_penalty_signs() {
        let mut g = [0.0, 1.0];
        apply_structural_penalty(ParamRole::TunnelGate, &mut g, 0.001);
        assert_eq!(g, [0.001, 1.001]);
        let mut g = [0.0];
        apply_structural_penalty(ParamRole::Gamma, &mut g, 0.001);
        assert_eq!(g, [-0.001]);
        let mut g = [0.5];
        apply_structural_penalty(ParamRole::HighwayGateBias, &mut g, 0.001);
        apply_structural_penalty(ParamRole::TunnelGate, &mut g, 0.0);
        assert_eq!(g, [0.5]);
    }

    #[test]
    fn projection() {
        assert_eq!(project_unit_interval(1.2), 1.0);
        assert_eq!(project_unit_interval(-0.3), 0.0);
        assert_eq!(project_unit_interval(0.5), 0.5);
    }

    #[test]
    fn l2_only_touches_weights() {
        let mut g = [0.0];
        l2_decay(ParamRole::Weight, &[1.0], &mut g, 1e-5);
        assert_eq!(g, [2e-5]);
        let mut g = [0.0];
        l2_decay(ParamRole::Weight, &[1.0], &mut g, 0.0);
        assert_eq!(g, [0.0]);
        for role in [ParamRole::TunnelGate, ParamRole::Gamma, ParamRole::Bias] {
            let mut g = [0.0];
            l2_decay(role, &[1.0], &mut g, 1e-5);
            assert_eq!(g, [0.0]);
        }
    }

    #[test]
    fn penalty_alone_closes_gates_and_opens_leaves() {
        let reg = Regularization { lambda: 0.001, l2: 0.0 };
        let mut opt = Optimizer::default();
        let gate = ParamGroup::new(ParamRole::TunnelGate, 1, true);
        let gamma = ParamGroup::new(ParamRole::Gamma, 0, true);
        let mut g = [0.6];
        let mut gm = [0.4];
        let (mut prev_g, mut prev_gm) = (g[0], gm[0]);
        for _ in 0..100 {
            opt.update(("g", 0), gate, &mut g, &[0.0], 0.003, reg).unwrap();
            opt.update(("gamma", 0), gamma, &mut gm, &[0.0], 0.003, reg).unwrap();
            assert!(g[0] <= prev_g && gm[0] >= prev_gm);
            assert!((0.0..=1.0).contains(&g[0]) && (0.0..=1.0).contains(&gm[0]));
            prev_g = g[0];
            prev_gm = gm[0];
        }
        assert!(g[0] < 0.6 - 0.2);
        assert!(gm[0] > 0.4 + 0.2);
    }

    #[test]
    fn depth_scaling_scales_the_step() {
        let reg = NO_REG;
        let mut base = None;
        for d in 0..5 {
            let mut opt = Optimizer::default();
            let group = ParamGroup::new(ParamRole::Weight, d, true);
            let mut p = [0.0];
            opt.update(("w", 0), group, &mut p, &[0.3], 0.01, reg).unwrap();
            let step = -p[0];
            let b = *base.get_or_insert(step);
            assert!((step - b * 0.75f64.powi(d as i32)).abs() < 1e-15);
        }
        assert_eq!(ParamGroup::new(ParamRole::Weight, 4, false).lr_scale, 1.0);
    }

    #[test]
    fn projection_keeps_structure_in_range() {
        let mut opt = Optimizer::default();
        let group = ParamGroup::new(ParamRole::TunnelGate, 0, false);
        let mut g = [0.999, 0.001];
        for i in 0..200 {
            let s = if i % 3 == 0 { 50.0 } else { -80.0 };
            opt.update(("g", 0), group, &mut g, &[s, -s], 0.5, NO_REG).unwrap();
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

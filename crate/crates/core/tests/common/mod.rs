//! Shared helpers for integration tests: a random-network gradient oracle.

#![allow(dead_code)]

use grownet::budding::BuddingTree;
use grownet::layers::{HeadKind, PerceptronLayer};
use grownet::model::{Architecture, Body, ModelSpec, Network};
use grownet::numeric::{Activation, Matrix, Rng};
use grownet::optim::ParamRole;

/// Relative error with the `max(|a|, |d|, 1e-8)` denominator.
pub fn rel_err(a: f64, d: f64) -> f64 {
    (a - d).abs() / a.abs().max(d.abs()).max(1e-8)
}

/// A random small network plus a batch to evaluate it on.
pub struct Probe {
    pub net: Network,
    pub x: Matrix,
    pub t: Matrix,
    pub description: String,
    /// Candidates drawn before this one and rejected for sitting too close
    /// to a ReLU kink.
    pub rejected: usize,
}

/// Smallest distance of any ReLU pre-activation to the kink at 0 below
/// which a probe point is resampled. Finite differences cannot resolve a
/// derivative that close to a non-differentiable point.
pub const KINK_MARGIN: f64 = 1e-3;

/// Random configuration with `K <= 6` and depth at most 3, at a point whose
/// ReLU pre-activations all keep [`KINK_MARGIN`] away from 0.
pub fn random_probe(arch: Architecture, seed: u64) -> Probe {
    let mut rng = Rng::new(seed);
    for rejected in 0.. {
        let mut p = candidate(arch, &mut rng);
        if kink_distance(&p.net, &p.x) >= KINK_MARGIN {
            p.rejected = rejected;
            return p;
        }
    }
    unreachable!()
}

fn min_abs_pre(layer: &PerceptronLayer, x: &Matrix) -> f64 {
    let (_, cache) = layer.forward(x).unwrap();
    match layer.activation {
        Activation::Relu => cache.pre.as_slice().iter().fold(f64::INFINITY, |m, z| m.min(z.abs())),
        _ => f64::INFINITY,
    }
}

fn budding_distance(tree: &BuddingTree, id: usize, x: &Matrix, out: &mut f64) -> Matrix {
    let node = tree.node(id);
    let slot = &tree.slots()[node.slot];
    *out = out.min(min_abs_pre(slot, x));
    let h = slot.forward(x).unwrap().0;
    if node.gamma >= 1.0 || node.children.is_none() {
        if let Some(bud) = tree.bud(id) {
            *out = out.min(min_abs_pre(bud, &h));
        }
        return h;
    }
    let (l, r) = node.children.unwrap();
    let yl = budding_distance(tree, l, x, out);
    let composed = budding_distance(tree, r, &yl, out);
    let g = node.gamma;
    let data = composed
        .as_slice()
        .iter()
        .zip(h.as_slice())
        .map(|(c, v)| (1.0 - g) * c + g * v)
        .collect();
    Matrix::from_vec(h.rows(), h.cols(), data).unwrap()
}

/// Distance of the nearest ReLU pre-activation to 0, buds included.
pub fn kink_distance(net: &Network, x: &Matrix) -> f64 {
    let mut h = net.projection().forward(x).unwrap();
    let mut d = f64::INFINITY;
    match net.body() {
        Body::Tunnel(ls) => {
            for l in ls {
                d = d.min(min_abs_pre(&l.inner, &h));
                h = l.forward(&h).unwrap().0;
            }
        }
        Body::Highway(ls) => {
            for l in ls {
                d = d.min(min_abs_pre(&l.inner, &h));
                h = l.forward(&h).unwrap().0;
            }
        }
        Body::Mlp(ls) => {
            for l in ls {
                d = d.min(min_abs_pre(l, &h));
                h = l.forward(&h).unwrap().0;
            }
        }
        Body::Budding(t) => {
            budding_distance(t, t.root(), &h, &mut d);
        }
    }
    d
}

fn candidate(arch: Architecture, rng: &mut Rng) -> Probe {
    let k = 1 + rng.below(6);
    let d = 1 + rng.below(4);
    let (head, out) = match rng.below(3) {
        0 => (HeadKind::BinarySigmoid, 1),
        1 => (HeadKind::Softmax, 2 + rng.below(3)),
        _ => (HeadKind::MultilabelSigmoid, 2 + rng.below(2)),
    };
    let mut spec = ModelSpec::new(arch, d, out, head);
    spec.hidden_width = k;
    spec.layers = 1 + rng.below(3);
    spec.max_depth = 3;
    spec.highway_gate_bias = rng.uniform(-3.0, 1.0);
    let mut net = Network::new(spec.clone(), rng).unwrap();
    match net.body_mut() {
        Body::Tunnel(ls) => {
            for l in ls.iter_mut() {
                for g in l.gates.iter_mut() {
                    *g = rng.uniform(0.05, 0.95);
                }
            }
        }
        Body::Budding(tree) => {
            // Random partial tree: internal nodes get gamma in (0.05, 0.95),
            // leaves keep gamma = 1.
            for _ in 0..3 {
                for id in 0..tree.nodes().len() {
                    let n = &tree.nodes()[id];
                    if n.children.is_none() && rng.next_f64() < 0.6 {
                        tree.set_gamma(id, rng.uniform(0.05, 0.95));
                    }
                }
                tree.grow_all(rng);
            }
        }
        _ => {}
    }
    // Freshly built layers have zero biases, which puts units fed by an
    // all-zero row exactly on the ReLU kink. Trained networks are not there.
    let mut p = net.param_vector();
    let mut i = 0;
    for info in net.param_layout() {
        if info.role == ParamRole::Bias {
            for v in &mut p[i..i + info.len] {
                *v = rng.uniform(-0.5, 0.5);
            }
        }
        i += info.len;
    }
    net.set_param_vector(&p).unwrap();
    let rows = 2 + rng.below(4);
    let x = Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.gaussian()).collect()).unwrap();
    let mut t = Matrix::zeros(rows, out);
    for r in 0..rows {
        match head {
            HeadKind::Softmax => t[(r, rng.below(out))] = 1.0,
            _ => {
                for c in 0..out {
                    t[(r, c)] = (rng.next_f64() < 0.5) as u8 as f64;
                }
            }
        }
    }
    let description = format!(
        "{arch:?} K={k} d={d} out={out} {head:?} layers={} rows={rows}",
        spec.layers
    );
    Probe {
        net,
        x,
        t,
        description,
        rejected: 0,
    }
}

fn loss_at(net: &mut Network, p: &[f64], x: &Matrix, t: &Matrix) -> f64 {
    net.set_param_vector(p).unwrap();
    net.loss(x, t).unwrap()
}

/// Five-point central difference, written over differences so equal values
/// cancel exactly.
fn central(net: &mut Network, p: &mut [f64], i: usize, h: f64, x: &Matrix, t: &Matrix) -> f64 {
    let orig = p[i];
    let mut at = |v: f64| {
        p[i] = v;
        let l = loss_at(net, p, x, t);
        p[i] = orig;
        l
    };
    let (a, b, c, d) = (at(orig + 2.0 * h), at(orig + h), at(orig - h), at(orig - 2.0 * h));
    (8.0 * (b - c) - (a - d)) / (12.0 * h)
}

/// Picks from a ladder of finite-difference estimates at steps `h_k` the
/// finer estimate of the adjacent pair that agrees best, after charging
/// each pair the roundoff its finer step can produce. A ReLU kink inside a
/// stencil shows up as a jump between rungs, and at tiny steps the loss
/// differences are quantized, so neither looks consistent.
fn most_consistent(est: &[(f64, f64)], loss: f64) -> f64 {
    let score = |u: &[(f64, f64)]| (u[0].0 - u[1].0).abs() + 4.0 * f64::EPSILON * loss.abs().max(1.0) / u[1].1;
    est.windows(2)
        .min_by(|u, v| score(u).total_cmp(&score(v)))
        .map(|w| w[1].0)
        .unwrap()
}

fn ladder() -> impl Iterator<Item = f64> {
    (0..8).map(|k| 1e-2 / 4f64.powi(k))
}

/// Central estimates on the step ladder.
fn stable_central(net: &mut Network, p: &mut [f64], i: usize, x: &Matrix, t: &Matrix) -> f64 {
    let loss = loss_at(net, p, x, t);
    let est: Vec<(f64, f64)> = ladder().map(|h| (central(net, p, i, h, x, t), h)).collect();
    most_consistent(&est, loss)
}

/// Fourth-order one-sided difference approaching `gamma = 1` from below on
/// a copy of the tree where leaf `id` has grown its children from its bud.
fn leaf_gamma_derivative(net: &Network, id: usize, x: &Matrix, t: &Matrix) -> Option<f64> {
    let mut grown = net.clone();
    let Body::Budding(tree) = grown.body_mut() else {
        unreachable!()
    };
    tree.bud(id)?;
    tree.set_gamma(id, 0.5);
    assert!(tree.maybe_grow(id, &mut Rng::new(0)));
    let mut one_sided = |h: f64| {
        let f: Vec<f64> = (0..5)
            .map(|k| {
                let Body::Budding(tree) = grown.body_mut() else {
                    unreachable!()
                };
                tree.set_gamma(id, 1.0 - k as f64 * h);
                grown.loss(x, t).unwrap()
            })
            .collect();
        // 25 f0 - 48 f1 + 36 f2 - 16 f3 + 3 f4, written over differences so
        // equal values cancel exactly.
        let d: Vec<f64> = f.windows(2).map(|w| w[0] - w[1]).collect();
        (25.0 * d[0] - 23.0 * d[1] + 13.0 * d[2] - 3.0 * d[3]) / (12.0 * h)
    };
    let est: Vec<(f64, f64)> = ladder().map(|h| (one_sided(h), h)).collect();
    Some(most_consistent(&est, net.loss(x, t).unwrap()))
}

/// Compares analytic gradients against finite differences for every
/// parameter. Returns the worst relative error or a description of the
/// first failure.
pub fn check_probe(probe: &Probe, tol: f64) -> Result<f64, String> {
    let Probe {
        net, x, t, description, ..
    } = probe;
    let (_, grads) = net.loss_and_gradients(x, t, None).unwrap();
    let analytic = net.gradient_vector(&grads).unwrap();
    let mut p = net.param_vector();
    let mut work = net.clone();
    let mut worst: f64 = 0.0;
    let mut i = 0;
    for info in net.param_layout() {
        for _ in 0..info.len {
            let leaf_gamma = info.role == ParamRole::Gamma
                && net
                    .budding_tree()
                    .map(|t| t.node(info.key.1).children.is_none())
                    .unwrap_or(false);
            let fd = if leaf_gamma {
                leaf_gamma_derivative(net, info.key.1, x, t).unwrap_or(0.0)
            } else {
                stable_central(&mut work, &mut p, i, x, t)
            };
            let e = rel_err(analytic[i], fd);
            worst = worst.max(e);
            if e >= tol {
                return Err(format!(
                    "{description}: {}[{}] element {i}: analytic {} vs numeric {fd} (rel {e:.2e})",
                    info.key.0, info.key.1, analytic[i]
                ));
            }
            i += 1;
        }
    }
    Ok(worst)
}

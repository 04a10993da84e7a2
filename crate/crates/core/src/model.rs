//! Whole networks: input projection, a body of tunnel, highway, plain or
//! budding layers, and an output layer with its probability head.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::budding::{BuddingGrads, BuddingRecord, BuddingTree, NodeCache, DEFAULT_MAX_DEPTH};
use crate::error::{Error, Result};
use crate::layers::{
    input_dropout, output_head_forward, HeadKind, HighwayCache, HighwayGrads, HighwayLayer, PerceptronCache,
    PerceptronGrads, PerceptronLayer, ProjectionLayer, TunnelCache, TunnelGrads, TunnelLayer, HIGHWAY_GATE_BIAS_INIT,
};
use crate::metrics::{batch_loss_and_grad, highway_soft_sizes, tunnel_soft_sizes, LossKind};
use crate::numeric::{Activation, Matrix, Rng};
use crate::optim::{Optimizer, ParamGroup, ParamKey, ParamRole, Regularization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Tunnel,
    Highway,
    Budding,
    MlpBaseline,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Tunnel => "tunnel",
            Architecture::Highway => "highway",
            Architecture::Budding => "budding",
            Architecture::MlpBaseline => "mlp-baseline",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tunnel" => Ok(Architecture::Tunnel),
            "highway" => Ok(Architecture::Highway),
            "budding" => Ok(Architecture::Budding),
            "mlp-baseline" | "mlp" => Ok(Architecture::MlpBaseline),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected tunnel|highway|budding|mlp-baseline)"
            ))),
        }
    }
}

/// Shape of a network. `layers` is ignored by budding trees, `max_depth` by
/// everything else. An MLP baseline with zero layers is a linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub head: HeadKind,
    pub hidden_width: usize,
    pub layers: usize,
    pub max_depth: usize,
    pub activation: Activation,
    pub highway_gate_bias: f64,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, input_dim: usize, output_dim: usize, head: HeadKind) -> Self {
        ModelSpec {
            architecture,
            input_dim,
            output_dim,
            head,
            hidden_width: 10,
            layers: 10,
            max_depth: DEFAULT_MAX_DEPTH,
            activation: Activation::Relu,
            highway_gate_bias: HIGHWAY_GATE_BIAS_INIT,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("input, output and hidden widths must be positive".into()));
        }
        if self.head == HeadKind::BinarySigmoid && self.output_dim != 1 {
            return Err(Error::Config("a binary head has exactly one output".into()));
        }
        if self.architecture == Architecture::Budding && self.max_depth == 0 {
            return Err(Error::Config("budding trees need max_depth >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Tunnel(Vec<TunnelLayer>),
    Highway(Vec<HighwayLayer>),
    Mlp(Vec<PerceptronLayer>),
    Budding(BuddingTree),
}

#[derive(Debug, Clone)]
pub enum BodyCache {
    Tunnel(Vec<TunnelCache>),
    Highway(Vec<HighwayCache>),
    Mlp(Vec<PerceptronCache>),
    Budding(NodeCache),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BodyGrads {
    Tunnel(Vec<TunnelGrads>),
    Highway(Vec<HighwayGrads>),
    Mlp(Vec<PerceptronGrads>),
    Budding(BuddingGrads),
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    body: BodyCache,
    output: PerceptronCache,
    probabilities: Matrix,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &Matrix {
        &self.probabilities
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub projection: Matrix,
    pub body: BodyGrads,
    pub output: PerceptronGrads,
}

/// Where a parameter tensor sits: optimizer key, role and depth index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamInfo {
    pub key: ParamKey,
    pub role: ParamRole,
    pub depth: usize,
    pub len: usize,
}

/// Layerwise and total soft sizes plus the budding hard size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SizeReport {
    pub per_layer: Vec<f64>,
    pub total: Option<f64>,
    pub hard: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    projection: ProjectionLayer,
    body: Body,
    output: PerceptronLayer,
}

type Visitor<'f> = dyn FnMut(ParamInfo, &mut [f64], Option<&[f64]>) -> Result<()> + 'f;

impl Network {
    /// Glorot-initialized network; tunnel gates start at 0, highway gate
    /// biases at `spec.highway_gate_bias`, budding trees as a single leaf.
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let k = spec.hidden_width;
        let projection = ProjectionLayer::glorot(spec.input_dim, k, rng);
        let act = spec.activation;
        let body = match spec.architecture {
            Architecture::Tunnel => Body::Tunnel((0..spec.layers).map(|_| TunnelLayer::init(k, act, rng)).collect()),
            Architecture::Highway => Body::Highway(
                (0..spec.layers)
                    .map(|_| HighwayLayer::init(k, act, spec.highway_gate_bias, rng))
                    .collect(),
            ),
            Architecture::MlpBaseline => Body::Mlp(
                (0..spec.layers)
                    .map(|_| PerceptronLayer::glorot(k, k, act, rng))
                    .collect(),
            ),
            Architecture::Budding => Body::Budding(BuddingTree::new(k, spec.max_depth, act, rng)?),
        };
        let output = PerceptronLayer::glorot(k, spec.output_dim, Activation::Identity, rng);
        Ok(Network {
            spec,
            projection,
            body,
            output,
        })
    }

    /// Assembles a network from parts, checking every width.
    pub fn from_parts(
        spec: ModelSpec,
        projection: ProjectionLayer,
        body: Body,
        output: PerceptronLayer,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.hidden_width;
        if projection.inputs() != spec.input_dim || projection.width() != k {
            return Err(Error::Config(format!(
                "projection is {}x{}, expected {k}x{}",
                projection.width(),
                projection.inputs(),
                spec.input_dim
            )));
        }
        if output.inputs() != k || output.outputs() != spec.output_dim {
            return Err(Error::Config(format!(
                "output layer is {}x{}, expected {}x{k}",
                output.outputs(),
                output.inputs(),
                spec.output_dim
            )));
        }
        let body_ok = match (&body, spec.architecture) {
            (Body::Tunnel(ls), Architecture::Tunnel) => ls.iter().all(|l| l.width() == k),
            (Body::Highway(ls), Architecture::Highway) => ls.iter().all(|l| l.width() == k),
            (Body::Mlp(ls), Architecture::MlpBaseline) => ls.iter().all(|l| l.inputs() == k && l.outputs() == k),
            (Body::Budding(t), Architecture::Budding) => t.width() == k,
            _ => false,
        };
        if !body_ok {
            return Err(Error::Config(format!(
                "body does not match a {} network of width {k}",
                spec.architecture.name()
            )));
        }
        Ok(Network {
            spec,
            projection,
            body,
            output,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn projection(&self) -> &ProjectionLayer {
        &self.projection
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut Body {
        &mut self.body
    }

    pub fn output_layer(&self) -> &PerceptronLayer {
        &self.output
    }

    pub fn budding_tree(&self) -> Option<&BuddingTree> {
        match &self.body {
            Body::Budding(t) => Some(t),
            _ => None,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.spec.head {
            HeadKind::BinarySigmoid => LossKind::BinaryCrossEntropy,
            HeadKind::Softmax => LossKind::CategoricalCrossEntropy,
            HeadKind::MultilabelSigmoid => LossKind::MultilabelBinaryCrossEntropy,
        }
    }

    /// Number of layers reported in the per-layer size columns.
    pub fn size_columns(&self) -> usize {
        match &self.body {
            Body::Tunnel(ls) => ls.len(),
            Body::Highway(ls) => ls.len(),
            Body::Mlp(_) | Body::Budding(_) => 0,
        }
    }

    /// Evaluation-mode class probabilities.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.projection.forward(x)?;
        match &self.body {
            Body::Tunnel(ls) => {
                for l in ls {
                    h = l.forward(&h)?.0;
                }
            }
            Body::Highway(ls) => {
                for l in ls {
                    h = l.forward(&h)?.0;
                }
            }
            Body::Mlp(ls) => {
                for l in ls {
                    h = l.forward(&h)?.0;
                }
            }
            Body::Budding(t) => h = t.predict(&h)?,
        }
        let logits = self.output.forward(&h)?.0;
        Ok(output_head_forward(self.spec.head, &logits))
    }

    /// Forward pass keeping everything backward needs. Input dropout is
    /// applied when `dropout` carries a probability above 0 and an RNG.
    pub fn forward(&self, x: &Matrix, dropout: Option<(f64, &mut Rng)>) -> Result<ForwardCache> {
        let input = match dropout {
            Some((p, rng)) => input_dropout(x, p, true, rng)?,
            None => x.clone(),
        };
        let mut h = self.projection.forward(&input)?;
        let body = match &self.body {
            Body::Tunnel(ls) => {
                let mut caches = Vec::with_capacity(ls.len());
                for l in ls {
                    let (y, c) = l.forward(&h)?;
                    caches.push(c);
                    h = y;
                }
                BodyCache::Tunnel(caches)
            }
            Body::Highway(ls) => {
                let mut caches = Vec::with_capacity(ls.len());
                for l in ls {
                    let (y, c) = l.forward(&h)?;
                    caches.push(c);
                    h = y;
                }
                BodyCache::Highway(caches)
            }
            Body::Mlp(ls) => {
                let mut caches = Vec::with_capacity(ls.len());
                for l in ls {
                    let (y, c) = l.forward(&h)?;
                    caches.push(c);
                    h = y;
                }
                BodyCache::Mlp(caches)
            }
            Body::Budding(t) => {
                let (y, c) = t.forward(&h)?;
                h = y;
                BodyCache::Budding(c)
            }
        };
        let (logits, output) = self.output.forward(&h)?;
        let probabilities = output_head_forward(self.spec.head, &logits);
        Ok(ForwardCache {
            input,
            body,
            output,
            probabilities,
        })
    }

    /// Backpropagates a gradient with respect to the output logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
        let (mut dh, output) = self.output.backward(&cache.output, dlogits)?;
        let body = match (&self.body, &cache.body) {
            (Body::Tunnel(ls), BodyCache::Tunnel(cs)) if ls.len() == cs.len() => {
                let mut grads = Vec::with_capacity(ls.len());
                for (l, c) in ls.iter().zip(cs).rev() {
                    let (dx, g) = l.backward(c, &dh)?;
                    grads.push(g);
                    dh = dx;
                }
                grads.reverse();
                BodyGrads::Tunnel(grads)
            }
            (Body::Highway(ls), BodyCache::Highway(cs)) if ls.len() == cs.len() => {
                let mut grads = Vec::with_capacity(ls.len());
                for (l, c) in ls.iter().zip(cs).rev() {
                    let (dx, g) = l.backward(c, &dh)?;
                    grads.push(g);
                    dh = dx;
                }
                grads.reverse();
                BodyGrads::Highway(grads)
            }
            (Body::Mlp(ls), BodyCache::Mlp(cs)) if ls.len() == cs.len() => {
                let mut grads = Vec::with_capacity(ls.len());
                for (l, c) in ls.iter().zip(cs).rev() {
                    let (dx, g) = l.backward(c, &dh)?;
                    grads.push(g);
                    dh = dx;
                }
                grads.reverse();
                BodyGrads::Mlp(grads)
            }
            (Body::Budding(t), BodyCache::Budding(c)) => {
                let (dx, g) = t.backward(c, &dh)?;
                dh = dx;
                BodyGrads::Budding(g)
            }
            _ => return Err(Error::Usage("network backward: cache does not match the body".into())),
        };
        let projection = self.projection.backward(&cache.input, &dh)?;
        Ok(Gradients {
            projection,
            body,
            output,
        })
    }

    /// Mean data loss over the batch and its gradient.
    pub fn loss_and_gradients(
        &self,
        x: &Matrix,
        targets: &Matrix,
        dropout: Option<(f64, &mut Rng)>,
    ) -> Result<(f64, Gradients)> {
        if x.rows() == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let cache = self.forward(x, dropout)?;
        let (loss, mut dlogits) = batch_loss_and_grad(self.loss_kind(), &cache.probabilities, targets)?;
        dlogits.scale_in_place(1.0 / x.rows() as f64);
        Ok((loss, self.backward(&cache, &dlogits)?))
    }

    /// Mean data loss in evaluation mode.
    pub fn loss(&self, x: &Matrix, targets: &Matrix) -> Result<f64> {
        let p = self.predict(x)?;
        Ok(batch_loss_and_grad(self.loss_kind(), &p, targets)?.0)
    }

    /// Visits every parameter tensor in a fixed order, paired with its
    /// gradient when `grads` is given. With `trainable_only`, budding
    /// parameters off the evaluated path are skipped.
    fn visit(&mut self, grads: Option<&Gradients>, trainable_only: bool, f: &mut Visitor<'_>) -> Result<()> {
        let info = |name: &'static str, idx: usize, role: ParamRole, depth: usize, len: usize| ParamInfo {
            key: (name, idx),
            role,
            depth,
            len,
        };
        let w = &mut self.projection.weights;
        f(
            info("projection.w", 0, ParamRole::Weight, 0, w.as_slice().len()),
            w.as_mut_slice(),
            grads.map(|g| g.projection.as_slice()),
        )?;
        let mismatch = || Error::Usage("gradients do not match the network body".into());
        match &mut self.body {
            Body::Tunnel(ls) => {
                let gs = match grads.map(|g| &g.body) {
                    Some(BodyGrads::Tunnel(gs)) if gs.len() == ls.len() => Some(gs),
                    None => None,
                    _ => return Err(mismatch()),
                };
                for (i, l) in ls.iter_mut().enumerate() {
                    let g = gs.map(|gs| &gs[i]);
                    visit_perceptron(&mut l.inner, g.map(|g| &g.inner), "tunnel", i, f)?;
                    let n = l.gates.len();
                    f(
                        info("tunnel.g", i, ParamRole::TunnelGate, i, n),
                        &mut l.gates,
                        g.map(|g| &g.gates[..]),
                    )?;
                }
            }
            Body::Highway(ls) => {
                let gs = match grads.map(|g| &g.body) {
                    Some(BodyGrads::Highway(gs)) if gs.len() == ls.len() => Some(gs),
                    None => None,
                    _ => return Err(mismatch()),
                };
                for (i, l) in ls.iter_mut().enumerate() {
                    let g = gs.map(|gs| &gs[i]);
                    visit_perceptron(&mut l.inner, g.map(|g| &g.inner), "highway", i, f)?;
                    let gw = l.gate_weights.as_mut_slice();
                    f(
                        info("highway.gw", i, ParamRole::HighwayGateWeight, i, gw.len()),
                        gw,
                        g.map(|g| g.gate_weights.as_slice()),
                    )?;
                    let n = l.gate_bias.len();
                    f(
                        info("highway.gb", i, ParamRole::HighwayGateBias, i, n),
                        &mut l.gate_bias,
                        g.map(|g| &g.gate_bias[..]),
                    )?;
                }
            }
            Body::Mlp(ls) => {
                let gs = match grads.map(|g| &g.body) {
                    Some(BodyGrads::Mlp(gs)) if gs.len() == ls.len() => Some(gs),
                    None => None,
                    _ => return Err(mismatch()),
                };
                for (i, l) in ls.iter_mut().enumerate() {
                    visit_perceptron(l, gs.map(|gs| &gs[i]), "mlp", i, f)?;
                }
            }
            Body::Budding(tree) => {
                let gs = match grads.map(|g| &g.body) {
                    Some(BodyGrads::Budding(gs))
                        if gs.slots.len() == tree.slots().len() && gs.gammas.len() == tree.nodes().len() =>
                    {
                        Some(gs)
                    }
                    None => None,
                    _ => return Err(mismatch()),
                };
                let evaluated: HashSet<usize> = tree.evaluated_nodes().into_iter().collect();
                let live_slots: HashSet<usize> = evaluated.iter().map(|&id| tree.node(id).slot).collect();
                let slot_depths = tree.slot_depths();
                let (slots, nodes) = tree.parts_mut();
                for (s, layer) in slots.iter_mut().enumerate() {
                    if trainable_only && !live_slots.contains(&s) {
                        continue;
                    }
                    let g = gs.map(|gs| &gs.slots[s]);
                    let d = slot_depths[s];
                    let wl = layer.weights.as_slice().len();
                    f(
                        info("slot.w", s, ParamRole::Weight, d, wl),
                        layer.weights.as_mut_slice(),
                        g.map(|g| g.weights.as_slice()),
                    )?;
                    let bl = layer.bias.len();
                    f(
                        info("slot.b", s, ParamRole::Bias, d, bl),
                        &mut layer.bias,
                        g.map(|g| &g.bias[..]),
                    )?;
                }
                for (id, node) in nodes.iter_mut().enumerate() {
                    if trainable_only && !evaluated.contains(&id) {
                        continue;
                    }
                    f(
                        info("gamma", id, ParamRole::Gamma, node.depth, 1),
                        std::slice::from_mut(&mut node.gamma),
                        gs.map(|gs| std::slice::from_ref(&gs.gammas[id])),
                    )?;
                }
            }
        }
        let out = &mut self.output;
        let (wl, bl) = (out.weights.as_slice().len(), out.bias.len());
        let go = grads.map(|g| &g.output);
        f(
            info("output.w", 0, ParamRole::Weight, 0, wl),
            out.weights.as_mut_slice(),
            go.map(|g| g.weights.as_slice()),
        )?;
        f(
            info("output.b", 0, ParamRole::Bias, 0, bl),
            &mut out.bias,
            go.map(|g| &g.bias[..]),
        )
    }

    /// Parameter tensors in visiting order, budding stale subtrees included.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut copy = self.clone();
        copy.visit(None, false, &mut |info, _, _| {
            out.push(info);
            Ok(())
        })
        .expect("visiting without gradients cannot fail");
        out
    }

    /// All parameters flattened in [`param_layout`](Self::param_layout) order.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut copy = self.clone();
        copy.visit(None, false, &mut |_, p, _| {
            out.extend_from_slice(p);
            Ok(())
        })
        .expect("visiting without gradients cannot fail");
        out
    }

    /// Inverse of [`param_vector`](Self::param_vector). Structural values
    /// are written as given; callers keep them in range.
    pub fn set_param_vector(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.param_layout().iter().map(|i| i.len).sum();
        if values.len() != total {
            return Err(Error::Config(format!(
                "expected {total} parameters, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        self.visit(None, false, &mut |_, p, _| {
            p.copy_from_slice(&values[offset..offset + p.len()]);
            offset += p.len();
            Ok(())
        })
    }

    /// Gradients flattened in [`param_vector`](Self::param_vector) order.
    pub fn gradient_vector(&self, grads: &Gradients) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let mut copy = self.clone();
        copy.visit(Some(grads), false, &mut |_, p, g| {
            let g = g
                .filter(|g| g.len() == p.len())
                .ok_or_else(|| Error::Usage("gradient tensor does not match its parameter".into()))?;
            out.extend_from_slice(g);
            Ok(())
        })?;
        Ok(out)
    }

    /// One optimizer step over every trainable tensor: L2 on weight
    /// matrices, L1 on structural parameters, Adam, then projection.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients,
        optimizer: &mut Optimizer,
        base_lr: f64,
        reg: Regularization,
        depth_decay: bool,
    ) -> Result<()> {
        self.visit(Some(grads), true, &mut |info, p, g| {
            let g = g.filter(|g| g.len() == p.len()).ok_or_else(|| {
                Error::Usage(format!(
                    "gradient for {}[{}] has the wrong length",
                    info.key.0, info.key.1
                ))
            })?;
            optimizer.update(
                info.key,
                ParamGroup::new(info.role, info.depth, depth_decay),
                p,
                g,
                base_lr,
                reg,
            )
        })
    }

    /// Lets budding nodes whose `γ` left 1 grow children. Returns the number
    /// of growths; other bodies never grow.
    pub fn grow(&mut self, rng: &mut Rng) -> usize {
        match &mut self.body {
            Body::Budding(t) => t.grow_all(rng),
            _ => 0,
        }
    }

    /// Soft sizes measured on `x`; only highway gates depend on it.
    pub fn sizes(&self, x: &Matrix) -> Result<SizeReport> {
        Ok(match &self.body {
            Body::Tunnel(ls) => {
                let (per_layer, total) = tunnel_soft_sizes(ls);
                SizeReport {
                    per_layer,
                    total: Some(total),
                    hard: None,
                }
            }
            Body::Highway(ls) => {
                let h = self.projection.forward(x)?;
                let (per_layer, total) = highway_soft_sizes(ls, &h)?;
                SizeReport {
                    per_layer,
                    total: Some(total),
                    hard: None,
                }
            }
            Body::Mlp(_) => SizeReport::default(),
            Body::Budding(t) => SizeReport {
                per_layer: Vec::new(),
                total: Some(t.soft_size()),
                hard: Some(t.hard_size()),
            },
        })
    }

    /// Parameter count; budding counts only the evaluated path.
    pub fn num_params(&self) -> usize {
        let body = match &self.body {
            Body::Tunnel(ls) => ls.iter().map(TunnelLayer::num_params).sum(),
            Body::Highway(ls) => ls.iter().map(HighwayLayer::num_params).sum(),
            Body::Mlp(ls) => ls.iter().map(PerceptronLayer::num_params).sum(),
            Body::Budding(t) => t.num_params(),
        };
        self.projection.num_params() + body + self.output.num_params()
    }

    /// Copy with stale budding subtrees removed; other bodies are unchanged.
    pub fn prune_for_export(&self) -> Network {
        let mut out = self.clone();
        if let Body::Budding(t) = &self.body {
            out.body = Body::Budding(t.prune_for_export());
        }
        out
    }

    pub fn to_record(&self) -> NetworkRecord {
        NetworkRecord {
            spec: self.spec.clone(),
            projection: self.projection.weights.clone(),
            body: match &self.body {
                Body::Tunnel(ls) => BodyRecord::Tunnel(ls.clone()),
                Body::Highway(ls) => BodyRecord::Highway(ls.clone()),
                Body::Mlp(ls) => BodyRecord::Mlp(ls.clone()),
                Body::Budding(t) => BodyRecord::Budding(t.to_record()),
            },
            output: self.output.clone(),
        }
    }

    /// Rebuilds a network through the checked constructors.
    pub fn from_record(rec: &NetworkRecord) -> Result<Self> {
        let checkpoint = |e: Error| Error::Checkpoint(e.to_string());
        let perceptron = |l: &PerceptronLayer| PerceptronLayer::new(l.weights.clone(), l.bias.clone(), l.activation);
        let body = match &rec.body {
            BodyRecord::Tunnel(ls) => Body::Tunnel(
                ls.iter()
                    .map(|l| TunnelLayer::new(perceptron(&l.inner)?, l.gates.clone()))
                    .collect::<Result<_>>()
                    .map_err(checkpoint)?,
            ),
            BodyRecord::Highway(ls) => Body::Highway(
                ls.iter()
                    .map(|l| HighwayLayer::new(perceptron(&l.inner)?, l.gate_weights.clone(), l.gate_bias.clone()))
                    .collect::<Result<_>>()
                    .map_err(checkpoint)?,
            ),
            BodyRecord::Mlp(ls) => Body::Mlp(ls.iter().map(perceptron).collect::<Result<_>>().map_err(checkpoint)?),
            BodyRecord::Budding(r) => Body::Budding(BuddingTree::from_record(r)?),
        };
        let output = perceptron(&rec.output).map_err(checkpoint)?;
        let projection = ProjectionLayer {
            weights: rec.projection.clone(),
        };
        Network::from_parts(rec.spec.clone(), projection, body, output).map_err(checkpoint)
    }
}

fn visit_perceptron(
    layer: &mut PerceptronLayer,
    grads: Option<&PerceptronGrads>,
    prefix: &'static str,
    index: usize,
    f: &mut Visitor<'_>,
) -> Result<()> {
    let (wkey, bkey) = match prefix {
        "tunnel" => ("tunnel.w", "tunnel.b"),
        "highway" => ("highway.w", "highway.b"),
        _ => ("mlp.w", "mlp.b"),
    };
    let wl = layer.weights.as_slice().len();
    f(
        ParamInfo {
            key: (wkey, index),
            role: ParamRole::Weight,
            depth: index,
            len: wl,
        },
        layer.weights.as_mut_slice(),
        grads.map(|g| g.weights.as_slice()),
    )?;
    let bl = layer.bias.len();
    f(
        ParamInfo {
            key: (bkey, index),
            role: ParamRole::Bias,
            depth: index,
            len: bl,
        },
        &mut layer.bias,
        grads.map(|g| &g.bias[..]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layers", rename_all = "kebab-case")]
pub enum BodyRecord {
    Tunnel(Vec<TunnelLayer>),
    Highway(Vec<HighwayLayer>),
    Mlp(Vec<PerceptronLayer>),
    Budding(BuddingRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub spec: ModelSpec,
    pub projection: Matrix,
    pub body: BodyRecord,
    pub output: PerceptronLayer,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, Vector};
    use crate::optim::AdamConfig;

    fn spec(arch: Architecture, k: usize, layers: usize) -> ModelSpec {
        let mut s = ModelSpec::new(arch, 3, 1, HeadKind::BinarySigmoid);
        s.hidden_width = k;
        s.layers = layers;
        s.max_depth = 3;
        s
    }

    fn toy_batch(rng: &mut Rng, n: usize) -> (Matrix, Matrix) {
        let x = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let t = Matrix::from_vec(n, 1, (0..n).map(|i| (i % 2) as f64).collect()).unwrap();
        (x, t)
    }

    #[test]
    fn zero_gate_tunnel_is_the_linear_model() {
        let mut rng = Rng::new(1);
        let net = Network::new(spec(Architecture::Tunnel, 4, 5), &mut rng).unwrap();
        let (x, _) = toy_batch(&mut rng, 6);
        let h = net.projection.forward(&x).unwrap();
        let direct = output_head_forward(HeadKind::BinarySigmoid, &net.output.forward(&h).unwrap().0);
        assert_eq!(net.predict(&x).unwrap(), direct);
        assert_eq!(net.sizes(&x).unwrap().total, Some(0.0));
    }

    #[test]
    fn parameter_counts() {
        let mut rng = Rng::new(2);
        for k in [10, 100] {
            let t = Network::new(spec(Architecture::Tunnel, k, 1), &mut rng).unwrap();
            let h = Network::new(spec(Architecture::Highway, k, 1), &mut rng).unwrap();
            let io = 3 * k + k + 1;
            assert_eq!(t.num_params() - io, k * k + 2 * k);
            assert_eq!(h.num_params() - io, 2 * k * k + 2 * k);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for arch in [Architecture::Tunnel, Architecture::Highway, Architecture::MlpBaseline] {
            let mut rng = Rng::new(3);
            let mut net = Network::new(spec(arch, 3, 2), &mut rng).unwrap();
            if let Body::Tunnel(ls) = &mut net.body {
                for l in ls {
                    l.gates = Vector(vec![0.3, 0.6, 0.9]);
                }
            }
            let (x, t) = toy_batch(&mut rng, 4);
            let (_, grads) = net.loss_and_gradients(&x, &t, None).unwrap();
            let analytic = net.gradient_vector(&grads).unwrap();
            let p0 = net.param_vector();
            let mut probe = net.clone();
            let fd = finite_diff_grad(
                |p| {
                    probe.set_param_vector(p).unwrap();
                    probe.loss(&x, &t).unwrap()
                },
                &p0,
                1e-6,
            )
            .unwrap();
            for (i, (a, d)) in analytic.iter().zip(fd.iter()).enumerate() {
                let rel = (a - d).abs() / a.abs().max(d.abs()).max(1e-8);
                assert!(rel < 1e-4, "{arch:?} param {i}: {a} vs {d}");
            }
        }
    }

    #[test]
    fn param_vector_round_trip() {
        let mut rng = Rng::new(4);
        let net = Network::new(spec(Architecture::Highway, 3, 2), &mut rng).unwrap();
        let mut other = Network::new(spec(Architecture::Highway, 3, 2), &mut rng).unwrap();
        other.set_param_vector(&net.param_vector()).unwrap();
        assert_eq!(net, other);
        assert!(other.set_param_vector(&[1.0]).is_err());
    }

    #[test]
    fn update_keeps_gates_in_range() {
        let mut rng = Rng::new(5);
        let mut net = Network::new(spec(Architecture::Tunnel, 3, 3), &mut rng).unwrap();
        let mut opt = Optimizer::new(AdamConfig::default());
        let (x, t) = toy_batch(&mut rng, 8);
        let reg = Regularization {
            lambda: 0.001,
            l2: 1e-5,
        };
        for _ in 0..50 {
            let (_, g) = net.loss_and_gradients(&x, &t, None).unwrap();
            net.apply_gradients(&g, &mut opt, 0.05, reg, true).unwrap();
        }
        let Body::Tunnel(ls) = &net.body else { unreachable!() };
        assert!(ls.iter().flat_map(|l| l.gates.iter()).all(|g| (0.0..=1.0).contains(g)));
    }

    #[test]
    fn budding_grows_and_round_trips() {
        let mut rng = Rng::new(6);
        let mut net = Network::new(spec(Architecture::Budding, 3, 0), &mut rng).unwrap();
        if let Body::Budding(t) = &mut net.body {
            t.set_gamma(0, 0.9);
        }
        assert_eq!(net.grow(&mut rng), 1);
        let tree = net.budding_tree().unwrap();
        assert_eq!(tree.hard_size(), 3);
        let rec = net.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back = Network::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        let (x, _) = toy_batch(&mut rng, 5);
        assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn from_parts_rejects_bad_widths() {
        let mut rng = Rng::new(7);
        let net = Network::new(spec(Architecture::Tunnel, 3, 1), &mut rng).unwrap();
        let mut s = net.spec.clone();
        s.hidden_width = 4;
        let err = Network::from_parts(s, net.projection.clone(), net.body.clone(), net.output.clone());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}

//! Training loop with the patience-driven learning-rate schedule, per-epoch
//! metrics and best-model selection.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budding::DEFAULT_MAX_DEPTH;
use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::layers::{HeadKind, HIGHWAY_GATE_BIAS_INIT};
use crate::metrics::{error_rate, macro_f1, ConfusionCounts, LossKind};
use crate::model::{Architecture, ModelSpec, Network, SizeReport};
use crate::numeric::{Activation, Rng, RngState};
use crate::optim::{AdamConfig, Optimizer, Regularization};

/// Every knob of a run. Field names double as the JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub hidden_width: usize,
    /// Tunnel, highway and MLP layers.
    pub max_layers: usize,
    /// Budding tree depth cap, in levels.
    pub max_depth: usize,
    pub activation: Activation,
    pub highway_gate_bias: f64,
    pub base_lr: f64,
    pub lambda_l1: f64,
    pub l2_coeff: f64,
    /// Input dropout probability.
    pub dropout_p: f64,
    /// 1 is online learning.
    pub batch_size: usize,
    pub patience: usize,
    pub lr_factors: Vec<f64>,
    pub depth_decay: bool,
    pub seed: u64,
    /// Hard cap on epochs regardless of the schedule.
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::spirals(Architecture::Tunnel)
    }
}

impl TrainConfig {
    /// Two-spirals setting: 10 units, 10 layers, online updates.
    pub fn spirals(architecture: Architecture) -> Self {
        TrainConfig {
            architecture,
            hidden_width: 10,
            max_layers: 10,
            max_depth: DEFAULT_MAX_DEPTH,
            activation: Activation::Relu,
            highway_gate_bias: HIGHWAY_GATE_BIAS_INIT,
            base_lr: match architecture {
                Architecture::Budding => 0.001,
                _ => 0.003,
            },
            lambda_l1: 0.001,
            l2_coeff: 1e-5,
            dropout_p: 0.0,
            batch_size: 1,
            patience: 20,
            lr_factors: vec![0.3, 0.1],
            depth_decay: true,
            seed: 0,
            max_epochs: 2000,
        }
    }

    /// MNIST setting: 100 units, input dropout 0.25, minibatches of 32.
    pub fn mnist(architecture: Architecture) -> Self {
        TrainConfig {
            hidden_width: 100,
            base_lr: 0.0003,
            dropout_p: 0.25,
            batch_size: 32,
            ..TrainConfig::spirals(architecture)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive".into());
        }
        if self.architecture == Architecture::Budding && self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.lambda_l1 >= 0.0 && self.l2_coeff >= 0.0) {
            return bad("lambda_l1 and l2_coeff must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch_size, patience and max_epochs must be positive".into());
        }
        if self.lr_factors.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("lr_factors must lie in (0, 1]".into());
        }
        if self.lr_factors.windows(2).any(|w| w[1] > w[0]) {
            return bad("lr_factors must be non-increasing".into());
        }
        if !self.highway_gate_bias.is_finite() {
            return bad("highway_gate_bias must be finite".into());
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize, output_dim: usize, head: HeadKind) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture,
            input_dim,
            output_dim,
            head,
            hidden_width: self.hidden_width,
            layers: self.max_layers,
            max_depth: self.max_depth,
            activation: self.activation,
            highway_gate_bias: self.highway_gate_bias,
        }
    }

    pub fn regularization(&self) -> Regularization {
        Regularization {
            lambda: self.lambda_l1,
            l2: self.l2_coeff,
        }
    }
}

pub fn head_for_task(task: TaskKind) -> HeadKind {
    match task {
        TaskKind::Binary => HeadKind::BinarySigmoid,
        TaskKind::Categorical => HeadKind::Softmax,
        TaskKind::Multilabel => HeadKind::MultilabelSigmoid,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleEvent {
    Improved,
    Waiting,
    /// Moved to the given stage (1-based index into the factors).
    Decayed(usize),
    Stop,
}

/// Patience stage machine: after `patience` epochs without strict
/// improvement move to the next learning-rate factor; past the last one,
/// stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub stage: usize,
    pub epochs_since_best: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub higher_is_better: bool,
    patience: usize,
    factors: Vec<f64>,
}

impl ScheduleState {
    pub fn new(patience: usize, factors: Vec<f64>, higher_is_better: bool) -> Self {
        ScheduleState {
            stage: 0,
            epochs_since_best: 0,
            best_metric: None,
            best_epoch: None,
            higher_is_better,
            patience,
            factors,
        }
    }

    /// Multiplier on the base learning rate for the current stage.
    pub fn lr_factor(&self) -> f64 {
        match self.stage {
            0 => 1.0,
            s => self.factors[s - 1],
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> ScheduleEvent {
        let improved = match self.best_metric {
            None => true,
            Some(best) if self.higher_is_better => metric > best,
            Some(best) => metric < best,
        };
        if improved {
            self.best_metric = Some(metric);
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
            return ScheduleEvent::Improved;
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best < self.patience {
            return ScheduleEvent::Waiting;
        }
        self.epochs_since_best = 0;
        if self.stage < self.factors.len() {
            self.stage += 1;
            ScheduleEvent::Decayed(self.stage)
        } else {
            ScheduleEvent::Stop
        }
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_error: f64,
    pub train_loss: f64,
    pub val_error: f64,
    pub val_loss: f64,
    pub macro_f1_train: Option<f64>,
    pub macro_f1_val: Option<f64>,
    pub total_soft_size: Option<f64>,
    pub hard_size: Option<usize>,
    /// Learning rate used during this epoch.
    pub effective_lr: f64,
    pub layer_soft_sizes: Vec<f64>,
    pub grew: usize,
    pub refused_growths: u64,
    pub event: ScheduleEvent,
}

/// Evaluation-mode metrics on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub error: f64,
    pub loss: f64,
    pub macro_f1: Option<f64>,
    pub sizes: SizeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "reason")]
pub enum StopReason {
    Schedule,
    MaxEpochs,
    Diverged { epoch: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Network,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub last: Network,
    pub log: Vec<EpochRecord>,
    pub stop: StopReason,
    pub rng: RngState,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.log[self.best_epoch - 1]
    }
}

fn check_task(net: &Network, d: &Dataset) -> Result<()> {
    let spec = net.spec();
    if head_for_task(d.task()) != spec.head || d.input_dim() != spec.input_dim || d.output_dim() != spec.output_dim {
        return Err(Error::Config(format!(
            "model expects {:?} data with {} inputs and {} outputs, dataset is {:?} with {} inputs and {} outputs",
            spec.head,
            spec.input_dim,
            spec.output_dim,
            d.task(),
            d.input_dim(),
            d.output_dim()
        )));
    }
    Ok(())
}

/// Evaluation-mode error, loss, Macro-F1 (multilabel only) and sizes.
pub fn evaluate(net: &Network, d: &Dataset) -> Result<Metrics> {
    if d.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    check_task(net, d)?;
    let p = net.predict(d.inputs())?;
    let kind = net.loss_kind();
    let loss = crate::metrics::batch_loss_and_grad(kind, &p, d.targets())?.0;
    let macro_f1 = (kind == LossKind::MultilabelBinaryCrossEntropy)
        .then(|| macro_f1(&ConfusionCounts::from_predictions(&p, d.targets())));
    Ok(Metrics {
        error: error_rate(kind, &p, d.targets()),
        loss,
        macro_f1,
        sizes: net.sizes(d.inputs())?,
    })
}

/// Trains from a fresh network. With `dev == None` the training set is
/// also the development set.
pub fn train(config: &TrainConfig, train_set: &Dataset, dev_set: Option<&Dataset>) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut rng = Rng::new(config.seed);
    let spec = config.model_spec(
        train_set.input_dim(),
        train_set.output_dim(),
        head_for_task(train_set.task()),
    );
    let net = Network::new(spec, &mut rng)?;
    train_network(config, net, rng, train_set, dev_set)
}

/// Trains an existing network, drawing shuffles, dropout masks and new
/// budding weights from `rng`.
pub fn train_network(
    config: &TrainConfig,
    mut net: Network,
    mut rng: Rng,
    train_set: &Dataset,
    dev_set: Option<&Dataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_task(&net, train_set)?;
    if let Some(dev) = dev_set {
        check_task(&net, dev)?;
        if dev.is_empty() {
            return Err(Error::Usage("development set is empty".into()));
        }
    }
    let multilabel = train_set.task() == TaskKind::Multilabel;
    let mut schedule = ScheduleState::new(config.patience, config.lr_factors.clone(), multilabel);
    let mut optimizer = Optimizer::new(AdamConfig::default());
    let reg = config.regularization();
    let dropout = config.dropout_p;
    let mut best = net.clone();
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let lr = config.base_lr * schedule.lr_factor();
        let order = rng.permutation(train_set.len());
        let mut grew = 0;
        let mut failure = None;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_set.select(chunk);
            let drop = (dropout > 0.0).then_some((dropout, &mut rng));
            let step = net
                .loss_and_gradients(batch.inputs(), batch.targets(), drop)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
                    }
                    // Gradients are batch means, so the penalties are shared
                    // across the batch as in a summed-loss objective.
                    let per_batch = Regularization {
                        lambda: reg.lambda / chunk.len() as f64,
                        l2: reg.l2 / chunk.len() as f64,
                    };
                    net.apply_gradients(&grads, &mut optimizer, lr, per_batch, config.depth_decay)
                });
            if let Err(e) = step {
                failure = Some(e);
                break;
            }
            grew += net.grow(&mut rng);
        }
        let metrics = failure
            .map_or_else(|| evaluate(&net, train_set), Err)
            .and_then(|train_m| {
                let non_finite = !train_m.loss.is_finite();
                let dev_m = match dev_set {
                    Some(dev) => evaluate(&net, dev)?,
                    None => train_m.clone(),
                };
                if non_finite || !dev_m.loss.is_finite() {
                    return Err(Error::Numerical("non-finite evaluation loss".into()));
                }
                Ok((train_m, dev_m))
            });
        let (train_m, dev_m) = match metrics {
            Ok(m) => m,
            Err(Error::Numerical(message)) => {
                stop = StopReason::Diverged { epoch, message };
                break;
            }
            Err(e) => return Err(e),
        };
        let monitored = if multilabel {
            dev_m.macro_f1.unwrap_or(0.0)
        } else {
            dev_m.error
        };
        let event = schedule.observe(epoch, monitored);
        if event == ScheduleEvent::Improved {
            best = net.clone();
        }
        log.push(EpochRecord {
            epoch,
            train_error: train_m.error,
            train_loss: train_m.loss,
            val_error: dev_m.error,
            val_loss: dev_m.loss,
            macro_f1_train: train_m.macro_f1,
            macro_f1_val: dev_m.macro_f1,
            total_soft_size: dev_m.sizes.total,
            hard_size: dev_m.sizes.hard,
            effective_lr: lr,
            layer_soft_sizes: dev_m.sizes.per_layer,
            grew,
            refused_growths: net.budding_tree().map_or(0, |t| t.refused_growths()),
            event,
        });
        if event == ScheduleEvent::Stop {
            stop = StopReason::Schedule;
            break;
        }
    }
    let (best_epoch, best_metric) = match (schedule.best_epoch, schedule.best_metric) {
        (Some(e), Some(m)) => (e, m),
        _ => {
            let message = match &stop {
                StopReason::Diverged { message, .. } => message.clone(),
                _ => "no epoch completed".into(),
            };
            return Err(Error::Numerical(format!(
                "training diverged before the first epoch finished: {message}"
            )));
        }
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        last: net,
        log,
        stop,
        rng: rng.state(),
    })
}

pub const LOG_FIXED_COLUMNS: [&str; 10] = [
    "epoch",
    "train_error",
    "train_loss",
    "val_error",
    "val_loss",
    "macro_f1_train",
    "macro_f1_val",
    "total_soft_size",
    "hard_size",
    "effective_lr",
];

/// The epoch log as CSV text with `layers` per-layer size columns.
pub fn log_to_csv(log: &[EpochRecord], layers: usize) -> String {
    let mut out = LOG_FIXED_COLUMNS.join(",");
    for l in 0..layers {
        let _ = write!(out, ",layer_s_{l}");
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in log {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_error,
            r.train_loss,
            r.val_error,
            r.val_loss,
            opt(r.macro_f1_train),
            opt(r.macro_f1_val),
            opt(r.total_soft_size),
            r.hard_size.map(|h| h.to_string()).unwrap_or_default(),
            r.effective_lr
        );
        for l in 0..layers {
            out.push(',');
            if let Some(s) = r.layer_soft_sizes.get(l) {
                let _ = write!(out, "{s}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_log_csv(log: &[EpochRecord], layers: usize, path: &Path) -> Result<()> {
    std::fs::write(path, log_to_csv(log, layers)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_multilabel, generate_two_spirals, SpiralSpec, SpiralVariant};
    use crate::numeric::Rng;
    use proptest::prelude::*;

    #[test]
    fn frozen_metric_schedule() {
        let mut s = ScheduleState::new(20, vec![0.3, 0.1], false);
        let mut events = Vec::new();
        for epoch in 1..=100 {
            let e = s.observe(epoch, 0.5);
            if e != ScheduleEvent::Waiting {
                events.push((epoch, e));
            }
            if e == ScheduleEvent::Stop {
                break;
            }
        }
        assert_eq!(
            events,
            vec![
                (1, ScheduleEvent::Improved),
                (21, ScheduleEvent::Decayed(1)),
                (41, ScheduleEvent::Decayed(2)),
                (61, ScheduleEvent::Stop)
            ]
        );
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = ScheduleState::new(3, vec![0.5], false);
        assert_eq!(s.observe(1, 1.0), ScheduleEvent::Improved);
        assert_eq!(s.observe(2, 1.0), ScheduleEvent::Waiting);
        assert_eq!(s.observe(3, 0.9), ScheduleEvent::Improved);
        assert_eq!(s.epochs_since_best, 0);
        assert_eq!(s.best_epoch, Some(3));
        let mut hi = ScheduleState::new(3, vec![], true);
        hi.observe(1, 0.5);
        assert_eq!(hi.observe(2, 0.6), ScheduleEvent::Improved);
        assert_eq!(hi.observe(3, 0.6), ScheduleEvent::Waiting);
    }

    proptest! {
        #[test]
        fn lr_is_a_non_increasing_step_function(metrics in prop::collection::vec(0.0f64..1.0, 1..300)) {
            let mut s = ScheduleState::new(5, vec![0.3, 0.1], false);
            let mut factors = vec![s.lr_factor()];
            let mut best = Vec::new();
            for (i, m) in metrics.iter().enumerate() {
                let e = s.observe(i + 1, *m);
                factors.push(s.lr_factor());
                best.push(s.best_metric.unwrap());
                if e == ScheduleEvent::Stop { break; }
            }
            prop_assert!(factors.windows(2).all(|w| w[1] <= w[0]));
            let mut distinct = factors.clone();
            distinct.dedup();
            prop_assert!(distinct.len() <= 3);
            prop_assert!(best.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_factors: vec![0.1, 0.3],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::mnist(Architecture::Highway)).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::mnist(Architecture::Highway));
        let partial: TrainConfig = serde_json::from_str(r#"{"base_lr": 0.01}"#).unwrap();
        assert_eq!(partial.base_lr, 0.01);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.01}"#).is_err());
    }

    #[test]
    fn short_run_logs_every_epoch_and_picks_the_best() {
        let d = generate_two_spirals(&SpiralSpec::new(SpiralVariant::Easy, 1)).unwrap();
        let config = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::spirals(Architecture::Tunnel)
        };
        let out = train(&config, &d, None).unwrap();
        assert_eq!(out.log.len(), 5);
        assert!(out.log.iter().enumerate().all(|(i, r)| r.epoch == i + 1));
        let min = out.log.iter().map(|r| r.val_error).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_metric, min);
        let m = evaluate(&out.best, &d).unwrap();
        assert!((m.error - out.best_record().train_error).abs() <= 1e-12);
        assert!((m.loss - out.best_record().train_loss).abs() <= 1e-12);
        let csv = log_to_csv(&out.log, 10);
        assert!(csv.starts_with("epoch,train_error,train_loss,val_error,val_loss,macro_f1_train,macro_f1_val,total_soft_size,hard_size,effective_lr,layer_s_0,"));
        assert!(csv.lines().nth(1).unwrap().contains(",,,"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn evaluate_rejects_mismatch_and_empty() {
        let d = generate_two_spirals(&SpiralSpec::new(SpiralVariant::Easy, 1)).unwrap();
        let ml = generate_synthetic_multilabel(10, 2, 3, 1).unwrap();
        let mut rng = Rng::new(0);
        let net = Network::new(
            TrainConfig::default().model_spec(2, 1, HeadKind::BinarySigmoid),
            &mut rng,
        )
        .unwrap();
        assert!(matches!(evaluate(&net, &ml), Err(Error::Config(_))));
        assert!(matches!(evaluate(&net, &d.select(&[])), Err(Error::Usage(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let d = generate_two_spirals(&SpiralSpec::new(SpiralVariant::Easy, 1)).unwrap();
        let config = TrainConfig {
            base_lr: 1e300,
            max_epochs: 3,
            architecture: Architecture::MlpBaseline,
            ..TrainConfig::default()
        };
        match train(&config, &d, None) {
            Ok(out) => assert!(matches!(out.stop, StopReason::Diverged { .. })),
            Err(e) => assert!(matches!(e, Error::Numerical(_)), "{e}"),
        }
    }
}

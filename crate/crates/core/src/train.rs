//! Competing-objective training.
//!
//! Per batch the discriminator first takes one step toward labelling every
//! descriptor as the extra adversarial class `N+1`, then the generator (and,
//! by default, the discriminator) takes one step toward the true labels.
//! Supervised ablation modes run only the second kind of step on an N-way
//! head.

use std::fmt::Write as _;

use mdrnet_tensor::{checkpoint, decayed_lr, AdamState, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ShapeDataset, Split};
use crate::error::{CoreError, Result};
use crate::mdr::{compute_mdr, normalize_mdr, NormalizedMdr};
use crate::network::{collect_grads, dense_forward, generator_forward, BoundDense, Mode, Model, Readout};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub k: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_dis: f64,
    pub decay: f64,
    pub epochs: u32,
    pub seed: u64,
    /// Whether the label objective also updates the discriminator.
    pub g_updates_dis: bool,
    pub descriptor_readout: Readout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            k: 3,
            batch_size: 32,
            lr_gen: 0.01,
            lr_dis: 0.001,
            decay: 0.995,
            epochs: 60,
            seed: 7,
            g_updates_dis: true,
            descriptor_readout: Readout::Cell,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| CoreError::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
                value.parse().map_err(|_| format!("bad value `{value}` for {key}"))
            }
            match key {
                "mode" => cfg.mode = value.parse().map_err(err)?,
                "k" => cfg.k = num(key, value).map_err(err)?,
                "batch_size" => cfg.batch_size = num(key, value).map_err(err)?,
                "lr_gen" => cfg.lr_gen = num(key, value).map_err(err)?,
                "lr_dis" => cfg.lr_dis = num(key, value).map_err(err)?,
                "decay" => cfg.decay = num(key, value).map_err(err)?,
                "epochs" => cfg.epochs = num(key, value).map_err(err)?,
                "seed" => cfg.seed = num(key, value).map_err(err)?,
                "g_updates_dis" => cfg.g_updates_dis = num(key, value).map_err(err)?,
                "descriptor_readout" => cfg.descriptor_readout = value.parse().map_err(err)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        for (name, lr) in [("lr_gen", self.lr_gen), ("lr_dis", self.lr_dis)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be a finite non-negative rate, got {lr}"));
            }
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        format!(
            "mode = {}\nk = {}\nbatch_size = {}\nlr_gen = {:?}\nlr_dis = {:?}\ndecay = {:?}\nepochs = {}\nseed = {}\ng_updates_dis = {}\ndescriptor_readout = {}\n",
            self.mode,
            self.k,
            self.batch_size,
            self.lr_gen,
            self.lr_dis,
            self.decay,
            self.epochs,
            self.seed,
            self.g_updates_dis,
            self.descriptor_readout
        )
    }
}

/// One training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub mdr: NormalizedMdr,
    /// Class index in `1..=N`.
    pub label: usize,
}

/// Normalized MDRs of one split, in dataset order.
pub fn prepare_examples(dataset: &ShapeDataset, split: Split, k: usize) -> Result<Vec<Example>> {
    dataset
        .split(split)
        .map(|s| {
            Ok(Example {
                id: s.id.clone(),
                mdr: normalize_mdr(&compute_mdr(&s.grid, k)?),
                label: s.label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub g_loss: f64,
    /// Absent for supervised modes.
    pub d_loss: Option<f64>,
    pub train_acc: f64,
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,g_loss,d_loss,train_acc\n");
    for m in log {
        let d = m.d_loss.map(|d| format!("{d:.10}")).unwrap_or_default();
        writeln!(out, "{},{:.10},{},{:.6}", m.epoch, m.g_loss, d, m.train_acc).unwrap();
    }
    out
}

/// Pre-update loss of a label step and how many samples it classified
/// correctly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

pub struct TrainState {
    config: TrainConfig,
    model: Model,
    gen_opt: AdamState,
    head_opt: AdamState,
    epoch: u32,
    metrics: Vec<EpochMetrics>,
}

fn correct_count(logits: &Tensor, n_classes: usize, labels: &[usize]) -> usize {
    let width = logits.shape()[logits.shape().len() - 1];
    logits
        .data()
        .chunks(width)
        .zip(labels)
        .filter(|(row, &label)| crate::eval::classify(row, n_classes) == label)
        .count()
}

fn numeric(epoch: u32) -> impl Fn(TensorError) -> CoreError {
    move |e| match e {
        TensorError::NonFiniteGradient { .. } => CoreError::NonFiniteLoss { epoch, batch: None },
        other => other.into(),
    }
}

impl TrainState {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if model.mode != config.mode || model.k != config.k || model.readout != config.descriptor_readout {
            return Err(CoreError::Mismatch(format!(
                "model ({}, k={}, {}) does not match config ({}, k={}, {})",
                model.mode, model.k, model.readout, config.mode, config.k, config.descriptor_readout
            )));
        }
        let gen_opt = AdamState::new(
            config.lr_gen,
            model.generator.named_tensors().into_iter().map(|(_, t)| t),
        );
        let head_opt = AdamState::new(config.lr_dis, model.head.named_tensors().into_iter().map(|(_, t)| t));
        Ok(Self {
            config,
            model,
            gen_opt,
            head_opt,
            epoch: 0,
            metrics: Vec::new(),
        })
    }

    /// Fresh state with parameters drawn from `config.seed`.
    pub fn init(config: TrainConfig, n_classes: usize) -> Result<Self> {
        let model = Model::build(
            config.mode,
            Default::default(),
            n_classes,
            config.k,
            config.descriptor_readout,
            config.seed,
        );
        Self::new(config, model)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn lr_gen(&self) -> f64 {
        decayed_lr(self.config.lr_gen, self.config.decay, self.epoch)
    }

    pub fn lr_dis(&self) -> f64 {
        decayed_lr(self.config.lr_dis, self.config.decay, self.epoch)
    }

    fn adversarial_target(&self) -> usize {
        self.model.n_classes
    }

    fn label_targets(&self, batch: &[&Example]) -> Result<Vec<usize>> {
        batch
            .iter()
            .map(|e| {
                if e.label == 0 || e.label > self.model.n_classes {
                    Err(CoreError::Mismatch(format!(
                        "label {} of {} outside 1..={}",
                        e.label, e.id, self.model.n_classes
                    )))
                } else {
                    Ok(e.label - 1)
                }
            })
            .collect()
    }

    fn check_batch<'a>(batch: &[&'a Example]) -> Result<Vec<&'a NormalizedMdr>> {
        if batch.is_empty() {
            return Err(CoreError::Mismatch("empty batch".into()));
        }
        Ok(batch.iter().map(|e| &e.mdr).collect())
    }

    fn finite(&self, loss: f64) -> Result<f64> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(CoreError::NonFiniteLoss {
                epoch: self.epoch,
                batch: None,
            })
        }
    }

    fn update_head(&mut self, grads: &[Tensor]) -> Result<()> {
        let lr = self.lr_dis();
        let refs: Vec<&Tensor> = grads.iter().collect();
        self.head_opt
            .step(&mut self.model.head.tensors_mut(), &refs, lr)
            .map_err(numeric(self.epoch))
    }

    fn update_generator(&mut self, grads: &[Tensor]) -> Result<()> {
        let lr = self.lr_gen();
        let refs: Vec<&Tensor> = grads.iter().collect();
        self.gen_opt
            .step(&mut self.model.generator.tensors_mut(), &refs, lr)
            .map_err(numeric(self.epoch))
    }

    fn head_params(&self) -> Vec<&Tensor> {
        self.model.head.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn gen_params(&self) -> Vec<&Tensor> {
        self.model
            .generator
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    /// Discriminator step toward the adversarial class with the generator
    /// frozen. Returns the pre-update loss.
    pub fn d_step(&mut self, batch: &[&Example]) -> Result<f64> {
        if !self.model.mode.adversarial() {
            return Err(CoreError::Mismatch(format!(
                "mode {} has no discriminator",
                self.model.mode
            )));
        }
        let mdrs = Self::check_batch(batch)?;
        let mut tape = Tape::new();
        let gen = self.model.generator.bind(&mut tape, false);
        let z = generator_forward(&mut tape, &self.model.arch, &gen, &mdrs, self.model.readout)?;
        let (loss, grads) = self.d_objective(&mut tape, z, mdrs.len())?;
        self.update_head(&grads)?;
        Ok(loss)
    }

    /// Head loss on `features` (treated as constants) against the
    /// adversarial class, and the head gradients.
    fn d_objective(&self, tape: &mut Tape, features: mdrnet_tensor::Var, n: usize) -> Result<(f64, Vec<Tensor>)> {
        let head = self.model.head.bind(tape, true);
        let logits = dense_forward(tape, &head, features, self.model.arch.leaky_slope)?;
        let loss = tape.softmax_cross_entropy(logits, &vec![self.adversarial_target(); n])?;
        let value = self.finite(tape.value(loss).item())?;
        let grads = tape.backward(loss)?;
        Ok((value, collect_grads(&grads, &head.vars(), &self.head_params())))
    }

    /// Label step: generator (and the head, unless the config freezes it in
    /// adversarial modes) toward the true classes.
    pub fn g_step(&mut self, batch: &[&Example]) -> Result<StepOutcome> {
        let mdrs = Self::check_batch(batch)?;
        let targets = self.label_targets(batch)?;
        let mut tape = Tape::new();
        let gen = self.model.generator.bind(&mut tape, true);
        let z = generator_forward(&mut tape, &self.model.arch, &gen, &mdrs, self.model.readout)?;
        self.g_objective(&mut tape, &gen.vars(), z, &targets)
    }

    fn updates_head_on_labels(&self) -> bool {
        !self.model.mode.adversarial() || self.config.g_updates_dis
    }

    fn g_objective(
        &mut self,
        tape: &mut Tape,
        gen_vars: &[mdrnet_tensor::Var],
        z: mdrnet_tensor::Var,
        targets: &[usize],
    ) -> Result<StepOutcome> {
        let train_head = self.updates_head_on_labels();
        let head: BoundDense = self.model.head.bind(tape, train_head);
        let logits = dense_forward(tape, &head, z, self.model.arch.leaky_slope)?;
        let loss = tape.softmax_cross_entropy(logits, targets)?;
        let value = self.finite(tape.value(loss).item())?;
        let labels: Vec<usize> = targets.iter().map(|t| t + 1).collect();
        let correct = correct_count(tape.value(logits), self.model.n_classes, &labels);
        let grads = tape.backward(loss)?;
        let gen_grads = collect_grads(&grads, gen_vars, &self.gen_params());
        let head_grads = train_head.then(|| collect_grads(&grads, &head.vars(), &self.head_params()));
        self.update_generator(&gen_grads)?;
        if let Some(g) = head_grads {
            self.update_head(&g)?;
        }
        Ok(StepOutcome { loss: value, correct })
    }

    /// `d_step` followed by `g_step` on the same batch, sharing one
    /// generator forward pass. Results are bit-identical to the two calls.
    pub fn adversarial_step(&mut self, batch: &[&Example]) -> Result<(f64, StepOutcome)> {
        if !self.model.mode.adversarial() {
            return Err(CoreError::Mismatch(format!(
                "mode {} has no discriminator",
                self.model.mode
            )));
        }
        let mdrs = Self::check_batch(batch)?;
        let targets = self.label_targets(batch)?;
        let mut tape = Tape::new();
        let gen = self.model.generator.bind(&mut tape, true);
        let z = generator_forward(&mut tape, &self.model.arch, &gen, &mdrs, self.model.readout)?;
        let frozen = tape.constant(tape.value(z).clone());
        let (d_loss, grads) = self.d_objective(&mut tape, frozen, mdrs.len())?;
        self.update_head(&grads)?;
        let outcome = self.g_objective(&mut tape, &gen.vars(), z, &targets)?;
        Ok((d_loss, outcome))
    }

    /// One pass over `examples` in an order shuffled by `(seed, epoch)`.
    pub fn train_epoch(&mut self, examples: &[Example]) -> Result<&EpochMetrics> {
        if examples.is_empty() {
            return Err(CoreError::Mismatch("no training examples".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::from(self.epoch));
        order.shuffle(&mut rng);

        let (mut g_sum, mut d_sum, mut correct) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let n = batch.len() as f64;
            let step = if self.model.mode.adversarial() {
                self.adversarial_step(&batch).map(|(d, g)| (Some(d), g))
            } else {
                self.g_step(&batch).map(|g| (None, g))
            };
            let (d, g) = step.map_err(|e| match e {
                CoreError::NonFiniteLoss { .. } => CoreError::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: Some(b),
                },
                other => other,
            })?;
            g_sum += g.loss * n;
            d_sum += d.unwrap_or(0.0) * n;
            correct += g.correct;
        }
        let total = examples.len() as f64;
        self.metrics.push(EpochMetrics {
            epoch: self.epoch + 1,
            g_loss: g_sum / total,
            d_loss: self.model.mode.adversarial().then_some(d_sum / total),
            train_acc: correct as f64 / total,
        });
        self.epoch += 1;
        Ok(self.metrics.last().unwrap())
    }

    /// Model parameters, epoch counter and both optimizer states.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.to_records();
        out.push(("/meta/epoch".into(), Tensor::scalar(f64::from(self.epoch))));
        let groups = [
            ("gen", &self.gen_opt, self.model.generator.named_tensors()),
            ("head", &self.head_opt, self.model.head.named_tensors()),
        ];
        for (group, opt, named) in groups {
            out.push((format!("/opt/{group}/t"), Tensor::scalar(opt.t() as f64)));
            for (((name, _), m), v) in named.iter().zip(opt.first_moments()).zip(opt.second_moments()) {
                out.push((format!("/opt/{group}/{name}/m"), m.clone()));
                out.push((format!("/opt/{group}/{name}/v"), v.clone()));
            }
        }
        out
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_records())
    }

    /// Restores a state written by [`TrainState::to_records`]. The metrics
    /// log is not part of a checkpoint and starts empty.
    pub fn from_records(config: TrainConfig, records: &[(String, Tensor)]) -> Result<Self> {
        let model = Model::from_records(records)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| CoreError::format("checkpoint", format!("missing record `{name}`")))
        };
        let restore = |group: &str, base: f64, names: Vec<String>| -> Result<AdamState> {
            let t = find(&format!("/opt/{group}/t"))?.item() as u64;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in names {
                m.push(find(&format!("/opt/{group}/{name}/m"))?);
                v.push(find(&format!("/opt/{group}/{name}/v"))?);
            }
            Ok(AdamState::from_parts(base, t, m, v)?)
        };
        let names = |named: Vec<(String, &Tensor)>| named.into_iter().map(|(n, _)| n).collect();
        let gen_opt = restore("gen", config.lr_gen, names(model.generator.named_tensors()))?;
        let head_opt = restore("head", config.lr_dis, names(model.head.named_tensors()))?;
        let epoch = find("/meta/epoch")?.item() as u32;
        let mut state = Self::new(config, model)?;
        state.gen_opt = gen_opt;
        state.head_opt = head_opt;
        state.epoch = epoch;
        Ok(state)
    }
}

/// Model stored in a checkpoint file's bytes.
pub fn load_model(bytes: &[u8]) -> Result<Model> {
    Model::from_records(&checkpoint::decode(bytes)?)
}

//! Toy supervised training: micro-batches by gradient accumulation over
//! single-image forward passes, SGD or AdamW, resumable state.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{argmax, SyntheticDataset};
use crate::error::{Error, Result};
use crate::io::{self, Stored};
use crate::layers::Ctx;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub micro_batch: usize,
    /// Seed of the per-step sample selection.
    pub seed: u64,
    /// Save the state every `n` steps to the given path.
    pub checkpoint: Option<(usize, PathBuf)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 1e-3,
            optimizer: Optimizer::adamw(),
            micro_batch: 8,
            seed: 42,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    /// First and second moments, in parameter order (empty for SGD).
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: usize,
    /// Mean micro-batch loss of every completed step.
    pub losses: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample indices used at `step`; depends only on the seed and step.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step as u64)));
    if batch >= n {
        return index::sample(&mut rng, n, n).into_vec();
    }
    index::sample(&mut rng, n, batch).into_vec()
}

/// Mean loss and parameter gradients over the given samples.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    data: &SyntheticDataset,
    samples: &[usize],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut grads: Vec<Tensor<T>> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
    let mut total = 0.0;
    for &i in samples {
        let mut cx = Ctx::new(&model.params, true);
        let x = cx.tape.constant(data.image::<T>(i)?);
        let out = model.forward_on(&mut cx, x)?;
        let loss = cx.tape.cross_entropy(out.logits, data.labels[i])?;
        total += cx.tape.value(loss).item().to_f64_lossy();
        cx.tape.backward(loss)?;
        for (acc, g) in grads.iter_mut().zip(cx.param_grads()) {
            if let Some(g) = g {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
        }
    }
    let inv = T::one() / T::from_usize(samples.len()).expect("batch size");
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok((total / samples.len() as f64, grads))
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        TrainState {
            model,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            losses: Vec::new(),
        }
    }

    fn apply(&mut self, grads: &[Tensor<T>], cfg: &TrainConfig) {
        let lr = T::from_f64_lossy(cfg.lr);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.model.params.tensors_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * d;
                    }
                }
            }
            Optimizer::AdamW { beta1, beta2, eps, weight_decay } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
                    self.v = self.m.clone();
                }
                let t = (self.step + 1) as i32;
                let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
                let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
                let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                let (eps, wd) = (T::from_f64_lossy(eps), T::from_f64_lossy(weight_decay));
                let one = T::one();
                let params = self.model.params.tensors_mut();
                for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
                    for ((w, &d), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
                        *mi = b1 * *mi + (one - b1) * d;
                        *vi = b2 * *vi + (one - b2) * d * d;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *w = *w - lr * (update + wd * *w);
                    }
                }
            }
        }
    }

    /// One optimizer step on the micro-batch chosen for the current step.
    pub fn train_step(&mut self, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<f64> {
        let step = self.step;
        let diverged = |e: Error| {
            let mut root = &e;
            while let Error::Context { source, .. } = root {
                root = source;
            }
            match root {
                Error::NonFinite { .. } => Error::Diverged { step },
                _ => e,
            }
        };
        let samples = batch_indices(cfg.seed, step, data.len(), cfg.micro_batch);
        let (loss, grads) = loss_and_grads(&self.model, data, &samples).map_err(diverged)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { step });
        }
        self.apply(&grads, cfg);
        if self.model.params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Diverged { step });
        }
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Runs until `cfg.steps` steps have been completed in total.
    pub fn run(&mut self, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<()> {
        check_data(&self.model.cfg, data)?;
        while self.step < cfg.steps {
            self.train_step(data, cfg)?;
            if let Some((every, path)) = &cfg.checkpoint {
                if *every > 0 && self.step.is_multiple_of(*every) {
                    self.save(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Stored)> = self
            .model
            .to_entries()
            .into_iter()
            .map(|(n, s)| (format!("param/{n}"), s))
            .collect();
        for ((name, _), (m, v)) in self.model.params.iter().zip(self.m.iter().zip(&self.v)) {
            entries.push((format!("adam_m/{name}"), Stored::from_tensor(m)));
            entries.push((format!("adam_v/{name}"), Stored::from_tensor(v)));
        }
        entries.push((
            "step".into(),
            Stored::U32 {
                shape: vec![1],
                data: vec![u32::try_from(self.step).map_err(|_| Error::Format("step overflow".into()))?],
            },
        ));
        if !self.losses.is_empty() {
            entries.push((
                "losses".into(),
                Stored::F64(Tensor::new(vec![self.losses.len()], self.losses.clone())?),
            ));
        }
        io::write_file(path, &entries)
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let entries = io::read_file(path)?;
        let strip = |prefix: &str| -> Vec<(String, Stored)> {
            entries
                .iter()
                .filter_map(|(n, s)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), s.clone())))
                .collect()
        };
        let mut model = Model::build(cfg, 0)?;
        model.load_entries(&strip("param/"))?;
        let (ms, vs) = (strip("adam_m/"), strip("adam_v/"));
        let mut m = Vec::new();
        let mut v = Vec::new();
        if !ms.is_empty() {
            for (name, t) in model.params.iter() {
                let find = |set: &[(String, Stored)]| -> Result<Tensor<T>> {
                    let (_, s) = set
                        .iter()
                        .find(|(n, _)| n == name)
                        .ok_or_else(|| Error::Format(format!("missing moment for `{name}`")))?;
                    if s.shape() != t.shape() {
                        return Err(Error::CheckpointShape {
                            name: name.to_string(),
                            expected: t.shape().to_vec(),
                            found: s.shape().to_vec(),
                        });
                    }
                    s.to_tensor(name)
                };
                m.push(find(&ms)?);
                v.push(find(&vs)?);
            }
        }
        let get = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, s)| s);
        let step = get("step")
            .ok_or_else(|| Error::Format("state lacks `step`".into()))?
            .as_u32("step")?[0] as usize;
        let losses = match get("losses") {
            Some(s) => s.to_tensor::<f64>("losses")?.into_data(),
            None => Vec::new(),
        };
        if losses.len() != step {
            return Err(Error::Format(format!("{} losses recorded for {step} steps", losses.len())));
        }
        Ok(TrainState { model, m, v, step, losses })
    }
}

fn check_data(cfg: &ModelConfig, data: &SyntheticDataset) -> Result<()> {
    cfg.validate_resolution(data.side)?;
    if data.classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            data.classes, cfg.num_classes
        )));
    }
    Ok(())
}

/// Builds a model from `cfg` with `model_seed` and trains it.
pub fn train_toy<T: Scalar>(
    cfg: &ModelConfig,
    model_seed: u64,
    data: &SyntheticDataset,
    train: &TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(Model::build(cfg, model_seed)?);
    state.run(data, train)?;
    Ok(state)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &SyntheticDataset) -> Result<f64> {
    let mut correct = 0;
    for i in 0..data.len() {
        let logits = model.logits(&data.image::<T>(i)?)?;
        if argmax(&logits) == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

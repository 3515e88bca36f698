//! The optimization loop: sample a patch batch, forward, L1, backward, Adam.
//!
//! Every step draws its randomness from a generator keyed by `(seed, step)`,
//! so an interrupted run resumed from a checkpoint replays exactly the same
//! batches as an uninterrupted one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::model::{l1_loss, Checkpoint, ModelConfig, OptimizerSnapshot, Tvsrn};
use crate::nn::ParamStore;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};
use crate::volume::{
    extract_patch_pair, normalize, sample_patch_pair, slab_mean, PatchPair, PatchSpec, Provenance,
    Volume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub patch: PatchSpec,
    /// Save every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Evaluate validation loss every this many steps; 0 disables it.
    pub validation_interval: u64,
    /// Steps trained on real pairs only before pseudo pairs join the mix.
    pub real_only_steps: u64,
    /// Probability of drawing a pseudo pair once mixing has started.
    pub pseudo_fraction: f64,
    /// Random horizontal flips of training patches.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-4,
            batch_size: 1,
            seed: 0,
            patch: PatchSpec::default(),
            checkpoint_interval: 0,
            validation_interval: 0,
            real_only_steps: 0,
            pseudo_fraction: 0.5,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.pseudo_fraction) {
            return bad("pseudo_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// An aligned low/high-resolution volume pair, both normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub lr: Volume,
    pub hr: Volume,
}

impl TrainingPair {
    pub fn new(id: impl Into<String>, lr: &Volume, hr: &Volume) -> Self {
        TrainingPair {
            id: id.into(),
            lr: normalize(lr),
            hr: normalize(hr),
        }
    }

    /// Synthetic pair from a (pseudo) volume: the volume is the target and
    /// its `r`-slab mean the input.
    pub fn from_target(id: impl Into<String>, hr: &Volume, r: usize) -> Result<Self> {
        let hr = normalize(hr);
        let lr = slab_mean(&hr, r)?;
        Ok(TrainingPair {
            id: id.into(),
            lr,
            hr,
        })
    }
}

/// Training data: real pairs, optional pseudo pairs and validation pairs.
#[derive(Debug, Clone, Default)]
pub struct DataSource {
    pub real: Vec<TrainingPair>,
    pub pseudo: Vec<TrainingPair>,
    pub validation: Vec<TrainingPair>,
}

impl DataSource {
    /// Checks every pair can supply patches before training starts.
    pub fn validate(&self, r: usize, patch: &PatchSpec) -> Result<()> {
        if self.real.is_empty() {
            return Err(PipelineError::Data("no real training pairs".into()));
        }
        for p in self.real.iter().chain(&self.pseudo).chain(&self.validation) {
            extract_patch_pair(&p.lr, &p.hr, r, patch, [0, 0, 0], false, &p.id)
                .map_err(|e| PipelineError::Data(format!("pair {}: {e}", p.id)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Tvsrn,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed steps.
    pub step: u64,
    pub trace: Vec<LossRecord>,
    pub validation: Vec<LossRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointExtra {
    train: TrainConfig,
    trace: Vec<LossRecord>,
    validation: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = Tvsrn::new(model_config)?;
        let params = model.init_params::<f32>(cfg.seed);
        let adam = AdamState::new(cfg.adam(), params.tensors().iter().map(|t| t.shape()));
        Ok(TrainState {
            model,
            params,
            adam,
            step: 0,
            trace: Vec::new(),
            validation: Vec::new(),
        })
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`], returning the
    /// training configuration stored alongside it.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<(Self, TrainConfig)> {
        let extra: CheckpointExtra = serde_json::from_value(ckpt.extra)
            .map_err(|e| PipelineError::Data(format!("checkpoint lacks training metadata: {e}")))?;
        let model = Tvsrn::new(ckpt.config)?;
        let adam = match ckpt.optimizer {
            Some(o) => o.into_state()?,
            None => AdamState::new(
                extra.train.adam(),
                ckpt.params.tensors().iter().map(|t| t.shape()),
            ),
        };
        Ok((
            TrainState {
                model,
                params: ckpt.params,
                adam,
                step: ckpt.step,
                trace: extra.trace,
                validation: extra.validation,
            },
            extra.train,
        ))
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let extra = CheckpointExtra {
            train: cfg.clone(),
            trace: self.trace.clone(),
            validation: self.validation.clone(),
        };
        Checkpoint {
            config: self.model.config().clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(OptimizerSnapshot::from_state(&self.adam)),
            extra: serde_json::to_value(extra).expect("training metadata serializes"),
        }
    }

    pub fn trained_model(&self) -> super::TrainedModel {
        super::TrainedModel {
            model: self.model.clone(),
            params: self.params.clone(),
        }
    }

    /// Batch for step `step`; depends only on `(seed, step)` and the data.
    pub fn sample_batch(
        &self,
        data: &DataSource,
        cfg: &TrainConfig,
        step: u64,
    ) -> Result<(Tensor<f32>, Tensor<f32>, Vec<Provenance>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let r = self.model.config().r;
        let mix = step >= cfg.real_only_steps && !data.pseudo.is_empty();
        let mut pairs: Vec<PatchPair> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pool = if mix && rng.gen_bool(cfg.pseudo_fraction) {
                &data.pseudo
            } else {
                &data.real
            };
            let src = &pool[rng.gen_range(0..pool.len())];
            let mut pair = sample_patch_pair(&src.lr, &src.hr, r, &cfg.patch, &mut rng, &src.id)?;
            if pair.provenance.flipped && !cfg.flip {
                let [z0, y0, x0] = pair.provenance.corner;
                pair = extract_patch_pair(
                    &src.lr,
                    &src.hr,
                    r,
                    &cfg.patch,
                    [z0, y0, x0],
                    false,
                    &src.id,
                )?;
            }
            pairs.push(pair);
        }
        let (lr, hr) = (
            stack(pairs.iter().map(|p| &p.lr))?,
            stack(pairs.iter().map(|p| &p.hr))?,
        );
        Ok((lr, hr, pairs.into_iter().map(|p| p.provenance).collect()))
    }

    /// One optimization step; returns the pre-update loss.
    pub fn train_step(&mut self, data: &DataSource, cfg: &TrainConfig) -> Result<f64> {
        let step = self.step;
        let (x, y, provenance) = self.sample_batch(data, cfg, step)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let xv = g.leaf(&x, false);
        let yv = g.leaf(&y, false);
        let pred = self.model.forward(&mut g, &p, xv)?;
        let loss_v = l1_loss(&mut g, pred, yv)?;
        let loss = g.data(loss_v)[0] as f64;
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss { step, provenance });
        }
        let grads = g.backward(loss_v)?;
        let refs: Vec<Option<&Tensor<f32>>> = p.vars().iter().map(|&v| grads.get(v)).collect();
        self.adam.step(self.params.tensors_mut(), &refs)?;
        self.step += 1;
        self.trace.push(LossRecord { step, loss });
        Ok(loss)
    }

    /// Mean L1 over a fixed top-left patch of every validation pair.
    pub fn validation_loss(&self, data: &DataSource, cfg: &TrainConfig) -> Result<Option<f64>> {
        if data.validation.is_empty() {
            return Ok(None);
        }
        let r = self.model.config().r;
        let mut total = 0.0;
        for v in &data.validation {
            let pair = extract_patch_pair(&v.lr, &v.hr, r, &cfg.patch, [0, 0, 0], false, &v.id)?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.leaf(&pair.lr, false);
            let yv = g.leaf(&pair.hr, false);
            let pred = self.model.forward(&mut g, &p, xv)?;
            let l = l1_loss(&mut g, pred, yv)?;
            total += g.data(l)[0] as f64;
        }
        Ok(Some(total / data.validation.len() as f64))
    }

    /// Trains until `cfg.steps` steps are complete, calling `after_step`
    /// after every step (for checkpointing and logging).
    pub fn train(
        &mut self,
        data: &DataSource,
        cfg: &TrainConfig,
        mut after_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        cfg.validate()?;
        data.validate(self.model.config().r, &cfg.patch)?;
        while self.step < cfg.steps {
            let loss = self.train_step(data, cfg)?;
            log::debug!("step {} loss {loss:.6}", self.step - 1);
            if cfg.validation_interval > 0 && self.step % cfg.validation_interval == 0 {
                if let Some(v) = self.validation_loss(data, cfg)? {
                    self.validation.push(LossRecord {
                        step: self.step,
                        loss: v,
                    });
                    log::info!("step {} validation loss {v:.6}", self.step);
                }
            }
            after_step(self)?;
        }
        Ok(())
    }
}

/// Concatenates `[1, 1, d, h, w]` tensors along the batch axis.
fn stack<'a>(items: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let items: Vec<&Tensor<f32>> = items.collect();
    let mut shape = items[0].shape().to_vec();
    shape[0] = items.len();
    let data = items
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Loss trace as `step,loss` lines under a header.
pub fn format_trace(trace: &[LossRecord]) -> String {
    let mut s = String::from("step,loss\n");
    for r in trace {
        s.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::volume::{generate_phantom, PhantomSpec};

    fn setup() -> (ModelConfig, TrainConfig, DataSource) {
        let (thin, thick) = generate_phantom(&PhantomSpec {
            dims: [16, 16, 16],
            ..PhantomSpec::default()
        })
        .unwrap();
        let model = ModelConfig {
            embed_dim: 4,
            heads: 1,
            encoder_depth: 1,
            n_fim: 1,
            window: 4,
            bias_hidden: 4,
            variant: Variant::Full,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            steps: 3,
            lr: 1e-3,
            patch: PatchSpec {
                depth: 2,
                height: 8,
                width: 8,
            },
            ..TrainConfig::default()
        };
        let data = DataSource {
            real: vec![TrainingPair::new("p", &thick, &thin)],
            ..DataSource::default()
        };
        (model, cfg, data)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (m, cfg, data) = setup();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 1,
            ..cfg
        };
        let mut st = TrainState::new(m, &cfg).unwrap();
        let before = st.params.clone();
        st.train(&data, &cfg, |_| Ok(())).unwrap();
        assert_eq!(st.params, before);
        assert_eq!(st.trace.len(), 1);
        assert!(st.trace[0].loss > 0.0);
    }

    #[test]
    fn same_seed_same_trace() {
        let (m, cfg, data) = setup();
        let run = || {
            let mut st = TrainState::new(m.clone(), &cfg).unwrap();
            st.train(&data, &cfg, |_| Ok(())).unwrap();
            st
        };
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn trace_format() {
        let t = [
            LossRecord { step: 0, loss: 0.5 },
            LossRecord {
                step: 1,
                loss: 0.25,
            },
        ];
        assert_eq!(format_trace(&t), "step,loss\n0,0.5\n1,0.25\n");
    }
}

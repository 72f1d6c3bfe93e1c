use super::{adam_step, lr_schedule, AdamState, Checkpoint, TrainConfig};
use crate::data::{make_batch_tight, Dataset};
use crate::error::{Error, Result};
use crate::losses::{single_loss_var, total_loss_var, LossBreakdown};
use crate::metrics::{gap_at_20, PredictionSet};
use crate::model::{model_forward, network_forward_var, Model, ModelConfig};
use crate::params::{bind, fill_from, named_tensors, ParamTree};
use crate::rng::{stream, SplitMix64};
use crate::tensor::{ops, Scalar, Tape, Tensor};

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Number of completed steps.
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// `l2_classifier · ‖W‖²`, included in `loss.total`.
    pub l2: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    /// Weighted distillation term.
    pub kl: f64,
    pub gap: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,lr,loss,bce,kl,gap";

    pub fn from_step(s: &StepLog, gap: Option<f64>) -> Self {
        Self {
            step: s.step,
            lr: s.lr,
            loss: s.loss.total,
            bce: s.loss.bce(),
            kl: s.loss.kl_weighted,
            gap,
        }
    }

    pub fn to_csv(&self) -> String {
        let gap = self.gap.map(|g| g.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.step, self.lr, self.loss, self.bce, self.kl, gap)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub gap: f64,
    pub predictions: PredictionSet,
}

/// Sigmoid scores `[N, C]` for a whole dataset, in inference mode.
pub fn predict_scores<T: Scalar>(model: &mut Model<T>, data: &Dataset, batch_size: usize, max_frames: usize) -> Result<Tensor<T>> {
    let c = model.config.num_classes;
    if data.num_classes != c {
        return Err(Error::invalid("predict", format!("dataset has {} classes, model {c}", data.num_classes)));
    }
    let mut out = Vec::with_capacity(data.len() * c);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch_tight(data, chunk, max_frames)?;
        let logits = model_forward(model, &batch, None)?;
        out.extend_from_slice(ops::sigmoid(&logits)?.data());
    }
    Tensor::new([data.len(), c], out)
}

/// Owns a model, its optimizer state and the step counter.
///
/// Every source of randomness is a pure function of the seed and the step:
/// epoch `e` visits the dataset in the order `shuffle(derive(seed, SHUFFLE, e))`
/// and step `s` draws dropout masks from `derive(seed, DROPOUT, s)`. Resuming
/// from a checkpoint therefore only needs the step counter.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::zeros_like(&model.params);
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
        })
    }

    /// Dataset indices of the batch used at `step`.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let spe = self.config.steps_per_epoch(n).max(1);
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::derive(self.config.seed, stream::SHUFFLE, epoch).shuffle(&mut order);
        let start = pos * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(n)].to_vec()
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::invalid("train", "dataset is empty"));
        }
        let cfg = self.config;
        let mcfg: ModelConfig = self.model.config;
        let indices = self.batch_indices(self.step, data.len());
        let batch = make_batch_tight::<T>(data, &indices, cfg.max_frames)?;
        let lr = lr_schedule(self.step, &cfg);
        let mut rng = SplitMix64::derive(cfg.seed, stream::DROPOUT, self.step);

        let mut tape = Tape::new();
        let params = bind(&mut tape, &self.model.params);
        let mut stats = self.model.stats.clone();
        let eig = self.model.whitening().cloned();
        let out = network_forward_var(&mut tape, &mcfg, &params, &mut stats, &batch, eig.as_ref(), Some(&mut rng))?;
        let (mut loss, mut breakdown) = if out.experts.is_empty() {
            single_loss_var(&mut tape, out.logits, &batch.labels)?
        } else {
            total_loss_var(&mut tape, &out.experts, out.logits, &batch.labels, &cfg.kd)?
        };
        let mut l2 = 0.0;
        if cfg.l2_classifier > 0.0 {
            for w in params.classifier_weights() {
                let sq = tape.mul(*w, *w)?;
                let sum = tape.sum_all(sq)?;
                let term = tape.scale(sum, cfg.l2_classifier)?;
                l2 += tape.value(term).item().as_f64();
                loss = tape.add(loss, term)?;
            }
        }
        breakdown.total = tape.value(loss).item().as_f64();
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1 });
        }

        let grads = tape.backward(loss)?;
        let mut flat = Vec::new();
        params.visit_leaves("", &mut |_, v| flat.push(grads.get_or_zeros(*v, tape.shape(*v))));
        adam_step(&mut self.model.params, &flat, &mut self.adam, lr)?;
        self.model.stats = stats;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            lr,
            loss: breakdown,
            l2,
        })
    }

    pub fn evaluate(&mut self, data: &Dataset) -> Result<Evaluation> {
        let scores = predict_scores(&mut self.model, data, self.config.batch_size, self.config.max_frames)?;
        let predictions = PredictionSet::from_scores(&scores, &data.label_sets())?;
        Ok(Evaluation {
            gap: gap_at_20(&predictions)?,
            predictions,
        })
    }

    /// Trains until the configured step budget, evaluating on `eval` (or the
    /// training set) periodically and at the end. Returns the last GAP.
    pub fn run(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        mut on_row: impl FnMut(&LogRow) -> Result<()>,
    ) -> Result<Option<f64>> {
        let total = self.config.total_steps(train.len());
        let every = self.config.eval_every.unwrap_or(self.config.steps_per_epoch(train.len()).max(1));
        let mut last = None;
        while self.step < total {
            let log = self.train_step(train)?;
            let gap = if log.step % every == 0 || log.step == total {
                let g = self.evaluate(eval.unwrap_or(train))?.gap;
                last = Some(g);
                Some(g)
            } else {
                None
            };
            on_row(&LogRow::from_step(&log, gap))?;
        }
        Ok(last)
    }

    pub fn to_checkpoint(&self, config_text: &str) -> Checkpoint<T> {
        let mut tensors = std::collections::BTreeMap::new();
        for (name, t) in named_tensors(&self.model.params) {
            tensors.insert(format!("param.{name}"), t);
        }
        for (name, t) in named_tensors(&self.model.stats) {
            tensors.insert(format!("bn.{name}"), t);
        }
        for (i, name) in self.model.params.leaf_names().into_iter().enumerate() {
            tensors.insert(format!("adam_m.{name}"), self.adam.m[i].clone());
            tensors.insert(format!("adam_v.{name}"), self.adam.v[i].clone());
        }
        Checkpoint {
            step: self.step,
            config: config_text.to_string(),
            tensors,
        }
    }

    /// Restores a trainer whose model matches `model`'s layout.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>, mut model: Model<T>, config: TrainConfig) -> Result<Self> {
        let lookup = |name: &str| ckpt.tensors.get(name).cloned();
        fill_from(&mut model.params, "param", lookup)?;
        fill_from(&mut model.stats, "bn", lookup)?;
        let mut trainer = Self::new(model, config)?;
        for (i, name) in trainer.model.params.leaf_names().into_iter().enumerate() {
            for (prefix, slot) in [("adam_m", &mut trainer.adam.m[i]), ("adam_v", &mut trainer.adam.v[i])] {
                let t = ckpt.get(&format!("{prefix}.{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("tensor `{prefix}.{name}` has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        trainer.step = ckpt.step;
        trainer.adam.step = ckpt.step;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::losses::LossConfig;
    use crate::model::Aggregation;
    use crate::train::{read_checkpoint, write_checkpoint};

    fn data() -> Dataset {
        gen_synthetic(&SyntheticSpec {
            visual_dim: 6,
            audio_dim: 3,
            ..SyntheticSpec::small(24, 4, 5)
        })
        .unwrap()
    }

    fn model_cfg(experts: usize) -> ModelConfig {
        ModelConfig {
            video_dim: 6,
            audio_dim: 3,
            aggregation: Aggregation::NeXtVlad { expansion: 2, groups: 3 },
            clusters: 3,
            hidden: 8,
            se_ratio: 4,
            num_classes: 4,
            dropout_rate: 0.3,
            reverse_whitening: false,
            experts,
        }
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            batch_size: 5,
            seed: 9,
            max_frames: 4,
            ..TrainConfig::default()
        }
    }

    fn trainer(experts: usize, cfg: TrainConfig) -> Trainer<f32> {
        Trainer::new(Model::init(model_cfg(experts), None, cfg.seed).unwrap(), cfg).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let d = data();
        let mut t = trainer(1, TrainConfig { base_lr: 0.0, ..train_cfg() });
        let before = t.model.params.clone();
        for _ in 0..3 {
            t.train_step(&d).unwrap();
        }
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn epochs_cover_the_dataset_once() {
        let t = trainer(1, train_cfg());
        let mut seen: Vec<usize> = (0..5).flat_map(|s| t.batch_indices(s, 24)).collect();
        seen.sort();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0, 24), t.batch_indices(5, 24));
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let d = data();
        let run = || {
            let mut t = trainer(3, train_cfg());
            (0..6).map(|_| t.train_step(&d).unwrap().loss.total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data();
        let cfg = train_cfg();
        let mut straight = trainer(3, cfg);
        let mut losses = Vec::new();
        for _ in 0..8 {
            losses.push(straight.train_step(&d).unwrap().loss.total);
        }
        let mut first = trainer(3, cfg);
        for _ in 0..3 {
            first.train_step(&d).unwrap();
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &first.to_checkpoint("x = 1")).unwrap();
        let ckpt = read_checkpoint(&buf[..]).unwrap();
        let fresh = Model::init(model_cfg(3), None, 12345).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt, fresh, cfg).unwrap();
        assert_eq!(resumed.step, 3);
        for want in &losses[3..] {
            assert_eq!(resumed.train_step(&d).unwrap().loss.total.to_bits(), want.to_bits());
        }
        assert_eq!(resumed.model.params, straight.model.params);
    }

    #[test]
    fn checkpoint_missing_tensor_is_rejected() {
        let t = trainer(1, train_cfg());
        let mut c = t.to_checkpoint("");
        c.tensors.remove("adam_v.classifier.w");
        let m = Model::init(model_cfg(1), None, 0).unwrap();
        let err = Trainer::from_checkpoint(&c, m, train_cfg()).unwrap_err().to_string();
        assert!(err.contains("adam_v.classifier.w"), "{err}");
    }

    #[test]
    fn l2_only_touches_classifier_gradients() {
        // after one step the first moments are proportional to the gradients
        let d = data();
        let mut a = trainer(1, TrainConfig { l2_classifier: 0.0, ..train_cfg() });
        let mut b = trainer(1, TrainConfig { l2_classifier: 1e-2, ..train_cfg() });
        a.train_step(&d).unwrap();
        b.train_step(&d).unwrap();
        let names = a.model.params.leaf_names();
        for (i, n) in names.iter().enumerate() {
            let same = a.adam.m[i] == b.adam.m[i];
            assert_eq!(same, n != "classifier.w", "{n}");
        }
    }

    #[test]
    fn kd_disabled_logs_zero_kl() {
        let d = data();
        let mut t = trainer(3, TrainConfig { kd: LossConfig::new(0.0), ..train_cfg() });
        for _ in 0..3 {
            let s = t.train_step(&d).unwrap();
            assert_eq!(s.loss.kl_weighted, 0.0);
        }
        let mut t = trainer(3, train_cfg());
        assert!(t.train_step(&d).unwrap().loss.kl_weighted > 0.0);
    }

    #[test]
    fn run_logs_every_step_and_evaluates() {
        let d = data();
        let mut t = trainer(1, TrainConfig { steps: Some(7), eval_every: Some(3), ..train_cfg() });
        let mut rows = Vec::new();
        let gap = t
            .run(&d, None, |r| {
                rows.push(r.clone());
                Ok(())
            })
            .unwrap();
        assert_eq!(rows.len(), 7);
        let evaluated: Vec<u64> = rows.iter().filter(|r| r.gap.is_some()).map(|r| r.step).collect();
        assert_eq!(evaluated, vec![3, 6, 7]);
        assert_eq!(gap, rows[6].gap);
        assert_eq!(t.evaluate(&d).unwrap().gap, gap.unwrap());
        assert!(rows[0].to_csv().starts_with("1,0.01,"));
        assert!(rows[0].to_csv().ends_with(','));
    }

    #[test]
    fn training_reduces_loss() {
        let d = data();
        let mut t = trainer(1, train_cfg());
        let first: f64 = (0..5).map(|_| t.train_step(&d).unwrap().loss.total).sum();
        for _ in 0..40 {
            t.train_step(&d).unwrap();
        }
        let last: f64 = (0..5).map(|_| t.train_step(&d).unwrap().loss.total).sum();
        assert!(last < first, "{first} → {last}");
    }

    #[test]
    fn non_finite_input_aborts_with_step() {
        let mut d = data();
        for r in &mut d.records {
            r.visual[0] = f32::INFINITY;
        }
        let mut t = trainer(1, train_cfg());
        let before = t.model.params.clone();
        assert!(t.train_step(&d).is_err());
        assert_eq!(t.model.params, before);
        assert_eq!(t.step, 0);
    }
}

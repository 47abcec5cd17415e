use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::data::{build_dataset, Dataset, DatasetSpec};
use super::metrics::{miou, EvalReport};
use super::optim::{adamw_step, cosine_lr, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{init_params, meepo_forward_tape, predict, ModelConfig, SceneHierarchy};
use crate::model::config_lines;
use crate::numerics::{ParamStore, Tape};
use crate::pointcloud::UNLABELED;

/// Model, optimizer and dataset settings read from one config file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    /// `train.*` and `data.*` keys go to their sections, the rest to the model.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut run = RunConfig::default();
        run.apply_config_str(text)?;
        run.validate()?;
        Ok(run)
    }

    /// Overrides the settings named in `text`, leaving the rest unchanged.
    pub fn apply_config_str(&mut self, text: &str) -> Result<()> {
        for (k, v) in config_lines(text)? {
            if let Some(k) = k.strip_prefix("train.") {
                self.train.set(k, v)?;
            } else if let Some(k) = k.strip_prefix("data.") {
                self.data.set(k, v)?;
            } else {
                self.model.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every setting; read back by [`RunConfig::from_config_str`].
    pub fn to_config_string(&self) -> String {
        format!(
            "{}{}{}",
            self.model.to_config_string(),
            self.train.to_config_string(),
            self.data.to_config_string()
        )
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    /// Mean batch loss before each step.
    pub losses: Vec<f64>,
    /// Periodic validation reports (training scenes when there is no
    /// validation split), ending with the final one.
    pub reports: Vec<EvalReport>,
    pub train_report: EvalReport,
    pub val_report: Option<EvalReport>,
}

/// Forward every scene in evaluation mode and score the argmax labels.
pub fn evaluate(
    scenes: &[SceneHierarchy],
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    step: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    let mut loss = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for scene in scenes {
        let labels = scene
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("evaluation scene has no labels".into()))?;
        let mut tape = Tape::new();
        let logits = meepo_forward_tape(&mut tape, scene, cfg, store, false, &mut rng)?;
        let l = tape.cross_entropy(logits, labels, UNLABELED)?;
        loss += tape.value(l).item() as f64 / scenes.len() as f64;
        pred.extend(predict(tape.value(logits)));
        truth.extend_from_slice(labels);
    }
    let mut report = miou(&pred, &truth, cfg.num_classes, UNLABELED);
    report.loss = Some(loss);
    report.step = step;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Accumulates the batch gradient and applies one optimizer step. Parameter
/// values are untouched when it fails.
fn train_step(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    order: &[usize],
    step: usize,
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let weight = 1.0 / train.batch_size as f32;
    let mut batch_loss = 0.0;
    for b in 0..train.batch_size {
        let scene = &data.train[order[(step * train.batch_size + b) % order.len()]];
        let labels = scene
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("training scene has no labels".into()))?;
        let mut tape = Tape::new();
        let logits = meepo_forward_tape(&mut tape, scene, model, store, true, rng)?;
        let loss = tape.cross_entropy(logits, labels, UNLABELED)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            store.zero_grad();
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        batch_loss += value / train.batch_size as f64;
        let grads = tape.backward(loss)?;
        tape.accumulate(&grads, store, weight)?;
    }
    adamw_step(store, train, cosine_lr(step, train))?;
    Ok(batch_loss)
}

/// Deterministic AdamW training of `init_params(model, train.seed)`.
/// Scenes are visited round-robin after a seeded shuffle. A non-finite
/// loss or activation stops the run with a numeric error; when `checkpoint` is given the
/// parameters from before the failing step are written there first, and a
/// successful run writes its final parameters there.
pub fn train_loop(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    let echo = format!("{}{}", model.to_config_string(), train.to_config_string());
    train_with_echo(model, train, data, checkpoint, &echo)
}

/// [`train_loop`] on the dataset `run.data` describes; checkpoints echo the
/// whole run configuration, dataset included.
pub fn train_run(run: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let data = build_dataset(&run.data, &run.model)?;
    train_with_echo(&run.model, &run.train, &data, checkpoint, &run.to_config_string())
}

fn train_with_echo(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    checkpoint: Option<&Path>,
    echo: &str,
) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut store = init_params::<f32>(model, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let eval_set = if data.val.is_empty() { &data.train } else { &data.val };
    let mut losses = Vec::with_capacity(train.steps);
    let mut reports = Vec::new();
    for step in 0..train.steps {
        let outcome = train_step(model, train, data, &order, step, &mut store, &mut rng);
        match outcome {
            Ok(loss) => losses.push(loss),
            Err(Error::Numeric(msg)) => {
                if let Some(path) = checkpoint {
                    save_checkpoint(path, echo, &store)?;
                }
                return Err(Error::Numeric(format!("step {step}: {msg}; last good parameters kept")));
            }
            Err(e) => return Err(e),
        }
        if train.eval_every > 0 && (step + 1) % train.eval_every == 0 && step + 1 < train.steps {
            reports.push(evaluate(eval_set, model, &store, step + 1)?);
        }
    }
    let train_report = evaluate(&data.train, model, &store, train.steps)?;
    let val_report = if data.val.is_empty() {
        None
    } else {
        Some(evaluate(&data.val, model, &store, train.steps)?)
    };
    reports.push(val_report.clone().unwrap_or_else(|| train_report.clone()));
    if let Some(path) = checkpoint {
        save_checkpoint(path, echo, &store)?;
    }
    Ok(TrainOutcome {
        params: store,
        losses,
        reports,
        train_report,
        val_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{build_dataset, load_checkpoint};

    fn small() -> (ModelConfig, TrainConfig, Dataset) {
        let mut model = ModelConfig::desk();
        model.embedding_channels = 4;
        model.encoder_channels = vec![8, 8, 8, 8];
        model.decoder_channels = vec![8, 8, 8, 8];
        model.encoder_depths = vec![1, 1, 1, 1];
        model.ssm.state_dim = 4;
        let train = TrainConfig {
            steps: 4,
            batch_size: 1,
            ..TrainConfig::desk()
        };
        let spec = DatasetSpec {
            train_scenes: 2,
            val_scenes: 1,
            voxels: 120,
            ..DatasetSpec::default()
        };
        let data = build_dataset(&spec, &model).unwrap();
        (model, train, data)
    }

    #[test]
    fn same_seed_same_trace() {
        let (model, train, data) = small();
        let a = train_loop(&model, &train, &data, None).unwrap();
        let b = train_loop(&model, &train, &data, None).unwrap();
        assert_eq!(a.losses, b.losses);
        let summary = |o: &TrainOutcome| o.reports.iter().map(|r| (r.miou, r.loss, r.confusion.clone())).collect::<Vec<_>>();
        assert_eq!(summary(&a), summary(&b));
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (mut model, mut train, data) = small();
        model.drop_path_rate = 0.0;
        train.learning_rate = 0.0;
        train.batch_size = 2;
        let out = train_loop(&model, &train, &data, None).unwrap();
        assert!(out.losses.windows(2).all(|w| w[0] == w[1]), "{:?}", out.losses);
    }

    #[test]
    fn writes_a_loadable_checkpoint() {
        let (model, train, data) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.mpk");
        let out = train_loop(&model, &train, &data, Some(&path)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params.numel(), out.params.numel());
        let echoed = RunConfig::from_config_str(&ck.config).unwrap();
        assert_eq!(echoed.model, model);
        assert_eq!(echoed.train, train);
        let reloaded = evaluate(&data.val, &model, &ck.params, 0).unwrap();
        assert_eq!(reloaded.miou, out.val_report.unwrap().miou);
    }

    #[test]
    fn nan_loss_aborts_with_last_good_parameters() {
        let (model, train, mut data) = small();
        data.train[0].input.data_mut()[0] = f64::NAN;
        data.train[1].input.data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.mpk");
        let err = train_loop(&model, &train, &data, Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        let ck = load_checkpoint(&path).unwrap();
        let fresh = init_params::<f32>(&model, train.seed).unwrap();
        for (name, p) in fresh.iter() {
            assert_eq!(ck.params.value(name).unwrap().data(), p.value.data(), "{name}");
        }
    }

    #[test]
    fn run_checkpoint_echoes_the_dataset() {
        let (model, train, _) = small();
        let mut run = RunConfig {
            model,
            train,
            ..RunConfig::default()
        };
        run.data.train_scenes = 1;
        run.data.val_scenes = 1;
        run.data.voxels = 90;
        run.data.seed = 17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.mpk");
        train_run(&run, Some(&path)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(RunConfig::from_config_str(&ck.config).unwrap(), run);
    }

    #[test]
    fn run_config_roundtrip() {
        let mut run = RunConfig::default();
        run.train.steps = 12;
        run.data.voxels = 300;
        run.model.drop_path_rate = 0.1;
        assert_eq!(RunConfig::from_config_str(&run.to_config_string()).unwrap(), run);
        assert!(RunConfig::from_config_str("data.nope = 1").is_err());
    }
}

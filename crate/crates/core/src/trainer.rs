//! Adam optimisation with validation-loss early stopping.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{PrefixedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Batch, Checkpoint, CheckpointMeta, OptimizerMeta, ParameterSet, Seq2Seq};
use crate::tensor::{Real, SeededRng, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParameterSet<T>) -> Self {
        let zeros = |_| params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam { config, m: zeros(()), v: zeros(()), t: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn meta(&self) -> OptimizerMeta {
        let c = self.config;
        OptimizerMeta { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, step: self.t }
    }

    /// One bias-corrected update from the gradients stored on `params`.
    /// A parameter without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParameterSet<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.len() != t.numel() {
                    return Err(Error::Shape(format!("gradient of `{name}` has the wrong length")));
                }
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("`{name}` at element {i} ({})", g[i])));
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = T::lit(1.0 - beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - beta2.powi(self.t as i32));
        let (b1, b2, lr, eps) = (T::lit(beta1), T::lit(beta2), T::lit(lr), T::lit(eps));
        let one = T::one();
        for (((_, t), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad: Vec<T> = t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]);
            for (((w, g), m), v) in t.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParameterSet<T>, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::Parameter(format!("clip norm {max_norm} must be positive")));
    }
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled = g.iter().map(|&x| x * s).collect();
                t.set_grad(scaled)?;
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            clip_norm: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, patience and max_epochs must all be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Token-weighted mean training loss.
    pub loss: f64,
    pub tokens: usize,
    pub batches: usize,
    pub seconds: f64,
    pub tokens_per_sec: f64,
}

fn to_batch(items: &[&PrefixedExample]) -> Batch {
    Batch {
        sources: items.iter().map(|e| e.source.clone()).collect(),
        targets: items.iter().map(|e| e.target.clone()).collect(),
    }
}

fn predicted_tokens(e: &PrefixedExample) -> usize {
    e.target.len().saturating_sub(1)
}

/// One shuffled pass over `data` in mini-batches.
pub fn train_epoch<T: Real>(
    model: &mut Seq2Seq<T>,
    adam: &mut Adam<T>,
    data: &[PrefixedExample],
    config: &TrainConfig,
    shuffle_rng: &mut SeededRng,
    dropout_rng: &mut SeededRng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    config.validate()?;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle_rng.shuffle(&mut order);
    let (mut weighted, mut tokens, mut batches) = (0.0, 0usize, 0usize);
    for chunk in order.chunks(config.batch_size) {
        let items: Vec<&PrefixedExample> = chunk.iter().map(|&i| &data[i]).collect();
        let batch = to_batch(&items);
        let mut tape = Tape::new();
        let vars = model.params().register(&mut tape);
        let loss = model.loss(&mut tape, &vars, &batch, Some(dropout_rng))?;
        let value = tape.data(loss)[0].to_f64().unwrap_or(f64::NAN);
        tape.backward(loss)?;
        model.params_mut().collect_grads(&tape, &vars)?;
        if let Some(c) = config.clip_norm {
            clip_grad_norm(model.params_mut(), c)?;
        }
        adam.step(model.params_mut())?;
        model.params_mut().zero_grads();
        let n: usize = items.iter().map(|e| predicted_tokens(e)).sum();
        weighted += value * n as f64;
        tokens += n;
        batches += 1;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(EpochStats {
        loss: weighted / tokens.max(1) as f64,
        tokens,
        batches,
        seconds,
        tokens_per_sec: tokens as f64 / seconds.max(1e-9),
    })
}

/// Token-weighted mean NLL over a dataset without dropout.
pub fn evaluate_loss<T: Real>(model: &Seq2Seq<T>, data: &[PrefixedExample], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let (mut weighted, mut tokens) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<&PrefixedExample> = chunk.iter().collect();
        let l = model.eval_loss(&to_batch(&items))?.to_f64().unwrap_or(f64::NAN);
        let n: usize = items.iter().map(|e| predicted_tokens(e)).sum();
        weighted += l * n as f64;
        tokens += n;
    }
    Ok(weighted / tokens.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Patience counter over validation losses. Ties do not count as progress.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, stalled: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Progress {
        match self.best {
            Some((_, b)) if val_loss >= b || val_loss.is_nan() => {
                self.stalled += 1;
                if self.stalled >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Stalled
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.stalled = 0;
                Progress::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOutput<'a> {
    pub dir: &'a Path,
    pub vocab: &'a Vocabulary,
    pub prefix: bool,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Trains until validation loss stops improving for `patience` epochs or
/// `max_epochs` is reached. The best model is saved as a checkpoint and
/// left in `model` on return.
pub fn fit(
    model: &mut Seq2Seq<f32>,
    train: &[PrefixedExample],
    val: &[PrefixedExample],
    config: &TrainConfig,
    out: FitOutput<'_>,
) -> Result<FitReport> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::Contract("early stopping needs a non-empty validation set".into()));
    }
    std::fs::create_dir_all(out.dir).map_err(|e| Error::io(out.dir, e))?;
    let ckpt_path = out.dir.join(BEST_CHECKPOINT);
    let log_path = out.dir.join(TRAIN_LOG);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let root = SeededRng::new(config.seed);
    let (mut shuffle_rng, mut dropout_rng) = (root.fork(1), root.fork(2));
    let mut adam = Adam::new(config.adam, model.params());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = Vec::new();
    let mut best_params = model.params().clone();
    for epoch in 1..=config.max_epochs {
        let stats = train_epoch(model, &mut adam, train, config, &mut shuffle_rng, &mut dropout_rng)?;
        let val_loss = evaluate_loss(model, val, config.batch_size)?;
        let record = EpochRecord { epoch, train_loss: stats.loss, val_loss, seconds: stats.seconds };
        writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        info!("epoch {epoch}: train {:.4} val {:.4} ({:.1}s)", stats.loss, val_loss, stats.seconds);
        history.push(record);
        match stopper.observe(epoch, val_loss) {
            Progress::Improved => {
                best_params = model.params().clone();
                let meta = CheckpointMeta {
                    epoch: Some(epoch),
                    val_loss: Some(val_loss),
                    seed: Some(config.seed),
                    optimizer: Some(adam.meta()),
                    prefix: out.prefix,
                };
                Checkpoint::from_model(model, out.vocab, meta).save(&ckpt_path)?;
            }
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    *model = Seq2Seq::from_parts(model.config().clone(), best_params)?;
    Ok(FitReport { best_epoch, best_val_loss, epochs_run: history.len(), checkpoint: ckpt_path, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::NormMode;
    use crate::corpus::{build_vocab, dualize, DualOptions, ExamplePair};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn scalar_param(w: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_f64(&[1], &[w]).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut p = scalar_param(1.0);
            let mut adam = Adam::new(AdamConfig::default(), &p);
            p.tensor_mut(0).set_grad(vec![g]).unwrap();
            adam.step(&mut p).unwrap();
            let delta = p.tensor(0).data()[0] - 1.0;
            assert!((delta + 1e-3 * g.signum()).abs() < 1e-8, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_param(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            p.tensor_mut(0).set_grad(vec![0.0]).unwrap();
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.tensor(0).data()[0], 0.7);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn three_steps_on_square_match_hand_trace() {
        // f(w) = w², f'(w) = 2w, w0 = 1
        let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            trace.push(w);
        }
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for expect in trace {
            let w = p.tensor(0).data()[0];
            p.tensor_mut(0).set_grad(vec![2.0 * w]).unwrap();
            adam.step(&mut p).unwrap();
            assert!((p.tensor(0).data()[0] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        p.tensor_mut(0).set_grad(vec![f64::NAN]).unwrap();
        match adam.step(&mut p) {
            Err(Error::NonFiniteGradient(m)) => assert!(m.contains("`w`")),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.tensor(0).data()[0], 1.0);
    }

    #[test]
    fn clipping_rescales_global_norm() {
        let mut p = ParameterSet::<f64>::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.tensor_mut(0).set_grad(vec![3.0]).unwrap();
        p.tensor_mut(1).set_grad(vec![4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut p, 1.0).unwrap(), 5.0);
        assert!((p.tensor(0).grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((p.tensor(1).grad().unwrap()[0] - 0.8).abs() < 1e-12);
        assert!(clip_grad_norm(&mut p, 0.0).is_err());
    }

    #[test]
    fn worsening_validation_stops_after_patience_plus_one() {
        for patience in [1, 3, 10] {
            let mut s = EarlyStopping::new(patience);
            let mut epochs = 0;
            for epoch in 1..=100 {
                epochs = epoch;
                if s.observe(epoch, epoch as f64) == Progress::Stop {
                    break;
                }
            }
            assert_eq!(epochs, patience + 1);
            assert_eq!(s.best(), Some((1, 1.0)));
        }
    }

    fn toy() -> (Vec<PrefixedExample>, Vocabulary) {
        let pairs: Vec<ExamplePair> = [
            ("clear eax", "xor eax, eax"),
            ("push ebx onto the stack", "push ebx"),
            ("make the system call", "int 0x80"),
            ("move ebx into eax", "mov eax, ebx"),
        ]
        .iter()
        .enumerate()
        .map(|(row, (i, s))| ExamplePair { row, intent: i.to_string(), snippet: s.to_string() })
        .collect();
        let vocab = build_vocab(&pairs).unwrap();
        (dualize(&pairs, &vocab, DualOptions::default()), vocab)
    }

    fn small(vocab: usize) -> ModelConfig {
        let mut c = ModelConfig::new(vocab, NormMode::AdjustQkNorm);
        c.d_model = 16;
        c.n_heads = 2;
        c.hidden_size = 32;
        c.dropout = 0.1;
        c
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let (data, vocab) = toy();
        let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        let run = || {
            let mut m = Seq2Seq::<f32>::new(small(vocab.len()), &mut SeededRng::new(1)).unwrap();
            let mut adam = Adam::new(AdamConfig { lr: 5e-3, ..AdamConfig::default() }, m.params());
            let (mut s, mut d) = (SeededRng::new(2), SeededRng::new(3));
            (0..50)
                .map(|_| train_epoch(&mut m, &mut adam, &data, &cfg, &mut s, &mut d).unwrap().loss)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert!(a[49] < a[0], "{} !< {}", a[49], a[0]);
        assert_eq!(a, run());
    }

    #[test]
    fn fit_keeps_best_and_reloads_it() {
        let (data, vocab) = toy();
        let dir = tempfile::tempdir().unwrap();
        let mut m = Seq2Seq::<f32>::new(small(vocab.len()), &mut SeededRng::new(1)).unwrap();
        let cfg = TrainConfig { batch_size: 4, max_epochs: 6, patience: 2, ..TrainConfig::default() };
        let out = FitOutput { dir: dir.path(), vocab: &vocab, prefix: true };
        let report = fit(&mut m, &data, &data, &cfg, out).unwrap();
        assert!(report.epochs_run <= 6);
        let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), report.epochs_run);
        let (loaded, _, meta) = Checkpoint::load(&report.checkpoint).unwrap().into_model().unwrap();
        assert_eq!(loaded.params(), m.params());
        assert_eq!(meta.epoch, Some(report.best_epoch));
        let again = evaluate_loss(&loaded, &data, cfg.batch_size).unwrap();
        assert!((again - meta.val_loss.unwrap()).abs() < 1e-5);
    }
}

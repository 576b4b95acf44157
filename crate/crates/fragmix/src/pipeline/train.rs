//! The training loop: Adam over named parameters, periodic validation with
//! patience-based early stopping, best-checkpoint retention, and the FMX1
//! checkpoint file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::split::{epoch_order, PairIndex};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Steps between validation evaluations.
    pub val_interval: usize,
    /// Validation evaluations without improvement before stopping.
    pub val_patience: usize,
    /// Training steps without train-score improvement before stopping.
    pub train_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            learning_rate: 5e-4,
            max_epochs: 5,
            val_interval: 50,
            val_patience: 10,
            train_patience: 1000,
            seed: 1234,
        }
    }
}

/// What the loop needs from a trainable objective. Scores are
/// higher-is-better; the loss is minimized.
pub trait TrainTask {
    /// Scalar loss of one minibatch on a training tape.
    fn train_loss(&mut self, tape: &Tape, batch: &[PairIndex]) -> Result<Tensor>;
    /// Full validation score (deterministic, evaluation mode).
    fn validation_score(&mut self) -> Result<f64>;
    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor));
    /// Hook after each epoch; return `true` to stop training.
    fn on_epoch_end(&mut self, _epoch: usize) -> Result<bool> {
        Ok(false)
    }
}

fn snapshot(task: &mut dyn TrainTask) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    task.visit_params(&mut |name, p| out.push((name, p.clone())));
    out
}

fn restore(task: &mut dyn TrainTask, params: &[(String, Tensor)]) {
    let map: BTreeMap<&str, &Tensor> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    task.visit_params(&mut |name, p| {
        if let Some(saved) = map.get(name.as_str()) {
            *p = Tensor::param(saved.to_vec(), saved.shape()).expect("snapshot shape");
        }
    });
}

/// Adam with bias correction; moment state keyed by parameter name so
/// parameters can be replaced between steps.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    /// Apply one update from the gradients currently on the parameters;
    /// clears gradients. Returns the global gradient norm.
    pub fn step(&mut self, task: &mut dyn TrainTask) -> f64 {
        self.t += 1;
        let t = self.t;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let mut grad_sq = 0.0;
        task.visit_params(&mut |name, p| {
            let Some(g) = p.grad() else { return };
            grad_sq += g.iter().map(|x| x * x).sum::<f64>();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data = p.to_vec();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.clear_grad();
            *p = Tensor::param(data, p.shape()).expect("parameter shape unchanged");
        });
        grad_sq.sqrt()
    }
}

/// One point on the score curves: `(step, train_score, val_score)`.
pub type CurvePoint = (u64, f64, f64);

pub struct TrainResult {
    pub curves: Vec<CurvePoint>,
    pub best_val: f64,
    pub best_step: u64,
    pub steps_run: u64,
    /// Why training ended, for logs.
    pub stop_reason: String,
}

/// Run the loop. On return the task's parameters are restored to the
/// best-validation checkpoint. Fully reproducible given `cfg.seed`.
pub fn train(
    task: &mut dyn TrainTask,
    pairs: &[PairIndex],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if pairs.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    if cfg.batch_size == 0 || cfg.val_interval == 0 {
        return Err(Error::Config("batch size and validation interval must be >= 1".into()));
    }
    let mut optim = Adam::new(cfg.learning_rate);
    let mut curves = Vec::new();
    let mut step: u64 = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut best_params: Option<Vec<(String, Tensor)>> = None;
    let mut val_strikes = 0usize;
    let mut best_train = f64::NEG_INFINITY;
    let mut last_train_improvement: u64 = 0;
    let mut last_train_score = f64::NEG_INFINITY;
    let mut stop_reason = String::from("max epochs reached");

    'outer: for epoch in 0..cfg.max_epochs {
        let order = epoch_order(pairs.len(), cfg.seed, epoch as u64);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PairIndex> = chunk.iter().map(|&i| pairs[i]).collect();
            let tape = Tape::training(cfg.seed, step);
            let loss = task.train_loss(&tape, &batch)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at step {step} (lr {}, epoch {epoch})",
                    cfg.learning_rate
                )));
            }
            tape.backward(&loss)?;
            let grad_norm = optim.step(task);
            if !grad_norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at step {step} (lr {}, grad norm {grad_norm})",
                    cfg.learning_rate
                )));
            }
            step += 1;
            last_train_score = -loss_val;
            if last_train_score > best_train {
                best_train = last_train_score;
                last_train_improvement = step;
            } else if step - last_train_improvement >= cfg.train_patience as u64 {
                stop_reason = format!("no train improvement for {} steps", cfg.train_patience);
                break 'outer;
            }

            if step % cfg.val_interval as u64 == 0 {
                let val = task.validation_score()?;
                curves.push((step, last_train_score, val));
                if val > best_val {
                    best_val = val;
                    best_step = step;
                    best_params = Some(snapshot(task));
                    val_strikes = 0;
                } else {
                    val_strikes += 1;
                    if val_strikes >= cfg.val_patience {
                        stop_reason =
                            format!("validation patience {} exhausted", cfg.val_patience);
                        break 'outer;
                    }
                }
            }
        }
        if task.on_epoch_end(epoch)? {
            stop_reason = format!("task converged after epoch {epoch}");
            break;
        }
    }

    // Final validation point if none was taken at the last step.
    if curves.last().map(|c| c.0) != Some(step) {
        let val = task.validation_score()?;
        curves.push((step, last_train_score, val));
        if val > best_val {
            best_val = val;
            best_step = step;
            best_params = Some(snapshot(task));
        }
    }
    if let Some(best) = &best_params {
        restore(task, best);
    }
    Ok(TrainResult { curves, best_val, best_step, steps_run: step, stop_reason })
}

pub fn curves_csv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("step,train_score,val_score\n");
    for (s, tr, va) in curves {
        out.push_str(&format!("{s},{tr:.12e},{va:.12e}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// FMX1 checkpoint format: magic, length-prefixed config echo, named blobs.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"FMX1";

pub fn save_checkpoint(path: &Path, config_text: &str, params: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub struct Checkpoint {
    pub config_text: String,
    pub params: BTreeMap<String, (Vec<f64>, Vec<usize>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let need = |off: usize, len: usize| -> Result<&[u8]> {
        buf.get(off..off + len).ok_or(Error::Parse {
            offset: off as u64,
            msg: "checkpoint truncated".into(),
        })
    };
    if need(0, 4)? != CKPT_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let cfg_len = u64::from_le_bytes(need(4, 8)?.try_into().unwrap()) as usize;
    let config_text = String::from_utf8(need(12, cfg_len)?.to_vec())
        .map_err(|e| Error::Parse { offset: 12, msg: format!("config not UTF-8: {e}") })?;
    let mut off = 12 + cfg_len;
    let n_params = u32::from_le_bytes(need(off, 4)?.try_into().unwrap()) as usize;
    off += 4;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name_len = u32::from_le_bytes(need(off, 4)?.try_into().unwrap()) as usize;
        off += 4;
        let name = String::from_utf8(need(off, name_len)?.to_vec())
            .map_err(|e| Error::Parse { offset: off as u64, msg: format!("name not UTF-8: {e}") })?;
        off += name_len;
        let ndim = u32::from_le_bytes(need(off, 4)?.try_into().unwrap()) as usize;
        off += 4;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(need(off, 8)?.try_into().unwrap()) as usize);
            off += 8;
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = need(off, numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += numel * 8;
        params.insert(name, (data, shape));
    }
    Ok(Checkpoint { config_text, params })
}

/// Load checkpoint parameters into a task by name; every parameter must be
/// present with a matching shape.
pub fn restore_from_checkpoint(task: &mut dyn TrainTask, ckpt: &Checkpoint) -> Result<()> {
    let mut missing = Vec::new();
    task.visit_params(&mut |name, p| match ckpt.params.get(&name) {
        Some((data, shape)) if shape == p.shape() => {
            *p = Tensor::param(data.clone(), shape).expect("checkpoint shape");
        }
        Some(_) => missing.push(format!("{name} (shape mismatch)")),
        None => missing.push(name),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!("checkpoint missing parameters: {}", missing.join(", "))))
    }
}

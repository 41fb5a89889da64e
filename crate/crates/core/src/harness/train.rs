use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{generate_dataset, Dataset, Sample};
use crate::model::{lr_at, ForwardConfig, ModelState};
use crate::numerics::{argmax, RngState};
use crate::sinkhorn::marginal_residual;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub alignment_accuracy: f64,
    pub token_accuracy: f64,
    pub mean_ot_loss: f64,
    pub mean_ce_loss: f64,
}

/// Per-sample evaluation detail, reduced in index order by [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
struct SampleScore {
    aligned: usize,
    tokens_correct: usize,
    ot: f64,
    ce: f64,
    residual: f64,
    converged: bool,
}

fn score_sample(state: &ModelState, sample: &Sample, cfg: &ForwardConfig) -> Result<SampleScore> {
    let cache = state.forward(&sample.x_a, &sample.x_v, &sample.caption, cfg)?;
    let plan = cache.plan.matrix();
    let aligned = (0..plan.rows())
        .filter(|&i| plan.row_argmax(i) == sample.correspondence[i])
        .count();
    let logits = cache.logits();
    let tokens_correct = sample
        .caption
        .iter()
        .enumerate()
        .filter(|(t, &y)| argmax(logits.row(*t)) == y)
        .count();
    Ok(SampleScore {
        aligned,
        tokens_correct,
        ot: cache.loss.ot,
        ce: cache.loss.ce,
        residual: marginal_residual(&cache.plan),
        converged: cache.solve.as_ref().is_none_or(|r| r.converged),
    })
}

/// Alignment accuracy from plan row-argmaxes, teacher-forced argmax token accuracy, mean losses.
pub fn evaluate(state: &ModelState, samples: &[Sample], cfg: &ForwardConfig) -> Result<Metrics> {
    Ok(evaluate_detailed(state, samples, cfg)?.0)
}

/// Solver health over one evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveDiagnostics {
    /// Worst marginal residual among plans whose solve converged.
    pub worst_converged_residual: f64,
    /// Worst marginal residual among all plans.
    pub worst_residual: f64,
    pub unconverged: usize,
}

/// [`evaluate`] plus solver diagnostics. Unconverged plans are still scored, as in training.
pub fn evaluate_detailed(
    state: &ModelState,
    samples: &[Sample],
    cfg: &ForwardConfig,
) -> Result<(Metrics, SolveDiagnostics)> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation needs at least one sample"));
    }
    let (mut aligned, mut tokens, mut n_tok, mut n_pos) = (0usize, 0usize, 0usize, 0usize);
    let (mut ot, mut ce) = (0.0, 0.0);
    let mut diag = SolveDiagnostics::default();
    for s in samples {
        let r = score_sample(state, s, cfg)?;
        aligned += r.aligned;
        tokens += r.tokens_correct;
        n_tok += s.correspondence.len();
        n_pos += s.caption.len();
        ot += r.ot;
        ce += r.ce;
        diag.worst_residual = diag.worst_residual.max(r.residual);
        if r.converged {
            diag.worst_converged_residual = diag.worst_converged_residual.max(r.residual);
        } else {
            diag.unconverged += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((
        Metrics {
            alignment_accuracy: aligned as f64 / n_tok as f64,
            token_accuracy: tokens as f64 / n_pos as f64,
            mean_ot_loss: ot / n,
            mean_ce_loss: ce / n,
        },
        diag,
    ))
}

/// One line of the per-batch metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub ot: f64,
    pub ce: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub metrics: Metrics,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";
pub const FINAL_METRICS: &str = "final_metrics.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final";
pub const LAST_GOOD_CHECKPOINT: &str = "checkpoint-last-good";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Metrics,
    pub initial_metrics: Metrics,
    pub state: ModelState,
    pub batches: u64,
    pub final_checkpoint: PathBuf,
}

/// What [`train`] writes to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Persistence {
    /// Metrics logs and checkpoints under `output_dir`.
    Full,
    /// Nothing; used by in-process ablation studies.
    None,
}

/// Runs the experiment end to end, writing logs and checkpoints under `config.output_dir`.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with(config, Persistence::Full)
}

pub fn train_with(config: &ExperimentConfig, persistence: Persistence) -> Result<TrainOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    let mut writer = match persistence {
        Persistence::Full => Some(RunWriter::create(out, config)?),
        Persistence::None => None,
    };

    let data = generate_dataset(&config.dataset)?;
    let fwd = config.forward_config();
    let mut state = ModelState::new(config.model_spec(), config.seed)?;
    let train_set = data.train_split();
    let heldout = data.heldout_split();
    let initial_metrics = evaluate(&state, heldout, &fwd)?;

    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let shuffle_root = RngState::new(config.seed).fork(0x7368_7566);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batches = 0u64;

    for epoch in 0..config.schedule.total_epochs {
        let mut rng = shuffle_root.fork(epoch as u64 + 1);
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        rng.shuffle(&mut order);

        for (step_in_epoch, batch) in order.chunks(config.batch_size).enumerate() {
            let lr = lr_at(&config.schedule, epoch, step_in_epoch, steps_per_epoch)?;
            let scale = 1.0 / batch.len() as f64;
            state.zero_grad();
            let (mut ot, mut ce, mut total) = (0.0, 0.0, 0.0);
            for &idx in batch {
                let s = &train_set[idx];
                let cache = match state.forward(&s.x_a, &s.x_v, &s.caption, &fwd) {
                    Ok(c) => c,
                    Err(e) if e.is_numeric() => return Err(abort(&mut writer, &state, epoch, e)),
                    Err(e) => return Err(e),
                };
                ot += scale * cache.loss.ot;
                ce += scale * cache.loss.ce;
                total += scale * cache.loss.total;
                state.accumulate_backward(&cache, scale)?;
            }
            if !state.gradients().iter().all(|(_, g)| g.is_finite()) {
                let e = Error::Numeric(format!("non-finite gradient in epoch {epoch} step {step_in_epoch}"));
                return Err(abort(&mut writer, &state, epoch, e));
            }
            state.adamw_step(lr, &config.adam);
            batches += 1;
            if let Some(w) = writer.as_mut() {
                w.batch(&BatchRecord {
                    epoch,
                    step: state.step_count,
                    lr,
                    ot,
                    ce,
                    total,
                })?;
            }
        }

        let done = epoch + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done < config.schedule.total_epochs {
            if let Some(w) = writer.as_mut() {
                let metrics = evaluate(&state, heldout, &fwd)?;
                w.eval(&EvalRecord {
                    epoch: done,
                    step: state.step_count,
                    metrics,
                })?;
                w.checkpoint(&format!("checkpoint-epoch-{done:04}"), &state)?;
            }
        }
    }

    let metrics = evaluate(&state, heldout, &fwd)?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    if let Some(w) = writer.as_mut() {
        w.eval(&EvalRecord {
            epoch: config.schedule.total_epochs,
            step: state.step_count,
            metrics,
        })?;
        w.checkpoint(FINAL_CHECKPOINT, &state)?;
        w.finish(&metrics)?;
    }
    Ok(TrainOutcome {
        metrics,
        initial_metrics,
        state,
        batches,
        final_checkpoint,
    })
}

// The state in hand has not been stepped with the failing batch, so it is the last good one.
fn abort(writer: &mut Option<RunWriter>, state: &ModelState, epoch: usize, e: Error) -> Error {
    if let Some(w) = writer.as_mut() {
        if let Err(io) = w.checkpoint(LAST_GOOD_CHECKPOINT, state) {
            return io;
        }
    }
    Error::Numeric(format!("training aborted in epoch {epoch}: {e}"))
}

/// Evaluates an existing state on the held-out split of a dataset.
pub fn evaluate_dataset(state: &ModelState, data: &Dataset, cfg: &ForwardConfig) -> Result<Metrics> {
    evaluate(state, data.heldout_split(), cfg)
}

struct RunWriter {
    dir: PathBuf,
    batches: BufWriter<File>,
    evals: BufWriter<File>,
    config_toml: String,
    config_hash: String,
}

impl RunWriter {
    fn create(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config_toml = config.to_toml_string();
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, &config_toml).map_err(|e| Error::io(&cfg_path, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            batches: open(METRICS_LOG)?,
            evals: open(EVAL_LOG)?,
            config_toml,
            config_hash: config.hash(),
        })
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, dir: &Path, record: &T) -> Result<()> {
        let text = serde_json::to_string(record).expect("record serializes");
        writeln!(w, "{text}").map_err(|e| Error::io(dir, e))
    }

    fn batch(&mut self, r: &BatchRecord) -> Result<()> {
        Self::line(&mut self.batches, &self.dir.join(METRICS_LOG), r)
    }

    fn eval(&mut self, r: &EvalRecord) -> Result<()> {
        Self::line(&mut self.evals, &self.dir.join(EVAL_LOG), r)
    }

    fn checkpoint(&mut self, name: &str, state: &ModelState) -> Result<()> {
        self.flush()?;
        save_checkpoint(&self.dir.join(name), state, &self.config_hash, Some(&self.config_toml))
    }

    fn flush(&mut self) -> Result<()> {
        self.batches.flush().map_err(|e| Error::io(self.dir.join(METRICS_LOG), e))?;
        self.evals.flush().map_err(|e| Error::io(self.dir.join(EVAL_LOG), e))
    }

    fn finish(&mut self, metrics: &Metrics) -> Result<()> {
        self.flush()?;
        let p = self.dir.join(FINAL_METRICS);
        let text = serde_json::to_string_pretty(metrics).expect("metrics serialize");
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    }
}

//! Truncated-BPTT training over chunk windows, with AdamW, global-norm
//! clipping, periodic evaluation, metrics logging and resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Precision};
use crate::config::TrainConfig;
use crate::data::{group_chunks, ChunkBatch, TokenSeq};
use crate::error::{Error, Result};
use crate::memory::MemoryStore;
use crate::model::{bind_params, ChunkInput, ChunkState, Model, ModelParams, Retrieval};
use crate::numerics::{adamw_step, clip_global_norm, counter, Graph, Moments, Tensor};

pub const METRICS_HEADER: &str = "step,lr,train_loss,eval_loss,tokens_per_sec,peak_activation_floats";

/// Position of the next training window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursor {
    pub epoch: u64,
    pub group: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    /// Peak floats allocated during the step beyond those alive before it.
    pub peak_activation_floats: usize,
    pub seconds: f64,
}

/// Gradients of one window, without an update (used by tests and tools).
pub struct WindowGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub moments: Moments,
    pub step: u64,
    pub cursor: Cursor,
    pub state: Option<ChunkState>,
    group_cache: Option<(Cursor, Vec<ChunkBatch>)>,
}

/// Sequence order for `epoch`: identity, or a shuffle seeded by (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
    }
    order
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.model.clone(), cfg.seed)?;
        Self::with_model(cfg, model)
    }

    pub fn with_model(cfg: TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        if model.cfg != cfg.model {
            return Err(Error::Config("model config differs from training config".into()));
        }
        let moments = Moments::zeros_like(&model.params.to_vec());
        Ok(Trainer {
            cfg,
            model,
            moments,
            step: 0,
            cursor: Cursor::default(),
            state: None,
            group_cache: None,
        })
    }

    fn rows_per_group(&self, corpus: &[TokenSeq]) -> usize {
        self.cfg.batch_size.min(corpus.len())
    }

    fn groups_per_epoch(&self, corpus: &[TokenSeq]) -> usize {
        corpus.len().div_ceil(self.rows_per_group(corpus))
    }

    fn current_group(&mut self, corpus: &[TokenSeq]) -> &[ChunkBatch] {
        let key = Cursor { chunk: 0, ..self.cursor };
        if self.group_cache.as_ref().map(|(k, _)| *k) != Some(key) {
            let order = epoch_order(corpus.len(), self.cfg.seed, key.epoch, self.cfg.shuffle);
            let b = self.rows_per_group(corpus);
            let rows: Vec<usize> = order.iter().skip(key.group * b).take(b).copied().collect();
            let chunks = group_chunks(corpus, &rows, self.cfg.model.chunk_size, key.group);
            self.group_cache = Some((key, chunks));
        }
        &self.group_cache.as_ref().unwrap().1
    }

    fn check_corpus(corpus: &[TokenSeq]) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some((i, s)) = corpus.iter().enumerate().find(|(_, s)| s.len() < 2) {
            return Err(Error::Config(format!("sequence {i} has {} tokens; need at least 2", s.len())));
        }
        Ok(())
    }

    /// Forward and backward over `window` starting from `state`, which is
    /// advanced past the window (memory writes, detached h_g and summary).
    fn window_grads(model: &Model, window: &[ChunkBatch], state: &mut ChunkState) -> Result<(WindowGrads, usize)> {
        let rows = window[0].rows();
        let mut per_row = vec![0usize; rows];
        for ch in window {
            for r in 0..rows {
                per_row[r] += ch.targets[r * ch.width..(r + 1) * ch.width]
                    .iter()
                    .filter(|&&t| t != crate::numerics::IGNORE_TARGET)
                    .count();
            }
        }
        let active = per_row.iter().filter(|&&n| n > 0).count().max(1);
        let tokens: usize = per_row.iter().sum();

        let mut g = Graph::new();
        let (vars, bp) = bind_params(&mut g, &model.params, true);
        let mut h = g.constant(state.h_g.clone());
        let mut f = g.constant(state.fused_prev.clone());
        let mut loss = None;
        for ch in window {
            let input = ChunkInput {
                seq_ids: &ch.seq_ids,
                chunk_index: ch.chunk_index as u64,
                tokens: &ch.inputs,
            };
            if input.seq_ids != state.seq_ids || input.chunk_index != state.next_chunk {
                return Err(Error::Config("training window does not continue its state".into()));
            }
            let out = model.chunk_on_tape(&mut g, &bp, input, h, f, &state.memories, &mut Retrieval::Live)?;
            let weights: Vec<f64> = (0..rows * ch.width)
                .map(|i| {
                    let n = per_row[i / ch.width];
                    if n == 0 {
                        0.0
                    } else {
                        1.0 / (active * n) as f64
                    }
                })
                .collect();
            let l = g.weighted_cross_entropy(out.logits, &ch.targets, &weights)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
            for (mem, e) in state.memories.iter_mut().zip(out.entries) {
                mem.store(e)?;
            }
            state.next_chunk += 1;
            h = out.h_next;
            f = out.fused;
        }
        let loss = loss.ok_or_else(|| Error::Config("empty training window".into()))?;
        let mut grads_tab = g.backward(loss);
        let grads = vars
            .iter()
            .zip(model.params.tensors())
            .map(|(&v, p)| grads_tab.take_or_zeros(v, p))
            .collect();
        state.h_g = g.value(h).clone();
        state.fused_prev = g.value(f).clone();
        Ok((
            WindowGrads {
                loss: g.value(loss).item(),
                grads,
            },
            tokens,
        ))
    }

    /// Gradients for a window of chunks from a fresh state, without updating
    /// anything.
    pub fn gradients_for(model: &Model, window: &[ChunkBatch]) -> Result<WindowGrads> {
        let mut state = model.new_state(&window[0].seq_ids)?;
        state.next_chunk = window[0].chunk_index as u64;
        Ok(Self::window_grads(model, window, &mut state)?.0)
    }

    /// One optimisation step over the next window of `bptt_window` chunks.
    pub fn train_step(&mut self, corpus: &[TokenSeq]) -> Result<StepReport> {
        Self::check_corpus(corpus)?;
        let start = Instant::now();
        let base = counter::live_floats();
        let (report, peak) = counter::measure_peak(|| self.step_inner(corpus));
        let mut report = report?;
        report.peak_activation_floats = peak.saturating_sub(base);
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    fn step_inner(&mut self, corpus: &[TokenSeq]) -> Result<StepReport> {
        let w = self.cfg.bptt_window;
        let from = self.cursor.chunk;
        let window: Vec<ChunkBatch> = {
            let chunks = self.current_group(corpus);
            chunks[from..(from + w).min(chunks.len())].to_vec()
        };
        let total = self.current_group(corpus).len();
        if from == 0 || self.state.is_none() {
            self.state = Some(self.model.new_state(&window[0].seq_ids)?);
        }
        let step = self.step + 1;
        let mut state = self.state.take().unwrap();
        let result = Self::window_grads(&self.model, &window, &mut state);
        let (wg, tokens) = result.map_err(|e| self.diverged(step, e))?;
        if !wg.loss.is_finite() {
            return Err(self.diverged(step, Error::NonFinite { op: "loss" }));
        }
        let mut grads = wg.grads;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(self.diverged(step, Error::NonFinite { op: "gradient" }));
        }
        let lr = self.cfg.lr_at(step);
        if lr > 0.0 {
            let mut params = self.model.params.to_vec();
            adamw_step(&mut params, &grads, &mut self.moments, step, lr, &self.cfg.adam)?;
            self.model.params = ModelParams::from_tensors(&self.cfg.model, params)?;
        }
        self.step = step;
        self.state = Some(state);

        self.cursor.chunk = from + window.len();
        if self.cursor.chunk >= total {
            self.cursor.chunk = 0;
            self.cursor.group += 1;
            self.state = None;
            if self.cursor.group >= self.groups_per_epoch(corpus) {
                self.cursor.group = 0;
                self.cursor.epoch += 1;
            }
        }
        Ok(StepReport {
            step,
            lr,
            loss: wg.loss,
            tokens,
            grad_norm,
            peak_activation_floats: 0,
            seconds: 0.0,
        })
    }

    fn diverged(&self, step: u64, e: Error) -> Error {
        if !e.is_numeric() {
            return e;
        }
        let norms: Vec<String> = self
            .model
            .params
            .names()
            .iter()
            .zip(self.model.params.tensors())
            .map(|(n, t)| format!("{n}={:.4e}", t.sum_squares().sqrt()))
            .collect();
        Error::Diverged {
            step,
            detail: format!("{e}; parameter norms: {}", norms.join(" ")),
        }
    }

    /// Trains until `max_steps`, evaluating every `eval_every` steps (and at
    /// the end) and checkpointing every `checkpoint_every` steps (and at the
    /// end) into `out` when given.
    pub fn fit(&mut self, corpus: &[TokenSeq], eval: Option<&[TokenSeq]>, out: Option<&Path>) -> Result<Vec<StepReport>> {
        Self::check_corpus(corpus)?;
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(MetricsLog::open(&dir.join("metrics.csv"))?)
            }
            None => None,
        };
        let mut reports = Vec::new();
        while self.step < self.cfg.max_steps {
            let r = self.train_step(corpus)?;
            let last = self.step == self.cfg.max_steps;
            let eval_loss = match eval {
                Some(ev) if last || (self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0) => {
                    Some(self.model.evaluate(ev, self.cfg.batch_size)?)
                }
                _ => None,
            };
            if let Some(log) = log.as_mut() {
                log.write(&r, eval_loss)?;
            }
            if let Some(dir) = out {
                if !last && self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save(&checkpoint_path(dir), Precision::F64)?;
                }
            }
            reports.push(r);
        }
        if let Some(dir) = out {
            self.save(&checkpoint_path(dir), Precision::F64)?;
        }
        Ok(reports)
    }

    /// Saves everything needed to continue bit-exactly: parameters, moments,
    /// step, data cursor and the in-flight chunk state with its memories.
    pub fn save(&self, manifest: &Path, precision: Precision) -> Result<()> {
        let mut a = checkpoint::model_archive(&self.model);
        checkpoint::put_config(&mut a, &self.cfg);
        let names = self.model.params.names();
        for (n, t) in names.iter().zip(&self.moments.first) {
            a.arrays.push((format!("adam.m.{n}"), t.clone()));
        }
        for (n, t) in names.iter().zip(&self.moments.second) {
            a.arrays.push((format!("adam.v.{n}"), t.clone()));
        }
        a.meta.insert("step".into(), self.step.to_string());
        a.meta.insert("cursor.epoch".into(), self.cursor.epoch.to_string());
        a.meta.insert("cursor.group".into(), self.cursor.group.to_string());
        a.meta.insert("cursor.chunk".into(), self.cursor.chunk.to_string());
        if let Some(st) = &self.state {
            let ids: Vec<String> = st.seq_ids.iter().map(ToString::to_string).collect();
            a.meta.insert("state.seq_ids".into(), ids.join(","));
            a.meta.insert("state.next_chunk".into(), st.next_chunk.to_string());
            a.arrays.push(("state.h_g".into(), st.h_g.clone()));
            a.arrays.push(("state.fused_prev".into(), st.fused_prev.clone()));
            for (r, mem) in st.memories.iter().enumerate() {
                mem.save_snapshot(&memory_path(manifest, r))?;
            }
        }
        checkpoint::save_archive(manifest, &a, precision)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let a = checkpoint::load_archive(manifest)?;
        let cfg = checkpoint::get_config(&a)?;
        let model = checkpoint::model_from_archive(&a)?;
        let mut t = Trainer::with_model(cfg, model)?;
        let names = t.model.params.names();
        t.moments.first = names
            .iter()
            .map(|n| a.array(&format!("adam.m.{n}")).cloned())
            .collect::<Result<_>>()?;
        t.moments.second = names
            .iter()
            .map(|n| a.array(&format!("adam.v.{n}")).cloned())
            .collect::<Result<_>>()?;
        let num = |k: &str| -> Result<u64> {
            a.meta(k)?
                .parse()
                .map_err(|e| Error::format(manifest, format!("{k}: {e}")))
        };
        t.step = num("step")?;
        t.cursor = Cursor {
            epoch: num("cursor.epoch")?,
            group: num("cursor.group")? as usize,
            chunk: num("cursor.chunk")? as usize,
        };
        if let Ok(ids) = a.meta("state.seq_ids") {
            let seq_ids = ids
                .split(',')
                .map(|s| s.parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(manifest, format!("state.seq_ids: {e}")))?;
            let memories = (0..seq_ids.len())
                .map(|r| MemoryStore::load_snapshot(&memory_path(manifest, r)))
                .collect::<Result<_>>()?;
            t.state = Some(ChunkState {
                h_g: a.array("state.h_g")?.clone(),
                fused_prev: a.array("state.fused_prev")?.clone(),
                memories,
                seq_ids,
                next_chunk: num("state.next_chunk")?,
            });
        }
        Ok(t)
    }
}

/// Checkpoint manifest inside an output directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint")
}

fn memory_path(manifest: &Path, row: usize) -> PathBuf {
    let mut p = manifest.as_os_str().to_owned();
    p.push(format!(".mem{row}"));
    PathBuf::from(p)
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        Ok(MetricsLog { file })
    }

    pub fn write(&mut self, r: &StepReport, eval_loss: Option<f64>) -> Result<()> {
        let tps = if r.seconds > 0.0 { r.tokens as f64 / r.seconds } else { 0.0 };
        writeln!(
            self.file,
            "{},{:e},{:.6},{},{:.1},{}",
            r.step,
            r.lr,
            r.loss,
            eval_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            tps,
            r.peak_activation_floats
        )?;
        Ok(())
    }
}

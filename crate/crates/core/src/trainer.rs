//! Training loop, Adam, evaluation, metrics log and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::codebook::{init_codebook, init_uniform, norm_bound, BoundMode, Codebook};
use crate::config::{DataSource, TrainConfig};
use crate::data::{load_idx, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{arc_loss, gamma_schedule, total_loss, vq_loss, LossBreakdown};
use crate::metrics::{psnr_from_mse, ssim_image, EvalReport};
use crate::model::{PatchAutoencoder, PARAM_NAMES};
use crate::quantizer::{quantize, top_k_sets, QuantizationResult};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str =
    "step,total,recon,codebook,commit,arc,gamma,M,max_norm,usage,perplexity,psnr,ssim,l1";

/// Adam moment state, one slot per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.dims())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam step over every parameter.
pub fn adam_update(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut Adam,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Contract(format!(
            "adam_update: {n} params, {} grads, {} moment slots",
            grads.len(),
            state.m.len()
        )));
    }
    for i in 0..n {
        let d = params[i].dims();
        if grads[i].dims() != d || state.m[i].dims() != d || state.v[i].dims() != d {
            return Err(Error::Contract(format!(
                "adam_update: slot {i} has param {:?}, grad {:?}, moments {:?}",
                d,
                grads[i].dims(),
                state.m[i].dims()
            )));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..n {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Indices of the batch used at optimizer step `step`. Each epoch is a fresh
/// permutation drawn from `(seed, epoch)`; the last batch of an epoch may be
/// short.
pub fn batch_indices(seed: u64, step: u64, m: usize, batch: usize) -> Vec<usize> {
    let per_epoch = m.div_ceil(batch) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    perm.shuffle(&mut rng);
    perm[pos * batch..((pos + 1) * batch).min(m)].to_vec()
}

pub fn steps_per_epoch(m: usize, batch: usize) -> u64 {
    m.div_ceil(batch) as u64
}

/// What one optimizer step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Step index the losses and schedules were evaluated at.
    pub step: u64,
    pub breakdown: LossBreakdown,
    /// Largest codebook row norm after the bound was applied.
    pub max_norm: f64,
    /// Rows pulled back onto the ball.
    pub rescaled: usize,
    pub margin_overflow: usize,
}

/// Full training state: model, codebook, optimizer and config.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: PatchAutoencoder,
    pub codebook: Codebook,
    /// Slots follow [`PARAM_NAMES`], then the codebook.
    pub adam: Adam,
}

fn model_seed(seed: u64) -> u64 {
    seed
}

fn codebook_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x0C0D_EB00)
}

fn order_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x0BA7_C400)
}

impl Trainer {
    /// Fresh state for images of side `side`.
    pub fn new(config: TrainConfig, side: usize) -> Result<Self> {
        config.validate()?;
        let model = PatchAutoencoder::new(
            side,
            config.patch,
            config.dim,
            config.hidden,
            model_seed(config.seed),
        )?;
        let v = config.variant;
        let cb_seed = codebook_seed(config.seed);
        let codebook = if v.spherical_init() {
            init_codebook(config.codebook_size, config.dim, cb_seed)?
        } else {
            init_uniform(config.codebook_size, config.dim, cb_seed)?
        }
        .with_bound(config.alpha, v.bound_mode());
        let adam = Adam::new(model.params.iter().chain([&codebook.entries]));
        Ok(Self {
            config,
            model,
            codebook,
            adam,
        })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.codebook.step
    }

    /// `M(t)` at the current step, `None` for unbounded variants.
    pub fn current_bound(&self) -> Option<f64> {
        match self.codebook.bound_mode {
            BoundMode::Unbounded => None,
            _ => Some(self.codebook.bound()),
        }
    }

    /// One optimizer step on a `[B x H x H]` batch.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<StepReport> {
        let t = self.step();
        let variant = self.config.variant;
        let loss_cfg = self.config.loss_config();

        let mut g = Graph::new();
        let p = self.model.bind(&mut g);
        let cb = g.param(self.codebook.entries.clone());
        let z = self.model.encode(&mut g, &p, batch)?;
        let qr = quantize(g.value(z), &self.codebook, variant.quantize_mode())?;
        let z_q = g.gather_rows(cb, &qr.indices)?;
        let q_values = g.value(z_q).clone();
        let z_st = g.quantize_ste(z, q_values)?;
        let x_hat = self.model.decode(&mut g, &p, z_st)?;
        let vq = vq_loss(&mut g, batch, x_hat, z, z_q, loss_cfg.beta)?;

        let mut margin_overflow = 0;
        let arc = if variant.uses_arc() {
            let cos = qr
                .cos_table
                .as_ref()
                .ok_or_else(|| Error::Contract("spherical quantization without cos table".into()))?;
            let sets = top_k_sets(cos, loss_cfg.k)?;
            let out = arc_loss(&mut g, z, cb, &sets, loss_cfg.s, loss_cfg.m)?;
            margin_overflow = out.margin_overflow;
            Some(out.node)
        } else {
            None
        };
        let (root, mut breakdown) = total_loss(&mut g, &vq, arc, &loss_cfg, t)?;
        breakdown.m_t = self.current_bound();
        check_finite(t, &breakdown)?;

        g.backward(root)?;
        let zero_cb = Tensor::zeros(self.codebook.entries.dims());
        let mut grads: Vec<Tensor> = Vec::with_capacity(PARAM_NAMES.len() + 1);
        for (i, &id) in p.ids.iter().enumerate() {
            grads.push(
                g.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.model.params[i].dims())),
            );
        }
        grads.push(g.grad(cb).cloned().unwrap_or(zero_cb));
        drop(g);
        if let Some(i) = grads.iter().position(|gr| !gr.is_finite()) {
            let name = PARAM_NAMES.get(i).copied().unwrap_or("codebook.entries");
            return Err(Error::NonFinite {
                step: t,
                detail: format!("gradient of {name} is not finite; {}", describe(&breakdown)),
            });
        }
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params: Vec<&mut Tensor> = self
            .model
            .params
            .iter_mut()
            .chain([&mut self.codebook.entries])
            .collect();
        adam_update(&mut params, &grad_refs, &mut self.adam, self.config.learning_rate)?;

        let rescaled = match self.codebook.bound_mode {
            BoundMode::Unbounded => 0,
            _ => self.codebook.apply_bound()?,
        };
        let max_norm = self.codebook.max_norm();
        self.codebook.step += 1;
        Ok(StepReport {
            step: t,
            breakdown,
            max_norm,
            rescaled,
            margin_overflow,
        })
    }

    /// Encodes, quantizes and decodes a batch with frozen parameters.
    /// Reconstructions are clamped to `[0, 1]`.
    pub fn reconstruct(&self, batch: &Tensor) -> Result<(QuantizationResult, Tensor)> {
        let mut g = Graph::new();
        let p = self.model.bind_frozen(&mut g);
        let z = self.model.encode(&mut g, &p, batch)?;
        let qr = quantize(g.value(z), &self.codebook, self.config.variant.quantize_mode())?;
        let zq = g.constant(qr.quantized.clone());
        let x_hat = self.model.decode(&mut g, &p, zq)?;
        let out = g.value(x_hat).map(|v| v.clamp(0.0, 1.0));
        Ok((qr, out))
    }

    /// One pass over `ds`. Usage statistics cover exactly this pass.
    pub fn evaluate(&mut self, ds: &Dataset) -> Result<EvalReport> {
        self.codebook.reset_usage();
        let side = ds.side;
        let px = side * side;
        let (mut psnr_sum, mut ssim_sum, mut abs_sum) = (0.0, 0.0, 0.0);
        let mut fallback = false;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(self.config.batch_size) {
            let batch = ds.batch(chunk);
            let (qr, x_hat) = self.reconstruct(&batch)?;
            self.codebook.record_usage(&qr.indices);
            for i in 0..chunk.len() {
                let a = &batch.data()[i * px..(i + 1) * px];
                let b = &x_hat.data()[i * px..(i + 1) * px];
                let mut se = 0.0;
                for (x, y) in a.iter().zip(b) {
                    se += (x - y) * (x - y);
                    abs_sum += (x - y).abs();
                }
                psnr_sum += psnr_from_mse(se / px as f64, 1.0);
                let (s, fb) = ssim_image(a, b, side, side);
                ssim_sum += s;
                fallback |= fb;
            }
        }
        let stats = self.codebook.usage_stats();
        let m = ds.len() as f64;
        Ok(EvalReport {
            l1: abs_sum / (m * px as f64),
            psnr: psnr_sum / m,
            ssim: ssim_sum / m,
            usage_fraction: stats.0,
            perplexity: stats.1,
            ssim_global_fallback: fallback,
        })
    }

    /// Trains until `epochs` worth of steps have been taken, logging one CSV
    /// row per step. Returns the final evaluation on `val`.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        log: &mut MetricsLog,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<EvalReport> {
        let total = steps_per_epoch(train.len(), self.config.batch_size) * self.config.epochs as u64;
        let out_dir = self.config.out_dir.clone();
        let mut last_eval = None;
        while self.step() < total {
            let idx = batch_indices(
                order_seed(self.config.seed),
                self.step(),
                train.len(),
                self.config.batch_size,
            );
            let report = match self.train_step(&train.batch(&idx)) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    let _ = self.write_dump(&out_dir, &e);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            on_step(&report);
            let done = self.step();
            let eval = if done == total
                || (self.config.eval_every > 0 && done % self.config.eval_every == 0)
            {
                Some(self.evaluate(val)?)
            } else {
                None
            };
            log.write_row(&MetricsRow {
                step: report.step,
                breakdown: Some(&report.breakdown),
                max_norm: Some(report.max_norm),
                eval: eval.as_ref(),
            })?;
            if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 {
                self.save(&out_dir.join("checkpoint.avqc"))?;
            }
            last_eval = eval;
        }
        match last_eval {
            Some(e) => Ok(e),
            None => {
                let e = self.evaluate(val)?;
                log.write_row(&MetricsRow {
                    step: self.step(),
                    breakdown: None,
                    max_norm: Some(self.codebook.max_norm()),
                    eval: Some(&e),
                })?;
                Ok(e)
            }
        }
    }

    fn write_dump(&self, dir: &Path, err: &Error) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("nonfinite-step{}.txt", self.step()));
        let mut f = File::create(&path)?;
        writeln!(f, "{err}")?;
        writeln!(f, "codebook max norm: {}", self.codebook.max_norm())?;
        for (name, p) in PARAM_NAMES.iter().zip(&self.model.params) {
            writeln!(f, "{name}: max |w| = {}, finite = {}", p.max_abs(), p.is_finite())?;
        }
        write!(f, "{}", self.config.to_text())?;
        Ok(path)
    }

    /// Named tensors making up a checkpoint.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let text: Vec<f64> = self.config.to_text().bytes().map(f64::from).collect();
        let mut out = vec![
            ("config.text".to_string(), Tensor::from_vec(text)),
            ("step".into(), Tensor::scalar(self.step() as f64)),
            ("model.side".into(), Tensor::scalar(self.model.side as f64)),
        ];
        for (name, p) in PARAM_NAMES.iter().zip(&self.model.params) {
            out.push((name.to_string(), p.clone()));
        }
        out.push(("codebook.entries".into(), self.codebook.entries.clone()));
        let usage = self.codebook.usage_counts.iter().map(|&c| c as f64).collect();
        out.push(("codebook.usage".into(), Tensor::from_vec(usage)));
        out.push(("adam.t".into(), Tensor::scalar(self.adam.t as f64)));
        let slots = PARAM_NAMES.iter().copied().chain(["codebook.entries"]);
        for (i, name) in slots.enumerate() {
            out.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            out.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_tensors())
    }

    /// Rebuilds the state from named tensors; nothing is returned unless
    /// every tensor is present with the expected shape.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))
        };
        let text: String = take("config.text")?
            .data()
            .iter()
            .map(|&b| b as u8 as char)
            .collect();
        let config = TrainConfig::parse(&text)?;
        let step = take("step")?.item() as u64;
        let side = take("model.side")?.item() as usize;
        let mut state = Trainer::new(config, side)?;
        let fill = |dst: &mut Tensor, name: &str, t: Tensor| -> Result<()> {
            if t.dims() != dst.dims() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has dims {:?}, expected {:?}",
                    t.dims(),
                    dst.dims()
                )));
            }
            *dst = t;
            Ok(())
        };
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            fill(&mut state.model.params[i], name, take(name)?)?;
        }
        let entries = take("codebook.entries")?;
        // `reduce` may have changed K since the config was written.
        state.config.codebook_size = entries.rows();
        state.codebook.entries = entries;
        let usage = take("codebook.usage")?;
        if usage.numel() != state.codebook.len() {
            return Err(Error::Format("codebook.usage length differs from K".into()));
        }
        state.codebook.usage_counts = usage.data().iter().map(|&c| c as u64).collect();
        state.codebook.step = step;
        state.adam = Adam::new(state.model.params.iter().chain([&state.codebook.entries]));
        state.adam.t = take("adam.t")?.item() as u64;
        let slots: Vec<&str> = PARAM_NAMES.iter().copied().chain(["codebook.entries"]).collect();
        for (i, name) in slots.iter().enumerate() {
            let m = take(&format!("adam.m.{name}"))?;
            fill(&mut state.adam.m[i], name, m)?;
            let v = take(&format!("adam.v.{name}"))?;
            fill(&mut state.adam.v[i], name, v)?;
        }
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::read(path)?)
    }

    /// Replaces the codebook (e.g. after k-means reduction). The codebook's
    /// Adam moments restart from zero when its shape changes.
    pub fn replace_codebook(&mut self, cb: Codebook) {
        let slot = PARAM_NAMES.len();
        if cb.entries.dims() != self.codebook.entries.dims() {
            self.adam.m[slot] = Tensor::zeros(cb.entries.dims());
            self.adam.v[slot] = Tensor::zeros(cb.entries.dims());
        }
        self.config.codebook_size = cb.len();
        self.codebook = cb;
    }
}

pub fn save_checkpoint(state: &Trainer, path: &Path) -> Result<()> {
    state.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    Trainer::load(path)
}

fn describe(b: &LossBreakdown) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
    format!(
        "total={} recon={} codebook={} commit={} arc={} gamma={} M={}",
        b.total,
        b.recon,
        b.codebook_term,
        b.commit_term,
        opt(b.arc),
        opt(b.gamma_t),
        opt(b.m_t)
    )
}

fn check_finite(step: u64, b: &LossBreakdown) -> Result<()> {
    let terms = [
        Some(b.total),
        Some(b.recon),
        Some(b.codebook_term),
        Some(b.commit_term),
        b.arc,
    ];
    if terms.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: describe(b),
        })
    }
}

/// One CSV row; `None` fields are written empty.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow<'a> {
    pub step: u64,
    pub breakdown: Option<&'a LossBreakdown>,
    pub max_norm: Option<f64>,
    pub eval: Option<&'a EvalReport>,
}

impl MetricsRow<'_> {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let b = self.breakdown;
        let e = self.eval;
        [
            self.step.to_string(),
            f(b.map(|b| b.total)),
            f(b.map(|b| b.recon)),
            f(b.map(|b| b.codebook_term)),
            f(b.map(|b| b.commit_term)),
            f(b.and_then(|b| b.arc)),
            f(b.and_then(|b| b.gamma_t)),
            f(b.and_then(|b| b.m_t)),
            f(self.max_norm),
            f(e.map(|e| e.usage_fraction)),
            f(e.map(|e| e.perplexity)),
            f(e.map(|e| e.psnr)),
            f(e.map(|e| e.ssim)),
            f(e.map(|e| e.l1)),
        ]
        .join(",")
    }
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Opens `path` for appending, writing the header if the file is new.
    pub fn append(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{CSV_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Train and validation sets described by the config.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synth {
            train_count,
            val_count,
            side,
            clusters,
            seed,
        } => Ok((
            synth_dataset(*train_count, *side, *clusters, *seed)?,
            synth_dataset(*val_count, *side, *clusters, seed.wrapping_add(1))?,
        )),
        DataSource::Idx {
            train_images,
            train_labels,
            val_images,
            val_labels,
            train_count,
            val_count,
        } => {
            let train = load_idx(train_images, train_labels.as_deref())?.take(*train_count);
            let val = load_idx(val_images, val_labels.as_deref())?.take(*val_count);
            if train.side != val.side {
                return Err(Error::Consistency(format!(
                    "train images are {0}x{0}, validation images {1}x{1}",
                    train.side, val.side
                )));
            }
            Ok((train, val))
        }
    }
}

/// Outcome of a complete run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub steps: u64,
    pub eval: EvalReport,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunSummary {
    pub fn line(&self) -> String {
        format!(
            "variant={} seed={} steps={} psnr={:.4} ssim={:.4} l1={:.6} usage={:.4} perplexity={:.2}",
            self.variant,
            self.seed,
            self.steps,
            self.eval.psnr,
            self.eval.ssim,
            self.eval.l1,
            self.eval.usage_fraction,
            self.eval.perplexity
        )
    }
}

/// Runs a full training job into `cfg.out_dir`: `config.txt`, `metrics.csv`
/// and `checkpoint.avqc`.
pub fn run(cfg: &TrainConfig, on_step: impl FnMut(&StepReport)) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, val) = load_datasets(cfg)?;
    run_on(cfg, &train, &val, on_step)
}

/// [`run`] with preloaded datasets.
pub fn run_on(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    on_step: impl FnMut(&StepReport),
) -> Result<RunSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let csv = cfg.out_dir.join("metrics.csv");
    let mut log = MetricsLog::create(&csv)?;
    let mut state = Trainer::new(cfg.clone(), train.side)?;
    let eval = state.fit(train, val, &mut log, on_step)?;
    let checkpoint = cfg.out_dir.join("checkpoint.avqc");
    state.save(&checkpoint)?;
    Ok(RunSummary {
        variant: cfg.variant.to_string(),
        seed: cfg.seed,
        steps: state.step(),
        eval,
        csv,
        checkpoint,
    })
}

/// Gamma and bound schedules at step `t` for a config.
pub fn schedules(cfg: &TrainConfig, t: u64) -> (f64, f64) {
    let m = norm_bound(t, cfg.alpha, cfg.variant.bound_mode()).unwrap_or(f64::INFINITY);
    (gamma_schedule(t, cfg.gamma0, cfg.lambda), m)
}

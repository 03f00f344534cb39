//! Teacher-forced maximum-likelihood training with optional label smoothing,
//! Adam under the Noam schedule, and early stopping on held-out loss.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{BpeModel, TokenId, BOS, EOS, PAD};

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate schedule starts at step 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup_steps must be at least 1".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Mean cross-entropy of `log_probs` `[T, V]` against
/// `q = (1 − eps)·onehot + eps·uniform`, the uniform part spread over the
/// `V − 1` non-PAD entries. PAD targets are excluded from the mean.
pub fn smoothed_nll(g: &mut Graph, log_probs: Var, targets: &[TokenId], eps: f64) -> Result<Var> {
    let (sum, count) = smoothed_nll_sum(g, log_probs, targets, eps)?;
    if count == 0 {
        return Err(Error::Input("no non-PAD targets to average over".into()));
    }
    Ok(g.scale(sum, 1.0 / count as f64))
}

/// Summed (not averaged) smoothed loss and the number of non-PAD targets.
pub fn smoothed_nll_sum(g: &mut Graph, log_probs: Var, targets: &[TokenId], eps: f64) -> Result<(Var, usize)> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Param(format!("label smoothing must be in [0, 1), got {eps}")));
    }
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("smoothed_nll", &shape, &[targets.len()]));
    }
    let v = shape[1];
    let spread = eps / (v - 1) as f64;
    let mut q = vec![0.0; targets.len() * v];
    let mut count = 0;
    for (t, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        if y as usize >= v {
            return Err(Error::Vocab { id: y, size: v });
        }
        count += 1;
        let row = &mut q[t * v..(t + 1) * v];
        if eps > 0.0 {
            row.fill(spread);
            row[PAD as usize] = 0.0;
        }
        row[y as usize] += 1.0 - eps;
    }
    let q = g.constant(Tensor::new(&shape, q)?);
    let prod = g.mul(q, log_probs)?;
    let total = g.sum(prod);
    Ok((g.scale(total, -1.0), count))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient still advance their
    /// moment estimates with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", store.name(*id))));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(&id);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = grad.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// One source/title pair in token form. `title` carries neither BOS nor EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub title: Vec<TokenId>,
}

impl Example {
    /// Encodes an article, keeping the first `max_src_tokens` body tokens and
    /// the first `max_title_tokens` title tokens.
    pub fn from_article(bpe: &BpeModel, article: &Article, max_src_tokens: usize, max_title_tokens: usize) -> Self {
        let mut src = bpe.encode(&article.body);
        src.truncate(max_src_tokens);
        let mut title = bpe.encode(&article.title);
        title.truncate(max_title_tokens);
        Example { src, title }
    }

    pub fn decoder_input(&self) -> Vec<TokenId> {
        std::iter::once(BOS).chain(self.title.iter().copied()).collect()
    }

    pub fn targets(&self) -> Vec<TokenId> {
        self.title.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    fn tokens(&self) -> usize {
        self.src.len() + self.title.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    /// Multiplier on the Noam rate.
    pub lr_scale: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Source plus target tokens per batch.
    pub batch_tokens: usize,
    pub max_src_tokens: usize,
    pub max_title_tokens: usize,
    pub seed: u64,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub eval_every: u64,
    pub max_steps: u64,
    pub clip_norm: Option<f64>,
    pub time_budget: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 4000,
            lr_scale: 1.0,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-9,
            label_smoothing: 0.0,
            batch_tokens: 4096,
            max_src_tokens: 2000,
            max_title_tokens: 40,
            seed: 0,
            patience: 3,
            eval_every: 500,
            max_steps: 100_000,
            clip_norm: Some(1.0),
            time_budget: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if self.batch_tokens == 0 || self.eval_every == 0 || self.max_src_tokens == 0 {
            return bad("batch_tokens, eval_every and max_src_tokens must be positive".into());
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.adam_eps <= 0.0 {
            return bad(format!("invalid Adam settings {:?} / {}", self.adam_betas, self.adam_eps));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Held-out NLL per validation pass.
    pub val_losses: Vec<f64>,
    pub best_val_loss: f64,
}

/// Groups shuffled example indices into batches of about `batch_tokens`.
pub fn make_batches(examples: &[Example], batch_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = examples[i].tokens();
        if !current.is_empty() && tokens + n > batch_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Per-token NLL over `examples` with dropout off.
pub fn validation_loss<M: Seq2Seq + ?Sized>(model: &M, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lp = model.log_probs(&mut g, &ex.src, &ex.decoder_input(), false, &mut rng)?;
        let (sum, n) = smoothed_nll_sum(&mut g, lp, &ex.targets(), 0.0)?;
        total += g.value(sum).item();
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("validation set is empty".into()));
    }
    Ok(total / count as f64)
}

/// Loss and parameter gradients for one batch.
fn batch_gradients<M: Seq2Seq + ?Sized>(
    model: &M,
    batch: &[&Example],
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    let mut g = Graph::new();
    let mut sums = Vec::with_capacity(batch.len());
    let mut count = 0;
    for ex in batch {
        let lp = model.log_probs(&mut g, &ex.src, &ex.decoder_input(), true, rng)?;
        let (sum, n) = smoothed_nll_sum(&mut g, lp, &ex.targets(), eps)?;
        sums.push(sum);
        count += n;
    }
    let mut total = sums[0];
    for &s in &sums[1..] {
        total = g.add(total, s)?;
    }
    let loss = g.scale(total, 1.0 / count.max(1) as f64);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({value})")));
    }
    Ok((value, g.backward(loss)?.into_params()))
}

/// Trains `model` in place and leaves it holding the parameters with the
/// lowest validation loss. `log` receives one line per step.
pub fn train<M: Seq2Seq + ?Sized>(
    model: &mut M,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    d_model: usize,
    log: &mut dyn FnMut(&str),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if let Some(ex) = train_set.iter().chain(val_set).find(|e| e.src.is_empty()) {
        return Err(Error::Input(format!("example with empty source (title {:?})", ex.title)));
    }
    // without held-out data, early stopping watches the training set
    let val_set = if val_set.is_empty() { train_set } else { val_set };
    let started = Instant::now();
    let mut rng = crate::seed::rng_for(cfg.seed, "train");
    let mut adam = Adam::new(model.params(), cfg.adam_betas.0, cfg.adam_betas.1, cfg.adam_eps);
    let mut report = TrainReport {
        best_val_loss: f64::INFINITY,
        ..TrainReport::default()
    };
    let mut best = model.params().clone();
    let mut since_best = 0;
    let mut step = 0u64;

    // true once `patience` passes have gone by without improvement
    let mut evaluate = |model: &M, report: &mut TrainReport, log: &mut dyn FnMut(&str), step: u64| -> Result<bool> {
        let v = validation_loss(model, val_set)?;
        log(&format!("step={step} val_loss={v:.6}"));
        report.val_losses.push(v);
        if v < report.best_val_loss {
            report.best_val_loss = v;
            best = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        Ok(since_best >= cfg.patience)
    };

    'outer: loop {
        let batches = make_batches(train_set, cfg.batch_tokens, &mut rng);
        for batch in batches {
            if step >= cfg.max_steps || cfg.time_budget.is_some_and(|b| started.elapsed() >= b) {
                break 'outer;
            }
            step += 1;
            let examples: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_gradients(&*model, &examples, cfg.label_smoothing, &mut rng)?;
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            let lr = cfg.lr_scale * noam_lr(step, d_model, cfg.warmup_steps)?;
            adam.step(model.params_mut(), &grads, lr)?;
            if !model.params().all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {step}")));
            }
            log(&format!("step={step} lr={lr:.6e} loss={loss:.6}"));
            report.losses.push(loss);
            if step % cfg.eval_every == 0 && evaluate(&*model, &mut report, log, step)? {
                break 'outer;
            }
        }
    }
    if report.val_losses.is_empty() || step % cfg.eval_every != 0 {
        evaluate(&*model, &mut report, log, step)?;
    }
    report.steps = step;
    *model.params_mut() = best;
    Ok(report)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{EpochLog, TrainingLog};
use crate::nn::{bce_with_logit, dropout_mask, Dense, Lstm, LstmStep};
use crate::numerics::{adam_step, derive_seed, sigmoid, AdamConfig, AdamState, ParamSet, RngStream};

const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    /// Per-step probabilities, trained with cross-entropy.
    Sigmoid,
    /// Per-step real values, trained with squared error.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub dropout: f64,
    pub state_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.state_size == 0 || self.batch_size == 0 {
            return Err(Error::config("state size and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::config("learning rate and max norm must be positive"));
        }
        Ok(())
    }
}

/// Per-patient step-major sequences: `inputs[i]` is `len_i × input_dim`,
/// `targets[i]` is `len_i × output_dim`, `weights[i]` has `len_i` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequences {
    pub input_dim: usize,
    pub output_dim: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl Sequences {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn seq_len(&self, i: usize) -> usize {
        self.weights[i].len()
    }
}

/// Rows sorted by decreasing length; the rows active at step `t` are a prefix.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub order: Vec<usize>,
    pub active: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl StepBatch {
    pub fn new(seqs: &Sequences, members: &[usize]) -> Self {
        let mut order: Vec<usize> = members.to_vec();
        order.sort_by(|&i, &j| seqs.seq_len(j).cmp(&seqs.seq_len(i)).then(i.cmp(&j)));
        let t_max = order.first().map_or(0, |&i| seqs.seq_len(i));
        let active: Vec<usize> = (0..t_max)
            .map(|t| order.iter().take_while(|&&i| seqs.seq_len(i) > t).count())
            .collect();
        let (di, dout) = (seqs.input_dim, seqs.output_dim);
        let mut inputs = Vec::with_capacity(t_max);
        let mut targets = Vec::with_capacity(t_max);
        let mut weights = Vec::with_capacity(t_max);
        for (t, &n) in active.iter().enumerate() {
            let rows = &order[..n];
            inputs.push(rows.iter().flat_map(|&i| seqs.inputs[i][t * di..(t + 1) * di].iter().copied()).collect());
            targets.push(rows.iter().flat_map(|&i| seqs.targets[i][t * dout..(t + 1) * dout].iter().copied()).collect());
            weights.push(rows.iter().map(|&i| seqs.weights[i][t]).collect());
        }
        Self {
            order,
            active,
            inputs,
            targets,
            weights,
        }
    }

    pub fn t_max(&self) -> usize {
        self.active.len()
    }
}

/// Standard (per-step) dropout masks on the LSTM input and on the state fed
/// to the output layer.
#[derive(Clone, Debug)]
pub struct StepMasks {
    pub input: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
}

pub(crate) struct StepCache {
    n: usize,
    lstm: LstmStep,
    hd: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

fn mul(values: &mut [f64], mask: &[f64]) {
    values.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
}

fn prefix(src: &[f64], n: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * width];
    let len = (n * width).min(src.len());
    out[..len].copy_from_slice(&src[..len]);
    out
}

/// LSTM followed by an affine read-out at every step.
#[derive(Clone, Debug)]
pub struct SeqNet {
    pub kind: OutputKind,
    pub dropout: f64,
    pub params: ParamSet,
    lstm: Lstm,
    out: Dense,
}

impl SeqNet {
    pub fn new(kind: OutputKind, input_dim: usize, output_dim: usize, state_size: usize, dropout: f64, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).child("init", 0);
        let mut params = ParamSet::new();
        let lstm = Lstm::register(&mut params, "lstm", input_dim, state_size, &mut rng);
        let out = Dense::register(&mut params, "out", state_size, output_dim, &mut rng);
        Self {
            kind,
            dropout,
            params,
            lstm,
            out,
        }
    }

    pub fn from_params(kind: OutputKind, dropout: f64, params: ParamSet) -> Result<Self> {
        let lstm = Lstm::bind(&params, "lstm").ok_or_else(|| Error::config("parameter `lstm` missing"))?;
        let out = Dense::bind(&params, "out").ok_or_else(|| Error::config("parameter `out` missing"))?;
        if out.input != lstm.hidden {
            return Err(Error::config("read-out width does not match the state size"));
        }
        Ok(Self {
            kind,
            dropout,
            params,
            lstm,
            out,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.lstm.input
    }

    pub fn output_dim(&self) -> usize {
        self.out.output
    }

    pub fn draw_masks(&self, batch: &StepBatch, rng: &mut RngStream) -> StepMasks {
        let (di, h) = (self.input_dim(), self.lstm.hidden);
        StepMasks {
            input: batch.active.iter().map(|&n| dropout_mask(rng, n * di, self.dropout)).collect(),
            output: batch.active.iter().map(|&n| dropout_mask(rng, n * h, self.dropout)).collect(),
        }
    }

    pub(crate) fn forward(&self, params: &ParamSet, batch: &StepBatch, masks: Option<&StepMasks>) -> Vec<StepCache> {
        let h = self.lstm.hidden;
        let dout = self.output_dim();
        let mut steps: Vec<StepCache> = Vec::with_capacity(batch.t_max());
        for t in 0..batch.t_max() {
            let n = batch.active[t];
            let mut inp = batch.inputs[t].clone();
            if let Some(m) = masks {
                mul(&mut inp, &m.input[t]);
            }
            let (h_prev, c_prev) = match steps.last() {
                Some(s) => (prefix(&s.lstm.h, n, h), prefix(&s.lstm.c, n, h)),
                None => (vec![0.0; n * h], vec![0.0; n * h]),
            };
            let lstm = self.lstm.forward(params, &inp, &h_prev, &c_prev, n);
            let mut hd = lstm.h.clone();
            if let Some(m) = masks {
                mul(&mut hd, &m.output[t]);
            }
            let mut out = vec![0.0; n * dout];
            self.out.forward(params, &hd, n, &mut out);
            steps.push(StepCache { n, lstm, hd, out });
        }
        steps
    }

    fn backward(&self, params: &ParamSet, steps: &[StepCache], douts: &[Vec<f64>], masks: Option<&StepMasks>) -> ParamSet {
        let h = self.lstm.hidden;
        let mut grads = params.zeros_like();
        let mut carry_h: Vec<f64> = Vec::new();
        let mut carry_c: Vec<f64> = Vec::new();
        for (t, step) in steps.iter().enumerate().rev() {
            let n = step.n;
            let mut dh = vec![0.0; n * h];
            self.out.backward(params, &mut grads, &step.hd, &douts[t], n, Some(&mut dh));
            if let Some(m) = masks {
                mul(&mut dh, &m.output[t]);
            }
            dh.iter_mut().zip(prefix(&carry_h, n, h)).for_each(|(d, c)| *d += c);
            let dc = prefix(&carry_c, n, h);
            let (_, dh_prev, dc_prev) = self.lstm.backward(params, &mut grads, &step.lstm, &dh, &dc, n);
            carry_h = dh_prev;
            carry_c = dc_prev;
        }
        grads
    }

    /// Weighted per-entry loss `Σ w ℓ / (Σ w · output_dim)` and the per-step
    /// output gradients.
    fn loss_terms(&self, steps: &[StepCache], batch: &StepBatch) -> (f64, Vec<Vec<f64>>) {
        let dout = self.output_dim();
        let total: f64 = batch.weights.iter().flatten().sum::<f64>() * dout as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(steps.len());
        for (t, step) in steps.iter().enumerate() {
            let mut g = vec![0.0; step.out.len()];
            for r in 0..step.n {
                let w = batch.weights[t][r];
                for c in 0..dout {
                    let idx = r * dout + c;
                    let (l, d) = match self.kind {
                        OutputKind::Sigmoid => bce_with_logit(step.out[idx], batch.targets[t][idx]),
                        OutputKind::Linear => {
                            let e = step.out[idx] - batch.targets[t][idx];
                            (e * e, 2.0 * e)
                        }
                    };
                    loss += w * l;
                    g[idx] = w * d / total;
                }
            }
            grads.push(g);
        }
        (loss / total, grads)
    }

    pub fn loss(&self, params: &ParamSet, batch: &StepBatch, masks: Option<&StepMasks>) -> f64 {
        let steps = self.forward(params, batch, masks);
        self.loss_terms(&steps, batch).0
    }

    pub fn loss_and_grad(&self, params: &ParamSet, batch: &StepBatch, masks: Option<&StepMasks>) -> (f64, ParamSet) {
        let steps = self.forward(params, batch, masks);
        let (loss, douts) = self.loss_terms(&steps, batch);
        (loss, self.backward(params, &steps, &douts, masks))
    }

    /// Weighted mean loss over all sequences with dropout off.
    pub fn evaluate(&self, seqs: &Sequences) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        let all: Vec<usize> = (0..seqs.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let batch = StepBatch::new(seqs, chunk);
            let w: f64 = batch.weights.iter().flatten().sum();
            num += self.loss(&self.params, &batch, None) * w;
            den += w;
        }
        num / den
    }

    /// Deterministic per-step outputs (probabilities or values), per sequence.
    pub fn predict(&self, seqs: &Sequences) -> Vec<Vec<f64>> {
        let dout = self.output_dim();
        let mut out: Vec<Vec<f64>> = (0..seqs.len()).map(|i| vec![0.0; seqs.seq_len(i) * dout]).collect();
        let all: Vec<usize> = (0..seqs.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let batch = StepBatch::new(seqs, chunk);
            let steps = self.forward(&self.params, &batch, None);
            for (t, step) in steps.iter().enumerate() {
                for (r, &i) in batch.order[..step.n].iter().enumerate() {
                    let dst = &mut out[i][t * dout..(t + 1) * dout];
                    for (d, &v) in dst.iter_mut().zip(&step.out[r * dout..(r + 1) * dout]) {
                        *d = match self.kind {
                            OutputKind::Sigmoid => sigmoid(v),
                            OutputKind::Linear => v,
                        };
                    }
                }
            }
        }
        out
    }
}

/// Adam with global-norm clipping; keeps the parameters of the epoch with the
/// lowest validation loss.
pub fn train_network(net: &mut SeqNet, train: &Sequences, val: &Sequences, cfg: &NetworkConfig, seed: u64) -> Result<TrainingLog> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("network needs non-empty train and validation sequences"));
    }
    if train.input_dim != net.input_dim() || train.output_dim != net.output_dim() {
        return Err(Error::Shape {
            expected: vec![net.input_dim(), net.output_dim()],
            actual: vec![train.input_dim, train.output_dim],
        });
    }
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &net.params);
    let root = RngStream::new(seed);
    let mut log = TrainingLog {
        best_val_loss: f64::INFINITY,
        ..TrainingLog::default()
    };
    let mut best = net.params.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.child("shuffle", epoch as u64).shuffle(&mut order);
        let mask_root = derive_seed(seed, "dropout", epoch as u64);
        let mut sum = 0.0;
        let mut weight = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = StepBatch::new(train, chunk);
            let w: f64 = batch.weights.iter().flatten().sum();
            if w <= 0.0 {
                continue;
            }
            let masks = (net.dropout > 0.0).then(|| {
                let mut rng = RngStream::new(derive_seed(mask_root, "batch", b as u64));
                net.draw_masks(&batch, &mut rng)
            });
            let (loss, mut grads) = net.loss_and_grad(&net.params, &batch, masks.as_ref());
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            grads.clip_global_norm(cfg.max_grad_norm);
            adam_step(&mut net.params, &grads, &mut adam)?;
            sum += loss * w;
            weight += w;
        }
        let val_loss = net.evaluate(val);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = net.params.clone();
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: if weight > 0.0 { sum / weight } else { f64::NAN },
            val_loss,
        });
    }
    if cfg.epochs > 0 {
        net.params = best;
    } else {
        log.best_val_loss = net.evaluate(val);
    }
    Ok(log)
}

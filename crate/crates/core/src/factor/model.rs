use super::batch::{BatchMasks, SeqBatch};
use super::config::{FactorModelConfig, FactorVariant};
use crate::error::{Error, Result};
use crate::nn::{bce_with_logit, Dense, Lstm, LstmStep};
use crate::numerics::{elu, elu_grad, ParamSet, RngStream, Tensor};

#[derive(Clone, Debug)]
enum Core {
    Lstm(Lstm),
    Mlp(Dense),
}

#[derive(Clone, Debug)]
enum Heads {
    Multitask(Vec<(Dense, Dense)>),
    Joint(Dense, Dense),
}

#[derive(Clone, Debug)]
struct Layout {
    init: usize,
    core: Core,
    proj: Dense,
    heads: Heads,
}

/// Trained or freshly initialised factor model over `k` binary treatments.
///
/// At step `t` the core reads `u_t = [x_{t−1}, a_{t−1}]` (the trainable
/// vector `init` at `t = 0`) and, for the recurrent variants, the previous
/// substitute `z_{t−1}`. The substitute is `z_t = tanh(W h_t + b)`. Treatment
/// `j` is predicted from `[x_t, z_t]` only.
#[derive(Clone, Debug)]
pub struct FactorModel {
    pub config: FactorModelConfig,
    pub covariate_dim: usize,
    pub k: usize,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub params: ParamSet,
    layout: Layout,
}

/// Everything one forward step keeps for the backward pass.
pub(crate) struct StepCache {
    n: usize,
    core_in: Vec<f64>,
    lstm: Option<LstmStep>,
    mlp_pre: Vec<f64>,
    hd: Vec<f64>,
    pub(crate) z: Vec<f64>,
    head_in: Vec<f64>,
    head_pre: Vec<Vec<f64>>,
    head_act: Vec<Vec<f64>>,
    pub(crate) logits: Vec<f64>,
}

fn mul_rows(values: &mut [f64], mask: &[f64]) {
    for (v, m) in values.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// First `n` rows of an `m × width` buffer, or zeros when it has fewer rows.
fn take_rows(src: Option<&[f64]>, n: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * width];
    if let Some(s) = src {
        let len = (n * width).min(s.len());
        out[..len].copy_from_slice(&s[..len]);
    }
    out
}

impl FactorModel {
    pub fn new(
        config: FactorModelConfig,
        covariate_dim: usize,
        k: usize,
        x_mean: Vec<f64>,
        x_std: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if k == 0 || x_mean.len() != covariate_dim || x_std.len() != covariate_dim {
            return Err(Error::config("covariate statistics do not match covariate_dim"));
        }
        let mut rng = RngStream::new(config.seed).child("init", 0);
        let (dx, dz, h, f) = (covariate_dim, config.d_z, config.hidden_units, config.head_units);
        let u_dim = dx + k;
        let mut params = ParamSet::new();
        let init = Tensor::from_vec(&[u_dim], (0..u_dim).map(|_| rng.normal(0.0, 0.01)).collect())?;
        params.push("init", init);
        match config.variant {
            FactorVariant::MultitaskRnn | FactorVariant::PlainRnn => {
                Lstm::register(&mut params, "lstm", u_dim + dz, h, &mut rng);
            }
            FactorVariant::MultitaskMlp => {
                Dense::register(&mut params, "mlp", u_dim, h, &mut rng);
            }
        }
        Dense::register(&mut params, "proj", h, dz, &mut rng);
        match config.variant {
            FactorVariant::PlainRnn => {
                Dense::register(&mut params, "joint.hidden", dx + dz, f, &mut rng);
                Dense::register(&mut params, "joint.out", f, k, &mut rng);
            }
            _ => {
                for j in 0..k {
                    Dense::register(&mut params, &format!("head{j}.hidden"), dx + dz, f, &mut rng);
                    Dense::register(&mut params, &format!("head{j}.out"), f, 1, &mut rng);
                }
            }
        }
        Self::from_parts(config, covariate_dim, k, x_mean, x_std, params)
    }

    /// Rebuilds a model around existing parameters (e.g. from a checkpoint).
    pub fn from_parts(
        config: FactorModelConfig,
        covariate_dim: usize,
        k: usize,
        x_mean: Vec<f64>,
        x_std: Vec<f64>,
        params: ParamSet,
    ) -> Result<Self> {
        let missing = |name: &str| Error::config(format!("parameter `{name}` missing"));
        let init = params.index_of("init").ok_or_else(|| missing("init"))?;
        let core = match config.variant {
            FactorVariant::MultitaskMlp => {
                Core::Mlp(Dense::bind(&params, "mlp").ok_or_else(|| missing("mlp"))?)
            }
            _ => Core::Lstm(Lstm::bind(&params, "lstm").ok_or_else(|| missing("lstm"))?),
        };
        let proj = Dense::bind(&params, "proj").ok_or_else(|| missing("proj"))?;
        let heads = match config.variant {
            FactorVariant::PlainRnn => Heads::Joint(
                Dense::bind(&params, "joint.hidden").ok_or_else(|| missing("joint.hidden"))?,
                Dense::bind(&params, "joint.out").ok_or_else(|| missing("joint.out"))?,
            ),
            _ => Heads::Multitask(
                (0..k)
                    .map(|j| {
                        let hid = format!("head{j}.hidden");
                        let out = format!("head{j}.out");
                        Ok((
                            Dense::bind(&params, &hid).ok_or_else(|| missing(&hid))?,
                            Dense::bind(&params, &out).ok_or_else(|| missing(&out))?,
                        ))
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let u_dim = covariate_dim + k;
        let (actual_in, expected_in, hidden) = match &core {
            Core::Lstm(c) => (c.input, u_dim + config.d_z, c.hidden),
            Core::Mlp(d) => (d.input, u_dim, d.output),
        };
        if params.get(init).len() != u_dim
            || actual_in != expected_in
            || hidden != config.hidden_units
            || proj.output != config.d_z
        {
            return Err(Error::config("parameter shapes do not match the configuration"));
        }
        Ok(Self {
            config,
            covariate_dim,
            k,
            x_mean,
            x_std,
            params,
            layout: Layout {
                init,
                core,
                proj,
                heads,
            },
        })
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    fn hidden(&self) -> usize {
        self.config.hidden_units
    }

    /// Width of the dropout-masked core input.
    pub(crate) fn core_input_dim(&self) -> usize {
        match self.layout.core {
            Core::Lstm(c) => c.input,
            Core::Mlp(d) => d.input,
        }
    }

    /// Dropout masks for a batch, one seed per row.
    pub fn draw_masks(&self, batch: &SeqBatch, row_seeds: &[u64]) -> BatchMasks {
        let rate = self.config.dropout;
        match self.layout.core {
            Core::Lstm(_) => {
                BatchMasks::per_sequence(batch, row_seeds, self.core_input_dim(), self.hidden(), rate)
            }
            Core::Mlp(_) => {
                BatchMasks::per_step(batch, row_seeds, self.core_input_dim(), self.hidden(), rate)
            }
        }
    }

    pub(crate) fn forward(
        &self,
        params: &ParamSet,
        batch: &SeqBatch,
        masks: Option<&BatchMasks>,
    ) -> Vec<StepCache> {
        let (dx, k, dz, h) = (self.covariate_dim, self.k, self.d_z(), self.hidden());
        let u_dim = dx + k;
        let mut steps: Vec<StepCache> = Vec::with_capacity(batch.t_max());
        for t in 0..batch.t_max() {
            let n = batch.active[t];
            let mut u = vec![0.0; n * u_dim];
            for r in 0..n {
                let row = &mut u[r * u_dim..(r + 1) * u_dim];
                if t == 0 {
                    row.copy_from_slice(params.get(self.layout.init).values());
                } else {
                    row[..dx].copy_from_slice(&batch.x[t - 1][r * dx..(r + 1) * dx]);
                    row[dx..].copy_from_slice(&batch.a[t - 1][r * k..(r + 1) * k]);
                }
            }
            let prev = steps.last();
            let (core_in, lstm, mlp_pre, hd) = match self.layout.core {
                Core::Lstm(cell) => {
                    let in_dim = cell.input;
                    let z_prev = take_rows(prev.map(|s| s.z.as_slice()), n, dz);
                    let mut inp = vec![0.0; n * in_dim];
                    for r in 0..n {
                        inp[r * in_dim..r * in_dim + u_dim].copy_from_slice(&u[r * u_dim..(r + 1) * u_dim]);
                        inp[r * in_dim + u_dim..(r + 1) * in_dim].copy_from_slice(&z_prev[r * dz..(r + 1) * dz]);
                    }
                    let prev_state = prev.and_then(|s| s.lstm.as_ref());
                    let mut h_prev = take_rows(prev_state.map(|s| s.h.as_slice()), n, h);
                    let c_prev = take_rows(prev_state.map(|s| s.c.as_slice()), n, h);
                    if let Some(m) = masks {
                        mul_rows(&mut inp, &m.input[..n * in_dim]);
                        mul_rows(&mut h_prev, &m.recurrent[..n * h]);
                    }
                    let step = cell.forward(params, &inp, &h_prev, &c_prev, n);
                    let mut hd = step.h.clone();
                    if let Some(m) = masks {
                        mul_rows(&mut hd, &m.output[..n * h]);
                    }
                    (Vec::new(), Some(step), Vec::new(), hd)
                }
                Core::Mlp(layer) => {
                    let mut inp = u;
                    if let Some(m) = masks {
                        mul_rows(&mut inp, &m.step_input[t]);
                    }
                    let mut pre = vec![0.0; n * h];
                    layer.forward(params, &inp, n, &mut pre);
                    let mut hd: Vec<f64> = pre.iter().map(|&v| elu(v)).collect();
                    if let Some(m) = masks {
                        mul_rows(&mut hd, &m.step_output[t]);
                    }
                    (inp, None, pre, hd)
                }
            };
            let mut z = vec![0.0; n * dz];
            self.layout.proj.forward(params, &hd, n, &mut z);
            z.iter_mut().for_each(|v| *v = v.tanh());

            let hw = dx + dz;
            let mut head_in = vec![0.0; n * hw];
            for r in 0..n {
                head_in[r * hw..r * hw + dx].copy_from_slice(&batch.x[t][r * dx..(r + 1) * dx]);
                head_in[r * hw + dx..(r + 1) * hw].copy_from_slice(&z[r * dz..(r + 1) * dz]);
            }
            let f = self.config.head_units;
            let mut logits = vec![0.0; n * k];
            let mut head_pre = Vec::new();
            let mut head_act = Vec::new();
            match &self.layout.heads {
                Heads::Multitask(heads) => {
                    let mut out = vec![0.0; n];
                    for (j, (hid, outl)) in heads.iter().enumerate() {
                        let mut pre = vec![0.0; n * f];
                        hid.forward(params, &head_in, n, &mut pre);
                        let act: Vec<f64> = pre.iter().map(|&v| elu(v)).collect();
                        outl.forward(params, &act, n, &mut out);
                        for r in 0..n {
                            logits[r * k + j] = out[r];
                        }
                        head_pre.push(pre);
                        head_act.push(act);
                    }
                }
                Heads::Joint(hid, outl) => {
                    let mut pre = vec![0.0; n * f];
                    hid.forward(params, &head_in, n, &mut pre);
                    let act: Vec<f64> = pre.iter().map(|&v| elu(v)).collect();
                    outl.forward(params, &act, n, &mut logits);
                    head_pre.push(pre);
                    head_act.push(act);
                }
            }
            steps.push(StepCache {
                n,
                core_in,
                lstm,
                mlp_pre,
                hd,
                z,
                head_in,
                head_pre,
                head_act,
                logits,
            });
        }
        steps
    }

    /// Backpropagates per-step logit gradients (`active[t] × k` each).
    pub(crate) fn backward(
        &self,
        params: &ParamSet,
        steps: &[StepCache],
        dlogits: &[Vec<f64>],
        masks: Option<&BatchMasks>,
    ) -> ParamSet {
        let (dx, k, dz, h) = (self.covariate_dim, self.k, self.d_z(), self.hidden());
        let u_dim = dx + k;
        let f = self.config.head_units;
        let hw = dx + dz;
        let mut grads = params.zeros_like();
        let mut carry_dz: Vec<f64> = Vec::new();
        let mut carry_dh: Vec<f64> = Vec::new();
        let mut carry_dc: Vec<f64> = Vec::new();
        for (t, step) in steps.iter().enumerate().rev() {
            let n = step.n;
            let dlog = &dlogits[t];
            let mut dhead_in = vec![0.0; n * hw];
            let mut tmp = vec![0.0; n * hw];
            match &self.layout.heads {
                Heads::Multitask(heads) => {
                    let mut dcol = vec![0.0; n];
                    let mut dact = vec![0.0; n * f];
                    for (j, (hid, outl)) in heads.iter().enumerate() {
                        for r in 0..n {
                            dcol[r] = dlog[r * k + j];
                        }
                        outl.backward(params, &mut grads, &step.head_act[j], &dcol, n, Some(&mut dact));
                        for (d, &p) in dact.iter_mut().zip(&step.head_pre[j]) {
                            *d *= elu_grad(p);
                        }
                        hid.backward(params, &mut grads, &step.head_in, &dact, n, Some(&mut tmp));
                        for (acc, v) in dhead_in.iter_mut().zip(&tmp) {
                            *acc += v;
                        }
                    }
                }
                Heads::Joint(hid, outl) => {
                    let mut dact = vec![0.0; n * f];
                    outl.backward(params, &mut grads, &step.head_act[0], dlog, n, Some(&mut dact));
                    for (d, &p) in dact.iter_mut().zip(&step.head_pre[0]) {
                        *d *= elu_grad(p);
                    }
                    hid.backward(params, &mut grads, &step.head_in, &dact, n, Some(&mut dhead_in));
                }
            }
            let mut dzpre = take_rows(Some(&carry_dz), n, dz);
            for r in 0..n {
                for c in 0..dz {
                    let zv = step.z[r * dz + c];
                    let d = &mut dzpre[r * dz + c];
                    *d = (*d + dhead_in[r * hw + dx + c]) * (1.0 - zv * zv);
                }
            }
            let mut dhd = vec![0.0; n * h];
            self.layout.proj.backward(params, &mut grads, &step.hd, &dzpre, n, Some(&mut dhd));
            match self.layout.core {
                Core::Lstm(cell) => {
                    let in_dim = cell.input;
                    if let Some(m) = masks {
                        mul_rows(&mut dhd, &m.output[..n * h]);
                    }
                    let carried = take_rows(Some(&carry_dh), n, h);
                    for (d, c) in dhd.iter_mut().zip(&carried) {
                        *d += c;
                    }
                    let dc = take_rows(Some(&carry_dc), n, h);
                    let lstm_step = step.lstm.as_ref().expect("recurrent step cache");
                    let (mut dinp, mut dh_prev, dc_prev) =
                        cell.backward(params, &mut grads, lstm_step, &dhd, &dc, n);
                    if let Some(m) = masks {
                        mul_rows(&mut dinp, &m.input[..n * in_dim]);
                        mul_rows(&mut dh_prev, &m.recurrent[..n * h]);
                    }
                    carry_dz = (0..n)
                        .flat_map(|r| dinp[r * in_dim + u_dim..(r + 1) * in_dim].iter().copied())
                        .collect();
                    carry_dh = dh_prev;
                    carry_dc = dc_prev;
                    if t == 0 {
                        let dl = grads.get_mut(self.layout.init).values_mut();
                        for r in 0..n {
                            for (acc, v) in dl.iter_mut().zip(&dinp[r * in_dim..r * in_dim + u_dim]) {
                                *acc += v;
                            }
                        }
                    }
                }
                Core::Mlp(layer) => {
                    if let Some(m) = masks {
                        mul_rows(&mut dhd, &m.step_output[t]);
                    }
                    for (d, &p) in dhd.iter_mut().zip(&step.mlp_pre) {
                        *d *= elu_grad(p);
                    }
                    if t == 0 {
                        let mut dinp = vec![0.0; n * u_dim];
                        layer.backward(params, &mut grads, &step.core_in, &dhd, n, Some(&mut dinp));
                        if let Some(m) = masks {
                            mul_rows(&mut dinp, &m.step_input[0]);
                        }
                        let dl = grads.get_mut(self.layout.init).values_mut();
                        for r in 0..n {
                            for (acc, v) in dl.iter_mut().zip(&dinp[r * u_dim..(r + 1) * u_dim]) {
                                *acc += v;
                            }
                        }
                    } else {
                        layer.backward(params, &mut grads, &step.core_in, &dhd, n, None);
                    }
                }
            }
        }
        grads
    }

    /// Mean binary cross-entropy over active (step, treatment) pairs.
    pub fn loss(&self, params: &ParamSet, batch: &SeqBatch, masks: Option<&BatchMasks>) -> f64 {
        let steps = self.forward(params, batch, masks);
        let (sum, count) = bce_sum(&steps, batch);
        sum / count
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        params: &ParamSet,
        batch: &SeqBatch,
        masks: Option<&BatchMasks>,
    ) -> (f64, ParamSet) {
        let steps = self.forward(params, batch, masks);
        let count = (batch.num_steps() * self.k) as f64;
        let mut sum = 0.0;
        let dlogits: Vec<Vec<f64>> = steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                s.logits
                    .iter()
                    .zip(&batch.a[t])
                    .map(|(&z, &a)| {
                        let (l, g) = bce_with_logit(z, a);
                        sum += l;
                        g / count
                    })
                    .collect()
            })
            .collect();
        let grads = self.backward(params, &steps, &dlogits, masks);
        (sum / count, grads)
    }

    /// Rebuilds the parameter layout after `params` was replaced wholesale.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        self.params.check_congruent(&params)?;
        let mut out = self.clone();
        out.params = params;
        Ok(out)
    }
}

fn bce_sum(steps: &[StepCache], batch: &SeqBatch) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, s) in steps.iter().enumerate() {
        for (&z, &a) in s.logits.iter().zip(&batch.a[t]) {
            sum += bce_with_logit(z, a).0;
            count += 1;
        }
    }
    (sum, count as f64)
}

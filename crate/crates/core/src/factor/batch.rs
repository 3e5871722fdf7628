use crate::data::PatientTrajectory;
use crate::numerics::RngStream;
use crate::nn::dropout_mask;

/// Step-major view of a set of sequences, rows sorted by decreasing length
/// so that the rows active at step `t` are always a prefix.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    /// Row `r` holds input sequence `order[r]`.
    pub order: Vec<usize>,
    pub lengths: Vec<usize>,
    /// `active[t]`: rows with length > t.
    pub active: Vec<usize>,
    pub dx: usize,
    pub k: usize,
    /// Per step, `active[t] × dx` standardized covariates.
    pub x: Vec<Vec<f64>>,
    /// Per step, `active[t] × k` treatments.
    pub a: Vec<Vec<f64>>,
}

impl SeqBatch {
    pub fn new(patients: &[&PatientTrajectory], x_mean: &[f64], x_std: &[f64], k: usize) -> Self {
        let dx = x_mean.len();
        let mut order: Vec<usize> = (0..patients.len()).collect();
        order.sort_by(|&i, &j| patients[j].len().cmp(&patients[i].len()).then(i.cmp(&j)));
        let lengths: Vec<usize> = order.iter().map(|&i| patients[i].len()).collect();
        let t_max = lengths.first().copied().unwrap_or(0);
        let active: Vec<usize> = (0..t_max)
            .map(|t| lengths.iter().take_while(|&&l| l > t).count())
            .collect();
        let mut x = Vec::with_capacity(t_max);
        let mut a = Vec::with_capacity(t_max);
        for (t, &n) in active.iter().enumerate() {
            let mut xt = Vec::with_capacity(n * dx);
            let mut at = Vec::with_capacity(n * k);
            for &i in &order[..n] {
                let p = patients[i];
                xt.extend((0..dx).map(|j| (p.x[t][j] - x_mean[j]) / x_std[j]));
                at.extend(p.a[t].iter().map(|&v| f64::from(v)));
            }
            x.push(xt);
            a.push(at);
        }
        Self {
            order,
            lengths,
            active,
            dx,
            k,
            x,
            a,
        }
    }

    pub fn rows(&self) -> usize {
        self.order.len()
    }

    pub fn t_max(&self) -> usize {
        self.active.len()
    }

    pub fn num_steps(&self) -> usize {
        self.active.iter().sum()
    }
}

/// Dropout masks for one batch. Each row's masks come from its own seed so a
/// sequence gets the same masks whatever batch it lands in.
#[derive(Clone, Debug, Default)]
pub struct BatchMasks {
    /// Recurrent variants: `rows × dim` masks shared by all steps.
    pub input: Vec<f64>,
    pub recurrent: Vec<f64>,
    pub output: Vec<f64>,
    /// Feed-forward variant: per step `active[t] × dim` masks.
    pub step_input: Vec<Vec<f64>>,
    pub step_output: Vec<Vec<f64>>,
}

impl BatchMasks {
    pub(crate) fn per_sequence(
        batch: &SeqBatch,
        row_seeds: &[u64],
        input_dim: usize,
        hidden: usize,
        rate: f64,
    ) -> Self {
        let mut masks = Self::default();
        for &seed in row_seeds {
            let mut rng = RngStream::new(seed);
            masks.input.extend(dropout_mask(&mut rng, input_dim, rate));
            masks.recurrent.extend(dropout_mask(&mut rng, hidden, rate));
            masks.output.extend(dropout_mask(&mut rng, hidden, rate));
        }
        debug_assert_eq!(row_seeds.len(), batch.rows());
        masks
    }

    pub(crate) fn per_step(
        batch: &SeqBatch,
        row_seeds: &[u64],
        input_dim: usize,
        hidden: usize,
        rate: f64,
    ) -> Self {
        let mut masks = Self {
            step_input: batch.active.iter().map(|&n| Vec::with_capacity(n * input_dim)).collect(),
            step_output: batch.active.iter().map(|&n| Vec::with_capacity(n * hidden)).collect(),
            ..Self::default()
        };
        // Rows are appended in row order at every step, so drawing row by row
        // keeps each row's sequence of draws independent of the batch.
        let per_row: Vec<Vec<(Vec<f64>, Vec<f64>)>> = row_seeds
            .iter()
            .zip(&batch.lengths)
            .map(|(&seed, &len)| {
                let mut rng = RngStream::new(seed);
                (0..len)
                    .map(|_| {
                        let i = dropout_mask(&mut rng, input_dim, rate);
                        let o = dropout_mask(&mut rng, hidden, rate);
                        (i, o)
                    })
                    .collect()
            })
            .collect();
        for (t, &n) in batch.active.iter().enumerate() {
            for row in per_row.iter().take(n) {
                masks.step_input[t].extend_from_slice(&row[t].0);
                masks.step_output[t].extend_from_slice(&row[t].1);
            }
        }
        masks
    }
}

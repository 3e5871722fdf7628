use serde::{Deserialize, Serialize};

use super::model::FactorModel;
use super::train::EVAL_CHUNK;
use crate::data::{Dataset, PatientTrajectory};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, sigmoid, RngStream};

/// Per-patient `T × d` arrays.
pub type Track = Vec<Vec<f64>>;

/// Monte-Carlo draws of the substitute confounder for every patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstituteSamples {
    /// `draws[s][i]` is draw `s` for patient `i`, shape `T_i × D_Z`.
    pub draws: Vec<Vec<Track>>,
    /// Seed from which draw `s` derived its per-patient dropout masks.
    pub mask_seeds: Vec<u64>,
}

impl SubstituteSamples {
    pub fn num_draws(&self) -> usize {
        self.draws.len()
    }

    /// Average over draws, per patient and step.
    pub fn mean(&self) -> Vec<Track> {
        let s = self.draws.len() as f64;
        let mut out = self.draws[0].clone();
        for draw in &self.draws[1..] {
            for (acc_p, p) in out.iter_mut().zip(draw) {
                for (acc_t, zt) in acc_p.iter_mut().zip(p) {
                    for (a, v) in acc_t.iter_mut().zip(zt) {
                        *a += v;
                    }
                }
            }
        }
        for v in out.iter_mut().flatten().flatten() {
            *v /= s;
        }
        out
    }
}

/// Substitutes and treatment probabilities for one pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    pub z: Vec<Track>,
    pub probs: Vec<Track>,
}

impl FactorModel {
    /// Runs every patient through the model. With `draw_seed = Some(s)`,
    /// patient `i` uses dropout masks seeded by `derive_seed(s, "patient", i)`;
    /// with `None` dropout is off.
    pub fn forward_dataset(&self, patients: &[PatientTrajectory], draw_seed: Option<u64>) -> ForwardPass {
        let dz = self.d_z();
        let k = self.k;
        let mut z = vec![Vec::new(); patients.len()];
        let mut probs = vec![Vec::new(); patients.len()];
        let use_dropout = self.config.dropout > 0.0;
        for (c, chunk) in patients.chunks(EVAL_CHUNK).enumerate() {
            let offset = c * EVAL_CHUNK;
            let refs: Vec<&PatientTrajectory> = chunk.iter().collect();
            let batch = self.batch_of(&refs);
            let masks = draw_seed.filter(|_| use_dropout).map(|s| {
                let seeds: Vec<u64> = batch
                    .order
                    .iter()
                    .map(|&r| derive_seed(s, "patient", (offset + r) as u64))
                    .collect();
                self.draw_masks(&batch, &seeds)
            });
            let steps = self.forward(&self.params, &batch, masks.as_ref());
            for (r, &i) in batch.order.iter().enumerate() {
                let len = batch.lengths[r];
                z[offset + i] = (0..len).map(|t| steps[t].z[r * dz..(r + 1) * dz].to_vec()).collect();
                probs[offset + i] = (0..len)
                    .map(|t| steps[t].logits[r * k..(r + 1) * k].iter().map(|&l| sigmoid(l)).collect())
                    .collect();
            }
        }
        ForwardPass { z, probs }
    }

    fn forward_single(&self, trajectory: &PatientTrajectory, mask_seed: u64) -> Result<ForwardPass> {
        if trajectory.is_empty() {
            return Err(Error::InvalidInput("cannot infer substitutes for an empty trajectory".into()));
        }
        let batch = self.batch_of(&[trajectory]);
        let masks = (self.config.dropout > 0.0).then(|| self.draw_masks(&batch, &[mask_seed]));
        let steps = self.forward(&self.params, &batch, masks.as_ref());
        Ok(ForwardPass {
            z: vec![steps.iter().map(|s| s.z.clone()).collect()],
            probs: vec![steps
                .iter()
                .map(|s| s.logits.iter().map(|&l| sigmoid(l)).collect())
                .collect()],
        })
    }
}

/// One Monte-Carlo draw of the substitute confounders (`T × D_Z`).
pub fn forward_infer_z(model: &FactorModel, trajectory: &PatientTrajectory, mask_seed: u64) -> Result<Track> {
    Ok(model.forward_single(trajectory, mask_seed)?.z.remove(0))
}

/// `probs[t][j] = σ(head_j(x_t, z_t))` for one dropout draw.
pub fn predict_treatment_probs(
    model: &FactorModel,
    trajectory: &PatientTrajectory,
    mask_seed: u64,
) -> Result<Track> {
    Ok(model.forward_single(trajectory, mask_seed)?.probs.remove(0))
}

/// `samples` independent dropout draws of the substitutes for every patient.
pub fn infer_substitutes(model: &FactorModel, ds: &Dataset, samples: usize, seed: u64) -> Result<SubstituteSamples> {
    if samples == 0 {
        return Err(Error::config("need at least one Monte-Carlo draw"));
    }
    let mask_seeds: Vec<u64> = (0..samples as u64).map(|s| derive_seed(seed, "mc", s)).collect();
    let draws = mask_seeds
        .iter()
        .map(|&s| model.forward_dataset(&ds.patients, Some(s)).z)
        .collect();
    Ok(SubstituteSamples { draws, mask_seeds })
}

/// Treatment replicas: each replica takes a fresh dropout draw and then
/// samples every `a_{tj}` from the predicted probabilities.
/// Indexed `[replica][patient][t][j]`.
pub fn sample_treatment_replicas(
    model: &FactorModel,
    ds: &Dataset,
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<Vec<u8>>>>> {
    if m == 0 {
        return Err(Error::config("need at least one replica"));
    }
    Ok((0..m as u64)
        .map(|r| {
            let pass = model.forward_dataset(&ds.patients, Some(derive_seed(seed, "replica-dropout", r)));
            let mut rng = RngStream::new(derive_seed(seed, "replica-draw", r));
            sample_from_probs(&pass.probs, &mut rng)
        })
        .collect())
}

pub(crate) fn sample_from_probs(probs: &[Track], rng: &mut RngStream) -> Vec<Vec<Vec<u8>>> {
    probs
        .iter()
        .map(|p| {
            p.iter()
                .map(|row| row.iter().map(|&q| u8::from(rng.bernoulli(q))).collect())
                .collect()
        })
        .collect()
}

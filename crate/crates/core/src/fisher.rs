//! Diagonal Fisher information of a trained model, averaged over source inputs.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::checkpoint::{decode_fisher, encode_checkpoint, encode_fisher, write_atomic};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::Network;

/// Examples per reduction chunk. Chunks are summed in index order, so the result does
/// not depend on how many threads ran them.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    /// One entry per shared parameter, in `ParamVector::shared_indices` order.
    pub values: Vec<f64>,
    pub sample_count: usize,
    pub source_checkpoint_id: String,
}

impl FisherDiag {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let m = u32::try_from(self.sample_count)
            .map_err(|_| Error::InvalidArgument(format!("sample count {} exceeds u32", self.sample_count)))?;
        write_atomic(path.as_ref(), &encode_fisher(&self.values, m))
    }

    /// Load a sidecar, checking its length against the shared part of `net`.
    pub fn load(path: impl AsRef<Path>, net: &Network) -> Result<Self> {
        let (values, m) = decode_fisher(&std::fs::read(path)?)?;
        let expected = net.params.shared_count();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "Fisher sidecar has {} entries, network has {expected} shared parameters",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Format("Fisher sidecar holds negative or non-finite entries".into()));
        }
        Ok(FisherDiag { values, sample_count: m as usize, source_checkpoint_id: checkpoint_id(net) })
    }
}

/// Short content hash of a network's checkpoint encoding.
pub fn checkpoint_id(net: &Network) -> String {
    let digest = Sha256::digest(encode_checkpoint(net));
    hex::encode(&digest[..8])
}

/// Default sample size: the whole source set, capped at 5000 examples.
pub fn default_sample_size(data: &Dataset) -> usize {
    data.len().min(5000)
}

/// Estimate `F_jj = (1/m) Σ_i Σ_k f_k(x_i) (∂ log f_k(x_i) / ∂w_j)²` over `m` inputs drawn
/// without replacement. The class sum is exact; classes with `f_k = 0` contribute nothing.
pub fn estimate_fisher_diag(net: &Network, data: &Dataset, m: usize, seed: u64) -> Result<FisherDiag> {
    if m == 0 {
        return Err(Error::InvalidArgument("Fisher sample size must be positive".into()));
    }
    if m > data.len() {
        return Err(Error::InsufficientData(format!(
            "Fisher sample size {m} exceeds dataset size {}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, data.len(), m).into_vec();
    indices.sort_unstable();
    fisher_on_indices(net, data, &indices)
}

/// Fisher diagonal averaged over exactly the listed examples.
pub fn fisher_on_indices(net: &Network, data: &Dataset, indices: &[usize]) -> Result<FisherDiag> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("Fisher sample size must be positive".into()));
    }
    if data.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "data shape {:?} does not match network input {:?}",
            data.shape(),
            net.input_shape()
        )));
    }
    let shared = net.params.shared_indices();
    let partials: Vec<Vec<f64>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; shared.len()];
            for &i in chunk {
                accumulate_example(net, data, i, &shared, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; shared.len()];
    for part in &partials {
        for (v, p) in values.iter_mut().zip(part) {
            *v += p;
        }
    }
    let m = indices.len() as f64;
    values.iter_mut().for_each(|v| *v /= m);
    Ok(FisherDiag { values, sample_count: indices.len(), source_checkpoint_id: checkpoint_id(net) })
}

fn accumulate_example(net: &Network, data: &Dataset, i: usize, shared: &[usize], acc: &mut [f64]) -> Result<()> {
    let x = data.images.gather(&[i]);
    let fwd = net.forward(&x)?;
    let probs = fwd.probs().item(0).to_vec();
    for (k, &p) in probs.iter().enumerate() {
        if p.is_nan() {
            return Err(Error::NonFinite(format!("class {k} probability")));
        }
        if p == 0.0 {
            continue;
        }
        let score = net.class_score(&fwd, k)?;
        for (a, &j) in acc.iter_mut().zip(shared) {
            *a += p * score[j] * score[j];
        }
    }
    Ok(())
}

/// Pearson correlation of two equally long samples; `None` when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Draw `2 * half` examples, estimate the Fisher diagonal on each disjoint half, and
/// return the correlation of the two estimates across entries.
pub fn split_half_correlation(net: &Network, data: &Dataset, half: usize, seed: u64) -> Result<f64> {
    if 2 * half > data.len() || half == 0 {
        return Err(Error::InsufficientData(format!(
            "need {} examples for two halves, have {}",
            2 * half,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, data.len(), 2 * half).into_vec();
    let (mut a, mut b) = (idx[..half].to_vec(), idx[half..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    let fa = fisher_on_indices(net, data, &a)?;
    let fb = fisher_on_indices(net, data, &b)?;
    pearson(&fa.values, &fb.values).ok_or_else(|| Error::InvalidArgument("Fisher estimate is constant".into()))
}

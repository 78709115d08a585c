//! The regularizer family: plain L², and the starting-point penalties that pull the
//! shared parameters toward the pre-trained reference `w⁰`.
//!
//! Every kind shares the same smooth term `β/2 ‖w_S̄‖²` on the fresh part. On the
//! shared part:
//!
//! | kind          | term on S                                         |
//! |---------------|---------------------------------------------------|
//! | `L2`          | `α/2 ‖w_S‖²`                                      |
//! | `L2SP`        | `α/2 ‖w_S − w⁰_S‖²`                               |
//! | `L2SP_FISHER` | `α/2 Σ_j F_jj (w_j − w⁰_j)²`                      |
//! | `L1SP`        | `α ‖w_S − w⁰_S‖₁`                                 |
//! | `GLSP`        | `α Σ_g s_g ‖w_g − w⁰_g‖`                          |
//! | `GLSP_FISHER` | `α Σ_g s_g (Σ_{j∈g} F_jj (w_j − w⁰_j)²)^{1/2}`    |
//!
//! The nonsmooth kinds are optimized either through an ε-smoothed surrogate
//! (`|x| → sqrt(x² + ε²)`, `‖v‖ → sqrt(‖v‖² + ε²)`) or through their proximal map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Network, ParamVector};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PenaltyKind {
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "L2SP")]
    L2Sp,
    #[serde(rename = "L2SP_FISHER")]
    L2SpFisher,
    #[serde(rename = "L1SP")]
    L1Sp,
    #[serde(rename = "GLSP")]
    GlSp,
    #[serde(rename = "GLSP_FISHER")]
    GlSpFisher,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 6] = [
        PenaltyKind::L2,
        PenaltyKind::L2Sp,
        PenaltyKind::L2SpFisher,
        PenaltyKind::L1Sp,
        PenaltyKind::GlSp,
        PenaltyKind::GlSpFisher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::L2 => "L2",
            PenaltyKind::L2Sp => "L2SP",
            PenaltyKind::L2SpFisher => "L2SP_FISHER",
            PenaltyKind::L1Sp => "L1SP",
            PenaltyKind::GlSp => "GLSP",
            PenaltyKind::GlSpFisher => "GLSP_FISHER",
        }
    }

    pub fn needs_reference(self) -> bool {
        self != PenaltyKind::L2
    }

    pub fn needs_fisher(self) -> bool {
        matches!(self, PenaltyKind::L2SpFisher | PenaltyKind::GlSpFisher)
    }

    pub fn needs_groups(self) -> bool {
        matches!(self, PenaltyKind::GlSp | PenaltyKind::GlSpFisher)
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, PenaltyKind::L2 | PenaltyKind::L2Sp | PenaltyKind::L2SpFisher)
    }

    pub fn has_prox(self) -> bool {
        matches!(self, PenaltyKind::L1Sp | PenaltyKind::GlSp)
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PenaltyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Penalty(format!("unknown penalty kind {s:?}")))
    }
}

/// A partition of the shared parameter indices into groups with per-group weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStructure {
    /// Flat parameter indices of each group.
    pub groups: Vec<Vec<usize>>,
    /// `s_g`, defaulting to `sqrt(p_g)`.
    pub weights: Vec<f64>,
    /// `(layer index, output channel)` each group came from.
    pub provenance: Vec<(usize, usize)>,
}

impl GroupStructure {
    /// Groups with the default weights `s_g = sqrt(p_g)`.
    pub fn new(groups: Vec<Vec<usize>>, provenance: Vec<(usize, usize)>) -> Result<Self> {
        let weights = groups.iter().map(|g| (g.len() as f64).sqrt()).collect();
        Self::with_weights(groups, weights, provenance)
    }

    pub fn with_weights(groups: Vec<Vec<usize>>, weights: Vec<f64>, provenance: Vec<(usize, usize)>) -> Result<Self> {
        if groups.len() != weights.len() || groups.len() != provenance.len() {
            return Err(Error::Penalty("group, weight and provenance counts differ".into()));
        }
        if groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Penalty("empty group".into()));
        }
        if weights.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Penalty("group weights must be positive and finite".into()));
        }
        Ok(Self { groups, weights, provenance })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Check that the groups partition exactly the shared indices of `w`.
    pub fn validate_partition(&self, w: &ParamVector) -> Result<()> {
        let mut seen = vec![false; w.len()];
        for g in &self.groups {
            for &j in g {
                if j >= w.len() || !w.shared[j] {
                    return Err(Error::Penalty(format!("group index {j} is not a shared parameter")));
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(Error::Penalty(format!("parameter {j} belongs to two groups")));
                }
            }
        }
        if seen.iter().zip(&w.shared).any(|(&s, &sh)| sh && !s) {
            return Err(Error::Penalty("groups do not cover every shared parameter".into()));
        }
        Ok(())
    }
}

/// One group per output channel (conv) or output unit (FC) of every shared layer.
/// Each group holds the unit's fan-in weights and its bias.
pub fn build_channel_groups(net: &Network) -> Result<GroupStructure> {
    let mut groups = Vec::new();
    let mut provenance = Vec::new();
    for slice in net.params.layout.iter().filter(|s| net.params.shared[s.offset]) {
        for c in 0..slice.out_channels {
            groups.push(slice.channel_indices(c));
            provenance.push((slice.layer, c));
        }
    }
    if groups.is_empty() {
        return Err(Error::Penalty("network has no shared parameterized layer".into()));
    }
    GroupStructure::new(groups, provenance)
}

/// A fully specified regularizer for one parameter layout.
///
/// Reference and Fisher values are supplied over the shared part (length `|S|`,
/// in index order) and stored expanded to the full parameter length.
#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    shared: Vec<bool>,
    reference: Option<Vec<f64>>,
    fisher: Option<Vec<f64>>,
    groups: Option<GroupStructure>,
}

impl PenaltyConfig {
    pub fn builder(kind: PenaltyKind, alpha: f64, beta: f64) -> PenaltyBuilder {
        PenaltyBuilder {
            kind,
            alpha,
            beta,
            epsilon: DEFAULT_EPSILON,
            reference: None,
            fisher: None,
            groups: None,
        }
    }

    /// No regularization at all.
    pub fn none(w: &ParamVector) -> Self {
        PenaltyConfig::builder(PenaltyKind::L2, 0.0, 0.0).build(w).expect("plain L2 needs nothing")
    }

    pub fn groups(&self) -> Option<&GroupStructure> {
        self.groups.as_ref()
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }

    fn check(&self, w: &ParamVector) -> Result<()> {
        if w.shared != self.shared {
            return Err(Error::Penalty("parameter layout differs from the one the penalty was built for".into()));
        }
        Ok(())
    }

    fn reference_at(&self, j: usize) -> f64 {
        self.reference.as_ref().map_or(0.0, |r| r[j])
    }

    fn fisher(&self) -> &[f64] {
        self.fisher.as_deref().expect("validated at build")
    }

    fn group_list(&self) -> &GroupStructure {
        self.groups.as_ref().expect("validated at build")
    }

    /// Squared (Fisher-weighted for the Fisher kind) distance of a group to its reference.
    fn group_sq(&self, w: &[f64], group: &[usize], weighted: bool) -> f64 {
        group
            .iter()
            .map(|&j| {
                let d = w[j] - self.reference_at(j);
                if weighted {
                    self.fisher()[j] * d * d
                } else {
                    d * d
                }
            })
            .sum()
    }

    fn fresh_value(&self, w: &[f64]) -> f64 {
        let sq: f64 = w.iter().zip(&self.shared).filter(|(_, &s)| !s).map(|(v, _)| v * v).sum();
        0.5 * self.beta * sq
    }

    fn shared_value(&self, w: &[f64], eps: Option<f64>) -> f64 {
        let abs = |x: f64| match eps {
            Some(e) => (x * x + e * e).sqrt(),
            None => x.abs(),
        };
        let norm = |sq: f64| match eps {
            Some(e) => (sq + e * e).sqrt(),
            None => sq.sqrt(),
        };
        let shared = || (0..w.len()).filter(|&j| self.shared[j]);
        match self.kind {
            PenaltyKind::L2 => 0.5 * self.alpha * shared().map(|j| w[j] * w[j]).sum::<f64>(),
            PenaltyKind::L2Sp => {
                0.5 * self.alpha * shared().map(|j| (w[j] - self.reference_at(j)).powi(2)).sum::<f64>()
            }
            PenaltyKind::L2SpFisher => {
                let f = self.fisher();
                0.5 * self.alpha * shared().map(|j| f[j] * (w[j] - self.reference_at(j)).powi(2)).sum::<f64>()
            }
            PenaltyKind::L1Sp => self.alpha * shared().map(|j| abs(w[j] - self.reference_at(j))).sum::<f64>(),
            PenaltyKind::GlSp | PenaltyKind::GlSpFisher => {
                let weighted = self.kind == PenaltyKind::GlSpFisher;
                let gs = self.group_list();
                self.alpha
                    * gs.groups
                        .iter()
                        .zip(&gs.weights)
                        .map(|(g, &s)| s * norm(self.group_sq(w, g, weighted)))
                        .sum::<f64>()
            }
        }
    }

    /// Exact (unsmoothed) penalty value.
    pub fn value(&self, w: &ParamVector) -> Result<f64> {
        self.check(w)?;
        Ok(self.shared_value(&w.values, None) + self.fresh_value(&w.values))
    }

    /// Value of the ε-smoothed surrogate whose gradient [`Self::gradient`] returns.
    /// Equal to [`Self::value`] for the smooth kinds.
    pub fn surrogate_value(&self, w: &ParamVector) -> Result<f64> {
        self.check(w)?;
        let eps = (!self.kind.is_smooth()).then_some(self.epsilon);
        Ok(self.shared_value(&w.values, eps) + self.fresh_value(&w.values))
    }

    /// Gradient of the surrogate (exact gradient for the smooth kinds).
    pub fn gradient(&self, w: &ParamVector) -> Result<Vec<f64>> {
        let mut g = vec![0.0; w.len()];
        self.add_gradient(w, &mut g)?;
        Ok(g)
    }

    /// Accumulate the surrogate gradient into `out`.
    pub fn add_gradient(&self, w: &ParamVector, out: &mut [f64]) -> Result<()> {
        self.check(w)?;
        self.add_fresh_gradient(w, out);
        let v = &w.values;
        let (a, eps) = (self.alpha, self.epsilon);
        if a == 0.0 {
            return Ok(());
        }
        match self.kind {
            PenaltyKind::L2 | PenaltyKind::L2Sp | PenaltyKind::L2SpFisher | PenaltyKind::L1Sp => {
                for j in (0..v.len()).filter(|&j| self.shared[j]) {
                    let d = v[j] - self.reference_at(j);
                    out[j] += match self.kind {
                        PenaltyKind::L2 => a * v[j],
                        PenaltyKind::L2Sp => a * d,
                        PenaltyKind::L2SpFisher => a * self.fisher()[j] * d,
                        _ => a * d / (d * d + eps * eps).sqrt(),
                    };
                }
            }
            PenaltyKind::GlSp | PenaltyKind::GlSpFisher => {
                let weighted = self.kind == PenaltyKind::GlSpFisher;
                let gs = self.group_list();
                for (g, &s) in gs.groups.iter().zip(&gs.weights) {
                    let scale = a * s / (self.group_sq(v, g, weighted) + eps * eps).sqrt();
                    for &j in g {
                        let d = v[j] - self.reference_at(j);
                        out[j] += if weighted { scale * self.fisher()[j] * d } else { scale * d };
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of the `β/2 ‖w_S̄‖²` term alone, accumulated into `out`.
    pub fn add_fresh_gradient(&self, w: &ParamVector, out: &mut [f64]) {
        if self.beta == 0.0 {
            return;
        }
        for j in (0..w.len()).filter(|&j| !self.shared[j]) {
            out[j] += self.beta * w.values[j];
        }
    }

    /// Proximal map of the nonsmooth shared-part term with step `eta`:
    /// `argmin_u (1/2η)‖u − w‖² + Ω_S(u)`. The fresh part is returned unchanged.
    pub fn prox_step(&self, w: &ParamVector, eta: f64) -> Result<ParamVector> {
        let mut out = w.clone();
        self.prox_in_place(&mut out, eta)?;
        Ok(out)
    }

    pub fn prox_in_place(&self, w: &mut ParamVector, eta: f64) -> Result<()> {
        self.check(w)?;
        if !self.kind.has_prox() {
            return Err(Error::Penalty(format!("{} has no closed-form proximal map", self.kind)));
        }
        if !(eta > 0.0) {
            return Err(Error::InvalidArgument(format!("prox step must be positive, got {eta}")));
        }
        let t = eta * self.alpha;
        if t == 0.0 {
            return Ok(());
        }
        match self.kind {
            PenaltyKind::L1Sp => {
                for j in 0..w.len() {
                    if !self.shared[j] {
                        continue;
                    }
                    let r = self.reference_at(j);
                    let d = w.values[j] - r;
                    w.values[j] = r + d.signum() * (d.abs() - t).max(0.0);
                }
            }
            PenaltyKind::GlSp => {
                let gs = self.group_list();
                for (g, &s) in gs.groups.iter().zip(&gs.weights) {
                    let norm = self.group_sq(&w.values, g, false).sqrt();
                    let shrink = if norm == 0.0 { 0.0 } else { (1.0 - t * s / norm).max(0.0) };
                    for &j in g {
                        let r = self.reference_at(j);
                        w.values[j] = r + shrink * (w.values[j] - r);
                    }
                }
            }
            _ => unreachable!("checked above"),
        }
        Ok(())
    }
}

/// Incremental construction of a [`PenaltyConfig`], validated against a parameter layout.
#[derive(Debug, Clone)]
pub struct PenaltyBuilder {
    kind: PenaltyKind,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    reference: Option<Vec<f64>>,
    fisher: Option<Vec<f64>>,
    groups: Option<GroupStructure>,
}

impl PenaltyBuilder {
    /// Reference values over the shared part.
    pub fn reference(mut self, w0_shared: Vec<f64>) -> Self {
        self.reference = Some(w0_shared);
        self
    }

    /// Fisher diagonal over the shared part.
    pub fn fisher(mut self, fisher_shared: Vec<f64>) -> Self {
        self.fisher = Some(fisher_shared);
        self
    }

    pub fn groups(mut self, groups: GroupStructure) -> Self {
        self.groups = Some(groups);
        self
    }

    pub fn epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn build(self, w: &ParamVector) -> Result<PenaltyConfig> {
        let kind = self.kind;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Penalty(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Penalty(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let shared_idx = w.shared_indices();
        let expand = |what: &str, vals: Vec<f64>| -> Result<Vec<f64>> {
            if vals.len() != shared_idx.len() {
                return Err(Error::Penalty(format!(
                    "{what} has length {}, shared part has {}",
                    vals.len(),
                    shared_idx.len()
                )));
            }
            let mut full = vec![0.0; w.len()];
            for (&j, v) in shared_idx.iter().zip(vals) {
                full[j] = v;
            }
            Ok(full)
        };
        let reference = match (kind.needs_reference(), self.reference) {
            (true, None) => return Err(Error::Penalty(format!("{kind} requires a reference point"))),
            (true, Some(r)) => Some(expand("reference", r)?),
            (false, _) => None,
        };
        let fisher = match (kind.needs_fisher(), self.fisher) {
            (true, None) => return Err(Error::Penalty(format!("{kind} requires a Fisher diagonal"))),
            (true, Some(f)) => {
                if f.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                    return Err(Error::Penalty("Fisher entries must be finite and nonnegative".into()));
                }
                Some(expand("fisher diagonal", f)?)
            }
            (false, _) => None,
        };
        let groups = match (kind.needs_groups(), self.groups) {
            (true, None) => return Err(Error::Penalty(format!("{kind} requires a group structure"))),
            (true, Some(g)) => {
                g.validate_partition(w)?;
                Some(g)
            }
            (false, _) => None,
        };
        Ok(PenaltyConfig {
            kind,
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
            shared: w.shared.clone(),
            reference,
            fisher,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{desknet, LayerSpec, Shape3};

    /// Flat vector whose first `shared` entries are the shared part.
    fn pv(values: Vec<f64>, shared: usize) -> ParamVector {
        let n = values.len();
        ParamVector { values, layout: Vec::new(), shared: (0..n).map(|j| j < shared).collect() }
    }

    fn singleton_groups(n: usize) -> GroupStructure {
        GroupStructure::new((0..n).map(|j| vec![j]).collect(), (0..n).map(|j| (0, j)).collect()).unwrap()
    }

    #[test]
    fn l2sp_is_zero_at_reference() {
        let w = pv(vec![0.3, -1.0, 0.0, 0.0], 2);
        let cfg = PenaltyConfig::builder(PenaltyKind::L2Sp, 1.0, 1.0).reference(vec![0.3, -1.0]).build(&w).unwrap();
        assert_eq!(cfg.value(&w).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_values() {
        let w = pv(vec![1.0, 2.0], 2);
        let l2sp = PenaltyConfig::builder(PenaltyKind::L2Sp, 2.0, 0.0).reference(vec![1.0, 0.0]).build(&w).unwrap();
        assert_eq!(l2sp.value(&w).unwrap(), 4.0);

        let w = pv(vec![0.5, -1.5], 2);
        let l1 = PenaltyConfig::builder(PenaltyKind::L1Sp, 1.0, 0.0).reference(vec![0.0, 0.0]).build(&w).unwrap();
        assert_eq!(l1.value(&w).unwrap(), 2.0);

        let w = pv(vec![1.0; 4], 4);
        let groups = GroupStructure::with_weights(vec![vec![0, 1, 2, 3]], vec![2.0], vec![(0, 0)]).unwrap();
        let gl = PenaltyConfig::builder(PenaltyKind::GlSp, 1.0, 0.0)
            .reference(vec![0.0; 4])
            .groups(groups)
            .build(&w)
            .unwrap();
        assert_eq!(gl.value(&w).unwrap(), 4.0);

        let w = pv(vec![1.0, 1.0], 2);
        let fisher = PenaltyConfig::builder(PenaltyKind::L2SpFisher, 2.0, 0.0)
            .reference(vec![0.0, 0.0])
            .fisher(vec![1.0, 4.0])
            .build(&w)
            .unwrap();
        assert_eq!(fisher.value(&w).unwrap(), 5.0);
    }

    #[test]
    fn l2_gradient_is_alpha_w() {
        let w = pv(vec![1.0, -2.0], 2);
        let cfg = PenaltyConfig::builder(PenaltyKind::L2, 0.1, 0.1).build(&w).unwrap();
        let g = cfg.gradient(&w).unwrap();
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn sp_gradients_vanish_at_reference() {
        let r = vec![0.4, -0.7, 1.1];
        let w = pv(vec![0.4, -0.7, 1.1, 0.0, 0.0], 3);
        for kind in PenaltyKind::ALL.into_iter().filter(|k| k.needs_reference()) {
            let cfg = PenaltyConfig::builder(kind, 0.5, 0.3)
                .reference(r.clone())
                .fisher(vec![1.0, 2.0, 3.0])
                .groups(singleton_groups(3))
                .build(&w)
                .unwrap();
            assert!(cfg.gradient(&w).unwrap().iter().all(|&g| g == 0.0), "{kind}");
        }
    }

    #[test]
    fn missing_inputs_are_errors() {
        let w = pv(vec![0.0; 3], 2);
        assert!(PenaltyConfig::builder(PenaltyKind::L2Sp, 1.0, 0.0).build(&w).is_err());
        assert!(PenaltyConfig::builder(PenaltyKind::L2SpFisher, 1.0, 0.0).reference(vec![0.0; 2]).build(&w).is_err());
        assert!(PenaltyConfig::builder(PenaltyKind::GlSp, 1.0, 0.0).reference(vec![0.0; 2]).build(&w).is_err());
        assert!(PenaltyConfig::builder(PenaltyKind::L2Sp, 1.0, 0.0).reference(vec![0.0; 3]).build(&w).is_err());
        assert!(PenaltyConfig::builder(PenaltyKind::L2SpFisher, 1.0, 0.0)
            .reference(vec![0.0; 2])
            .fisher(vec![1.0, -1.0])
            .build(&w)
            .is_err());
    }

    #[test]
    fn prox_examples() {
        let w = pv(vec![2.0, -0.5], 2);
        let l1 = PenaltyConfig::builder(PenaltyKind::L1Sp, 1.0, 0.0).reference(vec![0.0, 0.0]).build(&w).unwrap();
        assert_eq!(l1.prox_step(&w, 1.0).unwrap().values, vec![1.0, 0.0]);

        let zero = PenaltyConfig::builder(PenaltyKind::L1Sp, 0.0, 0.0).reference(vec![0.0, 0.0]).build(&w).unwrap();
        assert_eq!(zero.prox_step(&w, 1.0).unwrap(), w);

        // displacement of norm 2 with eta*alpha*s_g = 1 shrinks by half
        let w = pv(vec![1.0 + 1.2, 1.6], 2);
        let groups = GroupStructure::with_weights(vec![vec![0, 1]], vec![1.0], vec![(0, 0)]).unwrap();
        let gl = PenaltyConfig::builder(PenaltyKind::GlSp, 1.0, 0.0)
            .reference(vec![1.0, 0.0])
            .groups(groups)
            .build(&w)
            .unwrap();
        let u = gl.prox_step(&w, 1.0).unwrap();
        assert!((u.values[0] - 1.6).abs() < 1e-12 && (u.values[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn prox_rejects_smooth_kinds() {
        let w = pv(vec![0.0; 2], 2);
        let cfg = PenaltyConfig::builder(PenaltyKind::L2Sp, 1.0, 0.0).reference(vec![0.0; 2]).build(&w).unwrap();
        assert!(cfg.prox_step(&w, 0.1).is_err());
    }

    #[test]
    fn channel_groups_for_conv_layer() {
        let net = Network::new(Shape3::new(3, 8, 8), desknet(10), 0).unwrap();
        let groups = build_channel_groups(&net).unwrap();
        assert_eq!(groups.len(), 16 + 32);
        assert!(groups.sizes()[..16].iter().all(|&p| p == 3 * 3 * 3 + 1));
        assert!(groups.sizes()[16..].iter().all(|&p| p == 16 * 9 + 1));
        assert_eq!(groups.provenance[17], (3, 1));
        groups.validate_partition(&net.params).unwrap();
        assert!((groups.weights[0] - 28f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn channel_groups_for_fc_layer() {
        let net = Network::new(
            Shape3::new(1, 1, 10),
            vec![LayerSpec::FullyConnected { out_dim: 5 }, LayerSpec::SoftmaxHead { num_classes: 2 }],
            0,
        )
        .unwrap();
        let groups = build_channel_groups(&net).unwrap();
        assert_eq!(groups.sizes(), vec![11; 5]);
    }

    #[test]
    fn head_only_network_has_no_groups() {
        let net = Network::new(Shape3::new(1, 1, 4), vec![LayerSpec::SoftmaxHead { num_classes: 2 }], 0).unwrap();
        assert!(build_channel_groups(&net).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PenaltyKind::ALL {
            assert_eq!(k.name().parse::<PenaltyKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }
}

//! Evidence algebra over a frame of `T` mutually exclusive classes plus the
//! multiplet Θ (the whole frame), whose mass carries the uncertainty.
//!
//! Evidence `e_k ≥ 0` maps to belief masses `m_k = e_k / S` and `m(Θ) = T / S`
//! with `S = Σ (e_k + 1)`. Two masses combine with Dempster's rule restricted
//! to the focal elements {p_1, .., p_T, Θ}: Θ intersects every class, distinct
//! classes are disjoint, and the disjoint mass (the conflict) is renormalized
//! away.

use crate::error::{invalid, Error, Result};

/// Tolerance on `Σ m_k + m(Θ) = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Combination is refused once `Con ≥ 1 - CONFLICT_EPS`.
pub const CONFLICT_EPS: f64 = 1e-12;

/// Non-negative evidence counts, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence(Vec<f64>);

impl Evidence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("evidence must cover at least one class");
        }
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return invalid(format!("evidence[{k}] = {v} is not a finite non-negative value"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Dirichlet strength `S = Σ (e_k + 1)`.
    pub fn strength(&self) -> f64 {
        self.0.iter().map(|e| e + 1.0).sum()
    }
}

/// Masses over the `T` singletons and the multiplet Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefMass {
    singletons: Vec<f64>,
    theta: f64,
}

impl BeliefMass {
    pub fn new(singletons: Vec<f64>, theta: f64) -> Result<Self> {
        if singletons.is_empty() {
            return invalid("belief mass needs at least one singleton");
        }
        if singletons
            .iter()
            .chain(std::iter::once(&theta))
            .any(|m| !m.is_finite() || *m < 0.0)
        {
            return invalid(format!(
                "masses must be finite and non-negative: {singletons:?}, theta {theta}"
            ));
        }
        let mass = Self { singletons, theta };
        mass.check_normalized()?;
        Ok(mass)
    }

    pub fn singletons(&self) -> &[f64] {
        &self.singletons
    }

    /// Mass on the multiplet Θ, i.e. the uncertainty `U`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn num_classes(&self) -> usize {
        self.singletons.len()
    }

    pub fn total(&self) -> f64 {
        self.singletons.iter().sum::<f64>() + self.theta
    }

    pub fn check_normalized(&self) -> Result<()> {
        let sum = self.total();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Unnormalized { sum });
        }
        Ok(())
    }
}

pub fn masses_from_evidence(e: &Evidence) -> BeliefMass {
    let strength = e.strength();
    BeliefMass {
        singletons: e.values().iter().map(|v| v / strength).collect(),
        theta: e.num_classes() as f64 / strength,
    }
}

/// Total ignorance: all mass on Θ. Identity element of [`combine`].
pub fn vacuous(num_classes: usize) -> Result<BeliefMass> {
    if num_classes == 0 {
        return invalid("vacuous mass needs at least one class");
    }
    Ok(BeliefMass {
        singletons: vec![0.0; num_classes],
        theta: 1.0,
    })
}

fn check_same_frame(m1: &BeliefMass, m2: &BeliefMass) -> Result<()> {
    if m1.num_classes() != m2.num_classes() {
        return Err(Error::Shape {
            op: "belief combination",
            left: vec![m1.num_classes()],
            right: vec![m2.num_classes()],
        });
    }
    Ok(())
}

/// Mass assigned to pairs of disjoint focal elements. Θ never conflicts.
pub fn conflict(m1: &BeliefMass, m2: &BeliefMass) -> Result<f64> {
    check_same_frame(m1, m2)?;
    let sum1: f64 = m1.singletons.iter().sum();
    let sum2: f64 = m2.singletons.iter().sum();
    let agree: f64 = m1
        .singletons
        .iter()
        .zip(&m2.singletons)
        .map(|(a, b)| a * b)
        .sum();
    Ok((sum1 * sum2 - agree).clamp(0.0, 1.0))
}

/// Generalized combination `m1 ⊗ m2`.
pub fn combine(m1: &BeliefMass, m2: &BeliefMass) -> Result<BeliefMass> {
    let con = conflict(m1, m2)?;
    if con >= 1.0 - CONFLICT_EPS {
        return Err(Error::TotalConflict { conflict: con });
    }
    let norm = 1.0 - con;
    let singletons = m1
        .singletons
        .iter()
        .zip(&m2.singletons)
        .map(|(a, b)| (a * b + a * m2.theta + m1.theta * b) / norm)
        .collect();
    Ok(BeliefMass {
        singletons,
        theta: m1.theta * m2.theta / norm,
    })
}

/// Left fold of [`combine`]; the error names the failing step (1-based).
pub fn combine_many<'a, I>(masses: I) -> Result<BeliefMass>
where
    I: IntoIterator<Item = &'a BeliefMass>,
{
    let mut iter = masses.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Invalid("cannot combine an empty set of masses".into()))?;
    let mut acc = first.clone();
    for (step, m) in iter.enumerate() {
        acc = combine(&acc, m).map_err(|e| match e {
            Error::TotalConflict { conflict } => Error::ConflictAtStep {
                step: step + 1,
                conflict,
            },
            other => other,
        })?;
    }
    Ok(acc)
}

/// Dirichlet parameters `α_j = e_j + 1` with strength `S = Σ α_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    strength: f64,
}

impl DirichletParams {
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Expected class probabilities `α_j / S`.
    pub fn means(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a / self.strength).collect()
    }
}

pub fn dirichlet_from_evidence(e: &Evidence) -> DirichletParams {
    let alpha: Vec<f64> = e.values().iter().map(|v| v + 1.0).collect();
    let strength = alpha.iter().sum();
    DirichletParams { alpha, strength }
}

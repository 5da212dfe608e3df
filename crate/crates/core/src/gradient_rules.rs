//! Constrained gradient update rules on flat parameter-space vectors.
//!
//! Every rule follows the same shape: test whether the proposed gradient `g`
//! conflicts with a reference gradient computed on episodic memory, and only
//! then replace it. When there is no conflict the input is passed through
//! untouched.
//!
//! * [`agem_project`]: project `g` onto the half-space `<z, g_ref> >= 0`.
//! * [`soft_gem_update`]: on unit vectors, project onto `<z, ĝ_ref> >= ε`.
//! * [`aagem_update`]: average the unit current and reference gradients.
//! * [`gem_project`]: one constraint per previous task, solved in the dual.

use std::ops::Deref;

use thiserror::Error;

/// Norms at or below this value are treated as zero.
pub const ZERO_GRADIENT_FLOOR: f64 = 1e-12;

/// Iteration cap for the GEM dual solver.
pub const GEM_MAX_ITERATIONS: usize = 10_000;

/// Convergence threshold on the (scale-relative) KKT residual of the GEM dual.
pub const GEM_KKT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("gradient norm {norm:e} is at or below the zero floor")]
    ZeroGradient { norm: f64 },
    #[error("epsilon {0} is outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("gradient lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("constraint set is empty")]
    EmptyConstraints,
    #[error("GEM dual solver did not converge after {iterations} iterations (residual {residual:e})")]
    SolverNotConverged { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, RuleError>;

/// Dense gradient (or parameter) vector in the flattened parameter space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatGradient(Vec<f64>);

impl FlatGradient {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dot(&self, other: &FlatGradient) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, c: f64) -> FlatGradient {
        FlatGradient(self.0.iter().map(|v| v * c).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self + c * other`
    pub fn add_scaled(&self, c: f64, other: &FlatGradient) -> FlatGradient {
        FlatGradient(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }
}

impl Deref for FlatGradient {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FlatGradient {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl From<&[f64]> for FlatGradient {
    fn from(values: &[f64]) -> Self {
        Self(values.to_vec())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Margin of the soft constraint, always inside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftConstraint(f64);

impl SoftConstraint {
    pub fn new(epsilon: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&epsilon) {
            Ok(Self(epsilon))
        } else {
            Err(RuleError::InvalidEpsilon(epsilon))
        }
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }
}

/// The per-task memory gradients `g_k` that GEM constrains against.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    gradients: Vec<FlatGradient>,
}

impl ConstraintSet {
    pub fn new(gradients: Vec<FlatGradient>) -> Result<Self> {
        let Some(first) = gradients.first() else {
            return Err(RuleError::EmptyConstraints);
        };
        let len = first.len();
        for g in &gradients[1..] {
            check_lengths(first, g)?;
        }
        debug_assert!(gradients.iter().all(|g| g.len() == len));
        Ok(Self { gradients })
    }

    pub fn gradients(&self) -> &[FlatGradient] {
        &self.gradients
    }

    pub fn len(&self) -> usize {
        self.gradients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gradients.is_empty()
    }
}

/// Result of applying an update rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Update {
    /// No conflict: the input gradient, passed through unchanged.
    Unchanged(FlatGradient),
    /// A conflict was resolved and the gradient replaced.
    Projected(FlatGradient),
    /// The rule produced the zero vector (opposed unit gradients under
    /// averaging). The caller should skip the optimizer step.
    ZeroUpdate(FlatGradient),
}

impl Update {
    pub fn gradient(&self) -> &FlatGradient {
        match self {
            Update::Unchanged(g) | Update::Projected(g) | Update::ZeroUpdate(g) => g,
        }
    }

    pub fn into_gradient(self) -> FlatGradient {
        match self {
            Update::Unchanged(g) | Update::Projected(g) | Update::ZeroUpdate(g) => g,
        }
    }

    /// True when the rule replaced the input.
    pub fn is_projected(&self) -> bool {
        !matches!(self, Update::Unchanged(_))
    }
}

fn check_lengths(a: &FlatGradient, b: &FlatGradient) -> Result<()> {
    if a.len() != b.len() {
        return Err(RuleError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

fn checked_norm(g: &FlatGradient) -> Result<f64> {
    let norm = g.norm();
    if norm <= ZERO_GRADIENT_FLOOR || !norm.is_finite() {
        return Err(RuleError::ZeroGradient { norm });
    }
    Ok(norm)
}

/// Unit vector in the direction of `g`.
pub fn normalize(g: &FlatGradient) -> Result<FlatGradient> {
    let norm = checked_norm(g)?;
    Ok(g.scaled(1.0 / norm))
}

/// Returns true when `g` and `g_ref` conflict, i.e. `<g, g_ref> < 0`.
///
/// Orthogonal gradients are not a violation.
pub fn violation_check(g: &FlatGradient, g_ref: &FlatGradient) -> Result<bool> {
    check_lengths(g, g_ref)?;
    checked_norm(g)?;
    checked_norm(g_ref)?;
    Ok(g.dot(g_ref) < 0.0)
}

/// A-GEM: `g - (gᵀg_ref / g_refᵀg_ref) g_ref` when the two conflict.
pub fn agem_project(g: &FlatGradient, g_ref: &FlatGradient) -> Result<Update> {
    if !violation_check(g, g_ref)? {
        return Ok(Update::Unchanged(g.clone()));
    }
    let coeff = g.dot(g_ref) / g_ref.dot(g_ref);
    Ok(Update::Projected(g.add_scaled(-coeff, g_ref)))
}

/// ε-soft GEM: on the unit vectors ĝ and ĝ_ref, returns
/// `ĝ - (ĝᵀĝ_ref - ε) ĝ_ref` when the two conflict, which puts the update at
/// inner product exactly ε with ĝ_ref.
///
/// With ε = 0 this is plain A-GEM on the unnormalized inputs.
pub fn soft_gem_update(
    g: &FlatGradient,
    g_ref: &FlatGradient,
    eps: SoftConstraint,
) -> Result<Update> {
    if eps.epsilon() == 0.0 {
        return agem_project(g, g_ref);
    }
    if !violation_check(g, g_ref)? {
        return Ok(Update::Unchanged(g.clone()));
    }
    let g_hat = normalize(g)?;
    let ref_hat = normalize(g_ref)?;
    // ĝ_refᵀĝ_ref is one up to rounding; keep the division so the margin is
    // hit exactly in floating point.
    let coeff = (g_hat.dot(&ref_hat) - eps.epsilon()) / ref_hat.dot(&ref_hat);
    Ok(Update::Projected(g_hat.add_scaled(-coeff, &ref_hat)))
}

/// Averaged A-GEM: `(ĝ + ĝ_ref) / 2` when the two conflict.
pub fn aagem_update(g: &FlatGradient, g_ref: &FlatGradient) -> Result<Update> {
    if !violation_check(g, g_ref)? {
        return Ok(Update::Unchanged(g.clone()));
    }
    let g_hat = normalize(g)?;
    let ref_hat = normalize(g_ref)?;
    let avg = FlatGradient(
        g_hat
            .iter()
            .zip(ref_hat.iter())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    );
    if avg.iter().all(|&v| v == 0.0) {
        return Ok(Update::ZeroUpdate(avg));
    }
    Ok(Update::Projected(avg))
}

/// Natural residual `max_i |v_i - max(0, v_i - ∇_i)|` of the dual KKT system.
fn kkt_residual(gram: &[f64], linear: &[f64], v: &[f64]) -> f64 {
    let k = linear.len();
    (0..k)
        .map(|i| {
            let grad = linear[i] + dot(&gram[i * k..(i + 1) * k], v);
            (v[i] - (v[i] - grad).max(0.0)).abs()
        })
        .fold(0.0, f64::max)
}

/// Solves the small dense system `A x = b` in place; `None` when `A` is
/// numerically singular.
fn solve_small(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() <= 1e-13 * scale {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for c in col..n {
                a[row * n + c] -= f * a[col * n + c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row * n + c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

/// Lawson-Hanson active-set method on the dual `min ½vᵀQv + cᵀv, v >= 0`.
fn active_set_dual(gram: &[f64], linear: &[f64], tol: f64) -> Option<Vec<f64>> {
    let k = linear.len();
    let mut v = vec![0.0; k];
    let mut passive = vec![false; k];
    let mut budget = 10 * k + 10;
    loop {
        let w: Vec<f64> = (0..k)
            .map(|i| -(linear[i] + dot(&gram[i * k..(i + 1) * k], &v)))
            .collect();
        let entering = (0..k)
            .filter(|&i| !passive[i])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match entering {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => return Some(v),
        }
        loop {
            budget = budget.checked_sub(1)?;
            let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let sub: Vec<f64> = idx
                .iter()
                .flat_map(|&i| idx.iter().map(move |&j| gram[i * k + j]))
                .collect();
            let rhs: Vec<f64> = idx.iter().map(|&i| -linear[i]).collect();
            let s = solve_small(sub, rhs)?;
            if s.iter().all(|&x| x > 0.0) {
                v.iter_mut().for_each(|x| *x = 0.0);
                for (&i, &x) in idx.iter().zip(&s) {
                    v[i] = x;
                }
                break;
            }
            let ratios: Vec<f64> = idx
                .iter()
                .zip(&s)
                .map(|(&i, &x)| if x <= 0.0 { v[i] / (v[i] - x) } else { f64::INFINITY })
                .collect();
            let alpha = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            for ((&i, &x), &ratio) in idx.iter().zip(&s).zip(&ratios) {
                v[i] += alpha * (x - v[i]);
                if ratio <= alpha || v[i] <= 0.0 {
                    v[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
}

/// GEM: the closest vector to `g` with nonnegative inner product against every
/// constraint gradient.
///
/// Solved through the dual `min_v ½vᵀQv + vᵀGg, v >= 0` with `Q = GGᵀ`, by
/// projected gradient steps of size `1/trace(Q)`. When the Gram matrix is too
/// ill-conditioned for that to converge, an exact active-set solve takes
/// over. The primal solution is recovered as `g + Gᵀv`.
pub fn gem_project(g: &FlatGradient, constraints: &ConstraintSet) -> Result<Update> {
    let rows = constraints.gradients();
    if rows.is_empty() {
        return Err(RuleError::EmptyConstraints);
    }
    for row in rows {
        check_lengths(g, row)?;
    }
    if rows.iter().all(|row| g.dot(row) >= 0.0) {
        return Ok(Update::Unchanged(g.clone()));
    }

    let k = rows.len();
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = rows[i].dot(&rows[j]);
            gram[i * k + j] = v;
            gram[j * k + i] = v;
        }
    }
    let linear: Vec<f64> = rows.iter().map(|row| row.dot(g)).collect();
    let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();

    if trace <= ZERO_GRADIENT_FLOOR * ZERO_GRADIENT_FLOOR {
        return Err(RuleError::ZeroGradient { norm: trace.sqrt() });
    }
    let step = 1.0 / trace;
    let max_row = rows.iter().map(|r| r.norm()).fold(0.0, f64::max);
    let scale = (g.norm() * max_row).max(1.0);
    let tol = GEM_KKT_TOLERANCE * scale;

    let mut v = vec![0.0; k];
    let mut grad = vec![0.0; k];
    let mut residual = f64::INFINITY;
    for _ in 0..GEM_MAX_ITERATIONS {
        for i in 0..k {
            grad[i] = linear[i] + dot(&gram[i * k..(i + 1) * k], &v);
        }
        for i in 0..k {
            v[i] = (v[i] - step * grad[i]).max(0.0);
        }
        residual = kkt_residual(&gram, &linear, &v);
        if residual < tol {
            break;
        }
    }
    if residual >= tol {
        match active_set_dual(&gram, &linear, tol) {
            Some(exact) if kkt_residual(&gram, &linear, &exact) < tol => v = exact,
            _ => {
                return Err(RuleError::SolverNotConverged {
                    iterations: GEM_MAX_ITERATIONS,
                    residual,
                })
            }
        }
    }

    let mut projected = g.clone();
    for (row, &weight) in rows.iter().zip(&v) {
        if weight > 0.0 {
            projected = projected.add_scaled(weight, row);
        }
    }
    Ok(Update::Projected(projected))
}

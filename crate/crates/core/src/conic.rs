//! Solver-agnostic conic program representation and its interior-point backend.
//!
//! Programs are stated over real decision variables with an affine objective to
//! be maximized. Complex quantities are expanded by the caller into interleaved
//! `(Re, Im)` pairs.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
    SupportedConeT::{ExponentialConeT, NonnegativeConeT, SecondOrderConeT},
};

use crate::error::{Error, Result};

/// `constant + sum coeff * x[index]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(index: usize) -> Self {
        Self::term(index, 1.0)
    }

    pub fn term(index: usize, coeff: f64) -> Self {
        Self {
            terms: vec![(index, coeff)],
            constant: 0.0,
        }
    }

    pub fn push(&mut self, index: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((index, coeff));
        }
    }

    pub fn plus(mut self, other: &AffineExpr) -> Self {
        self.terms.extend_from_slice(&other.terms);
        self.constant += other.constant;
        self
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for (_, c) in &mut self.terms {
            *c *= factor;
        }
        self.constant *= factor;
        self
    }

    pub fn offset(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }

    fn max_index(&self) -> Option<usize> {
        self.terms.iter().map(|(i, _)| *i).max()
    }
}

/// Complex-valued affine expression as a pair of real expressions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComplexAffine {
    pub re: AffineExpr,
    pub im: AffineExpr,
}

impl ComplexAffine {
    pub fn eval(&self, x: &[f64]) -> num_complex::Complex64 {
        num_complex::Complex64::new(self.re.eval(x), self.im.eval(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `expr <= 0`.
    NonPositive(AffineExpr),
    /// `||tail||_2 <= head`.
    SecondOrderCone { head: AffineExpr, tail: Vec<AffineExpr> },
    /// `rate <= log2(argument)`.
    LogHypograph { rate: AffineExpr, argument: AffineExpr },
}

impl Constraint {
    /// Amount by which `x` violates the constraint (zero when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::NonPositive(e) => e.eval(x).max(0.0),
            Constraint::SecondOrderCone { head, tail } => {
                let norm = tail.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
                (norm - head.eval(x)).max(0.0)
            }
            Constraint::LogHypograph { rate, argument } => {
                let a = argument.eval(x);
                if a <= 0.0 {
                    f64::INFINITY
                } else {
                    (rate.eval(x) - a.log2()).max(0.0)
                }
            }
        }
    }

    fn exprs(&self) -> Vec<&AffineExpr> {
        match self {
            Constraint::NonPositive(e) => vec![e],
            Constraint::SecondOrderCone { head, tail } => std::iter::once(head).chain(tail.iter()).collect(),
            Constraint::LogHypograph { rate, argument } => vec![rate, argument],
        }
    }
}

/// Maximize `objective` subject to `constraints`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub objective: AffineExpr,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Converged to reduced accuracy.
    Inaccurate,
    Infeasible,
    Failed,
}

impl SolveStatus {
    pub fn is_usable(&self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Inaccurate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: AffineExpr::zero(),
            constraints: Vec::new(),
        }
    }

    pub fn push(&mut self, c: Constraint) {
        self.constraints.push(c);
    }

    pub fn validate(&self) -> Result<()> {
        let exprs = std::iter::once(&self.objective).chain(self.constraints.iter().flat_map(|c| c.exprs()));
        for e in exprs {
            if let Some(i) = e.max_index() {
                if i >= self.num_vars {
                    return Err(Error::invalid(format!(
                        "constraint references variable {i} of a program with {} variables",
                        self.num_vars
                    )));
                }
            }
            if !e.constant.is_finite() || e.terms.iter().any(|(_, c)| !c.is_finite()) {
                return Err(Error::invalid("non-finite coefficient in conic program"));
            }
        }
        for c in &self.constraints {
            if let Constraint::SecondOrderCone { tail, .. } = c {
                if tail.is_empty() {
                    return Err(Error::invalid("second-order cone with empty tail"));
                }
            }
        }
        Ok(())
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints.iter().map(|c| c.violation(x)).fold(0.0, f64::max)
    }

    pub fn solve(&self) -> Result<ConicSolution> {
        self.validate()?;
        let n = self.num_vars;
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut b = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        // Each cone row holds s = e(x), i.e. A = -coeffs, b = constant.
        let mut emit = |e: &AffineExpr, scale: f64| {
            let r = b.len();
            for (i, c) in &e.terms {
                rows.push(r);
                cols.push(*i);
                vals.push(-scale * c);
            }
            b.push(scale * e.constant);
        };
        for c in &self.constraints {
            match c {
                Constraint::NonPositive(e) => {
                    emit(e, -1.0);
                    push_nonneg(&mut cones);
                }
                Constraint::SecondOrderCone { head, tail } => {
                    emit(head, 1.0);
                    for e in tail {
                        emit(e, 1.0);
                    }
                    cones.push(SecondOrderConeT(tail.len() + 1));
                }
                Constraint::LogHypograph { rate, argument } => {
                    emit(rate, std::f64::consts::LN_2);
                    emit(&AffineExpr::constant(1.0), 1.0);
                    emit(argument, 1.0);
                    cones.push(ExponentialConeT());
                }
            }
        }
        let m = b.len();
        let a = CscMatrix::new_from_triplets(m, n, rows, cols, vals);
        let p = CscMatrix::zeros((n, n));
        let mut q = vec![0.0; n];
        for (i, c) in &self.objective.terms {
            q[*i] -= c;
        }
        let settings = DefaultSettings {
            verbose: false,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        solver.solve();
        let status = match solver.solution.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::Inaccurate,
            SolverStatus::PrimalInfeasible
            | SolverStatus::AlmostPrimalInfeasible
            | SolverStatus::DualInfeasible
            | SolverStatus::AlmostDualInfeasible => SolveStatus::Infeasible,
            _ => SolveStatus::Failed,
        };
        let x = solver.solution.x.clone();
        let objective = self.objective.eval(&x);
        Ok(ConicSolution { x, objective, status })
    }
}

fn push_nonneg(cones: &mut Vec<SupportedConeT<f64>>) {
    if let Some(NonnegativeConeT(k)) = cones.last_mut() {
        *k += 1;
    } else {
        cones.push(NonnegativeConeT(1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_program() {
        // max x + y, x + 2y <= 4, x <= 2, x, y >= 0
        let mut p = ConicProgram::new(2);
        p.objective = AffineExpr::var(0).plus(&AffineExpr::var(1));
        let mut e = AffineExpr::constant(-4.0);
        e.push(0, 1.0);
        e.push(1, 2.0);
        p.push(Constraint::NonPositive(e));
        p.push(Constraint::NonPositive(AffineExpr::var(0).offset(-2.0)));
        p.push(Constraint::NonPositive(AffineExpr::term(0, -1.0)));
        p.push(Constraint::NonPositive(AffineExpr::term(1, -1.0)));
        let s = p.solve().unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.objective - 3.0).abs() < 1e-6);
        assert!((s.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn norm_ball() {
        // max x + y on the unit disk
        let mut p = ConicProgram::new(2);
        p.objective = AffineExpr::var(0).plus(&AffineExpr::var(1));
        p.push(Constraint::SecondOrderCone {
            head: AffineExpr::constant(1.0),
            tail: vec![AffineExpr::var(0), AffineExpr::var(1)],
        });
        let s = p.solve().unwrap();
        assert!((s.objective - 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn log_hypograph() {
        // max r, r <= log2(1 + b), b <= 3
        let mut p = ConicProgram::new(2);
        p.objective = AffineExpr::var(0);
        p.push(Constraint::LogHypograph {
            rate: AffineExpr::var(0),
            argument: AffineExpr::var(1).offset(1.0),
        });
        p.push(Constraint::NonPositive(AffineExpr::var(1).offset(-3.0)));
        let s = p.solve().unwrap();
        assert!(s.status.is_usable());
        assert!((s.objective - 2.0).abs() < 1e-6);
        assert!(p.max_violation(&s.x) < 1e-6);
    }

    #[test]
    fn infeasible_detected() {
        let mut p = ConicProgram::new(1);
        p.objective = AffineExpr::var(0);
        p.push(Constraint::NonPositive(AffineExpr::var(0).offset(1.0)));
        p.push(Constraint::NonPositive(AffineExpr::term(0, -1.0)));
        assert_eq!(p.solve().unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn out_of_range_variable_rejected() {
        let mut p = ConicProgram::new(1);
        p.push(Constraint::NonPositive(AffineExpr::var(3)));
        assert!(p.validate().is_err());
        assert!(p.solve().is_err());
    }
}

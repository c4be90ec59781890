//! Reverse-mode differentiation over `f64` scalars plus a central-difference
//! oracle.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s together with
//! the local partial derivatives. [`Tape::backward`] sweeps the record in
//! reverse and fills one gradient slot per recorded value. Forward
//! evaluation never touches the gradient slots.
//!
//! The heavy pieces of the model (LSTM, heads) carry hand-written backward
//! passes; this tape is the independent route their gradients, and those of
//! every loss, are checked against.
//!
//! ```
//! use lanefuse::diff::evaluate_with_gradients;
//!
//! let (value, grad) = evaluate_with_gradients(|_, x| Ok(x[0].square()), &[3.0]).unwrap();
//! assert_eq!(value, 9.0);
//! assert_eq!(grad, vec![6.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NO_PARENT: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    value: f64,
    parents: [usize; 2],
    partials: [f64; 2],
}

/// Record of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<f64>>,
}

/// A value recorded on a [`Tape`]. After [`Tape::backward`] its gradient
/// slot holds the derivative of the backward root with respect to it.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("value", &self.value())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [NO_PARENT; 2], [0.0; 2])
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, parents: [usize; 2], partials: [f64; 2]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            partials,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    fn unary(&self, a: &Var<'_>, value: f64, da: f64) -> Var<'_> {
        self.push(value, [a.index, NO_PARENT], [da, 0.0])
    }

    fn binary(&self, a: &Var<'_>, b: &Var<'_>, value: f64, da: f64, db: f64) -> Var<'_> {
        self.push(value, [a.index, b.index], [da, db])
    }

    /// Propagate d(root)/d(node) into every gradient slot, overwriting
    /// the result of any earlier sweep.
    pub fn backward(&self, root: Var<'_>) {
        let nodes = self.nodes.borrow();
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize(nodes.len(), 0.0);
        grads[root.index] = 1.0;
        for i in (0..=root.index).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let node = nodes[i];
            for (&p, &d) in node.parents.iter().zip(&node.partials) {
                if p != NO_PARENT {
                    grads[p] += g * d;
                }
            }
        }
    }

    pub fn sum<'t>(&'t self, terms: &[Var<'t>]) -> Var<'t> {
        terms
            .iter()
            .fold(self.var(0.0), |acc, &t| acc + t)
    }

    /// Minimum of `terms`. The gradient flows only into the argmin; ties go
    /// to the lowest index.
    pub fn min<'t>(&'t self, terms: &[Var<'t>]) -> Result<Var<'t>> {
        let (first, rest) = terms.split_first().ok_or(Error::Empty("min-reduction"))?;
        let mut best = *first;
        for t in rest {
            if t.value() < best.value() {
                best = *t;
            }
        }
        Ok(self.unary(&best, best.value(), 1.0))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.nodes.borrow()[self.index].value
    }

    /// Gradient slot; zero before any backward sweep.
    pub fn grad(&self) -> f64 {
        self.tape
            .grads
            .borrow()
            .get(self.index)
            .copied()
            .unwrap_or(0.0)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value().exp();
        self.tape.unary(&self, e, e)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let x = self.value();
        if x <= 0.0 || x.is_nan() {
            return Err(Error::domain("log", format!("argument {x} is not positive")));
        }
        Ok(self.tape.unary(&self, x.ln(), 1.0 / x))
    }

    /// Fallible division (zero divisor is a domain error), hence not `Div`.
    #[allow(clippy::should_implement_trait)]
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if b == 0.0 {
            return Err(Error::domain("divide", "denominator is zero"));
        }
        Ok(self.tape.binary(&self, &rhs, a / b, 1.0 / b, -a / (b * b)))
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value().tanh();
        self.tape.unary(&self, t, 1.0 - t * t)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value());
        self.tape.unary(&self, s, s * (1.0 - s))
    }

    /// Subgradient 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        if x > 0.0 {
            self.tape.unary(&self, x, 1.0)
        } else {
            self.tape.unary(&self, 0.0, 0.0)
        }
    }

    /// Subgradient 0 at the kink.
    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let slope = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.tape.unary(&self, x.abs(), slope)
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        self.tape.unary(&self, x * x, 2.0 * x)
    }

    /// `self^p` for a constant exponent; requires a positive base unless
    /// `p` is a non-negative integer.
    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let x = self.value();
        let integral = p >= 0.0 && p.fract() == 0.0;
        if x <= 0.0 && !integral {
            return Err(Error::domain("pow", format!("base {x} with exponent {p}")));
        }
        let d = if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) };
        Ok(self.tape.unary(&self, x.powf(p), d))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(&self, &rhs, self.value() + rhs.value(), 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(&self, &rhs, self.value() - rhs.value(), 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape.binary(&self, &rhs, a * b, b, a)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(&self, -self.value(), -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary(&self, self.value() + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.unary(&self, self.value() - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary(&self, self.value() * rhs, rhs)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Run `program` on fresh tape variables bound to `inputs` and return the
/// output together with one exact reverse-mode derivative per input.
pub fn evaluate_with_gradients<F>(program: F, inputs: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = tape.vars(inputs);
    let out = program(&tape, &vars)?;
    tape.backward(out);
    Ok((out.value(), vars.iter().map(Var::grad).collect()))
}

/// Evaluate `program` forward only.
pub fn evaluate<F>(program: &F, inputs: &[f64]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = tape.vars(inputs);
    Ok(program(&tape, &vars)?.value())
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub errors: BTreeMap<String, f64>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn empty(step: f64) -> Self {
        Self {
            max_relative_error: 0.0,
            errors: BTreeMap::new(),
            step,
        }
    }

    pub fn record(&mut self, name: String, error: f64) {
        if error > self.max_relative_error || error.is_nan() {
            self.max_relative_error = error;
        }
        self.errors.insert(name, error);
    }

    /// Fold another report in, prefixing its parameter names.
    pub fn merge(&mut self, prefix: &str, other: GradCheckReport) {
        for (name, err) in other.errors {
            self.record(format!("{prefix}{name}"), err);
        }
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.errors
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare `analytic[i]` against the central difference of `f` at `point`
/// for every `i` in `indices`. The caller keeps `point` at least two steps
/// away from kinks and branch points.
pub fn central_difference_report<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    indices: &[usize],
    name: &dyn Fn(usize) -> String,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::config("step", "must be positive"));
    }
    crate::error::check_len("gradient check", point.len(), analytic.len())?;
    let mut report = GradCheckReport::empty(step);
    let mut probe = point.to_vec();
    for &i in indices {
        if i >= point.len() {
            return Err(Error::IndexOutOfRange {
                what: "parameter",
                index: i,
                len: point.len(),
            });
        }
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe)?;
        probe[i] = orig - step;
        let down = f(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        report.record(name(i), relative_error(analytic[i], numeric));
    }
    Ok(report)
}

/// Check the tape gradients of `program` at `inputs` against central
/// differences with the given step.
pub fn finite_difference_check<F>(program: F, inputs: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (_, analytic) = evaluate_with_gradients(&program, inputs)?;
    let indices: Vec<usize> = (0..inputs.len()).collect();
    central_difference_report(
        |x| evaluate(&program, x),
        inputs,
        &analytic,
        &indices,
        &|i| format!("x[{i}]"),
        step,
    )
}

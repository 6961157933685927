//! Reverse-mode tape.
//!
//! [`Var`] records each arithmetic operation as a node on an arena [`Tape`]
//! (two parent indices plus the local partials, 24 bytes per node). One
//! backward sweep then yields the gradient of a scalar output with respect to
//! every registered leaf, at a cost independent of the leaf count. Literals
//! created through [`Scalar::from_f64`] are tape-free constants, and trivial
//! operations against the constants 0 and 1 fold away instead of allocating
//! nodes; this keeps jet-over-tape composition cheap because tangent seeds
//! are mostly zeros.

use crate::scalar::Scalar;
use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    p: [u32; 2],
    w: [f64; 2],
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all nodes but keeps the allocation. Any `Var` created before the
    /// call is invalidated and must not be used afterwards.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Registers a differentiable leaf. Leaves read back by
    /// [`Tape::gradient_into`] must be registered before any dependent node.
    pub fn var(&self, val: f64) -> Var<'_> {
        let idx = self.push(Node {
            p: [NONE, NONE],
            w: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            idx,
            val,
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    /// Accumulates d(output)/d(leaf) into `grad` for the first `grad.len()`
    /// registered leaves. `adj` is a caller-owned scratch buffer so repeated
    /// sweeps are allocation-free.
    pub fn gradient_into(&self, output: Var<'_>, adj: &mut Vec<f64>, grad: &mut [f64]) {
        grad.fill(0.0);
        let Some(_) = output.tape else {
            return; // constant output: zero gradient
        };
        let nodes = self.nodes.borrow();
        adj.clear();
        adj.resize(output.idx as usize + 1, 0.0);
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                let p = node.p[k];
                if p != NONE {
                    adj[p as usize] += node.w[k] * a;
                }
            }
        }
        let n = grad.len().min(adj.len());
        grad[..n].copy_from_slice(&adj[..n]);
    }

    pub fn gradient(&self, output: Var<'_>, n_leaves: usize) -> Vec<f64> {
        let mut adj = Vec::new();
        let mut grad = vec![0.0; n_leaves];
        self.gradient_into(output, &mut adj, &mut grad);
        grad
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NONE,
            val,
        }
    }

    pub fn val(self) -> f64 {
        self.val
    }

    fn is_const(self) -> bool {
        self.tape.is_none()
    }

    fn unary(self, val: f64, w: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => {
                let idx = t.push(Node {
                    p: [self.idx, NONE],
                    w: [w, 0.0],
                });
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    fn binary(a: Var<'t>, b: Var<'t>, val: f64, wa: f64, wb: f64) -> Var<'t> {
        let tape = match (a.tape, b.tape) {
            (None, None) => return Var::constant(val),
            (Some(t), None) | (None, Some(t)) => t,
            (Some(ta), Some(tb)) => {
                debug_assert!(std::ptr::eq(ta, tb), "vars from different tapes");
                ta
            }
        };
        let pa = if a.is_const() { NONE } else { a.idx };
        let pb = if b.is_const() { NONE } else { b.idx };
        let idx = tape.push(Node {
            p: [pa, pb],
            w: [wa, wb],
        });
        Var {
            tape: Some(tape),
            idx,
            val,
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        if rhs.is_const() && rhs.val == 0.0 {
            return self;
        }
        if self.is_const() && self.val == 0.0 {
            return rhs;
        }
        Var::binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        if rhs.is_const() && rhs.val == 0.0 {
            return self;
        }
        Var::binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        // Folding x*0 -> 0 and x*1 -> x keeps jet seed arithmetic off the
        // tape. The zero fold fixes the derivative of the dropped factor to
        // 0, consistent with treating the literal as a true constant.
        for (c, v) in [(self, rhs), (rhs, self)] {
            if c.is_const() {
                if c.val == 0.0 {
                    return Var::constant(0.0);
                }
                if c.val == 1.0 {
                    return v;
                }
            }
        }
        Var::binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        if rhs.is_const() && rhs.val == 1.0 {
            return self;
        }
        let inv = 1.0 / rhs.val;
        Var::binary(
            self,
            rhs,
            self.val * inv,
            inv,
            -self.val * inv * inv,
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Scalar for Var<'t> {
    fn zero() -> Self {
        Var::constant(0.0)
    }
    fn one() -> Self {
        Var::constant(1.0)
    }
    fn from_f64(x: f64) -> Self {
        Var::constant(x)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::Jet;

    fn f<S: Scalar>(x: S, y: S) -> S {
        let two = S::from_f64(2.0);
        (x * y).sin() + x.tanh() * two - y / (x * x + S::one())
    }

    #[test]
    fn reverse_gradient_matches_forward_jets() {
        let (x0, y0) = (0.8, -1.1);
        let tape = Tape::new();
        let x = tape.var(x0);
        let y = tape.var(y0);
        let out = f(x, y);
        let g = tape.gradient(out, 2);

        let jx = f(Jet::<f64, 2>::variable(x0, 0), Jet::<f64, 2>::variable(y0, 1));
        assert!((g[0] - jx.du[0]).abs() < 1e-14, "{} vs {}", g[0], jx.du[0]);
        assert!((g[1] - jx.du[1]).abs() < 1e-14, "{} vs {}", g[1], jx.du[1]);
        assert!((out.val() - jx.re).abs() < 1e-14);
    }

    #[test]
    fn jets_over_tape_differentiate_directional_derivatives() {
        // s(w) = d/dx [ tanh(w * x) ] at x0, via a jet whose primal is a Var.
        // ds/dw must match the analytic mixed second derivative.
        let (w0, x0) = (0.6, 0.9);
        let tape = Tape::new();
        let w = tape.var(w0);
        let wj = Jet::<Var, 1>::constant(w);
        let xj = Jet::<Var, 1>::variable(Var::constant(x0), 0);
        let s = (wj * xj).tanh().du[0];
        let g = tape.gradient(s, 1);

        let u = w0 * x0;
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        // d/dw [ w*sech2(w x) ] = sech2 + w * (-2 t sech2) * x
        let expect = sech2 + w0 * (-2.0 * t * sech2) * x0;
        assert!((g[0] - expect).abs() < 1e-12, "{} vs {}", g[0], expect);
    }

    #[test]
    fn constant_folding_keeps_pure_literal_math_off_the_tape() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let len0 = tape.len();
        let zero = Var::from_f64(0.0);
        let one = Var::from_f64(1.0);
        let a = x + zero;
        let b = a * one;
        let c = b * zero;
        let d = Var::from_f64(3.0) * Var::from_f64(4.0);
        assert_eq!(tape.len(), len0, "folded ops must not push nodes");
        assert_eq!(b.val(), 2.0);
        assert_eq!(c.val(), 0.0);
        assert!(c.is_const());
        assert_eq!(d.val(), 12.0);
    }

    #[test]
    fn hinge_subgradient_is_zero_at_zero() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let out = x.relu();
        let g = tape.gradient(out, 1);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn clear_reuses_capacity() {
        let tape = Tape::new();
        for _ in 0..100 {
            let x = tape.var(1.0);
            let _ = x.sin() * x;
        }
        let cap_hint = tape.nodes.borrow().capacity();
        tape.clear();
        assert_eq!(tape.len(), 0);
        assert_eq!(tape.nodes.borrow().capacity(), cap_hint);
    }
}

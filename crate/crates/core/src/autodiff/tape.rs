//! Reverse-mode tape over scalar nodes.
//!
//! Every arithmetic result that depends on a registered variable appends one
//! node holding up to two parent indices and the local partial derivatives.
//! Values that do not depend on any variable never touch the tape, which is how
//! stop-gradient is realized: [`Real::detach`] returns such a constant.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Real;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    /// Adjoints of every node for the scalar `output`.
    pub fn gradient(&self, output: Var<'_>) -> Adjoints {
        self.backward(&[(output, 1.0)])
    }

    /// Vector-Jacobian product: adjoints for `Σ seedᵢ · outputᵢ`.
    pub fn backward(&self, seeds: &[(Var<'_>, f64)]) -> Adjoints {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        for (v, s) in seeds {
            if v.idx != NONE {
                adj[v.idx as usize] += s;
            }
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            for k in 0..2 {
                if n.parents[k] != NONE {
                    adj[n.parents[k] as usize] += a * n.partials[k];
                }
            }
        }
        Adjoints(adj)
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Adjoints(Vec<f64>);

impl Adjoints {
    /// Adjoint of `v`; constants have adjoint 0.
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        if v.idx == NONE {
            0.0
        } else {
            self.0[v.idx as usize]
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(v)).collect()
    }
}

/// A scalar that may be recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NONE,
            val,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }

    #[inline]
    fn unary(self, val: f64, partial: f64) -> Self {
        match self.tape {
            Some(t) if self.idx != NONE => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, NONE],
                    partials: [partial, 0.0],
                }),
                val,
            },
            _ => Var::constant(val),
        }
    }

    #[inline]
    fn binary(self, o: Self, val: f64, pa: f64, pb: f64) -> Self {
        match (self.idx != NONE, o.idx != NONE) {
            (false, false) => Var::constant(val),
            (true, false) => self.unary(val, pa),
            (false, true) => o.unary(val, pb),
            (true, true) => {
                let t = self.tape.or(o.tape).expect("recorded var without tape");
                Var {
                    tape: Some(t),
                    idx: t.push(Node {
                        parents: [self.idx, o.idx],
                        partials: [pa, pb],
                    }),
                    val,
                }
            }
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.val;
        let q = self.val * inv;
        self.binary(o, q, inv, -q * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, o: f64) -> Self {
        self.unary(self.val + o, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, o: f64) -> Self {
        self.unary(self.val - o, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, o: f64) -> Self {
        self.unary(self.val * o, o)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, o: f64) -> Self {
        self.unary(self.val / o, 1.0 / o)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(r, if r > 0.0 { 0.5 / r } else { 0.0 })
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn atan2(self, x: Self) -> Self {
        let r2 = self.val * self.val + x.val * x.val;
        let (py, px) = if r2 > 0.0 {
            (x.val / r2, -self.val / r2)
        } else {
            (0.0, 0.0)
        };
        self.binary(x, self.val.atan2(x.val), py, px)
    }
    fn detach(self) -> Self {
        Var::constant(self.val)
    }
}

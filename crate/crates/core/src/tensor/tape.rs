use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use super::{silu, silu_prime, Tensor};
use crate::error::{numeric_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
enum Op<T> {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Neg(usize),
    Exp(usize),
    Silu(usize),
}

#[derive(Clone, Copy, Debug)]
struct Node<T> {
    op: Op<T>,
    value: T,
}

/// Wengert list of scalar operations for reverse-mode accumulation.
///
/// Leaves are the differentiable inputs, in creation order.
#[derive(Debug, Default)]
pub struct GradientTape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaves: RefCell<Vec<usize>>,
}

/// Handle to a node on a [`GradientTape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t GradientTape<T>,
    idx: usize,
}

impl<T: Scalar> GradientTape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), leaves: RefCell::new(Vec::new()) }
    }

    fn push(&self, op: Op<T>, value: T) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        nodes.len() - 1
    }

    pub fn leaf(&self, value: T) -> Var<'_, T> {
        let idx = self.push(Op::Leaf, value);
        self.leaves.borrow_mut().push(idx);
        Var { tape: self, idx }
    }

    pub fn constant(&self, value: T) -> Var<'_, T> {
        Var { tape: self, idx: self.push(Op::Const, value) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Re-evaluates the recorded program with new leaf values and returns the
    /// value of `output`.
    pub fn replay(&self, leaf_values: &[T], output: Var<'_, T>) -> T {
        let nodes = self.nodes.borrow();
        let leaves = self.leaves.borrow();
        assert_eq!(leaf_values.len(), leaves.len(), "leaf count");
        let mut vals: Vec<T> = Vec::with_capacity(nodes.len());
        let mut next_leaf = 0;
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => {
                    next_leaf += 1;
                    leaf_values[next_leaf - 1]
                }
                Op::Const => node.value,
                Op::Add(a, b) => vals[a] + vals[b],
                Op::Sub(a, b) => vals[a] - vals[b],
                Op::Mul(a, b) => vals[a] * vals[b],
                Op::Scale(a, k) => vals[a] * k,
                Op::Neg(a) => -vals[a],
                Op::Exp(a) => vals[a].exp(),
                Op::Silu(a) => silu(vals[a]),
            };
            vals.push(v);
        }
        vals[output.idx]
    }

    /// Reverse sweep from `output`; returns d(output)/d(leaf) in leaf order.
    pub fn backward(&self, output: Var<'_, T>) -> Vec<T> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![T::zero(); nodes.len()];
        adj[output.idx] = T::one();
        for i in (0..=output.idx).rev() {
            let g = adj[i];
            if g == T::zero() {
                continue;
            }
            match nodes[i].op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a].value, nodes[b].value);
                    adj[a] += g * vb;
                    adj[b] += g * va;
                }
                Op::Scale(a, k) => adj[a] += g * k,
                Op::Neg(a) => adj[a] -= g,
                Op::Exp(a) => adj[a] += g * nodes[i].value,
                Op::Silu(a) => adj[a] += g * silu_prime(nodes[a].value),
            }
        }
        self.leaves.borrow().iter().map(|&l| adj[l]).collect()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> T {
        self.tape.nodes.borrow()[self.idx].value
    }

    fn unary(self, op: Op<T>, value: T) -> Self {
        Var { tape: self.tape, idx: self.tape.push(op, value) }
    }

    pub fn scale(self, k: T) -> Self {
        self.unary(Op::Scale(self.idx, k), self.value() * k)
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.idx), self.value().exp())
    }

    pub fn silu(self) -> Self {
        self.unary(Op::Silu(self.idx), silu(self.value()))
    }

    pub fn square(self) -> Self {
        self * self
    }
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.unary(Op::Add(self.idx, rhs.idx), self.value() + rhs.value())
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.unary(Op::Sub(self.idx, rhs.idx), self.value() - rhs.value())
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.unary(Op::Mul(self.idx, rhs.idx), self.value() * rhs.value())
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg(self.idx), -self.value())
    }
}

/// Value and gradient of a scalar loss of a flat parameter vector.
///
/// `loss` builds its expression from one tape variable per parameter; the
/// returned gradient is aligned with `params`.
pub fn grad<T, F>(loss: F, params: &[T]) -> Result<(T, Tensor<T>)>
where
    T: Scalar,
    F: for<'t> Fn(&'t GradientTape<T>, &[Var<'t, T>]) -> Var<'t, T>,
{
    let tape = GradientTape::new();
    let vars: Vec<Var<'_, T>> = params.iter().map(|&p| tape.leaf(p)).collect();
    let out = loss(&tape, &vars);
    let value = out.value();
    if !value.is_finite() {
        return Err(numeric_err("loss is not finite"));
    }
    let g = tape.backward(out);
    Ok((value, Tensor::new(vec![g.len()], g)?))
}

//! Dense row-major tensors with a reverse-mode tape.
//!
//! Every tensor produced by a differentiable operation on a gradient-tracking
//! input records its parents and a vector-Jacobian closure. Node ids grow
//! monotonically, so sorting the reachable nodes by descending id replays the
//! tape in reverse creation order, which is a valid topological order.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Vector-Jacobian product: receives the output gradient and the output data,
/// returns one optional gradient per parent.
pub(crate) type VjpFn = dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync;

struct Backward {
    parents: Vec<Tensor>,
    vjp: Box<VjpFn>,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    backward: Option<Backward>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

/// Runs `f` without recording any operation on the tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let previous = NO_GRAD.with(|flag| flag.replace(true));
    let out = f();
    NO_GRAD.with(|flag| flag.set(previous));
    out
}

fn recording() -> bool {
    !NO_GRAD.with(|flag| flag.get())
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, backward: Option<Backward>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            backward,
        }))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape { op: "tensor", lhs: shape.to_vec(), rhs: vec![data.len()] });
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    /// A gradient-tracking leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.requiring_grad())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_node(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_node(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_node(Vec::new(), vec![value], false, None)
    }

    /// Same data as a fresh leaf that tracks gradients.
    pub fn requiring_grad(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Same data, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Records the result of an operation. Falls back to an untracked tensor
    /// when no parent tracks gradients or recording is disabled.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        vjp: impl Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = recording() && parents.iter().any(|p| p.requires_grad());
        if !tracked {
            return Self::from_node(shape, data, false, None);
        }
        let backward = Backward { parents: parents.iter().map(|p| (*p).clone()).collect(), vjp: Box::new(vjp) };
        Self::from_node(shape, data, true, Some(backward))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Rank { op: "item", expected: 0, shape: self.shape().to_vec() });
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Identity of the underlying node; clones share it.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate(&self, incoming: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(existing) => existing.iter_mut().zip(incoming).for_each(|(a, b)| *a += b),
            None => *slot = Some(incoming.to_vec()),
        }
    }

    /// Reverse sweep from a scalar. Gradients accumulate into every reachable
    /// tensor that tracks gradients; call `zero_grad` between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Rank { op: "backward", expected: 0, shape: self.shape().to_vec() });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.0.id, ()).is_some() {
                continue;
            }
            if let Some(bw) = &t.0.backward {
                stack.extend(bw.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|n| std::cmp::Reverse(n.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in &nodes {
            let Some(grad) = pending.remove(&node.0.id) else {
                continue;
            };
            node.accumulate(&grad);
            let Some(bw) = &node.0.backward else {
                continue;
            };
            let parent_grads = (bw.vjp)(&grad, &node.0.data);
            debug_assert_eq!(parent_grads.len(), bw.parents.len());
            for (parent, g) in bw.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.numel());
                match pending.get_mut(&parent.0.id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.0.id, g);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape { op, lhs: lhs.shape().to_vec(), rhs: rhs.shape().to_vec() }
}

pub(crate) fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Rank { op, expected: rank, shape: t.shape().to_vec() });
    }
    Ok(())
}

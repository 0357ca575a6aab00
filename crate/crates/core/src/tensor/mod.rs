//! Dense row-major `f64` tensor with a reverse-mode tape.
//!
//! Every operation that touches a tensor requiring gradient records a node
//! holding its parents and a backward closure. The graph is rebuilt on each
//! forward pass; [`Tensor::backward`] walks it once in reverse creation
//! order and deposits gradients on the tracked leaves.

mod conv;
mod io;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{CmbError, Result};

pub use conv::BatchNormStats;
pub use ops::{sigmoid, softplus};
pub use io::{read_cmbt, read_cmbt_bytes, write_cmbt, write_cmbt_bytes, CMBT_MAGIC, CMBT_VERSION};

/// Maps the output gradient (and the output value) to one optional gradient
/// per parent, in parent order.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Cheap-to-clone handle to an immutable value plus its place in the tape.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}",
            self.0.shape, self.0.requires_grad
        )?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", self.0.data)?;
        }
        write!(f, ")")
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            parents,
            backward,
        }))
    }

    /// Creates a constant tensor. Fails unless `product(shape) == data.len()`
    /// and every dimension is positive.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CmbError::shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        if numel_of(shape) != data.len() {
            return Err(CmbError::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::build(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Leaf that accumulates gradient during [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(data, shape).map(Tensor::tracked)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized shape {shape:?}");
        Tensor::build(
            vec![value; numel_of(shape)],
            shape.to_vec(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![value], vec![1], false, Vec::new(), None)
    }

    /// Returns a leaf copy that requires gradient.
    pub fn tracked(self) -> Tensor {
        let (data, shape) = match Arc::try_unwrap(self.0) {
            Ok(node) => (node.data, node.shape),
            Err(shared) => (shared.data.clone(), shared.shape.clone()),
        };
        Tensor::build(data, shape, true, Vec::new(), None)
    }

    /// Shares the value but cuts it from the tape; never accumulates gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::build(
            self.0.data.clone(),
            self.0.shape.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Records an operation. Parents that do not require gradient are not
    /// retained, and when no parent requires gradient the closure is dropped.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        if parents.iter().any(|p| p.requires_grad()) {
            Tensor::build(data, shape, true, parents, Some(backward))
        } else {
            Tensor::build(data, shape, false, Vec::new(), None)
        }
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

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Backpropagates from this tensor with a seed gradient of ones.
    pub fn backward(&self) {
        self.backward_with(vec![1.0; self.numel()]);
    }

    pub fn backward_with(&self, seed: Vec<f64>) {
        assert_eq!(seed.len(), self.numel(), "seed gradient length");
        if !self.requires_grad() {
            return;
        }

        // Node ids grow with creation time, so descending id is a valid
        // reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.id) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_unstable_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, seed);
        for node in order {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                Some(bw) => {
                    let parent_grads = bw(&g, &node.0.data);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "gradient shape for {:?}", p.shape());
                        match grads.get_mut(&p.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.0.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
    }
}

/// Named learnable tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Parameter> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::param(data, shape)?,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Replaces the value with a fresh tracked leaf (gradient cleared).
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        let shape = self.tensor.shape().to_vec();
        if data.len() != numel_of(&shape) {
            return Err(CmbError::shape(format!(
                "{}: {} values for shape {shape:?}",
                self.name,
                data.len()
            )));
        }
        self.tensor = Tensor::build(data, shape, true, Vec::new(), None);
        Ok(())
    }
}

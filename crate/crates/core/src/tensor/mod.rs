//! Dense rank-1..4 tensors with reverse-mode autograd.
//!
//! Storage is contiguous row-major, shared behind an `Arc` so that reshapes
//! and detached copies are free. A tensor produced by an op on inputs that
//! require grad carries a backward node; [`Tensor::backward`] walks those
//! nodes once, accumulates into the `grad` buffers of leaves, and frees the
//! graph.

mod element;
pub mod finite_diff;
pub mod kink;
mod ops;

use std::cell::Cell;
use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub(crate) use element::{dispatch, Element, Storage};
pub use element::DType;
pub use ops::{BatchNormStats, Conv2dParams};

use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn FnOnce(&Storage) -> Result<Vec<Option<Storage>>> + Send>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Storage>,
    requires_grad: bool,
    leaf: bool,
    node: Mutex<Option<Node>>,
    consumed: AtomicBool,
    grad: Mutex<Option<Storage>>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..=4, got {shape:?}"),
        ));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {n} elements, data has {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Storage>, requires_grad: bool, node: Option<Node>) -> Self {
        let leaf = node.is_none();
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            leaf,
            node: Mutex::new(node),
            consumed: AtomicBool::new(false),
            grad: Mutex::new(None),
        }))
    }

    pub(crate) fn from_storage(shape: Vec<usize>, data: Storage) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self::build(shape, Arc::new(data), false, None))
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::from_storage(shape.to_vec(), Storage::F32(data))
    }

    pub fn from_f64_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::from_storage(shape.to_vec(), Storage::F64(data))
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Result<Self> {
        let n = shape.iter().product();
        let s = match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
        };
        Self::from_storage(shape.to_vec(), s)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Self> {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Result<Self> {
        Self::full(shape, 1.0, dtype)
    }

    pub fn scalar(v: f64, dtype: DType) -> Self {
        Self::full(&[1], v, dtype).expect("scalar shape is valid")
    }

    /// Output of an op. Records a backward node only when grad mode is on
    /// and some parent requires grad; `make_backward` is not called otherwise.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Storage,
        parents: &[&Tensor],
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if !data.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(Self::from_op_unchecked(shape, Arc::new(data), parents, make_backward))
    }

    pub(crate) fn from_op_unchecked(
        shape: Vec<usize>,
        data: Arc<Storage>,
        parents: &[&Tensor],
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = record.then(|| Node {
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: make_backward(),
        });
        Self::build(shape, data, record, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
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

    pub fn dtype(&self) -> DType {
        self.0.data.dtype()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::shape("dims4", format!("expected rank 4, got {s:?}"))),
        }
    }

    pub(crate) fn storage_arc(&self) -> &Arc<Storage> {
        &self.0.data
    }

    pub(crate) fn values<T: Element>(&self) -> &[T] {
        T::view(&self.0.data)
    }

    pub fn to_vec_f32(&self) -> Vec<f32> {
        self.0.data.to_f32_vec()
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.0.data.to_f64_vec()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("tensor has shape {:?}", self.shape())));
        }
        Ok(self.to_vec_f64()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.leaf
    }

    /// New leaf sharing this tensor's storage.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// New leaf sharing this tensor's storage with the given flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), requires_grad, None)
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.with_requires_grad(self.requires_grad());
        }
        Self::build(
            self.0.shape.clone(),
            Arc::new(self.0.data.cast(dtype)),
            self.requires_grad(),
            None,
        )
    }

    pub fn grad(&self) -> Option<Tensor> {
        let g = self.0.grad.lock().expect("grad lock poisoned");
        g.as_ref()
            .map(|s| Self::build(self.0.shape.clone(), Arc::new(s.clone()), false, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: &Storage) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.accumulate(g),
            None => *slot = Some(g.clone()),
        }
    }

    /// Reverse-mode accumulation from a scalar loss into every leaf that
    /// requires grad. The recorded graph is consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let seed = Storage::cast(&Storage::F64(vec![1.0]), self.dtype());
        let has_node = self.0.node.lock().expect("node lock").is_some();
        if !has_node {
            if self.0.consumed.load(Ordering::Acquire) {
                return Err(Error::GraphConsumed);
            }
            if self.is_leaf() && self.requires_grad() {
                self.accumulate_grad(&seed);
                return Ok(());
            }
            return Err(Error::NoGraph);
        }

        // Post-order DFS: every tensor is emitted after all of its parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            let node = t.0.node.lock().expect("node lock");
            if let Some(n) = node.as_ref() {
                for p in &n.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Storage> = HashMap::new();
        grads.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let node = t.0.node.lock().expect("node lock").take();
            match node {
                Some(node) => {
                    t.0.consumed.store(true, Ordering::Release);
                    let parent_grads = (node.backward)(&g)?;
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match grads.entry(p.id()) {
                            Entry::Occupied(mut e) => e.get_mut().accumulate(&pg),
                            Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
                None => {
                    if t.is_leaf() && t.requires_grad() {
                        t.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariants() {
        assert!(Tensor::from_vec(vec![1.0; 6], &[2, 3]).is_ok());
        assert!(Tensor::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::from_vec(vec![1.0; 32], &[2, 2, 2, 2, 2]).is_err());
        assert!(Tensor::from_vec(vec![], &[0]).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::from_vec(vec![0.5, -1.0, 3.0, 2.0, 1.0, 0.0], &[2, 3])
            .unwrap()
            .with_requires_grad(true);
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().to_vec_f32(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_sum_relu() {
        let x = Tensor::from_vec(vec![-1.0, 2.0], &[2]).unwrap().with_requires_grad(true);
        x.relu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().to_vec_f32(), vec![0.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().with_requires_grad(true);
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::GraphConsumed)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x) reuses x on both sides.
        let x = Tensor::from_vec(vec![1.5, -2.0], &[2]).unwrap().with_requires_grad(true);
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().to_vec_f32(), vec![3.0, -4.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::from_vec(vec![1.0], &[1]).unwrap().with_requires_grad(true);
        let y = {
            let _g = no_grad();
            x.scale(2.0).unwrap()
        };
        assert!(!y.requires_grad());
        assert!(matches!(y.backward(), Err(Error::NoGraph)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().with_requires_grad(true);
        assert!(matches!(x.relu().unwrap().backward(), Err(Error::NonScalarLoss(_))));
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for every
//! leaf that requires them (explicit leaves and trainable parameters).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Maps the upstream gradient to one optional gradient per parent. The second
/// argument flags which parents actually need a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_ids: RefCell<HashMap<String, usize>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) id: usize,
    pub(crate) g: &'g Graph<'g>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<'s> Graph<'s> {
    /// Graph that records backward closures for trainable parameters and leaves.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::build(Some(store), true)
    }

    /// Graph for inference: nothing requires a gradient.
    pub fn no_grad(store: &'s ParamStore) -> Self {
        Self::build(Some(store), false)
    }

    /// Graph with no parameter store, for pure tensor computations.
    pub fn detached(grad_enabled: bool) -> Graph<'static> {
        Graph::build(None, grad_enabled)
    }

    fn build(store: Option<&'s ParamStore>, grad_enabled: bool) -> Self {
        Self {
            store,
            nodes: RefCell::new(Vec::with_capacity(512)),
            param_ids: RefCell::new(HashMap::new()),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn store(&self) -> Option<&'s ParamStore> {
        self.store
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), false, None)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`] when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_leaf(Arc::new(value), requires_grad && self.grad_enabled, None)
    }

    /// Looks up a named parameter. Repeated lookups return the same node.
    ///
    /// Panics if the graph has no store or the name is unknown; parameter names
    /// are fixed by model construction, so a miss is a programming error.
    pub fn param(&self, name: &str) -> Var<'_> {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return Var { id, g: self };
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let requires = self.grad_enabled && p.trainable;
        let v = self.push_leaf(p.value.clone(), requires, Some(name.to_string()));
        self.param_ids.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool, param: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents: Vec::new(), backward: None, param });
        Var { id: nodes.len() - 1, g: self }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            param: None,
        });
        Var { id: nodes.len() - 1, g: self }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.numel(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        let mut out = Gradients::default();
        if !root.requires_grad {
            return out;
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(f) => {
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let pgs = f(&g, &needs);
                    debug_assert_eq!(pgs.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgs) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg).expect("gradient shape"),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None if node.requires_grad => {
                    if let Some(name) = &node.param {
                        out.by_name.insert(name.clone(), g.clone());
                    }
                    out.by_id.insert(id, g);
                }
                None => {}
            }
        }
        out
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&v.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph<'g> {
        self.g
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires_grad_of(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Var<'g> {
        let v = self.g.value_of(self.id);
        self.g.push_leaf(v, false, None)
    }
}

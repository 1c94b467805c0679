use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

pub(crate) type Pullback = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    pullback: Option<Pullback>,
    requires_grad: bool,
}

/// Attribution bucket for multiply-accumulate counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCategory {
    Other = 0,
    AttentionScore = 1,
    ValueMix = 2,
    FeedForward = 3,
    Interpolation = 4,
}

/// How [`Var::round_ste`] behaves in the forward pass.
///
/// `Record` rounds normally and remembers each residual `round(x) - x`;
/// `Replay` adds the remembered residuals instead of rounding, which turns
/// the quantizer into a smooth function whose exact derivative is the
/// straight-through gradient. Finite differences against a replaying tape
/// therefore check the straight-through definition.
#[derive(Debug, Clone, Default)]
pub enum SteMode {
    #[default]
    Round,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    category: Cell<OpCategory>,
    counts: RefCell<[u64; 5]>,
    ste: RefCell<SteMode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            category: Cell::new(OpCategory::Other),
            counts: RefCell::new([0; 5]),
            ste: RefCell::new(SteMode::Round),
        }
    }

    /// A tape that evaluates but never records pullbacks.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_node(value, Vec::new(), None, self.grad_enabled)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), Vec::new(), None, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var<'_>) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[var.id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn push_node(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        pullback: Option<Pullback>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            pullback,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records the result of an op. `make_pullback` is only invoked when at
    /// least one parent needs a gradient.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], make_pullback: F) -> Var<'_>
    where
        F: FnOnce() -> Pullback,
    {
        let needs = self.grad_enabled && parents.iter().any(|p| self.requires_grad(p.id));
        let pullback = needs.then(make_pullback);
        self.push_node(
            Rc::new(value),
            parents.iter().map(|p| p.id).collect(),
            pullback,
            needs,
        )
    }

    pub fn set_category(&self, category: OpCategory) -> OpCategory {
        self.category.replace(category)
    }

    pub(crate) fn count(&self, macs: u64) {
        self.counts.borrow_mut()[self.category.get() as usize] += macs;
    }

    pub(crate) fn count_in(&self, category: OpCategory, ops: u64) {
        self.counts.borrow_mut()[category as usize] += ops;
    }

    /// Multiply-accumulate totals per [`OpCategory`] since the tape was created.
    pub fn counts(&self, category: OpCategory) -> u64 {
        self.counts.borrow()[category as usize]
    }

    pub fn set_ste_mode(&self, mode: SteMode) {
        *self.ste.borrow_mut() = mode;
    }

    pub fn take_ste_mode(&self) -> SteMode {
        self.ste.take()
    }

    pub(crate) fn ste_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut ste = self.ste.borrow_mut();
        match &mut *ste {
            SteMode::Round => Ok(x.map(f64::round)),
            SteMode::Record(residuals) => {
                let rounded = x.map(f64::round);
                residuals.push(rounded.zip_map(x, |r, v| r - v));
                Ok(rounded)
            }
            SteMode::Replay(residuals, cursor) => {
                let r = residuals.get(*cursor).ok_or_else(|| TensorError::Invalid {
                    op: "round_ste",
                    msg: "replay ran out of recorded residuals".into(),
                })?;
                super::check_same("round_ste", x, r)?;
                *cursor += 1;
                Ok(x.zip_map(r, |v, d| v + d))
            }
        }
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Node ids are assigned in creation order, which is a topological order,
    /// so a single descending pass visits every node after all its consumers.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if nodes[output.id].value.numel() != 1 {
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(&out_shape, 1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pullback) = &node.pullback {
                let parent_grads = pullback(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the node was not reached.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads.get_mut(var.id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

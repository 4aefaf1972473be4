//! Reverse-mode automatic differentiation over a flat list of nodes.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::float::Float;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Whether layers behave as during training (dropout on, batch statistics)
/// or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// One forward pass: the recorded computation, the parameters it read and
/// any running-statistic updates it produced.
pub struct Graph<'s, T: Float> {
    nodes: Vec<Node<T>>,
    store: &'s ParamStore<T>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
    kinks: Vec<Var>,
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            store,
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
            kinks: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient without being a stored parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored tensor. Trainable parameters receive gradients;
    /// buffers are read as constants. Repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = self.store.is_trainable(id);
        self.nodes.push(Node {
            value: self.store.get(id).clone(),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Marks `v` as the input of a ReLU.
    pub(crate) fn record_kink(&mut self, v: Var) {
        self.kinks.push(v);
    }

    /// Which side of zero every ReLU input lies on, in recording order. Two
    /// passes with the same pattern ran through the same linear pieces.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.kink_inputs().map(|x| x > T::zero()).collect()
    }

    /// Distance of the closest ReLU input to zero, or infinity without ReLUs.
    pub fn kink_margin(&self) -> f64 {
        self.kink_inputs()
            .map(|x| x.f64().abs())
            .fold(f64::INFINITY, f64::min)
    }

    fn kink_inputs(&self) -> impl Iterator<Item = T> + '_ {
        self.kinks
            .iter()
            .flat_map(|v| self.nodes[v.0].value.data().iter().copied())
    }

    /// Running-statistic values computed during this pass, in order.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward() needs a scalar root"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                out: &node.value,
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                needs: node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if let Some(g) = g {
                    debug_assert_eq!(g.shape(), self.nodes[j].value.shape());
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(grad);
        }
        Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter the pass touched, ordered by id.
    pub fn param_grads(self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .grads
            .into_iter()
            .zip(self.params)
            .filter_map(|(g, p)| match (g, p) {
                (Some(g), Some(p)) => Some((p, g)),
                _ => None,
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

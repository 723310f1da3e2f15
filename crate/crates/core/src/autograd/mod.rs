//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every leaf that was created with `requires_grad = true`.
//! Nodes whose inputs do not require gradients are recorded without a
//! backward closure, so frozen parameter groups cost nothing on the way back.

mod conv;
mod loss;
pub(crate) mod ops;

pub use conv::ConvSpec;
pub use loss::COSINE_GUARD;

use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure can see about its node.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor,
    /// This node's forward value.
    pub out: &'a Tensor,
    /// Forward values of the parents, in the order they were passed to [`Graph::custom`].
    pub inputs: Vec<&'a Tensor>,
    /// Which parents need a gradient; closures may return `None` for the rest.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with a hand-written backward rule.
    pub fn custom(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(input_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if let Some(g) = g {
                    debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite difference of `f` around `x` along every coordinate.
    pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        let mut probe = x.clone();
        for i in 0..x.numel() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let fp = f(&probe);
            probe.data_mut()[i] = orig - h;
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            out.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    pub fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, rel: f64) {
        let scale = numeric
            .data()
            .iter()
            .chain(analytic.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            assert!(
                (a - n).abs() <= rel * scale,
                "gradient mismatch at {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Random tensor in [-1, 1] from a tiny LCG; keeps unit tests dependency-free.
    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }
}

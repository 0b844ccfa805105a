//! Named parameter storage with constraint transforms and gradient buffers.
//!
//! Parameters are stored unconstrained; the transform maps them to the
//! constrained value the model math consumes. Softplus keeps positives
//! positive without the gradient blow-up of an exp transform, and
//! lower-triangular masking keeps Cholesky factors triangular.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{inv_softplus_val, softplus_val, Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Positive via softplus.
    Positive,
    /// Square matrix restricted to its lower triangle.
    LowerTriangular,
}

impl Transform {
    pub fn tag(&self) -> u8 {
        match self {
            Transform::Identity => 0,
            Transform::Positive => 1,
            Transform::LowerTriangular => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Transform> {
        match tag {
            0 => Ok(Transform::Identity),
            1 => Ok(Transform::Positive),
            2 => Ok(Transform::LowerTriangular),
            t => Err(Error::Checkpoint(format!("unknown transform tag {t}"))),
        }
    }

    /// Unconstrained -> constrained, value level.
    pub fn constrain(&self, raw: &[f64], shape: &[usize]) -> Vec<f64> {
        match self {
            Transform::Identity => raw.to_vec(),
            Transform::Positive => raw.iter().map(|&v| softplus_val(v)).collect(),
            Transform::LowerTriangular => {
                let n = shape[shape.len() - 1];
                let mut out = raw.to_vec();
                for block in out.chunks_mut(n * n) {
                    for i in 0..n {
                        for j in (i + 1)..n {
                            block[i * n + j] = 0.0;
                        }
                    }
                }
                out
            }
        }
    }

    /// Constrained -> unconstrained, value level.
    pub fn unconstrain(&self, constrained: &[f64], shape: &[usize]) -> Vec<f64> {
        match self {
            Transform::Identity => constrained.to_vec(),
            Transform::Positive => constrained.iter().map(|&v| inv_softplus_val(v)).collect(),
            Transform::LowerTriangular => self.constrain(constrained, shape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub transform: Transform,
    pub raw: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Ordered map of named parameters. Iteration order is the deterministic
/// (lexicographic) name order, which the optimizer and checkpoints rely on.
#[derive(Debug, Default, Clone)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter from its constrained initial value.
    pub fn insert(&mut self, name: &str, shape: &[usize], transform: Transform, init: &[f64]) {
        assert_eq!(
            shape.iter().product::<usize>(),
            init.len(),
            "parameter '{name}': init length does not match shape"
        );
        assert!(
            !self.entries.contains_key(name),
            "parameter '{name}' registered twice"
        );
        let raw = transform.unconstrain(init, shape);
        let n = raw.len();
        self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                transform,
                raw,
                grad: vec![0.0; n],
                trainable: true,
            },
        );
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .trainable = trainable;
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Constrained values of a parameter.
    pub fn constrained(&self, name: &str) -> Vec<f64> {
        let p = self.get(name);
        p.transform.constrain(&p.raw, &p.shape)
    }

    /// Overwrites a parameter from a constrained value.
    pub fn set_constrained(&mut self, name: &str, values: &[f64]) {
        let p = self.get_mut(name);
        assert_eq!(p.raw.len(), values.len());
        let shape = p.shape.clone();
        p.raw = p.transform.unconstrain(values, &shape);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Starts a graph-building pass over these parameters.
    pub fn graph(&self) -> GraphParams<'_> {
        GraphParams {
            store: self,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Writes `grads` into the gradient buffers of every trainable parameter
    /// bound in a graph pass. Untouched parameters get zero gradients. With
    /// `accumulate`, buffers are added to instead of replaced.
    pub fn absorb_gradients(&mut self, bindings: &LeafBindings, grads: &Gradients, accumulate: bool) {
        for (name, param) in self.entries.iter_mut() {
            if !param.trainable {
                continue;
            }
            if !accumulate {
                param.grad.iter_mut().for_each(|g| *g = 0.0);
            }
            if let Some(leaf) = bindings.leaves.get(name) {
                if let Some(g) = grads.wrt(leaf) {
                    for (acc, v) in param.grad.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
        }
    }
}

/// Owned leaf tensors from a finished graph pass, keyed by parameter name.
pub struct LeafBindings {
    leaves: HashMap<String, Tensor>,
}

/// Lazily materialized graph leaves for one forward/backward pass.
///
/// Trainable parameters enter the graph as differentiable leaves followed by
/// their transform; frozen parameters enter as constants so no gradient work
/// is spent on them.
pub struct GraphParams<'s> {
    store: &'s ParameterStore,
    cache: RefCell<HashMap<String, (Tensor, Tensor)>>,
}

impl GraphParams<'_> {
    /// The constrained tensor for `name`, building it on first use.
    pub fn get(&self, name: &str) -> Tensor {
        if let Some((_, constrained)) = self.cache.borrow().get(name) {
            return constrained.clone();
        }
        let p = self.store.get(name);
        let leaf = if p.trainable {
            Tensor::leaf(&p.shape, p.raw.clone())
        } else {
            Tensor::new(&p.shape, p.raw.clone())
        };
        let constrained = match p.transform {
            Transform::Identity => leaf.clone(),
            Transform::Positive => leaf.softplus(),
            Transform::LowerTriangular => leaf.tril(),
        };
        self.cache
            .borrow_mut()
            .insert(name.to_string(), (leaf, constrained.clone()));
        constrained
    }

    /// Ends the pass, releasing the store borrow and keeping the leaves for
    /// [`ParameterStore::absorb_gradients`].
    pub fn into_bindings(self) -> LeafBindings {
        let leaves = self
            .cache
            .into_inner()
            .into_iter()
            .map(|(name, (leaf, _))| (name, leaf))
            .collect();
        LeafBindings { leaves }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn positive_transform_round_trip() {
        let vals = [1e-6, 0.1, 1.0, 3.0, 17.5, 100.0, 1e4];
        for &v in &vals {
            let raw = Transform::Positive.unconstrain(&[v], &[1]);
            let back = Transform::Positive.constrain(&raw, &[1]);
            assert!(
                (back[0] - v).abs() <= 1e-12 * v.max(1.0),
                "round trip failed for {v}: got {}",
                back[0]
            );
        }
    }

    #[test]
    fn lower_triangular_zeroes_upper() {
        let mut store = ParameterStore::new();
        store.insert(
            "l",
            &[2, 2],
            Transform::LowerTriangular,
            &[1.0, 5.0, 2.0, 3.0],
        );
        assert_eq!(store.constrained("l"), vec![1.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn gradients_land_in_buffers() {
        let mut store = ParameterStore::new();
        store.insert("x", &[2], Transform::Identity, &[1.0, 2.0]);
        store.insert("unused", &[1], Transform::Identity, &[5.0]);
        let gp = store.graph();
        let x = gp.get("x");
        let obj = x.square().sum_all();
        let grads = backward(&obj);
        store.absorb_gradients(&gp.into_bindings(), &grads, false);
        assert_eq!(store.get("x").grad, vec![2.0, 4.0]);
        assert_eq!(store.get("unused").grad, vec![0.0]);
    }

    #[test]
    fn frozen_parameters_enter_as_constants() {
        let mut store = ParameterStore::new();
        store.insert("x", &[1], Transform::Identity, &[2.0]);
        store.set_trainable("x", false);
        let gp = store.graph();
        let x = gp.get("x");
        assert!(!x.requires_grad());
    }

    #[test]
    fn positive_gradient_chains_through_softplus() {
        let mut store = ParameterStore::new();
        store.insert("v", &[1], Transform::Positive, &[2.0]);
        let gp = store.graph();
        let v = gp.get("v");
        assert!((v.item() - 2.0).abs() < 1e-12);
        let obj = v.sum_all();
        let grads = backward(&obj);
        store.absorb_gradients(&gp.into_bindings(), &grads, false);
        // d softplus(raw) / d raw = sigmoid(raw), raw = inv_softplus(2)
        let raw = store.get("v").raw[0];
        let expect = 1.0 / (1.0 + (-raw).exp());
        assert!((store.get("v").grad[0] - expect).abs() < 1e-12);
    }
}

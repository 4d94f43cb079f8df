use std::collections::{BTreeMap, HashMap};

use super::{Graph, ParamStore, Real, Var};
use crate::error::{Error, Result};

/// A forward pass in progress: a fresh [`Graph`] plus lazily bound
/// parameters from a [`ParamStore`].
///
/// Parameters are only placed on the tape when a module asks for them, so
/// modules that are not part of the forward pass never receive gradients.
pub struct Ctx<'s, T: Real = f32> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: HashMap<String, Var>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?;
        let v = self.g.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters that took part in the forward pass, sorted.
    pub fn bound_names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.bound.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    /// Back-propagate `loss` and return the gradient of every bound
    /// parameter, keyed by name.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Vec<T>>> {
        let grads = self.g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let n = self.g.value(v).len();
            let g = grads
                .get(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); n]);
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Add gradients from [`Ctx::param_grads`] into the store's `grad` fields.
pub fn accumulate_grads<T: Real>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
) -> Result<()> {
    for (name, g) in grads {
        store
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?
            .accumulate_grad(g);
    }
    Ok(())
}

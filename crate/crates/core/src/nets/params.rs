//! Named parameter traversal and gradient containers.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{DibsError, Result};
use crate::tensor::{Scalar, Tensor};

/// Anything holding named parameter arrays. Names are dotted paths such as
/// `decoder.2.0.weight`; traversal order is stable and defines the
/// checkpoint layout.
pub trait ParamSet<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gradient arrays keyed by parameter name, mirroring a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamGrad<T> {
    pub fn zeros_for(set: &impl ParamSet<T>) -> Self {
        let mut entries = IndexMap::new();
        set.visit_params("", &mut |name, t| {
            entries.insert(name, Tensor::zeros(t.shape()));
        });
        Self { entries }
    }

    /// Accumulation slot for `name`. Panics on an unknown name: gradients are
    /// always created from the set they are applied to.
    pub fn slot(&mut self, name: &str) -> &mut Tensor<T> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("no gradient slot named {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn scale(&mut self, s: T) {
        self.entries.values_mut().for_each(|t| t.scale(s));
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (k, v) in &other.entries {
            self.slot(k).add_assign(v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    /// Names with any nonzero entry.
    pub fn nonzero_names(&self) -> Vec<&str> {
        self.entries.iter().filter(|(_, t)| t.data().iter().any(|v| *v != T::zero())).map(|(k, _)| k.as_str()).collect()
    }

    /// Checks that names and shapes line up exactly with `set`.
    pub fn check_matches(&self, set: &impl ParamSet<T>) -> Result<()> {
        let mut expected = Vec::new();
        set.visit_params("", &mut |name, t| expected.push((name, t.shape().to_vec())));
        let actual: Vec<_> = self.entries.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        if expected != actual {
            return Err(DibsError::shape("gradient layout does not match parameter set"));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().map(|v| v.to_f64().unwrap())).collect()
    }
}

impl<T: Scalar> ParamSet<T> for ParamGrad<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (k, t) in &self.entries {
            f(join(prefix, k), t);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (k, t) in self.entries.iter_mut() {
            f(join(prefix, k), t);
        }
    }
}

/// All parameters of `set` whose names pass `keep`, flattened in traversal order.
pub fn flatten_params<T: Scalar>(set: &impl ParamSet<T>, keep: impl Fn(&str) -> bool) -> Vec<f64> {
    let mut out = Vec::new();
    set.visit_params("", &mut |name, t| {
        if keep(&name) {
            out.extend(t.data().iter().map(|v| v.to_f64().unwrap()));
        }
    });
    out
}

/// Inverse of [`flatten_params`] for the same filter.
pub fn assign_params<T: Scalar>(set: &mut impl ParamSet<T>, keep: impl Fn(&str) -> bool, values: &[f64]) {
    let mut at = 0;
    set.visit_params_mut("", &mut |name, t| {
        if keep(&name) {
            for v in t.data_mut() {
                *v = T::lit(values[at]);
                at += 1;
            }
        }
    });
    assert_eq!(at, values.len(), "flat parameter length mismatch");
}

/// SHA-256 over names, shapes and little-endian values of the selected
/// parameters.
pub fn param_digest<T: Scalar>(set: &impl ParamSet<T>, keep: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    set.visit_params("", &mut |name, t| {
        if !keep(&name) {
            return;
        }
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    });
    hex::encode(h.finalize())
}

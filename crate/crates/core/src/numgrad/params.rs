use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::GradError;

/// Named model parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), GradError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(GradError::DuplicateParam { name });
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Builder-style insert; panics on a duplicate name.
    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.insert(name, value).expect("duplicate parameter name");
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, GradError> {
        self.get(name).ok_or_else(|| GradError::MissingParam {
            name: name.to_string(),
        })
    }

    /// Overwrites element `index` (row-major) of parameter `name`.
    pub fn set_element(&mut self, name: &str, index: usize, value: f64) -> Result<(), GradError> {
        let t = self.entries.get_mut(name).ok_or_else(|| GradError::MissingParam {
            name: name.to_string(),
        })?;
        let shape = t.shape().to_vec();
        let mut data = std::mem::replace(t, Tensor::scalar(0.0)).into_data();
        if index >= data.len() {
            *t = Tensor::from_parts(shape.clone(), data);
            return Err(GradError::Shape {
                op: "set_element",
                left: shape,
                right: vec![index],
            });
        }
        data[index] = value;
        *t = Tensor::from_parts(shape, data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes.
    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    fn check_congruent(&self, other: &ParamSet) -> Result<(), GradError> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(GradError::Incongruent)
        }
    }

    fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet, GradError> {
        self.check_congruent(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((k, a), b)| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (k.clone(), Tensor::from_parts(a.shape().to_vec(), data))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet, GradError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet, GradError> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &ParamSet) -> Result<ParamSet, GradError> {
        self.zip_with(other, |a, b| a + alpha * b)
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.map(&f)))
            .collect();
        ParamSet { entries }
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    pub fn l2_distance(&self, other: &ParamSet) -> Result<f64, GradError> {
        let d = self.sub(other)?;
        Ok(d.entries.values().map(|t| t.dot(t)).sum::<f64>().sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Names, shapes and little-endian values in name order; equal byte
    /// strings mean bit-identical parameters.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.entries {
            out.extend_from_slice(k.as_bytes());
            out.push(0);
            for &d in v.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Records every entry as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> ParamVars {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        ParamVars { entries }
    }

    /// Prefixes every name with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
            .collect();
        ParamSet { entries }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamSet { entries }
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<T: IntoIterator<Item = (String, Tensor)>>(iter: T) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// A [`ParamSet`] bound to nodes of a [`Tape`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    entries: BTreeMap<String, Var>,
}

/// Gradient values for a bound parameter set.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub grads: ParamSet,
    /// Parameters the loss does not depend on; their gradient is zero.
    pub unreachable: Vec<String>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, GradError> {
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| GradError::MissingParam {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.values().copied().collect()
    }

    pub fn values(&self, tape: &Tape) -> ParamSet {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.value(*v)))
            .collect()
    }

    /// Gradient values of `loss`; zero (and reported) for unreachable entries.
    pub fn grad_values(&self, tape: &Tape, loss: Var) -> Result<ParamGrad, GradError> {
        let vars = self.vars();
        let grads = tape.grad_values(loss, &vars)?;
        let mut out = ParamSet::new();
        let mut unreachable = Vec::new();
        for ((name, var), g) in self.entries.iter().zip(grads) {
            let g = match g {
                Some(g) => g,
                None => {
                    unreachable.push(name.clone());
                    Tensor::zeros(&tape.shape(*var))
                }
            };
            out.insert(name.clone(), g)?;
        }
        if !unreachable.is_empty() {
            log::debug!("loss does not depend on {unreachable:?}");
        }
        Ok(ParamGrad {
            grads: out,
            unreachable,
        })
    }

    /// Gradients kept on the tape so they can be differentiated again.
    /// Unreachable entries get a zero leaf.
    pub fn grad_vars(&self, tape: &Tape, loss: Var) -> Result<(ParamVars, Vec<String>), GradError> {
        let vars = self.vars();
        let grads = tape.grad(loss, &vars)?;
        let mut entries = BTreeMap::new();
        let mut unreachable = Vec::new();
        for ((name, var), g) in self.entries.iter().zip(grads) {
            let g = match g {
                Some(g) => g,
                None => {
                    unreachable.push(name.clone());
                    tape.leaf(Tensor::zeros(&tape.shape(*var)))
                }
            };
            entries.insert(name.clone(), g);
        }
        Ok((ParamVars { entries }, unreachable))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<T: IntoIterator<Item = (String, Var)>>(iter: T) -> Self {
        ParamVars {
            entries: iter.into_iter().collect(),
        }
    }
}

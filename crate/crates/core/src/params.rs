//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::uniform;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Parameters keyed by dotted names, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect(),
        }
    }

    /// Adds a weight `[fan_in, fan_out]` and zero bias, uniform on `±1/sqrt(fan_in)`.
    pub fn init_affine<R: Rng + ?Sized>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| uniform(rng, -bound, bound)).collect();
        self.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Adds a kernel `[c_out, c_in, k]` and zero bias, uniform on `±1/sqrt(c_in·k)`.
    pub fn init_conv<R: Rng + ?Sized>(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        let w = (0..c_out * c_in * k).map(|_| uniform(rng, -bound, bound)).collect();
        self.insert(format!("{prefix}.w"), Tensor::new(vec![c_out, c_in, k], w).expect("sized"));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
    }

    pub fn to_record(&self) -> BTreeMap<String, ParamRecord> {
        self.params
            .iter()
            .map(|(k, t)| {
                (k.clone(), ParamRecord { shape: t.shape().to_vec(), data: t.data().iter().map(|v| v.as_f64()).collect() })
            })
            .collect()
    }

    pub fn from_record(rec: &BTreeMap<String, ParamRecord>) -> Result<Self> {
        let mut store = Self::new();
        for (k, r) in rec {
            let t = Tensor::new(r.shape.clone(), r.data.iter().map(|&v| F::lit(v)).collect())
                .map_err(|e| Error::Format(format!("parameter `{k}`: {e}")))?;
            if !t.all_finite() {
                return Err(Error::Format(format!("parameter `{k}` has non-finite entries")));
            }
            store.insert(k.clone(), t);
        }
        Ok(store)
    }
}

/// Serialized form of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'t, F> {
    vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Scalar> Bound<'t, F> {
    /// Binds externally created variables, e.g. for finite-difference checks.
    pub fn from_vars(vars: BTreeMap<String, Var<'t, F>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// `x·W + b` using `{prefix}.w` and `{prefix}.b`.
    pub fn affine(&self, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.affine(self.get(&format!("{prefix}.w"))?, self.get(&format!("{prefix}.b"))?)
    }

    pub fn conv(&self, prefix: &str, x: Var<'t, F>, pad: usize) -> Result<Var<'t, F>> {
        x.conv1d(self.get(&format!("{prefix}.w"))?, self.get(&format!("{prefix}.b"))?, pad)
    }

    /// Gradients in store order; parameters the loss never touched get zeros.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng_from_seed;

    #[test]
    fn record_round_trip() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(1);
        s.init_affine("a", 3, 2, &mut rng);
        s.init_conv("c", 2, 4, 5, &mut rng);
        let back = ParamStore::<f64>::from_record(&s.to_record()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.num_scalars(), 3 * 2 + 2 + 4 * 2 * 5 + 4);
        assert!(matches!(s.get("nope"), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn bound_affine_gradients() {
        let mut s = ParamStore::<f64>::new();
        s.init_affine("l", 2, 1, &mut rng_from_seed(2));
        let tape = Tape::new();
        let b = s.bind(&tape);
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let y = b.affine("l", x).unwrap().sum_all();
        let g = b.collect_grads(&tape.backward(y).unwrap());
        assert_eq!(g["l.w"].data(), &[1.0, 2.0]);
        assert_eq!(g["l.b"].data(), &[1.0]);
    }
}

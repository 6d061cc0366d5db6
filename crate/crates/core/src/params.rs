//! Named, partition-tagged parameter sets.
//!
//! Every model parameter carries a tag saying which side of the
//! client/server split owns it: encoder parameters are shared and
//! aggregated globally, decoder parameters stay private to a client.
//! A [`ParamSet`] is an immutable value; updates build a new set.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which side of the shared/personal split a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Encoder,
    Decoder,
}

impl Partition {
    pub fn tag_byte(self) -> u8 {
        match self {
            Partition::Encoder => 0,
            Partition::Decoder => 1,
        }
    }

    pub fn from_tag_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Partition::Encoder),
            1 => Ok(Partition::Decoder),
            other => Err(Error::Checkpoint(format!("unknown partition tag {other}"))),
        }
    }
}

/// Which parameters a training step is allowed to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    Decoder,
    All,
}

impl Scope {
    pub fn includes(self, p: Partition) -> bool {
        match self {
            Scope::All => true,
            Scope::Encoder => p == Partition::Encoder,
            Scope::Decoder => p == Partition::Decoder,
        }
    }
}

/// Named parameters with partition tags, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, (Partition, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, partition: Partition, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.insert(name.to_string(), (partition, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn partition_of(&self, name: &str) -> Option<Partition> {
        self.entries.get(name).map(|(p, _)| *p)
    }

    /// Iterates `(name, partition, tensor)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Partition, &Tensor)> {
        self.entries.iter().map(|(n, (p, t))| (n.as_str(), *p, t))
    }

    /// Total scalar count across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|(_, t)| t.numel()).sum()
    }

    /// The sub-set carrying the given tag (the shared part for
    /// `Encoder`, the personal part for `Decoder`).
    pub fn subset(&self, partition: Partition) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .filter(|(_, (p, _))| *p == partition)
            .map(|(n, e)| (n.clone(), e.clone()))
            .collect();
        ParamSet { entries }
    }

    /// Union of two sets with disjoint names.
    pub fn merged_with(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (name, partition, tensor) in other.iter() {
            out.insert(name, partition, tensor.clone())?;
        }
        Ok(out)
    }

    /// Bitwise equality of names, tags and every value.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.0 == b.0 && a.1 == b.1 && a.2.bits_eq(b.2))
    }
}

/// One SGD step over the scoped partition: `p <- p - lr * g`.
///
/// Parameters outside the scope are returned bit-identical; scoped
/// parameters without a gradient entry are also left untouched.
/// Gradient names that match no parameter are an error.
pub fn sgd_step(
    params: &ParamSet,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    scope: Scope,
) -> Result<ParamSet> {
    if lr <= 0.0 || lr.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for name in grads.keys() {
        if params.get(name).is_none() {
            return Err(Error::InvalidArgument(format!(
                "gradient for unknown parameter {name:?}"
            )));
        }
    }
    let mut out = ParamSet::new();
    for (name, partition, value) in params.iter() {
        let next = match (scope.includes(partition), grads.get(name)) {
            (true, Some(g)) => {
                if g.shape() != value.shape() {
                    return Err(Error::shapes("sgd_step", value.shape(), g.shape()));
                }
                let data = value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(p, gv)| p - lr * gv)
                    .collect();
                Tensor::new(value.shape().to_vec(), data)?
            }
            _ => value.clone(),
        };
        out.insert(name, partition, next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_with(entries: &[(&str, Partition, f64)]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, p, v) in entries {
            ps.insert(name, *p, Tensor::scalar(*v)).unwrap();
        }
        ps
    }

    #[test]
    fn one_step_hand_case() {
        let ps = set_with(&[("p", Partition::Decoder, 1.0)]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(2.0));
        let next = sgd_step(&ps, &grads, 0.1, Scope::Decoder).unwrap();
        assert!((next.get("p").unwrap().item() - 0.8).abs() <= 1e-15);
    }

    #[test]
    fn encoder_scope_leaves_decoder_bits_untouched() {
        let ps = set_with(&[
            ("enc.w", Partition::Encoder, 0.5),
            ("dec.w", Partition::Decoder, -0.25),
        ]);
        let mut grads = BTreeMap::new();
        grads.insert("enc.w".to_string(), Tensor::scalar(1.0));
        grads.insert("dec.w".to_string(), Tensor::scalar(1.0));
        let next = sgd_step(&ps, &grads, 0.5, Scope::Encoder).unwrap();
        assert!(next.get("dec.w").unwrap().bits_eq(ps.get("dec.w").unwrap()));
        assert!((next.get("enc.w").unwrap().item() - 0.0).abs() <= 1e-15);

        let next2 = sgd_step(&ps, &grads, 0.5, Scope::Decoder).unwrap();
        assert!(next2
            .get("enc.w")
            .unwrap()
            .bits_eq(ps.get("enc.w").unwrap()));
    }

    #[test]
    fn two_steps_equal_one_summed_step_on_exact_values() {
        // values chosen exactly representable in binary so the identity is exact
        let ps = set_with(&[("p", Partition::Encoder, 1.0)]);
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::scalar(0.5));
        let twice = sgd_step(
            &sgd_step(&ps, &g, 0.25, Scope::All).unwrap(),
            &g,
            0.25,
            Scope::All,
        )
        .unwrap();
        let mut summed = BTreeMap::new();
        summed.insert("p".to_string(), Tensor::scalar(1.0));
        let once = sgd_step(&ps, &summed, 0.25, Scope::All).unwrap();
        assert!(twice.bits_eq(&once));
    }

    #[test]
    fn nonpositive_lr_is_an_error() {
        let ps = set_with(&[("p", Partition::Encoder, 1.0)]);
        let grads = BTreeMap::new();
        assert!(sgd_step(&ps, &grads, 0.0, Scope::All).is_err());
        assert!(sgd_step(&ps, &grads, -1.0, Scope::All).is_err());
    }

    #[test]
    fn unknown_gradient_name_is_an_error() {
        let ps = set_with(&[("p", Partition::Encoder, 1.0)]);
        let mut grads = BTreeMap::new();
        grads.insert("q".to_string(), Tensor::scalar(1.0));
        assert!(sgd_step(&ps, &grads, 0.1, Scope::All).is_err());
    }

    #[test]
    fn subset_and_merge_round_trip() {
        let ps = set_with(&[
            ("enc.a", Partition::Encoder, 1.0),
            ("dec.b", Partition::Decoder, 2.0),
            ("enc.c", Partition::Encoder, 3.0),
        ]);
        let enc = ps.subset(Partition::Encoder);
        let dec = ps.subset(Partition::Decoder);
        assert_eq!(enc.len(), 2);
        assert_eq!(dec.len(), 1);
        let merged = enc.merged_with(&dec).unwrap();
        assert!(merged.bits_eq(&ps));
        assert!(enc.merged_with(&enc).is_err());
    }
}

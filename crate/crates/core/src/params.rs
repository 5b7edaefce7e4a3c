//! Named-tensor traversal shared by the optimizer, checkpoints and checksums.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use sha2::{Digest, Sha256};

use crate::ops::{LayerNorm, Linear, Real};
use crate::{Error, Result};

/// A structure that owns a fixed, ordered list of named dense tensors.
pub trait Tensors<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>);

    fn named(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Tensors<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.view().into_dyn()));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b.view_mut().into_dyn()));
        }
    }
}

impl<T: Real> Tensors<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "gain"), self.gain.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "gain"), self.gain.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

pub fn parameter_count<T, P: Tensors<T> + ?Sized>(p: &P) -> usize {
    p.named().iter().map(|(_, a)| a.len()).sum()
}

pub fn fill<T: Real, P: Tensors<T> + ?Sized>(p: &mut P, value: T) {
    for (_, mut a) in p.named_mut() {
        a.fill(value);
    }
}

/// SHA-256 over names, shapes and little-endian values, in traversal order.
pub fn checksum<T: Real, P: Tensors<T> + ?Sized>(p: &P) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for (name, a) in p.named() {
        hasher.update(name.as_bytes());
        for &d in a.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in a.iter() {
            v.extend_le_bytes(&mut buf);
        }
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

/// Copies every named array into `dst`. All names and shapes are validated
/// before the first write, so a failed assignment leaves `dst` untouched.
pub fn assign_from<T: Real, P: Tensors<T> + ?Sized>(dst: &mut P, src: &[(String, ArrayD<T>)]) -> Result<()> {
    let mut targets = dst.named_mut();
    if targets.len() != src.len() {
        return Err(Error::shape(
            "parameter set",
            format!("{} tensors", targets.len()),
            format!("{} tensors", src.len()),
        ));
    }
    for ((name, view), (src_name, arr)) in targets.iter().zip(src) {
        if name != src_name {
            return Err(Error::shape("parameter name", name, src_name));
        }
        if view.shape() != arr.shape() {
            return Err(Error::shape(
                name.clone(),
                format!("{:?}", view.shape()),
                format!("{:?}", arr.shape()),
            ));
        }
    }
    for ((_, view), (_, arr)) in targets.iter_mut().zip(src) {
        view.assign(arr);
    }
    Ok(())
}

pub fn to_owned<T: Real, P: Tensors<T> + ?Sized>(p: &P) -> Vec<(String, ArrayD<T>)> {
    p.named().into_iter().map(|(n, a)| (n, a.to_owned())).collect()
}

/// Owned copy of a frozen backbone's parameters, used to prove they never move.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot {
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl ParameterSnapshot {
    pub fn new(tensors: Vec<(String, ArrayD<f32>)>) -> Self {
        ParameterSnapshot { tensors }
    }

    pub fn merged(parts: impl IntoIterator<Item = (String, ParameterSnapshot)>) -> Self {
        let tensors = parts
            .into_iter()
            .flat_map(|(prefix, snap)| snap.tensors.into_iter().map(move |(n, a)| (join(&prefix, &n), a)))
            .collect();
        ParameterSnapshot { tensors }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn checksum(&self) -> String {
        checksum(self)
    }
}

impl Tensors<f32> for ParameterSnapshot {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        for (n, a) in &self.tensors {
            out.push((join(prefix, n), a.view()));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        for (n, a) in &mut self.tensors {
            out.push((join(prefix, n), a.view_mut()));
        }
    }
}

//! Named parameters, batch-norm buffers and the binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::graph::{Gradients, Graph, RunningStats, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
const MAGIC: &[u8; 4] = b"FETW";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Saved and loaded but never differentiated (batch-norm running statistics).
    Buffer,
}

/// Learning-rate group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Cdfi,
    Classifier,
    Regressor,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

/// Handles of a batch-norm layer inside a store.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model-building bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            kind,
            group,
        });
        id
    }

    pub fn add_bn(&mut self, prefix: &str, channels: usize, group: ParamGroup) -> BnParams {
        BnParams {
            gamma: self.add(
                format!("{prefix}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Trainable,
                group,
            ),
            beta: self.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable, group),
            running_mean: self.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
                group,
            ),
            running_var: self.add(
                format!("{prefix}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Buffer,
                group,
            ),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    /// Places a parameter on the graph (once per graph).
    pub fn leaf(&self, g: &mut Graph, id: ParamId) -> Var {
        let p = &self.params[id.0];
        g.param_leaf(id, &p.value, p.kind == ParamKind::Trainable)
    }

    /// Batch norm of `x` using the layer's parameters and running statistics.
    pub fn batch_norm(&self, g: &mut Graph, x: Var, bn: &BnParams) -> Result<Var> {
        let gamma = self.leaf(g, bn.gamma);
        let beta = self.leaf(g, bn.beta);
        let stats = RunningStats {
            mean: self.value(bn.running_mean),
            var: self.value(bn.running_var),
            ids: Some((bn.running_mean, bn.running_var)),
        };
        g.batch_norm(x, gamma, beta, Some(stats))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of every parameter placed on `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, var) in graph.param_vars() {
            if let Some(gt) = grads.get(*var) {
                let p = &mut self.params[id.0];
                p.grad.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Folds the batch statistics recorded on a training graph into the running estimates.
    pub fn apply_bn_updates(&mut self, graph: &Graph) {
        self.apply_bn_updates_with(graph, BN_MOMENTUM);
    }

    /// As [`ParamStore::apply_bn_updates`] with an explicit momentum; 1 copies the batch
    /// statistics outright.
    pub fn apply_bn_updates_with(&mut self, graph: &Graph, momentum: f64) {
        for u in graph.bn_updates() {
            let m = self.value_mut(u.running_mean).data_mut();
            for (r, b) in m.iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let v = self.value_mut(u.running_var).data_mut();
            for (r, b) in v.iter_mut().zip(&u.batch_var_unbiased) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    pub fn grad_norm(&self, group: Option<ParamGroup>) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable && group.is_none_or(|g| g == p.group))
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    // ---------------------------------------------------------------- checkpoints

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, id) in &self.by_name {
            let p = &self.params[id.0];
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.rank() as u8);
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Overwrites values from a checkpoint. The checkpoint must hold exactly this
    /// store's names with matching shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        self.load_entries(entries, &path.display().to_string())
    }

    pub fn load_entries(&mut self, entries: BTreeMap<String, Tensor>, source: &str) -> Result<()> {
        let missing: Vec<&str> = self.names().filter(|n| !entries.contains_key(*n)).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("{source}: checkpoint lacks {}", missing.join(", "))));
        }
        let extra: Vec<&String> = entries.keys().filter(|n| !self.by_name.contains_key(*n)).collect();
        if !extra.is_empty() {
            return Err(Error::Data(format!(
                "{source}: checkpoint has unknown parameters {}",
                extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        for (name, t) in entries {
            let id = self.by_name[&name];
            if self.params[id.0].value.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "{source}: {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.params[id.0].value.shape()
                )));
            }
            self.params[id.0].value = t;
        }
        Ok(())
    }
}

/// Reads every entry of a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?
        .read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

pub fn parse_checkpoint(bytes: &[u8], name: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::parse_offset(name, pos as u64, format!("truncated {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::parse_offset(name, 0, "bad magic, expected FETW"));
    }
    let count = u32::from_le_bytes(take(4, "count")?.try_into().unwrap());
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let pname = String::from_utf8(take(len, "name")?.to_vec())
            .map_err(|_| Error::parse_offset(name, 0, "parameter name is not UTF-8"))?;
        let rank = take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4, "extent")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(pname, Tensor::new(&shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::from_fn(&[2, 3], |i| i as f64 - 1.5),
            ParamKind::Trainable,
            ParamGroup::Cdfi,
        );
        s.add_bn("a.bn", 2, ParamGroup::Cdfi);
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"FETW");
        let entries = parse_checkpoint(&bytes, "mem").unwrap();
        assert_eq!(entries.len(), 5);
        let mut t = store();
        t.value_mut(t.id("a.weight").unwrap()).data_mut().fill(0.0);
        t.load_entries(entries, "mem").unwrap();
        assert_eq!(t.to_bytes(), bytes);
    }

    #[test]
    fn truncated_checkpoint() {
        let bytes = store().to_bytes();
        let err = parse_checkpoint(&bytes[..bytes.len() - 3], "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn key_mismatch_is_data_error() {
        let mut entries = parse_checkpoint(&store().to_bytes(), "mem").unwrap();
        entries.remove("a.weight");
        assert!(matches!(store().load_entries(entries, "mem"), Err(Error::Data(_))));
    }

    #[test]
    fn running_stats_momentum() {
        let mut s = store();
        let bn = BnParams {
            gamma: s.id("a.bn.gamma").unwrap(),
            beta: s.id("a.bn.beta").unwrap(),
            running_mean: s.id("a.bn.running_mean").unwrap(),
            running_var: s.id("a.bn.running_var").unwrap(),
        };
        let mut g = Graph::training();
        let x = g.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 3.0, 0.0]).unwrap());
        s.batch_norm(&mut g, x, &bn).unwrap();
        s.apply_bn_updates(&g);
        let m = s.value(bn.running_mean).data();
        assert!((m[0] - 0.2).abs() < 1e-15 && m[1] == 0.0);
        // unbiased variance of {1, 3} is 2
        let v = s.value(bn.running_var).data();
        assert!((v[0] - 1.1).abs() < 1e-15 && (v[1] - 0.9).abs() < 1e-15);
    }
}

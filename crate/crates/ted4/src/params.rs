//! Named parameter tensors shared by the model, optimizer and serializer.
//!
//! Parameters live outside the autodiff tape; each training step binds them
//! as leaves, and the optimizer reads gradients back through the binding.

use serde::{Deserialize, Serialize};

use crate::tape::{Id, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Positions,
    Features,
    Nets,
    Bank,
    Activation,
    Masks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: (usize, usize),
    pub data: Vec<f64>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        data: Vec<f64>,
        group: ParamGroup,
    ) -> ParamId {
        assert_eq!(shape.0 * shape.1, data.len());
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param {name}"
        );
        self.params.push(Param { name, shape, data, group });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Keep only the flagged rows of an anchor-indexed parameter.
    pub fn retain_rows(&mut self, id: ParamId, keep: &[bool]) {
        let p = &mut self.params[id.0];
        let (rows, cols) = p.shape;
        assert_eq!(rows, keep.len());
        let mut out = Vec::with_capacity(p.data.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.extend_from_slice(&p.data[i * cols..(i + 1) * cols]);
            }
        }
        p.shape = (out.len() / cols.max(1), cols);
        p.data = out;
    }

    /// Bind every parameter as a tape leaf. Index i of the result is the
    /// tape id for ParamId(i).
    pub fn bind_all(&self, tape: &mut Tape) -> LeafBinding {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), p.shape))
            .collect();
        LeafBinding { ids }
    }
}

/// Mapping from parameters to their tape leaves for one recorded step.
pub struct LeafBinding {
    ids: Vec<Id>,
}

impl LeafBinding {
    pub fn leaf(&self, id: ParamId) -> Id {
        self.ids[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retain_rows_keeps_selected() {
        let mut s = ParamStore::new();
        let id = s.add("a", (3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], ParamGroup::Features);
        s.retain_rows(id, &[true, false, true]);
        assert_eq!(s.get(id).shape, (2, 2));
        assert_eq!(s.get(id).data, vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn bind_all_roundtrips_values() {
        let mut s = ParamStore::new();
        let a = s.add("a", (1, 2), vec![0.5, -0.5], ParamGroup::Nets);
        let mut tape = Tape::new();
        let binding = s.bind_all(&mut tape);
        assert_eq!(tape.value(binding.leaf(a)), &[0.5, -0.5]);
    }
}

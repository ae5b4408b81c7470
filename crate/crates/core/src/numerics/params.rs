use super::Tensor;

/// Index of a parameter inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named, ordered parameter table with one gradient buffer per entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<Entry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.numel()];
        self.entries.push(Entry { name, value, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Split borrow used by the optimizer: value and gradient of one entry.
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &[f64]) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad)
    }
}

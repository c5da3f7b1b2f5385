use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(−1/√fan_in, +1/√fan_in)
    Uniform {
        fan_in: usize,
    },
    Zeros,
}

/// Named parameters with gradient accumulators. Gradients accumulate across
/// backward passes until [`ParamStore::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId, DiffError> {
        if self.by_name.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.values.len());
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn create<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId, DiffError> {
        let mut t = Tensor::zeros(shape.to_vec());
        if let Init::Uniform { fan_in } = init {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-bound..=bound));
        }
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// Mutable value and read-only gradient, for optimizer updates.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        (self.values[id.0].data_mut(), &self.grads[id.0])
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        self.grads[id.0]
            .iter_mut()
            .zip(g)
            .for_each(|(d, s)| *d += s);
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Copies values from `other` where names and shapes agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        for id in self.ids().collect::<Vec<_>>() {
            let src = other.value(other.id(self.name(id))?);
            if src.shape() != self.values[id.0].shape() {
                return Err(DiffError::shape(
                    "load_from",
                    self.values[id.0].shape(),
                    src.shape(),
                ));
            }
            self.values[id.0] = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_within_bound_and_biases_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let w = ps
            .create("w", &[16, 4], Init::Uniform { fan_in: 16 }, &mut rng)
            .unwrap();
        let b = ps.create("b", &[4], Init::Zeros, &mut rng).unwrap();
        assert!(ps.value(w).data().iter().all(|x| x.abs() <= 0.25));
        assert!(ps.value(w).data().iter().any(|x| *x != 0.0));
        assert!(ps.value(b).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn names_are_unique() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::zeros([2])).unwrap();
        assert!(matches!(
            ps.insert("w", Tensor::zeros([2])),
            Err(DiffError::DuplicateParam(_))
        ));
        assert!(matches!(ps.id("nope"), Err(DiffError::UnknownParam(_))));
    }
}

//! Named parameter tensors and non-trainable buffers.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Batch-norm running statistics for one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<RunningStats>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_fan_in(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, width: usize) -> BufferId {
        self.buffers.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; width],
            var: vec![1.0; width],
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut RunningStats {
        &mut self.buffers[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &[RunningStats] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [RunningStats] {
        &mut self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

use super::tensor::DenseTensor;

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient accumulator and two optimizer slots.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: DenseTensor,
    pub grad: DenseTensor,
    pub first_moment: DenseTensor,
    pub second_moment: DenseTensor,
}

impl Parameter {
    pub fn new(value: DenseTensor) -> Self {
        let zeros = DenseTensor::zeros(value.shape());
        Self {
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseTensor) -> ParamId {
        self.params.push(Parameter::new(value));
        self.names.push(name.into());
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseTensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &DenseTensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Zeroed gradient buffers matching every parameter's shape.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self
                .params
                .iter()
                .map(|p| DenseTensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Adds a buffer's contents into the parameter gradients.
    pub fn accumulate(&mut self, buffer: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&buffer.grads) {
            p.grad.add_scaled(g, 1.0);
        }
    }

    /// Copies of all parameter values, in store order.
    pub fn snapshot(&self) -> Vec<DenseTensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[DenseTensor]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value.clone_from(v);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradient accumulator detached from a store, so several workers can each
/// own one during a sharded step.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<DenseTensor>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &DenseTensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        &mut self.grads[id.0]
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, 1.0);
        }
    }
}

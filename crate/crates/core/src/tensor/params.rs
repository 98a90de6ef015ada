use super::{Result, Tape, Tensor, Var};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its slot index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if tracked { tape.param(t.clone()) } else { tape.leaf(t.clone()) })
            .collect()
    }

    /// Gradients for the bound variables, zeros where backward did not reach.
    pub fn collect_grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }

    /// Replaces the tensor stored under `name`; shapes must agree.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let Some(i) = self.names.iter().position(|n| n == name) else {
            return Err(super::EngineError::Contract(format!("unknown parameter {name}")));
        };
        if self.tensors[i].shape() != tensor.shape() {
            return Err(super::shape_err(
                "replace",
                format!("{name}: {:?} vs {:?}", self.tensors[i].shape(), tensor.shape()),
            ));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

use ndarray::{ArrayD, ArrayViewD, IxDyn, Zip};

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernels: trained with weight decay.
    Weight,
    /// Convolution biases: trained, no decay.
    Bias,
    /// Relation graph and pair-aggregation parameters: trained, no decay.
    Relational,
    /// Frozen batch-norm statistics: never updated.
    Frozen,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Frozen
    }

    pub fn decayed(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered registry of named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    grads: Vec<ArrayD<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: ArrayViewD<f64>) {
        let dst = &mut self.grads[id.0];
        let g = g
            .into_shape_with_order(dst.raw_dim())
            .expect("gradient shape");
        Zip::from(dst).and(&g).for_each(|d, &v| *d += v);
    }

    pub fn accumulate_scaled(&mut self, id: ParamId, g: ArrayViewD<f64>, scale: f64) {
        let dst = &mut self.grads[id.0];
        let g = g
            .into_shape_with_order(dst.raw_dim())
            .expect("gradient shape");
        Zip::from(dst).and(&g).for_each(|d, &v| *d += scale * v);
    }

    /// Adds every buffer of `other` into `self`.
    pub fn merge(&mut self, other: &GradStore) {
        for (d, s) in self.grads.iter_mut().zip(&other.grads) {
            *d += s;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        self.grads.iter_mut()
    }

    /// L2 norm over the trainable entries of `store`.
    pub fn global_norm(&self, store: &ParamStore) -> f64 {
        self.grads
            .iter()
            .zip(store.iter())
            .filter(|(_, p)| p.kind.trainable())
            .map(|(g, _)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn dyn_shape(shape: &[usize]) -> IxDyn {
    IxDyn(shape)
}

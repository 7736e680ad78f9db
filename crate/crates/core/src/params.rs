//! Named views over parameter tensors.
//!
//! Every parameter container exposes its tensors in a fixed order so the
//! optimizer, the L2 anchor penalty and checkpoint I/O can treat a whole
//! model as a list of flat `f64` buffers.

use ndarray::{ArrayBase, DataMut, Dimension, OwnedRepr};

/// Parameter groups that the anchor penalty weights separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Prior,
    Emission,
    Flow,
    TagEmbedding,
}

#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorViewMut<'a> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait Tensors {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    /// `self += scale * other`; layouts must agree.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        let dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "tensor layouts differ");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.shape, s.shape, "tensor {} shape differs", d.name);
            for (a, b) in d.data.iter_mut().zip(s.data) {
                *a += scale * b;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn view<'a, D: Dimension>(
    name: impl Into<String>,
    group: Group,
    array: &'a ArrayBase<OwnedRepr<f64>, D>,
) -> TensorView<'a> {
    TensorView {
        name: name.into(),
        group,
        shape: array.shape().to_vec(),
        data: array.as_slice().expect("parameters use standard layout"),
    }
}

pub(crate) fn view_mut<'a, S, D>(
    name: impl Into<String>,
    group: Group,
    array: &'a mut ArrayBase<S, D>,
) -> TensorViewMut<'a>
where
    S: DataMut<Elem = f64>,
    D: Dimension,
{
    let shape = array.shape().to_vec();
    TensorViewMut {
        name: name.into(),
        group,
        shape,
        data: array
            .as_slice_mut()
            .expect("parameters use standard layout"),
    }
}

//! Uniform traversal over learned tensors.
//!
//! Every layer lists its tensors in a fixed order, so two instances of the
//! same architecture (parameters, gradients, optimizer moments, EMA shadow)
//! can be zipped coordinate by coordinate.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::scalar::Scalar;

pub type NamedView<'a, F> = (String, ArrayViewD<'a, F>);
pub type NamedViewMut<'a, F> = (String, ArrayViewMutD<'a, F>);

pub trait Module<F: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a, F>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a, F>>);

    fn tensors(&self) -> Vec<NamedView<'_, F>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<NamedViewMut<'_, F>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill(&mut self, value: F) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// Applies `f(self_i, other_i)` to every pair of matching coordinates.
    fn zip_apply<M: Module<F>>(&mut self, other: &M, mut f: impl FnMut(&mut F, F)) {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        assert_eq!(mine.len(), theirs.len(), "module layouts differ");
        for ((_, mut a), (_, b)) in mine.into_iter().zip(theirs) {
            assert_eq!(a.shape(), b.shape(), "tensor shapes differ");
            a.zip_mut_with(&b, |x, &y| f(x, y));
        }
    }

    fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<F: Scalar> Module<F> for Array1<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a, F>>) {
        out.push((prefix.to_string(), self.view().into_dyn()));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a, F>>) {
        out.push((prefix.to_string(), self.view_mut().into_dyn()));
    }
}

impl<F: Scalar> Module<F> for Array2<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a, F>>) {
        out.push((prefix.to_string(), self.view().into_dyn()));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a, F>>) {
        out.push((prefix.to_string(), self.view_mut().into_dyn()));
    }
}

impl<F: Scalar, M: Module<F>> Module<F> for Vec<M> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a, F>>) {
        for (i, m) in self.iter().enumerate() {
            m.collect(&join(prefix, &i.to_string()), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a, F>>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<F: Scalar, M: Module<F>> Module<F> for Option<M> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a, F>>) {
        if let Some(m) = self {
            m.collect(prefix, out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a, F>>) {
        if let Some(m) = self {
            m.collect_mut(prefix, out);
        }
    }
}

/// Implements [`Module`] for a struct generic over `F` by visiting the listed fields in order.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<F: $crate::scalar::Scalar> $crate::module::Module<F> for $ty<F> {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<$crate::module::NamedView<'a, F>>,
            ) {
                $( self.$field.collect(&$crate::module::join(prefix, stringify!($field)), out); )*
            }
            fn collect_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<$crate::module::NamedViewMut<'a, F>>,
            ) {
                $( self.$field.collect_mut(&$crate::module::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_module;

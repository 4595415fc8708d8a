//! Named-parameter traversal shared by checkpointing and the optimizer.

use crate::tensor::Tensor;

/// A set of learnable tensors addressable by dotted path names.
///
/// `visit` and `visit_mut` must enumerate the same names in the same
/// order; the optimizer swaps tensors in place through `visit_mut`.
pub trait ParamGroup {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

macro_rules! visit_fields {
    ($self:ident, $prefix:ident, $f:ident; $($field:ident),* $(,)?) => {
        $( $f(&format!("{}.{}", $prefix, stringify!($field)), &$self.$field); )*
    };
}

macro_rules! visit_fields_mut {
    ($self:ident, $prefix:ident, $f:ident; $($field:ident),* $(,)?) => {
        $( $f(&format!("{}.{}", $prefix, stringify!($field)), &mut $self.$field); )*
    };
}

pub(crate) use {visit_fields, visit_fields_mut};

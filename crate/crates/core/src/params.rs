//! Parameter trees.
//!
//! Network parameter containers are generic over their leaf type: the same
//! struct holds weights (`Tensor`), graph handles (`Var`), gradients or
//! optimizer moments. [`Tree::map`] converts between them and visits leaves
//! in one fixed order, which is also the order used for checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        String::from(field)
    } else {
        format!("{}.{}", prefix, field)
    }
}

pub trait Tree<P> {
    type Of<Q>;

    fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Self::Of<Q>;

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P));

    fn leaves(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map("", &mut |name, p| out.push((String::from(name), p)));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, p| out.push(p));
        out
    }
}

/// Binds every tensor of `tree` as a graph leaf.
pub fn bind<T: Tree<Tensor>>(tree: &T, g: &mut Graph, trainable: bool) -> T::Of<Var> {
    tree.map("", &mut |_, t| g.leaf(t.clone(), trainable))
}

/// Collects gradients for every bound leaf (zeros where the loss ignores it).
pub fn collect_grads<T: Tree<Var>>(vars: &T, grads: &Gradients) -> T::Of<Tensor> {
    vars.map("", &mut |_, &v| grads.get_or_zeros(v))
}

/// Number of scalar parameters.
pub fn count<T: Tree<Tensor>>(tree: &T) -> usize {
    tree.leaves().iter().map(|(_, t)| t.numel()).sum()
}

/// Implements [`Tree`] for a struct whose fields are leaves or nested trees.
#[macro_export]
macro_rules! impl_tree {
    ($ty:ident { $($leaf:ident),* $(,)? } $( nested { $($sub:ident),* $(,)? } )? $( seq { $($many:ident),* $(,)? } )?) => {
        impl<P> $crate::params::Tree<P> for $ty<P> {
            type Of<Q> = $ty<Q>;

            fn map<'a, Q>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a P) -> Q,
            ) -> $ty<Q> {
                $ty {
                    $($leaf: f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf),)*
                    $($($sub: self.$sub.map(&$crate::params::join(prefix, stringify!($sub)), f),)*)?
                    $($($many: self
                        .$many
                        .iter()
                        .enumerate()
                        .map(|(i, item)| {
                            let name = $crate::params::join(prefix, stringify!($many));
                            item.map(&alloc::format!("{}.{}", name, i), f)
                        })
                        .collect(),)*)?
                }
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
                $(f(&$crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $($(self.$sub.visit_mut(&$crate::params::join(prefix, stringify!($sub)), f);)*)?
                $($(
                    let name = $crate::params::join(prefix, stringify!($many));
                    for (i, item) in self.$many.iter_mut().enumerate() {
                        item.visit_mut(&alloc::format!("{}.{}", name, i), f);
                    }
                )*)?
            }
        }
    };
}

//! Named parameter trees.
//!
//! Every parameter container is generic over its leaf type, so one struct
//! definition serves stored tensors (`Tensor`), tape handles (`Var`),
//! gradients and shape descriptions. Leaves are always visited in the same
//! order, which fixes the flattening order for optimizer state and
//! checkpoints.

pub(crate) fn join(path: &str, leaf: &str) -> String {
    if path.is_empty() {
        leaf.to_string()
    } else {
        format!("{path}.{leaf}")
    }
}

pub trait Tree<T> {
    type Mapped<U>;

    fn map<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Self::Mapped<U>
    where
        T: 'a;

    fn visit_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T));

    fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a T))
    where
        T: 'a,
    {
        self.map(path, &mut |name, leaf| f(name, leaf));
    }

    /// `(name, leaf)` pairs in visiting order.
    fn named_leaves<'a>(&'a self) -> Vec<(String, &'a T)>
    where
        T: 'a,
    {
        let mut out = Vec::new();
        self.visit("", &mut |name, leaf| out.push((name.to_string(), leaf)));
        out
    }
}

impl<T, B: Tree<T>> Tree<T> for Vec<B> {
    type Mapped<U> = Vec<B::Mapped<U>>;

    fn map<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Self::Mapped<U>
    where
        T: 'a,
    {
        self.iter()
            .enumerate()
            .map(|(i, b)| b.map(&join(path, &i.to_string()), f))
            .collect()
    }

    fn visit_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (i, b) in self.iter_mut().enumerate() {
            b.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}

impl<T, B: Tree<T>> Tree<T> for Option<B> {
    type Mapped<U> = Option<B::Mapped<U>>;

    fn map<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Self::Mapped<U>
    where
        T: 'a,
    {
        self.as_ref().map(|b| b.map(path, f))
    }

    fn visit_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
        if let Some(b) = self {
            b.visit_mut(path, f);
        }
    }
}

/// Implements [`Tree`] for a struct whose fields are either leaves of type
/// `T` or nested trees. Leaves are visited before children.
macro_rules! param_tree {
    ($ty:ident { $($leaf:ident),* $(,)? } $({ $($child:ident),* $(,)? })?) => {
        impl<T> $crate::model::tree::Tree<T> for $ty<T> {
            type Mapped<U> = $ty<U>;

            fn map<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> $ty<U>
            where
                T: 'a,
            {
                $ty {
                    $($leaf: f(&$crate::model::tree::join(path, stringify!($leaf)), &self.$leaf),)*
                    $($($child: $crate::model::tree::Tree::<T>::map(
                        &self.$child,
                        &$crate::model::tree::join(path, stringify!($child)),
                        f,
                    ),)*)?
                }
            }

            fn visit_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
                $(f(&$crate::model::tree::join(path, stringify!($leaf)), &mut self.$leaf);)*
                $($($crate::model::tree::Tree::<T>::visit_mut(
                    &mut self.$child,
                    &$crate::model::tree::join(path, stringify!($child)),
                    f,
                );)*)?
            }
        }
    };
}

pub(crate) use param_tree;

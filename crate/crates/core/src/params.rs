//! Named parameter trees.
//!
//! Model parameters live in plain structs generic over the leaf type, so
//! the same layout holds `Tensor`s at rest, `Var`s while a tape is being
//! recorded, and gradients or optimizer state after a backward pass.

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements `visit`, `visit_mut` and `map` over a struct whose fields are
/// leaves (`T`), nested trees, or `Vec`s of nested trees.
macro_rules! param_tree {
    ($ty:ident { leaves: [$($leaf:ident),*], children: [$($child:ident),*], lists: [$($list:ident),*] }) => {
        impl<T> $ty<T> {
            #[allow(unused_variables)]
            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $( f($crate::params::join(prefix, stringify!($leaf)), &self.$leaf); )*
                $( self.$child.visit(&$crate::params::join(prefix, stringify!($child)), f); )*
                $(
                    for (i, c) in self.$list.iter().enumerate() {
                        let p = $crate::params::join(&$crate::params::join(prefix, stringify!($list)), &i.to_string());
                        c.visit(&p, f);
                    }
                )*
            }

            #[allow(unused_variables)]
            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $( f($crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf); )*
                $( self.$child.visit_mut(&$crate::params::join(prefix, stringify!($child)), f); )*
                $(
                    for (i, c) in self.$list.iter_mut().enumerate() {
                        let p = $crate::params::join(&$crate::params::join(prefix, stringify!($list)), &i.to_string());
                        c.visit_mut(&p, f);
                    }
                )*
            }

            #[allow(unused_variables)]
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(String, &T) -> U) -> $ty<U> {
                $ty {
                    $( $leaf: f($crate::params::join(prefix, stringify!($leaf)), &self.$leaf), )*
                    $( $child: self.$child.map(&$crate::params::join(prefix, stringify!($child)), f), )*
                    $(
                        $list: self.$list.iter().enumerate().map(|(i, c)| {
                            let p = $crate::params::join(&$crate::params::join(prefix, stringify!($list)), &i.to_string());
                            c.map(&p, &mut *f)
                        }).collect(),
                    )*
                }
            }
        }
    };
}

pub(crate) use param_tree;

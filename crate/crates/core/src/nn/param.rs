use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Param {
            value,
            grad: vec![T::zero(); n],
            shape: shape.to_vec(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Whether a state entry is optimized or a running buffer (batch-norm statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateKind {
    Param,
    Buffer,
}

pub type StateDict<T> = BTreeMap<String, Tensor<T>>;

pub trait Module<T: Scalar> {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[usize], &[T]));

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, StateKind, &[usize], &mut [T]) -> Result<()>,
    ) -> Result<()>;

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_state("", &mut |_, kind, _, v| {
            if kind == StateKind::Param {
                n += v.len();
            }
        });
        n
    }

    fn state_dict(&self, prefix: &str) -> StateDict<T> {
        let mut out = StateDict::new();
        self.visit_state(prefix, &mut |name, _, shape, v| {
            out.insert(
                name.to_string(),
                Tensor::from_vec(shape, v.to_vec()).expect("state shape"),
            );
        });
        out
    }

    /// Copies every entry under `prefix` from `src`; the error names the first
    /// missing or mismatched entry.
    fn load_state_dict(&mut self, prefix: &str, src: &StateDict<T>) -> Result<()> {
        self.visit_state_mut(prefix, &mut |name, _, shape, dst| load_tensor(name, shape, dst, src))
    }
}

impl<T: Scalar> Module<T> for Param<T> {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[usize], &[T])) {
        f(prefix, StateKind::Param, &self.shape, &self.value);
    }

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, StateKind, &[usize], &mut [T]) -> Result<()>,
    ) -> Result<()> {
        f(prefix, StateKind::Param, &self.shape, &mut self.value)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self);
    }
}

pub fn load_tensor<T: Scalar>(
    name: &str,
    shape: &[usize],
    dst: &mut [T],
    src: &StateDict<T>,
) -> Result<()> {
    let t = src
        .get(name)
        .ok_or_else(|| Error::format(name, "entry missing from checkpoint"))?;
    if t.shape() != shape {
        return Err(Error::format(
            name,
            format!("shape {:?} does not match expected {:?}", t.shape(), shape),
        ));
    }
    dst.copy_from_slice(t.data());
    Ok(())
}

/// Hex SHA-256 over every state entry (names, shapes and raw bytes).
pub fn checksum_state<T: Scalar>(m: &dyn Module<T>) -> String {
    let mut h = Sha256::new();
    m.visit_state("", &mut |name, _, shape, v| {
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(T::to_le_bytes_vec(v));
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Module`] for a struct by delegating to named child fields
/// (`field`) and vector fields (`field[]`, children indexed by position).
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? } $([ $($vec:ident),* ])?) => {
        impl<T: $crate::scalar::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit_state(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, $crate::nn::param::StateKind, &[usize], &[T]),
            ) {
                $( self.$field.visit_state(&$crate::nn::param::join(prefix, stringify!($field)), f); )*
                $($(
                    for (i, m) in self.$vec.iter().enumerate() {
                        let p = $crate::nn::param::join(prefix, &format!("{}{}", stringify!($vec), i));
                        m.visit_state(&p, f);
                    }
                )*)?
            }

            fn visit_state_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, $crate::nn::param::StateKind, &[usize], &mut [T]) -> $crate::error::Result<()>,
            ) -> $crate::error::Result<()> {
                $( self.$field.visit_state_mut(&$crate::nn::param::join(prefix, stringify!($field)), f)?; )*
                $($(
                    for (i, m) in self.$vec.iter_mut().enumerate() {
                        let p = $crate::nn::param::join(prefix, &format!("{}{}", stringify!($vec), i));
                        m.visit_state_mut(&p, f)?;
                    }
                )*)?
                Ok(())
            }

            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut $crate::nn::Param<T>)) {
                $( self.$field.visit_params_mut(f); )*
                $($(
                    for m in self.$vec.iter_mut() {
                        m.visit_params_mut(f);
                    }
                )*)?
            }
        }
    };
}

pub(crate) use impl_module;

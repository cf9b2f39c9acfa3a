use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::device;
use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

/// A named collection of trainable variables.
#[derive(Debug, Clone)]
pub struct Params {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl Params {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        self.vars.insert(name, var);
        Ok(())
    }

    /// Flattened f32 copies, keyed by name.
    pub fn to_blocks(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k.clone(), (v.dims().to_vec(), data)))
            })
            .collect()
    }

    pub fn from_blocks<'a>(
        blocks: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
        dtype: DType,
    ) -> Result<Self> {
        let mut params = Params::new(dtype);
        for (name, shape, data) in blocks {
            let t = Tensor::from_slice(data, shape, &device())?;
            params.insert(name.to_string(), t)?;
        }
        Ok(params)
    }

    /// SHA-256 over names, shapes and f32 bytes, in name order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, (shape, data)) in self.to_blocks()? {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Produces the tensor for a named parameter.
pub trait ParamSource {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Creates new variables, drawing initial values from a seeded generator.
pub struct Initializer<'a> {
    pub params: &'a mut Params,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamSource for Initializer<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.vars.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &device())?.to_dtype(self.params.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.vars.insert(name.to_string(), var);
        Ok(out)
    }
}

/// Hands out existing variables, checking shapes and tracking which ones
/// were used.
pub struct Loader<'a> {
    pub params: &'a Params,
    pub used: BTreeSet<String>,
}

impl ParamSource for Loader<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if var.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {shape:?}, found {:?}",
                var.dims()
            )));
        }
        self.used.insert(name.to_string());
        Ok(var.as_tensor().clone())
    }
}

impl Loader<'_> {
    pub fn finish(self, prefix: &str) -> Result<()> {
        let unused: Vec<_> = self
            .params
            .iter()
            .map(|(k, _)| k)
            .filter(|k| k.starts_with(prefix) && !self.used.contains(*k))
            .collect();
        if !unused.is_empty() {
            return Err(Error::Checkpoint(format!("unexpected parameters {unused:?}")));
        }
        Ok(())
    }
}

/// A name prefix over a parameter source.
pub struct Scope<'a> {
    source: &'a mut dyn ParamSource,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(source: &'a mut dyn ParamSource, prefix: impl Into<String>) -> Self {
        Self {
            source,
            prefix: prefix.into(),
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            source: &mut *self.source,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.source.tensor(&full, shape, init)
    }
}

/// Builds a module either from fresh seeded values or from existing
/// parameters. All parameter names are prefixed with `root`.
pub(crate) fn build_module<T>(
    root: &str,
    existing: Option<&Params>,
    dtype: DType,
    rng: &mut ChaCha8Rng,
    f: impl FnOnce(&mut Scope) -> Result<T>,
) -> Result<(T, Params)> {
    match existing {
        None => {
            let mut params = Params::new(dtype);
            let module = {
                let mut init = Initializer {
                    params: &mut params,
                    rng,
                };
                let mut scope = Scope::new(&mut init, root);
                f(&mut scope)?
            };
            Ok((module, params))
        }
        Some(p) => {
            let subset = p.subset(root, dtype)?;
            let module = {
                let mut loader = Loader {
                    params: &subset,
                    used: BTreeSet::new(),
                };
                let module = {
                    let mut scope = Scope::new(&mut loader, root);
                    f(&mut scope)?
                };
                loader.finish(root)?;
                module
            };
            Ok((module, subset))
        }
    }
}

impl Params {
    /// The variables whose names start with `root.`, converted to `dtype`.
    /// Variables keep their identity when no conversion is needed.
    pub fn subset(&self, root: &str, dtype: DType) -> Result<Params> {
        let prefix = format!("{root}.");
        let mut out = Params::new(dtype);
        for (k, v) in self.vars.iter().filter(|(k, _)| k.starts_with(&prefix)) {
            if v.dtype() == dtype {
                out.vars.insert(k.clone(), v.clone());
            } else {
                out.insert(k.clone(), v.as_tensor().clone())?;
            }
        }
        if out.is_empty() {
            return Err(Error::Checkpoint(format!("no parameters under {root}")));
        }
        Ok(out)
    }

    pub fn extend(&mut self, other: &Params) {
        for (k, v) in other.iter() {
            self.vars.insert(k.clone(), v.clone());
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }
}

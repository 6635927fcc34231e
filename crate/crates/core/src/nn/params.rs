use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Initialisation rule for a freshly created tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Zero-mean normal with `std = sqrt(gain / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

struct Entry {
    var: Var,
    trainable: bool,
}

struct Inner {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
    seed: u64,
}

/// Named tensors owned by one model.
///
/// Every tensor is created through a [`Scope`]; asking twice for the same name
/// returns the same variable, which is how weight sharing is expressed. Random
/// initialisation draws from a generator keyed on `(seed, name)`, so the
/// initial value of a parameter does not depend on construction order and two
/// models built with the same seed agree on every parameter they share by name.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                dtype,
                device: Device::Cpu,
                seed,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn seed(&self) -> u64 {
        self.lock().seed
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().entries.get(name).map(|e| e.var.clone())
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.lock().entries.get(name).map(|e| e.trainable)
    }

    /// Trainable variables sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// All tensors (parameters and buffers) sorted by name.
    pub fn entries(&self) -> Vec<(String, Var, bool)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.clone(), e.trainable))
            .collect()
    }

    /// Tensors whose name starts with `prefix`, in name order.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<Tensor> {
        self.lock()
            .entries
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.var.as_tensor().clone())
            .collect()
    }

    pub fn num_trainable_params(&self) -> usize {
        self.lock()
            .entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.var.as_tensor().elem_count())
            .sum()
    }

    /// Overwrites the value of an existing tensor, converting dtype if needed.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named `{name}`")))?;
        if var.as_tensor().dims() != value.dims() {
            return Err(Error::Shape(format!(
                "`{name}` expects {:?}, got {:?}",
                var.as_tensor().dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.as_tensor().dtype())?)?;
        Ok(())
    }

    fn get_or_create(
        &self,
        name: String,
        shape: Shape,
        init: Init,
        trainable: bool,
    ) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(entry) = inner.entries.get(&name) {
            let t = entry.var.as_tensor();
            if t.shape() != &shape {
                return Err(Error::Shape(format!(
                    "`{name}` already exists with shape {:?}, requested {:?}",
                    t.dims(),
                    shape.dims()
                )));
            }
            return Ok(t.clone());
        }
        let value = initial_value(&name, &shape, init, inner.seed, inner.dtype, &inner.device)?;
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        inner.entries.insert(name, Entry { var, trainable });
        Ok(t)
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn initial_value(
    name: &str,
    shape: &Shape,
    init: Init,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let t = match init {
        Init::Zeros => Tensor::zeros(shape, dtype, device)?,
        Init::Ones => Tensor::ones(shape, dtype, device)?,
        Init::Const(c) => (Tensor::ones(shape, DType::F64, device)? * c)?.to_dtype(dtype)?,
        Init::FanIn { fan_in, gain } => {
            let std = (gain / fan_in.max(1) as f64).sqrt();
            normal(name, shape, std, seed, device)?.to_dtype(dtype)?
        }
        Init::Normal { std } => normal(name, shape, std, seed, device)?.to_dtype(dtype)?,
    };
    Ok(t)
}

fn normal(name: &str, shape: &Shape, std: f64, seed: u64, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let data: Vec<f64> = (0..shape.elem_count())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.entries().len())
            .field("trainable", &self.num_trainable_params())
            .finish()
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, part: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            part.to_string()
        } else {
            format!("{}.{}", self.prefix, part)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.store
            .get_or_create(self.full_name(name), shape.into(), init, true)
    }

    /// Non-trainable state such as frozen normalisation statistics.
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.store
            .get_or_create(self.full_name(name), shape.into(), init, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_name_returns_same_tensor() {
        let store = ParamStore::new(DType::F32, 1);
        let a = store.root().pp("x").param("w", (2, 3), Init::Normal { std: 1.0 }).unwrap();
        let b = store.root().pp("x").param("w", (2, 3), Init::Zeros).unwrap();
        assert_eq!(a.id(), b.id());
        assert!(store.root().pp("x").param("w", (3, 2), Init::Zeros).is_err());
    }

    #[test]
    fn init_depends_on_seed_and_name_only() {
        let s1 = ParamStore::new(DType::F64, 7);
        let s2 = ParamStore::new(DType::F64, 7);
        let init = Init::FanIn { fan_in: 4, gain: 2.0 };
        // construction order differs between the stores
        let _ = s1.root().param("a", 8, init).unwrap();
        let b1 = s1.root().param("b", 8, init).unwrap();
        let b2 = s2.root().param("b", 8, init).unwrap();
        assert_eq!(b1.to_vec1::<f64>().unwrap(), b2.to_vec1::<f64>().unwrap());
        let a1 = s1.root().param("a", 8, init).unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(a1, b1.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn buffers_are_not_counted() {
        let store = ParamStore::new(DType::F32, 0);
        store.root().param("w", (4, 4), Init::Ones).unwrap();
        store.root().buffer("running_mean", 4, Init::Zeros).unwrap();
        assert_eq!(store.num_trainable_params(), 16);
        assert_eq!(store.entries().len(), 2);
        assert_eq!(store.tensors_with_prefix("w").len(), 1);
    }
}

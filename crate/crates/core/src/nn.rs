//! Named parameter storage, per-forward binding of parameters to graph
//! leaves, and the handful of layers the networks are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

/// An ordered set of named parameters with a freeze flag.
///
/// A frozen store refuses every mutation and binds its parameters as
/// constants, so no gradient ever reaches them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        let prev = self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data: Arc::new(data),
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn guard(&self, name: &str) -> Result<()> {
        if self.frozen {
            Err(Error::Frozen(name.to_string()))
        } else {
            Ok(())
        }
    }

    /// Replaces a parameter's values; shapes must agree.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        self.guard(name)?;
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::domain(format!("unknown parameter `{name}`")))?;
        if p.data.len() != data.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` holds {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = Arc::new(data);
        Ok(())
    }

    /// Adds `delta` to one element, e.g. for finite differences.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        self.guard(name)?;
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::domain(format!("unknown parameter `{name}`")))?;
        if index >= p.data.len() {
            return Err(Error::domain(format!("index {index} out of range for `{name}`")));
        }
        Arc::make_mut(&mut p.data)[index] += delta;
        Ok(())
    }

    pub(crate) fn update_with(&mut self, name: &str, f: impl FnOnce(&mut [f64])) -> Result<()> {
        self.guard(name)?;
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::domain(format!("unknown parameter `{name}`")))?;
        f(Arc::make_mut(&mut p.data).as_mut_slice());
        Ok(())
    }

    /// SHA-256 over names, shapes, and the exact bytes of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.data.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore, group: &str) -> Result<()> {
        for (name, p) in &self.params {
            match other.params.get(name) {
                None => {
                    return Err(Error::Shape(format!("{group}: missing parameter `{name}`")))
                }
                Some(q) if q.shape != p.shape => {
                    return Err(Error::Shape(format!(
                        "{group}: parameter `{name}` expected shape {:?}, found {:?}",
                        p.shape, q.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Shape(format!("{group}: unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Per-parameter gradients grouped by store key.
pub type GradMap = BTreeMap<String, BTreeMap<String, Vec<f64>>>;

/// Binds parameters to graph leaves for one forward pass, reusing the same
/// leaf when a parameter is read twice.
#[derive(Default)]
pub struct Binder {
    track: bool,
    leaves: RefCell<BTreeMap<(String, String), Tensor>>,
}

impl Binder {
    /// A binder whose unfrozen parameters track gradients.
    pub fn training() -> Self {
        Binder {
            track: true,
            leaves: RefCell::default(),
        }
    }

    /// A binder that binds everything as constants.
    pub fn inference() -> Self {
        Binder {
            track: false,
            leaves: RefCell::default(),
        }
    }

    pub fn scope<'a>(&'a self, key: &'a str, store: &'a ParamStore) -> Scope<'a> {
        Scope {
            key,
            store,
            binder: self,
        }
    }

    /// Collects leaf gradients; parameters that received none are omitted.
    pub fn collect(&self, grads: &mut Gradients) -> GradMap {
        let mut out = GradMap::new();
        for ((key, name), t) in self.leaves.borrow().iter() {
            if let Some(g) = grads.take(t) {
                out.entry(key.clone()).or_default().insert(name.clone(), g);
            }
        }
        out
    }
}

/// A view of one parameter store inside a forward pass.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    key: &'a str,
    store: &'a ParamStore,
    binder: &'a Binder,
}

impl<'a> Scope<'a> {
    pub fn get(&self, name: &str) -> Tensor {
        let k = (self.key.to_string(), name.to_string());
        if let Some(t) = self.binder.leaves.borrow().get(&k) {
            return t.clone();
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from `{}`", self.key));
        let t = Tensor::from_shared(
            p.data.clone(),
            &p.shape,
            self.binder.track && !self.store.is_frozen(),
        );
        self.binder.leaves.borrow_mut().insert(k, t.clone());
        t
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// He-normal initialisation for leaky-ReLU layers.
fn he_normal(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let std = gain * (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.init_with_gain(store, rng, 1.0);
    }

    pub fn init_with_gain(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, gain: f64) {
        let fan_in = self.c_in * self.k * self.k;
        let n = self.c_out * fan_in;
        store.insert(
            &format!("{}.weight", self.name),
            &[self.c_out, self.c_in, self.k, self.k],
            he_normal(rng, n, fan_in, gain),
        );
        store.insert(&format!("{}.bias", self.name), &[self.c_out], vec![0.0; self.c_out]);
    }

    pub fn forward(&self, s: &Scope, x: &Tensor) -> Tensor {
        let w = s.get(&format!("{}.weight", self.name));
        let b = s.get(&format!("{}.bias", self.name)).reshape(&[1, self.c_out, 1, 1]);
        x.conv2d(&w, self.stride, self.pad).add(&b)
    }
}

/// 4×4 stride-2 transposed convolution doubling the resolution.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose2x {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        ConvTranspose2x {
            name: name.into(),
            c_in,
            c_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        // each output pixel sees c_in * 2 * 2 taps
        let fan_in = self.c_in * 4;
        store.insert(
            &format!("{}.weight", self.name),
            &[self.c_in, self.c_out, 4, 4],
            he_normal(rng, self.c_in * self.c_out * 16, fan_in, 1.0),
        );
        store.insert(&format!("{}.bias", self.name), &[self.c_out], vec![0.0; self.c_out]);
    }

    pub fn forward(&self, s: &Scope, x: &Tensor) -> Tensor {
        let (_, _, h, w) = x.dims4();
        let wt = s.get(&format!("{}.weight", self.name));
        let b = s.get(&format!("{}.bias", self.name)).reshape(&[1, self.c_out, 1, 1]);
        x.conv2d_adjoint(&wt, 2, 1, (2 * h, 2 * w)).add(&b)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.init_scaled(store, rng, 1.0, 0.0);
    }

    /// Weights scaled by `gain` relative to He-normal; bias filled with `bias`.
    pub fn init_scaled(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, gain: f64, bias: f64) {
        store.insert(
            &format!("{}.weight", self.name),
            &[self.d_out, self.d_in],
            he_normal(rng, self.d_in * self.d_out, self.d_in, gain),
        );
        store.insert(&format!("{}.bias", self.name), &[self.d_out], vec![bias; self.d_out]);
    }

    /// `[B, d_in] → [B, d_out]`
    pub fn forward(&self, s: &Scope, x: &Tensor) -> Tensor {
        let w = s.get(&format!("{}.weight", self.name));
        let b = s.get(&format!("{}.bias", self.name)).reshape(&[1, self.d_out]);
        x.matmul_t(&w, false, true).add(&b)
    }
}

/// Two 3×3 convolutions with a residual connection; the first convolution
/// may downsample, in which case the skip path is a strided 1×1 projection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let skip = (c_in != c_out || stride != 1)
            .then(|| Conv2d::new(format!("{name}.skip"), c_in, c_out, 1, stride));
        ResBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), c_in, c_out, 3, stride),
            conv2: Conv2d::new(format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv1.init(store, rng);
        // damp the residual branch so deep stacks start near identity
        self.conv2.init_with_gain(store, rng, 0.5);
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    pub fn forward(&self, s: &Scope, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(s, x).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(s, &h);
        let id = match &self.skip {
            Some(c) => c.forward(s, x),
            None => x.clone(),
        };
        h.add(&id).leaky_relu(LEAKY_SLOPE)
    }
}

/// Global average pool `[B,C,H,W] → [B,C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (b, c, _, _) = x.dims4();
    x.mean_keepdim(&[2, 3]).reshape(&[b, c])
}

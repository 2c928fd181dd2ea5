use std::collections::HashMap;

use ndarray::{Array, ArrayD, ArrayView1, ArrayView2, ArrayViewMut2, Dimension, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, TEXT_KERNEL};
use crate::error::{Error, Result};
use crate::real::Real;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    fn expect(&self, name: &str) -> &ArrayD<T> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing; validate against the config first"))
    }

    pub(crate) fn mat(&self, name: &str) -> ArrayView2<'_, T> {
        self.expect(name)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    pub(crate) fn vector(&self, name: &str) -> ArrayView1<'_, T> {
        self.expect(name)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d parameter")
    }

    pub(crate) fn accumulate<D: Dimension>(&mut self, name: &str, g: &Array<T, D>) {
        let slot = self.get_mut(name).expect("gradient slot");
        *slot += &g.view().into_dyn();
    }

    pub(crate) fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, T> {
        self.get_mut(name)
            .expect("gradient slot")
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.mapv(|v| U::of(v.as_f64()))).collect(),
            index: self.index.clone(),
        }
    }

    /// `self += other`, elementwise over matching tensors.
    pub fn add_assign(&mut self, other: &ParamStore<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// Checks names and shapes against the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.len() {
            return Err(Error::config(format!(
                "parameter set has {} tensors, config implies {}",
                self.len(),
                layout.len()
            )));
        }
        for (name, shape) in layout {
            match self.get(&name) {
                None => return Err(Error::config(format!("missing parameter '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::config(format!(
                        "parameter '{name}' has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(name) = self.first_non_finite() {
            return Err(Error::domain(format!("parameter '{name}' is not finite")));
        }
        Ok(())
    }
}

fn layout_with_init(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let h = cfg.hidden_dim;
    let de = cfg.text_embed_dim;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| v.push((name, shape, init));

    push("text.embed".into(), vec![cfg.text_vocab, de], Normal);
    for b in 0..cfg.text_blocks {
        let p = format!("text.blocks.{b}");
        push(format!("{p}.dw.weight"), vec![de, TEXT_KERNEL], Normal);
        push(format!("{p}.dw.bias"), vec![de], Zeros);
        push(format!("{p}.norm.weight"), vec![de], Ones);
        push(format!("{p}.norm.bias"), vec![de], Zeros);
        push(format!("{p}.pw1.weight"), vec![de, cfg.text_ffn_dim], Normal);
        push(format!("{p}.pw1.bias"), vec![cfg.text_ffn_dim], Zeros);
        push(format!("{p}.pw2.weight"), vec![cfg.text_ffn_dim, de], Normal);
        push(format!("{p}.pw2.bias"), vec![de], Zeros);
    }
    push("time.fc1.weight".into(), vec![h, h], Normal);
    push("time.fc1.bias".into(), vec![h], Zeros);
    push("time.fc2.weight".into(), vec![h, h], Normal);
    push("time.fc2.bias".into(), vec![h], Zeros);
    push("input.weight".into(), vec![2 * cfg.n_mels + de, h], Normal);
    push("input.bias".into(), vec![h], Zeros);
    for l in 0..cfg.n_layers {
        let p = format!("blocks.{l}");
        push(format!("{p}.mod.weight"), vec![h, 6 * h], Zeros);
        push(format!("{p}.mod.bias"), vec![6 * h], Zeros);
        push(format!("{p}.attn.qkv.weight"), vec![h, 3 * h], Normal);
        push(format!("{p}.attn.qkv.bias"), vec![3 * h], Zeros);
        push(format!("{p}.attn.out.weight"), vec![h, h], Normal);
        push(format!("{p}.attn.out.bias"), vec![h], Zeros);
        push(format!("{p}.ffn.fc1.weight"), vec![h, cfg.ffn_dim], Normal);
        push(format!("{p}.ffn.fc1.bias"), vec![cfg.ffn_dim], Zeros);
        push(format!("{p}.ffn.fc2.weight"), vec![cfg.ffn_dim, h], Normal);
        push(format!("{p}.ffn.fc2.bias"), vec![h], Zeros);
    }
    push("final.mod.weight".into(), vec![h, 2 * h], Zeros);
    push("final.mod.bias".into(), vec![2 * h], Zeros);
    push("final.out.weight".into(), vec![h, cfg.n_mels], Zeros);
    push("final.out.bias".into(), vec![cfg.n_mels], Zeros);
    v
}

/// Names and shapes of every tensor, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout_with_init(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Gaussian weights (std 0.02), unit norm gains, zero biases; adaptive-norm
/// modulation and the output projection start at zero so the initial network
/// predicts zero velocity.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::new();
    for (name, shape, init) in layout_with_init(cfg) {
        let tensor = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(&shape)),
            Init::Ones => ArrayD::from_elem(IxDyn(&shape), T::one()),
            Init::Normal => ArrayD::from_shape_simple_fn(IxDyn(&shape), || T::of(normal.sample(&mut rng))),
        };
        store.insert(name, tensor);
    }
    Ok(store)
}

/// Total number of scalar cells.
pub fn count_params<T: Real>(params: &ParamStore<T>) -> usize {
    params.iter().map(|(_, t)| t.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    // Hand-derived parameter count, written out independently of the layout.
    fn closed_form_count(c: &ModelConfig) -> usize {
        let (h, de, dt, f) = (c.hidden_dim, c.text_embed_dim, c.text_ffn_dim, c.n_mels);
        let text = c.text_vocab * de + c.text_blocks * (de * 7 + de + 2 * de + de * dt + dt + dt * de + de);
        let time = 2 * (h * h + h);
        let input = (2 * f + de) * h + h;
        let block =
            (h * 6 * h + 6 * h) + (h * 3 * h + 3 * h) + (h * h + h) + (h * c.ffn_dim + c.ffn_dim) + (c.ffn_dim * h + h);
        let fin = h * 2 * h + 2 * h + h * f + f;
        text + time + input + c.n_layers * block + fin
    }

    #[test]
    fn tiny_count_matches_closed_form() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f32>(&cfg, 0).unwrap();
        assert_eq!(count_params(&p), closed_form_count(&cfg));
        // tiny preset with 100 mels, summed by hand
        assert_eq!(closed_form_count(&cfg), 171_652);
    }

    #[test]
    fn paper_layout_matches_closed_form() {
        let cfg = ModelConfig::paper();
        let n: usize = param_layout(&cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(n, closed_form_count(&cfg));
    }

    #[test]
    fn empty_and_single_tensor_counts() {
        assert_eq!(count_params(&ParamStore::<f32>::new()), 0);
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Array2::<f32>::zeros((3, 4)).into_dyn());
        assert_eq!(count_params(&p), 12);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::tiny();
        let a = init_params::<f32>(&cfg, 3).unwrap();
        let b = init_params::<f32>(&cfg, 3).unwrap();
        let c = init_params::<f32>(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.get("final.out.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.get("blocks.1.mod.weight").unwrap().iter().all(|&v| v == 0.0));
        a.check_layout(&cfg).unwrap();
    }

    #[test]
    fn layout_check_catches_mismatch() {
        let p = init_params::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let other = ModelConfig {
            hidden_dim: 32,
            ..ModelConfig::tiny()
        };
        assert!(matches!(p.check_layout(&other), Err(Error::Config(_))));
    }
}

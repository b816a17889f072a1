//! Bottleneck adapters: `out = U·relu(D·z + d_bias) + u_bias + z`.
//!
//! `D` is `hidden × bottleneck` and `U` is `bottleneck × hidden`, both
//! row-major, so a batch of row vectors `z` is multiplied on the right.

use std::collections::BTreeMap;

use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HxError, Result};

/// Flat parameter count of one adapter.
pub fn adapter_size(hidden: usize, bottleneck: usize, biases: bool) -> usize {
    2 * hidden * bottleneck + if biases { bottleneck + hidden } else { 0 }
}

/// One layer's adapter as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub layer: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub down: Vec<f64>,
    pub down_bias: Vec<f64>,
    pub up: Vec<f64>,
    pub up_bias: Vec<f64>,
}

impl AdapterWeights {
    pub fn identity(layer: usize, hidden: usize, bottleneck: usize) -> Self {
        Self {
            layer,
            hidden,
            bottleneck,
            down: vec![0.0; hidden * bottleneck],
            down_bias: vec![0.0; bottleneck],
            up: vec![0.0; bottleneck * hidden],
            up_bias: vec![0.0; hidden],
        }
    }

    pub fn random<R: Rng>(layer: usize, hidden: usize, bottleneck: usize, std: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| Tensor::randn(&[n], std, rng).into_data();
        Self {
            layer,
            hidden,
            bottleneck,
            down: draw(hidden * bottleneck),
            down_bias: draw(bottleneck),
            up: draw(bottleneck * hidden),
            up_bias: draw(hidden),
        }
    }

    /// Splits a flat vector laid out as `D, d_bias, U, u_bias`. Without
    /// biases the layout is `D, U` and both biases are zero.
    pub fn from_flat(layer: usize, hidden: usize, bottleneck: usize, biases: bool, flat: &[f64]) -> Result<Self> {
        let expected = adapter_size(hidden, bottleneck, biases);
        if flat.len() != expected {
            return Err(HxError::Config(format!(
                "flat adapter of length {} does not fit h={hidden}, b={bottleneck} ({expected})",
                flat.len()
            )));
        }
        let hb = hidden * bottleneck;
        let mut w = Self::identity(layer, hidden, bottleneck);
        w.down.copy_from_slice(&flat[..hb]);
        if biases {
            w.down_bias.copy_from_slice(&flat[hb..hb + bottleneck]);
            w.up.copy_from_slice(&flat[hb + bottleneck..2 * hb + bottleneck]);
            w.up_bias.copy_from_slice(&flat[2 * hb + bottleneck..]);
        } else {
            w.up.copy_from_slice(&flat[hb..]);
        }
        Ok(w)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.down[..], &self.down_bias, &self.up, &self.up_bias].concat()
    }

    pub fn num_params(&self) -> usize {
        self.down.len() + self.down_bias.len() + self.up.len() + self.up_bias.len()
    }

    /// Applies the adapter to each row of `z` (trailing dim must be `hidden`).
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (h, b) = (self.hidden, self.bottleneck);
        if z.cols() != h {
            return Err(HxError::Num(numcore::NumError::Shape(format!(
                "adapter for hidden size {h} applied to {:?}",
                z.shape()
            ))));
        }
        let n = z.rows();
        let mut mid = vec![0.0; n * b];
        numcore::kernels::matmul(z.data(), &self.down, &mut mid, n, h, b);
        for row in mid.chunks_mut(b) {
            for (m, c) in row.iter_mut().zip(&self.down_bias) {
                *m = (*m + c).max(0.0);
            }
        }
        let mut out = vec![0.0; n * h];
        numcore::kernels::matmul(&mid, &self.up, &mut out, n, b, h);
        for (row, zr) in out.chunks_mut(h).zip(z.data().chunks(h)) {
            for ((o, c), zi) in row.iter_mut().zip(&self.up_bias).zip(zr) {
                *o += c + zi;
            }
        }
        Ok(Tensor::new(z.shape().to_vec(), out)?)
    }
}

/// Tape handles of one adapter's weights.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down: Var,
    pub down_bias: Option<Var>,
    pub up: Var,
    pub up_bias: Option<Var>,
}

/// Differentiable adapter forward over `z: [n, hidden]`.
pub fn adapter_forward(tape: &mut Tape<'_>, z: Var, w: AdapterVars) -> Result<Var> {
    let mut mid = tape.matmul(z, w.down)?;
    if let Some(b) = w.down_bias {
        mid = tape.add_row(mid, b)?;
    }
    let mid = tape.relu(mid)?;
    let mut out = tape.matmul(mid, w.up)?;
    if let Some(b) = w.up_bias {
        out = tape.add_row(out, b)?;
    }
    Ok(tape.add(out, z)?)
}

/// Source of per-layer adapters for the encoder.
pub trait AdapterProvider {
    fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, layer: usize, hidden: Var) -> Result<Var>;
}

/// Fixed adapter values, one per layer, that never receive gradients.
#[derive(Debug, Clone)]
pub struct ConstantAdapters {
    pub layers: Vec<AdapterWeights>,
}

impl AdapterProvider for ConstantAdapters {
    fn apply<'a>(&self, tape: &mut Tape<'a>, _store: &'a ParamStore, layer: usize, hidden: Var) -> Result<Var> {
        let w = &self.layers[layer];
        let (h, b) = (w.hidden, w.bottleneck);
        let vars = AdapterVars {
            down: tape.constant(Tensor::new(vec![h, b], w.down.clone())?),
            down_bias: Some(tape.constant(Tensor::new(vec![b], w.down_bias.clone())?)),
            up: tape.constant(Tensor::new(vec![b, h], w.up.clone())?),
            up_bias: Some(tape.constant(Tensor::new(vec![h], w.up_bias.clone())?)),
        };
        adapter_forward(tape, hidden, vars)
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    down: ParamId,
    down_bias: ParamId,
    up: ParamId,
    up_bias: ParamId,
}

/// Independently trained adapters stored as parameters named
/// `adapter.{task}.{lang}.{layer}.{D|d_bias|U|u_bias}`.
#[derive(Debug, Clone)]
pub struct StaticAdapters {
    pub task: String,
    pub language: String,
    pub hidden: usize,
    pub bottleneck: usize,
    layers: Vec<LayerParams>,
}

impl StaticAdapters {
    /// Registers fresh adapters; `U` and `u_bias` start at zero so the
    /// stack begins as the identity.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        task: &str,
        language: &str,
        num_layers: usize,
        hidden: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if bottleneck == 0 || hidden == 0 {
            return Err(HxError::Config("adapter dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let p = |s: &str| format!("adapter.{task}.{language}.{i}.{s}");
            layers.push(LayerParams {
                down: store.add(p("D"), Tensor::randn(&[hidden, bottleneck], 0.02, rng).with_requires_grad(true))?,
                down_bias: store.add(p("d_bias"), Tensor::zeros(&[bottleneck]).with_requires_grad(true))?,
                up: store.add(p("U"), Tensor::zeros(&[bottleneck, hidden]).with_requires_grad(true))?,
                up_bias: store.add(p("u_bias"), Tensor::zeros(&[hidden]).with_requires_grad(true))?,
            });
        }
        Ok(Self { task: task.into(), language: language.into(), hidden, bottleneck, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.down, l.down_bias, l.up, l.up_bias]).collect()
    }

    pub fn set_trainable(&self, store: &mut ParamStore, flag: bool) {
        for id in self.param_ids() {
            store.set_trainable(id, flag);
        }
    }

    pub fn weights(&self, store: &ParamStore, layer: usize) -> AdapterWeights {
        let l = &self.layers[layer];
        AdapterWeights {
            layer,
            hidden: self.hidden,
            bottleneck: self.bottleneck,
            down: store.get(l.down).data().to_vec(),
            down_bias: store.get(l.down_bias).data().to_vec(),
            up: store.get(l.up).data().to_vec(),
            up_bias: store.get(l.up_bias).data().to_vec(),
        }
    }

    /// Byte image of every adapter weight.
    pub fn fingerprint(&self, store: &ParamStore) -> Vec<u8> {
        self.param_ids().into_iter().flat_map(|id| store.get(id).to_le_bytes()).collect()
    }

    fn vars<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, layer: usize) -> AdapterVars {
        let l = &self.layers[layer];
        AdapterVars {
            down: tape.param(store, l.down),
            down_bias: Some(tape.param(store, l.down_bias)),
            up: tape.param(store, l.up),
            up_bias: Some(tape.param(store, l.up_bias)),
        }
    }
}

impl AdapterProvider for StaticAdapters {
    fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, layer: usize, hidden: Var) -> Result<Var> {
        let vars = self.vars(tape, store, layer);
        adapter_forward(tape, hidden, vars)
    }
}

/// Language adapter followed by an optional task adapter, each with its
/// own residual.
pub struct MadxStack<'p> {
    pub language: &'p StaticAdapters,
    pub task: Option<&'p StaticAdapters>,
}

impl AdapterProvider for MadxStack<'_> {
    fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, layer: usize, hidden: Var) -> Result<Var> {
        let x = self.language.apply(tape, store, layer, hidden)?;
        match self.task {
            Some(t) => t.apply(tape, store, layer, x),
            None => Ok(x),
        }
    }
}

/// Plain-value MAD-X composition.
pub fn madx_forward(z: &Tensor, language: &AdapterWeights, task: &AdapterWeights) -> Result<Tensor> {
    task.forward(&language.forward(z)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub trainable: usize,
    pub frozen: usize,
}

impl Count {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

/// Parameter counts by component.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub components: BTreeMap<String, Count>,
}

/// Component a parameter name belongs to.
pub fn component_of(name: &str) -> &'static str {
    if name.contains(".ln.") {
        "layer_norm"
    } else if name.starts_with("hypernet.") {
        if name.ends_with("_emb") {
            "embeddings"
        } else if name.starts_with("hypernet.proj.") {
            "projector"
        } else {
            "generator"
        }
    } else if name.starts_with("head.") {
        "heads"
    } else if name.starts_with("adapter.") {
        "adapters"
    } else {
        "backbone"
    }
}

impl Census {
    pub fn of(store: &ParamStore) -> Self {
        let mut components: BTreeMap<String, Count> = BTreeMap::new();
        for (_, name, t) in store.iter() {
            let c = components.entry(component_of(name).to_string()).or_default();
            if t.requires_grad() {
                c.trainable += t.numel();
            } else {
                c.frozen += t.numel();
            }
        }
        Self { components }
    }

    pub fn get(&self, component: &str) -> Count {
        self.components.get(component).copied().unwrap_or_default()
    }

    pub fn trainable(&self) -> usize {
        self.components.values().map(|c| c.trainable).sum()
    }

    pub fn frozen(&self) -> usize {
        self.components.values().map(|c| c.frozen).sum()
    }

    pub fn total(&self) -> usize {
        self.trainable() + self.frozen()
    }
}

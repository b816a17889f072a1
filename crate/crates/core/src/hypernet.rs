//! One shared hypernetwork that generates every layer's adapter from
//! task, language and layer embeddings.
//!
//! The source vector is `lang ⊕ task ⊕ layer`, passed through a two-layer
//! ReLU projector and a single affine generator whose output is split as
//! `D, d_bias, U, u_bias` (see [`AdapterWeights::from_flat`]).

use std::collections::BTreeMap;

use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{adapter_forward, adapter_size, AdapterProvider, AdapterVars, AdapterWeights, Census, Count};
use crate::error::{HxError, Result};

/// Source embeddings start at unit scale and the projector uses fan-in
/// scaling, so the projected source is O(1) whatever the dimensions.
const EMB_STD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetConfig {
    pub task_dim: usize,
    pub lang_dim: usize,
    pub layer_dim: usize,
    pub proj_dim: usize,
    pub bottleneck: usize,
    pub biases: bool,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self { task_dim: 16, lang_dim: 16, layer_dim: 16, proj_dim: 8, bottleneck: 16, biases: true }
    }
}

impl HypernetConfig {
    pub fn source_dim(&self) -> usize {
        self.task_dim + self.lang_dim + self.layer_dim
    }

    pub fn validate(&self) -> Result<()> {
        if [self.task_dim, self.lang_dim, self.layer_dim, self.proj_dim, self.bottleneck].contains(&0) {
            return Err(HxError::Config("hypernetwork dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered task and language names; ids are positions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceRegistry {
    tasks: Vec<String>,
    languages: Vec<String>,
}

impl SourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(list: &mut Vec<String>, kind: &str, name: &str) -> Result<usize> {
        if list.iter().any(|n| n == name) {
            return Err(HxError::Registration(format!("{kind} {name} registered twice")));
        }
        list.push(name.to_string());
        Ok(list.len() - 1)
    }

    pub fn register_task(&mut self, name: &str) -> Result<usize> {
        Self::register(&mut self.tasks, "task", name)
    }

    pub fn register_language(&mut self, name: &str) -> Result<usize> {
        Self::register(&mut self.languages, "language", name)
    }

    pub fn task_id(&self, name: &str) -> Result<usize> {
        self.tasks.iter().position(|n| n == name).ok_or_else(|| HxError::UnknownSource(format!("task {name}")))
    }

    pub fn language_id(&self, name: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| HxError::UnknownSource(format!("language {name}")))
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }
}

/// Handles to the hypernetwork's parameters.
#[derive(Debug, Clone)]
pub struct HyperNet {
    pub config: HypernetConfig,
    pub registry: SourceRegistry,
    pub num_layers: usize,
    pub hidden: usize,
    task_emb: ParamId,
    lang_emb: ParamId,
    layer_emb: ParamId,
    proj_w1: ParamId,
    proj_b1: ParamId,
    proj_w2: ParamId,
    proj_b2: ParamId,
    gen_w: ParamId,
    gen_b: ParamId,
}

impl HyperNet {
    /// Registers hypernetwork parameters for a frozen registry. The generator
    /// columns producing `U` and `u_bias` start at zero so every adapter is
    /// initially the identity; the `D` columns start small and random, since
    /// with `D = 0` as well neither projection ever receives a gradient.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        registry: SourceRegistry,
        config: HypernetConfig,
        num_layers: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if registry.tasks.is_empty() || registry.languages.is_empty() || num_layers == 0 {
            return Err(HxError::Config("hypernetwork needs at least one task, language and layer".into()));
        }
        let (ds, dp) = (config.source_dim(), config.proj_dim);
        let da = adapter_size(hidden, config.bottleneck, config.biases);
        let mut add = |name: &str, t: Tensor| store.add(format!("hypernet.{name}"), t.with_requires_grad(true));
        let task_emb = add("task_emb", Tensor::randn(&[registry.tasks.len(), config.task_dim], EMB_STD, rng))?;
        let lang_emb = add("lang_emb", Tensor::randn(&[registry.languages.len(), config.lang_dim], EMB_STD, rng))?;
        let layer_emb = add("layer_emb", Tensor::randn(&[num_layers, config.layer_dim], EMB_STD, rng))?;
        let proj_w1 = add("proj.w1", Tensor::randn(&[ds, dp], (2.0 / ds as f64).sqrt(), rng))?;
        let proj_b1 = add("proj.b1", Tensor::zeros(&[dp]))?;
        let proj_w2 = add("proj.w2", Tensor::randn(&[dp, dp], (2.0 / dp as f64).sqrt(), rng))?;
        let proj_b2 = add("proj.b2", Tensor::zeros(&[dp]))?;
        let down = hidden * config.bottleneck;
        let mut gw = Tensor::zeros(&[dp, da]);
        for row in gw.data_mut().chunks_mut(da) {
            row[..down].copy_from_slice(Tensor::randn(&[down], 0.02, rng).data());
        }
        let mut gb = Tensor::zeros(&[da]);
        gb.data_mut()[..down].copy_from_slice(Tensor::randn(&[down], 0.02, rng).data());
        let gen_w = add("gen.w", gw)?;
        let gen_b = add("gen.b", gb)?;
        Ok(Self {
            config,
            registry,
            num_layers,
            hidden,
            task_emb,
            lang_emb,
            layer_emb,
            proj_w1,
            proj_b1,
            proj_w2,
            proj_b2,
            gen_w,
            gen_b,
        })
    }

    /// Resolves handles for hypernetwork parameters already in `store`.
    pub fn attach(store: &ParamStore, registry: SourceRegistry, config: HypernetConfig, num_layers: usize, hidden: usize) -> Result<Self> {
        config.validate()?;
        let id = |n: &str| store.id(&format!("hypernet.{n}"));
        let net = Self {
            task_emb: id("task_emb")?,
            lang_emb: id("lang_emb")?,
            layer_emb: id("layer_emb")?,
            proj_w1: id("proj.w1")?,
            proj_b1: id("proj.b1")?,
            proj_w2: id("proj.w2")?,
            proj_b2: id("proj.b2")?,
            gen_w: id("gen.w")?,
            gen_b: id("gen.b")?,
            config,
            registry,
            num_layers,
            hidden,
        };
        let da = net.flat_size();
        let expect = [
            (net.task_emb, vec![net.registry.tasks.len(), net.config.task_dim]),
            (net.lang_emb, vec![net.registry.languages.len(), net.config.lang_dim]),
            (net.layer_emb, vec![num_layers, net.config.layer_dim]),
            (net.gen_w, vec![net.config.proj_dim, da]),
        ];
        for (pid, shape) in expect {
            if store.get(pid).shape() != shape.as_slice() {
                return Err(HxError::Config(format!(
                    "{} has shape {:?}, expected {shape:?}",
                    store.name(pid),
                    store.get(pid).shape()
                )));
            }
        }
        Ok(net)
    }

    pub fn flat_size(&self) -> usize {
        adapter_size(self.hidden, self.config.bottleneck, self.config.biases)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.task_emb,
            self.lang_emb,
            self.layer_emb,
            self.proj_w1,
            self.proj_b1,
            self.proj_w2,
            self.proj_b2,
            self.gen_w,
            self.gen_b,
        ]
    }

    pub fn task_emb(&self) -> ParamId {
        self.task_emb
    }

    pub fn lang_emb(&self) -> ParamId {
        self.lang_emb
    }

    pub fn layer_emb(&self) -> ParamId {
        self.layer_emb
    }

    /// Checks the hypernetwork was built for this backbone width and depth.
    pub fn check_backbone(&self, hidden: usize, num_layers: usize) -> Result<()> {
        if hidden != self.hidden || num_layers != self.num_layers {
            return Err(HxError::Config(format!(
                "hypernetwork built for h={}, L={} but backbone has h={hidden}, L={num_layers}",
                self.hidden, self.num_layers
            )));
        }
        Ok(())
    }

    fn check_ids(&self, task: usize, lang: usize, layer: usize) -> Result<()> {
        if task >= self.registry.tasks.len() || lang >= self.registry.languages.len() || layer >= self.num_layers {
            return Err(HxError::UnknownSource(format!("source index (task {task}, language {lang}, layer {layer})")));
        }
        Ok(())
    }

    /// Projected source embedding `[1, proj_dim]`.
    pub fn combine_sources<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, task: usize, lang: usize, layer: usize) -> Result<Var> {
        self.check_ids(task, lang, layer)?;
        let (t, l, i) = (tape.param(store, self.task_emb), tape.param(store, self.lang_emb), tape.param(store, self.layer_emb));
        let lv = tape.gather(l, &[lang])?;
        let tv = tape.gather(t, &[task])?;
        let iv = tape.gather(i, &[layer])?;
        let s = tape.concat(&[lv, tv, iv])?;
        let (w1, b1) = (tape.param(store, self.proj_w1), tape.param(store, self.proj_b1));
        let (w2, b2) = (tape.param(store, self.proj_w2), tape.param(store, self.proj_b2));
        let x = tape.matmul(s, w1)?;
        let x = tape.add_row(x, b1)?;
        let x = tape.relu(x)?;
        let x = tape.matmul(x, w2)?;
        Ok(tape.add_row(x, b2)?)
    }

    /// Flat generated adapter `[1, flat_size]`.
    pub fn generate_flat<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, task: usize, lang: usize, layer: usize) -> Result<Var> {
        let p = self.combine_sources(tape, store, task, lang, layer)?;
        let (w, b) = (tape.param(store, self.gen_w), tape.param(store, self.gen_b));
        let x = tape.matmul(p, w)?;
        Ok(tape.add_row(x, b)?)
    }

    /// Generated adapter as differentiable tape values.
    pub fn generate_vars<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, task: usize, lang: usize, layer: usize) -> Result<AdapterVars> {
        let flat = self.generate_flat(tape, store, task, lang, layer)?;
        let (h, b) = (self.hidden, self.config.bottleneck);
        let hb = h * b;
        if self.config.biases {
            Ok(AdapterVars {
                down: tape.slice(flat, 0, &[h, b])?,
                down_bias: Some(tape.slice(flat, hb, &[b])?),
                up: tape.slice(flat, hb + b, &[b, h])?,
                up_bias: Some(tape.slice(flat, 2 * hb + b, &[h])?),
            })
        } else {
            Ok(AdapterVars { down: tape.slice(flat, 0, &[h, b])?, down_bias: None, up: tape.slice(flat, hb, &[b, h])?, up_bias: None })
        }
    }

    /// Generated adapter values, outside any training graph.
    pub fn generate_adapter(&self, store: &ParamStore, task: usize, lang: usize, layer: usize) -> Result<AdapterWeights> {
        let mut tape = Tape::new();
        let flat = self.generate_flat(&mut tape, store, task, lang, layer)?;
        AdapterWeights::from_flat(layer, self.hidden, self.config.bottleneck, self.config.biases, tape.value(flat))
    }

    /// Embedding table as CSV: one row per source name.
    pub fn embeddings_csv(&self, store: &ParamStore, kind: &str) -> Result<String> {
        let (id, names): (ParamId, Vec<String>) = match kind {
            "task" => (self.task_emb, self.registry.tasks.clone()),
            "language" => (self.lang_emb, self.registry.languages.clone()),
            "layer" => (self.layer_emb, (0..self.num_layers).map(|i| i.to_string()).collect()),
            other => return Err(HxError::Usage(format!("unknown embedding table {other}"))),
        };
        let t = store.get(id);
        let mut out = String::from("name");
        for j in 0..t.cols() {
            out.push_str(&format!(",d{j}"));
        }
        out.push('\n');
        for (i, n) in names.iter().enumerate() {
            out.push_str(n);
            for v in t.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Adapters generated for one (task, language) pair.
pub struct HyperAdapters<'h> {
    pub net: &'h HyperNet,
    pub task: usize,
    pub language: usize,
}

impl AdapterProvider for HyperAdapters<'_> {
    fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, layer: usize, hidden: Var) -> Result<Var> {
        let w = self.net.generate_vars(tape, store, self.task, self.language, layer)?;
        adapter_forward(tape, hidden, w)
    }
}

/// Closed-form parameter counts for a hypernetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HypernetShape {
    pub tasks: usize,
    pub languages: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl HypernetShape {
    pub fn embeddings(&self, c: &HypernetConfig) -> usize {
        self.tasks * c.task_dim + self.languages * c.lang_dim + self.layers * c.layer_dim
    }

    pub fn projector(&self, c: &HypernetConfig) -> usize {
        let (ds, dp) = (c.source_dim(), c.proj_dim);
        ds * dp + dp + dp * dp + dp
    }

    pub fn generator(&self, c: &HypernetConfig) -> usize {
        (c.proj_dim + 1) * adapter_size(self.hidden, c.bottleneck, c.biases)
    }

    pub fn total(&self, c: &HypernetConfig) -> usize {
        self.embeddings(c) + self.projector(c) + self.generator(c)
    }
}

/// Trainable counts for the Hyper-X components plus their sum.
pub fn hypernet_census(store: &ParamStore) -> BTreeMap<String, usize> {
    let census = Census::of(store);
    let mut out: BTreeMap<String, usize> = ["embeddings", "projector", "generator", "layer_norm", "heads"]
        .iter()
        .map(|&c| (c.to_string(), census.get(c).trainable))
        .collect();
    let total = out.values().sum();
    out.insert("total".into(), total);
    out
}

pub fn count_of(census: &Census, component: &str) -> Count {
    census.get(component)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registry() -> SourceRegistry {
        let mut r = SourceRegistry::new();
        for t in ["pos", "ner", "mlm"] {
            r.register_task(t).unwrap();
        }
        for l in ["en", "s1", "u1"] {
            r.register_language(l).unwrap();
        }
        r
    }

    #[test]
    fn registration() {
        let mut r = registry();
        assert_eq!(r.tasks().len(), 3);
        assert!(matches!(r.register_task("pos"), Err(HxError::Registration(_))));
        assert!(matches!(r.language_id("zz"), Err(HxError::UnknownSource(_))));
        let mut langs = SourceRegistry::new();
        for i in 0..12 {
            langs.register_language(&format!("l{i}")).unwrap();
        }
        assert_eq!(langs.languages().len(), 12);
    }

    #[test]
    fn base_size_dims() {
        let c = HypernetConfig { task_dim: 64, lang_dim: 64, layer_dim: 64, proj_dim: 32, bottleneck: 256, biases: true };
        assert_eq!(c.source_dim(), 192);
        let shape = HypernetShape { tasks: 3, languages: 12, layers: 12, hidden: 768 };
        assert_eq!(shape.generator(&c), 13_009_920);
    }

    #[test]
    fn initial_adapters_have_zero_up_projection() {
        let mut store = ParamStore::new();
        let c = HypernetConfig::default();
        let net = HyperNet::new(&mut store, registry(), c, 4, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.flat_size(), 2_128);
        let w = net.generate_adapter(&store, 1, 2, 3).unwrap();
        assert!(w.up.iter().chain(&w.up_bias).chain(&w.down_bias).all(|&x| x == 0.0));
        assert!(w.down.iter().any(|&x| x != 0.0));
        let mut tape = Tape::new();
        let p = net.combine_sources(&mut tape, &store, 0, 0, 0).unwrap();
        assert_eq!(tape.shape(p), &[1, 8]);
        assert!(net.combine_sources(&mut tape, &store, 3, 0, 0).is_err());
        assert!(net.check_backbone(32, 4).is_err());
    }

    #[test]
    fn census_matches_closed_form() {
        let mut store = ParamStore::new();
        let c = HypernetConfig { task_dim: 5, lang_dim: 6, layer_dim: 7, proj_dim: 4, bottleneck: 3, biases: true };
        HyperNet::new(&mut store, registry(), c.clone(), 2, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let shape = HypernetShape { tasks: 3, languages: 3, layers: 2, hidden: 10 };
        let census = hypernet_census(&store);
        assert_eq!(census["embeddings"], shape.embeddings(&c));
        assert_eq!(census["embeddings"], 3 * 5 + 3 * 6 + 2 * 7);
        assert_eq!(census["projector"], shape.projector(&c));
        assert_eq!(census["generator"], shape.generator(&c));
        assert_eq!(census["total"], shape.total(&c));
    }

    #[test]
    fn deterministic_projection() {
        let mut store = ParamStore::new();
        let net = HyperNet::new(&mut store, registry(), HypernetConfig::default(), 2, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let p = net.combine_sources(&mut tape, &store, 1, 2, 1).unwrap();
            tape.value(p).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn no_bias_layout() {
        let mut store = ParamStore::new();
        let c = HypernetConfig { biases: false, ..HypernetConfig::default() };
        let net = HyperNet::new(&mut store, registry(), c, 2, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(net.flat_size(), 2 * 8 * 16);
        let mut tape = Tape::new();
        let v = net.generate_vars(&mut tape, &store, 0, 0, 0).unwrap();
        assert!(v.down_bias.is_none() && v.up_bias.is_none());
    }
}

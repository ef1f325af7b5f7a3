//! Dual-head MLP energy model.
//!
//! One backbone (optionally duplicated, see `share_backbone`) feeds three
//! linear heads: the separator head producing known-class logits whose free
//! energy separates knowns from unknowns, plus a classifier head and a
//! scalar energy head used for scoring. Parameters live in a flat arena;
//! training binds the needed subset onto a [`Tape`] as leaves, so inference
//! and training share one forward implementation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{logsumexp_slice, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Weight initialization scheme. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitScheme {
    /// Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform,
    /// Uniform in [-bound, bound].
    Uniform { bound: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::GlorotUniform
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Vec<Slot>,
    ess_backbone: Option<Vec<Slot>>,
    ekus_head: Slot,
    ess_cls_head: Slot,
    ess_energy_head: Slot,
}

/// The model: flat parameter arena plus a layout naming each tensor.
#[derive(Debug, Clone)]
pub struct DualEbm {
    input_dim: usize,
    num_known: usize,
    hidden: Vec<usize>,
    share_backbone: bool,
    init: InitScheme,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Separator network bound to a tape for one forward/backward pass.
pub struct EkusGraph {
    layers: Vec<(NodeId, NodeId)>,
    head: (NodeId, NodeId),
    trainable: Vec<(usize, NodeId)>,
}

/// Scorer network bound to a tape. When the backbone is frozen its nodes
/// still sit on the tape (they receive gradients) but are left out of the
/// trainable set, so the optimizer never touches them.
pub struct EssGraph {
    layers: Vec<(NodeId, NodeId)>,
    cls_head: (NodeId, NodeId),
    energy_head: (NodeId, NodeId),
    trainable: Vec<(usize, NodeId)>,
}

impl DualEbm {
    pub fn new(
        input_dim: usize,
        num_known: usize,
        hidden: &[usize],
        share_backbone: bool,
        init: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if num_known < 2 {
            return Err(Error::Config(format!(
                "model needs at least 2 known classes, got {}",
                num_known
            )));
        }
        if let Some(bad) = hidden.iter().position(|&h| h == 0) {
            return Err(Error::Config(format!("hidden layer {} has width 0", bad)));
        }
        if let InitScheme::Uniform { bound } = init {
            if !(bound.is_finite() && bound > 0.0) {
                return Err(Error::Config(format!(
                    "uniform init bound must be positive, got {}",
                    bound
                )));
            }
        }

        let mut params = Vec::new();
        let mut alloc = |rows: usize, cols: usize| -> Slot {
            params.push(Tensor::zeros(&[rows, cols]));
            params.push(Tensor::zeros(&[cols]));
            Slot {
                w: params.len() - 2,
                b: params.len() - 1,
            }
        };

        let dims: Vec<usize> = std::iter::once(input_dim).chain(hidden.iter().copied()).collect();
        let backbone: Vec<Slot> = dims.windows(2).map(|w| alloc(w[0], w[1])).collect();
        let ess_backbone = if share_backbone {
            None
        } else {
            Some(dims.windows(2).map(|w| alloc(w[0], w[1])).collect())
        };
        let feat = *dims.last().expect("dims never empty");
        let ekus_head = alloc(feat, num_known);
        let ess_cls_head = alloc(feat, num_known);
        let ess_energy_head = alloc(feat, 1);

        let mut model = DualEbm {
            input_dim,
            num_known,
            hidden: hidden.to_vec(),
            share_backbone,
            init,
            params,
            layout: Layout {
                backbone,
                ess_backbone,
                ekus_head,
                ess_cls_head,
                ess_energy_head,
            },
        };
        model.reinit(seed);
        Ok(model)
    }

    /// Redraws every weight from the init scheme and zeroes every bias.
    /// Same seed, same parameters, bit for bit.
    pub fn reinit(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params.iter_mut() {
            match t.shape() {
                [rows, cols] => {
                    let a = match self.init {
                        InitScheme::GlorotUniform => (6.0 / (rows + cols) as f64).sqrt(),
                        InitScheme::Uniform { bound } => bound,
                    };
                    for v in t.data_mut() {
                        *v = a * (2.0 * rng.random::<f64>() - 1.0);
                    }
                }
                _ => {
                    for v in t.data_mut() {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_known(&self) -> usize {
        self.num_known
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn share_backbone(&self) -> bool {
        self.share_backbone
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Stable (name, tensor) listing in parameter-arena order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        fn push_stack<'a>(
            out: &mut Vec<(String, &'a Tensor)>,
            params: &'a [Tensor],
            prefix: &str,
            slots: &[Slot],
        ) {
            for (i, s) in slots.iter().enumerate() {
                out.push((format!("{}.{}.w", prefix, i), &params[s.w]));
                out.push((format!("{}.{}.b", prefix, i), &params[s.b]));
            }
        }
        let mut out = Vec::with_capacity(self.params.len());
        push_stack(&mut out, &self.params, "backbone", &self.layout.backbone);
        if let Some(eb) = &self.layout.ess_backbone {
            push_stack(&mut out, &self.params, "ess_backbone", eb);
        }
        for (name, slot) in [
            ("ekus_head", self.layout.ekus_head),
            ("ess_cls_head", self.layout.ess_cls_head),
            ("ess_energy_head", self.layout.ess_energy_head),
        ] {
            out.push((format!("{}.w", name), &self.params[slot.w]));
            out.push((format!("{}.b", name), &self.params[slot.b]));
        }
        out
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        let slot_of = |prefix: &str, slots: &[Slot]| -> Option<usize> {
            let rest = name.strip_prefix(prefix)?.strip_prefix('.')?;
            let (idx, kind) = rest.split_once('.')?;
            let i: usize = idx.parse().ok()?;
            let s = slots.get(i)?;
            match kind {
                "w" => Some(s.w),
                "b" => Some(s.b),
                _ => None,
            }
        };
        if name.starts_with("ess_backbone") {
            return slot_of("ess_backbone", self.layout.ess_backbone.as_deref()?);
        }
        if name.starts_with("backbone") {
            return slot_of("backbone", &self.layout.backbone);
        }
        let head = |slot: Slot, suffix: &str| match suffix {
            "w" => Some(slot.w),
            "b" => Some(slot.b),
            _ => None,
        };
        match name.split_once('.') {
            Some(("ekus_head", s)) => head(self.layout.ekus_head, s),
            Some(("ess_cls_head", s)) => head(self.layout.ess_cls_head, s),
            Some(("ess_energy_head", s)) => head(self.layout.ess_energy_head, s),
            _ => None,
        }
    }

    pub fn get_param(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Index(format!("no parameter named {}", name)))
    }

    /// Replaces one parameter tensor; the shape must match exactly.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Index(format!("no parameter named {}", name)))?;
        if self.params[i].shape() != value.shape() {
            return Err(Error::Dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                self.params[i].shape(),
                value.shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    fn bind_slot(&self, tape: &mut Tape, slot: Slot, trainable: &mut Vec<(usize, NodeId)>) -> (NodeId, NodeId) {
        let w = tape.leaf(self.params[slot.w].clone());
        let b = tape.leaf(self.params[slot.b].clone());
        trainable.push((slot.w, w));
        trainable.push((slot.b, b));
        (w, b)
    }

    /// Binds the separator network (backbone + separator head) onto a tape.
    pub fn bind_ekus(&self, tape: &mut Tape) -> EkusGraph {
        let mut trainable = Vec::new();
        let layers = self
            .layout
            .backbone
            .iter()
            .map(|&s| self.bind_slot(tape, s, &mut trainable))
            .collect();
        let head = self.bind_slot(tape, self.layout.ekus_head, &mut trainable);
        EkusGraph {
            layers,
            head,
            trainable,
        }
    }

    /// Binds the scorer network. With a shared backbone, `freeze_backbone`
    /// keeps the backbone out of the trainable set; with separate backbones
    /// the scorer's own backbone always trains and the flag is ignored.
    pub fn bind_ess(&self, tape: &mut Tape, freeze_backbone: bool) -> EssGraph {
        let mut trainable = Vec::new();
        let mut frozen_sink = Vec::new();
        let layers: Vec<(NodeId, NodeId)> = match &self.layout.ess_backbone {
            Some(own) => own
                .iter()
                .map(|&s| self.bind_slot(tape, s, &mut trainable))
                .collect(),
            None => {
                let sink: &mut Vec<_> = if freeze_backbone {
                    &mut frozen_sink
                } else {
                    &mut trainable
                };
                self.layout
                    .backbone
                    .iter()
                    .map(|&s| self.bind_slot(tape, s, sink))
                    .collect()
            }
        };
        let cls_head = self.bind_slot(tape, self.layout.ess_cls_head, &mut trainable);
        let energy_head = self.bind_slot(tape, self.layout.ess_energy_head, &mut trainable);
        EssGraph {
            layers,
            cls_head,
            energy_head,
            trainable,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim {
            return Err(Error::Dim(format!(
                "input width {} does not match model input_dim {}",
                d, self.input_dim
            )));
        }
        Ok(())
    }

    /// Separator logits for a batch, `[n, num_known]`.
    pub fn ekus_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let g = self.bind_ekus(&mut tape);
        let xid = tape.leaf(x.clone());
        let out = g.logits(&mut tape, xid)?;
        Ok(tape.value(out).clone())
    }

    /// Free energy of the separator logits for a batch.
    pub fn ekus_free_energy(&self, x: &Tensor) -> Result<Vec<f64>> {
        free_energy(&self.ekus_logits(x)?)
    }

    /// Classifier logits for a batch, `[n, num_known]`.
    pub fn ess_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let g = self.bind_ess(&mut tape, false);
        let xid = tape.leaf(x.clone());
        let (logits, _) = g.forward(&mut tape, xid)?;
        Ok(tape.value(logits).clone())
    }

    /// Scalar head energies for a batch.
    pub fn ess_energy(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let g = self.bind_ess(&mut tape, false);
        let xid = tape.leaf(x.clone());
        let (_, energy) = g.forward(&mut tape, xid)?;
        Ok(tape.value(energy).data().to_vec())
    }

    /// Writes the model to a versioned plain-text checkpoint.
    ///
    /// Format: a `ebosal-ckpt v1` magic line, `key value` header lines
    /// (input_dim, num_known, share_backbone, hidden, init), then for each
    /// parameter a `tensor <name>` line followed by one line of
    /// space-separated values, and a final `end` line. Floats are written
    /// with Rust's shortest round-trip formatting, so save/load is exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("ebosal-ckpt v1\n");
        let _ = writeln!(out, "input_dim {}", self.input_dim);
        let _ = writeln!(out, "num_known {}", self.num_known);
        let _ = writeln!(out, "share_backbone {}", u8::from(self.share_backbone));
        out.push_str("hidden");
        for h in &self.hidden {
            let _ = write!(out, " {}", h);
        }
        out.push('\n');
        match self.init {
            InitScheme::GlorotUniform => out.push_str("init glorot_uniform\n"),
            InitScheme::Uniform { bound } => {
                let _ = writeln!(out, "init uniform {}", bound);
            }
        }
        for (name, t) in self.named_params() {
            let _ = writeln!(out, "tensor {}", name);
            let mut first = true;
            for v in t.data() {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{}", v);
                first = false;
            }
            out.push('\n');
        }
        out.push_str("end\n");
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by [`DualEbm::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let bad = |msg: &str| Error::Parse(format!("{}: {}", path.display(), msg));

        match lines.next() {
            Some("ebosal-ckpt v1") => {}
            Some(other) => {
                return Err(bad(&format!(
                    "unsupported checkpoint header '{}', expected 'ebosal-ckpt v1'",
                    other
                )))
            }
            None => return Err(bad("empty checkpoint")),
        }

        let mut input_dim = None;
        let mut num_known = None;
        let mut share = None;
        let mut hidden: Option<Vec<usize>> = None;
        let mut init = None;
        let mut header_done = None;
        for line in lines.by_ref() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("input_dim") => input_dim = parts.next().and_then(|v| v.parse().ok()),
                Some("num_known") => num_known = parts.next().and_then(|v| v.parse().ok()),
                Some("share_backbone") => {
                    share = match parts.next() {
                        Some("0") => Some(false),
                        Some("1") => Some(true),
                        _ => None,
                    }
                }
                Some("hidden") => {
                    hidden = parts.map(|v| v.parse().ok()).collect::<Option<Vec<_>>>()
                }
                Some("init") => {
                    init = match (parts.next(), parts.next()) {
                        (Some("glorot_uniform"), None) => Some(InitScheme::GlorotUniform),
                        (Some("uniform"), Some(b)) => {
                            b.parse().ok().map(|bound| InitScheme::Uniform { bound })
                        }
                        _ => None,
                    }
                }
                Some("tensor") => {
                    header_done = parts.next().map(str::to_string);
                    break;
                }
                _ => return Err(bad(&format!("unexpected line '{}'", line))),
            }
        }

        let (Some(input_dim), Some(num_known), Some(share), Some(hidden), Some(init)) =
            (input_dim, num_known, share, hidden, init)
        else {
            return Err(bad("incomplete header"));
        };
        let mut model = DualEbm::new(input_dim, num_known, &hidden, share, init, 0)?;

        let mut pending = header_done;
        let mut seen = 0usize;
        while let Some(name) = pending.take() {
            let data_line = lines
                .next()
                .ok_or_else(|| bad(&format!("missing data for tensor {}", name)))?;
            let data: Vec<f64> = data_line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(&format!("tensor {}: {}", name, e)))?;
            let shape = model.get_param(&name)?.shape().to_vec();
            model.set_param(&name, Tensor::new(shape, data)?)?;
            seen += 1;
            match lines.next() {
                Some("end") => break,
                Some(line) => match line.strip_prefix("tensor ") {
                    Some(next) => pending = Some(next.trim().to_string()),
                    None => return Err(bad(&format!("unexpected line '{}'", line))),
                },
                None => return Err(bad("truncated checkpoint, missing 'end'")),
            }
        }
        if seen != model.num_params() {
            return Err(bad(&format!(
                "checkpoint holds {} tensors, model needs {}",
                seen,
                model.num_params()
            )));
        }
        Ok(model)
    }
}

fn mlp_forward(tape: &mut Tape, layers: &[(NodeId, NodeId)], x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for &(w, b) in layers {
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        h = tape.relu(z)?;
    }
    Ok(h)
}

fn linear(tape: &mut Tape, head: (NodeId, NodeId), x: NodeId) -> Result<NodeId> {
    let z = tape.matmul(x, head.0)?;
    tape.add_bias(z, head.1)
}

impl EkusGraph {
    /// Known-class logits `[n, num_known]` for an input node `[n, d]`.
    pub fn logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let feat = mlp_forward(tape, &self.layers, x)?;
        linear(tape, self.head, feat)
    }

    pub fn trainable(&self) -> &[(usize, NodeId)] {
        &self.trainable
    }
}

impl EssGraph {
    /// (classifier logits `[n, num_known]`, head energy `[n, 1]`).
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let feat = mlp_forward(tape, &self.layers, x)?;
        let logits = linear(tape, self.cls_head, feat)?;
        let energy = linear(tape, self.energy_head, feat)?;
        Ok((logits, energy))
    }

    pub fn trainable(&self) -> &[(usize, NodeId)] {
        &self.trainable
    }
}

/// Free energy per row: -log sum_y exp(logit_y).
pub fn free_energy(logits: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = logits.dims2()?;
    if n == 0 {
        return Err(Error::Dim("free energy over zero classes".into()));
    }
    let d = logits.data();
    Ok((0..m).map(|i| -logsumexp_slice(&d[i * n..(i + 1) * n])).collect())
}

/// Differentiable free energy node: `[n, c] -> [n]`.
pub fn free_energy_node(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let lse = tape.logsumexp_rows(logits)?;
    tape.scale(lse, -1.0)
}

/// Predictive entropy of softmax(logits) per row, clamped to [0, ln C].
///
/// Computed as lse - sum_j p_j * x_j, which stays finite for any logits;
/// vanished probabilities contribute exactly zero.
pub fn entropy(logits: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = logits.dims2()?;
    if n < 2 {
        return Err(Error::Dim(format!(
            "entropy needs at least 2 classes, got {}",
            n
        )));
    }
    let d = logits.data();
    let cap = (n as f64).ln();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &d[i * n..(i + 1) * n];
        let lse = logsumexp_slice(row);
        let mut px = 0.0;
        for &x in row {
            let p = (x - lse).exp();
            if p > 0.0 {
                px += p * x;
            }
        }
        out.push((lse - px).clamp(0.0, cap));
    }
    Ok(out)
}

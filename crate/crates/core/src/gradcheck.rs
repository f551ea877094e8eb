//! Central finite-difference checks of backward passes, for single ops
//! and for every parameter of a small captioner.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Fault, Tape, Var};
use crate::bridge::{DecoderConfig, Vocabulary, PROMPT};
use crate::data::{all_captions, caption, ChangeEvent, Scene};
use crate::encoder::EncoderConfig;
use crate::enhancer::EnhancerConfig;
use crate::error::{Error, Result};
use crate::model::{ChangeCaptioner, ModelConfig};
use crate::params::{Cx, Group, GroupSet, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const FLOOR: f64 = 1e-5;
/// Pass threshold for whole-model checks.
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Comparison summary for one checked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// Parameter name, or `input.<i>` for free inputs.
    pub name: String,
    pub group: Option<Group>,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<Entry>,
}

impl Report {
    pub fn max_rel(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Entry> {
        self.entries.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn group_max(&self) -> BTreeMap<Group, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            if let Some(g) = e.group {
                let m = out.entry(g).or_insert(0.0f64);
                *m = m.max(e.max_rel);
            }
        }
        out
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel < tolerance)
    }
}

#[derive(Clone, Copy)]
enum Target {
    Input(usize),
    Param(usize),
}

/// Compares backward against central differences for a scalar function
/// of free inputs and of the trainable parameters in `store`.
///
/// Every coordinate of every input and every parameter in a `trainable`
/// group is perturbed; a parameter the backward pass never reached is
/// compared as a zero gradient.
pub fn check<F>(store: &ParamStore, trainable: GroupSet, inputs: &[Tensor], fault: Option<Fault>, threads: usize, f: F) -> Result<Report>
where
    F: Fn(&Cx, &[Var]) -> Result<Var> + Sync,
{
    let tape = match fault {
        Some(fault) => Tape::new().with_fault(fault),
        None => Tape::new(),
    };
    let cx = Cx::new(&tape, store, trainable);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&cx, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid("gradcheck", format!("function must be scalar, got {:?}", tape.shape(out))));
    }
    tape.backward(out)?;

    let mut targets = Vec::new();
    let mut analytic = Vec::new();
    for (i, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        targets.push((Target::Input(i), format!("input.{i}"), None));
        analytic.push(tape.grad(*v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; t.len()]));
    }
    let grads: BTreeMap<usize, Tensor> = cx.param_grads().into_iter().map(|(id, g)| (id.index(), g)).collect();
    for (id, p) in store.iter() {
        if trainable.contains(p.group) {
            targets.push((Target::Param(id.index()), p.name.clone(), Some(p.group)));
            analytic.push(grads.get(&id.index()).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.len()]));
        }
    }

    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(t, a)| (0..a.len()).map(move |j| (t, j)))
        .collect();
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let cx = Cx::new(&tape, store, GroupSet::none());
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&cx, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };
    let worker = |chunk: &[(usize, usize)]| -> Result<Vec<f64>> {
        let mut store = store.clone();
        let mut inputs = inputs.to_vec();
        let mut out = Vec::with_capacity(chunk.len());
        for &(t, j) in chunk {
            let target = targets[t].0;
            let orig = *coordinate(&mut store, &mut inputs, target, j);
            *coordinate(&mut store, &mut inputs, target, j) = orig + STEP;
            let plus = eval(&store, &inputs)?;
            *coordinate(&mut store, &mut inputs, target, j) = orig - STEP;
            let minus = eval(&store, &inputs)?;
            *coordinate(&mut store, &mut inputs, target, j) = orig;
            out.push((plus - minus) / (2.0 * STEP));
        }
        Ok(out)
    };

    let threads = threads.max(1).min(coords.len().max(1));
    let numeric: Vec<f64> = if threads == 1 {
        worker(&coords)?
    } else {
        let size = coords.len().div_ceil(threads);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = coords.chunks(size).map(|c| s.spawn(|| worker(c))).collect();
            handles.into_iter().map(|h| h.join().expect("gradcheck worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(coords.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };

    let mut entries: Vec<Entry> = targets
        .into_iter()
        .map(|(_, name, group)| Entry {
            name,
            group,
            max_rel: 0.0,
            max_abs: 0.0,
            worst_index: 0,
        })
        .collect();
    for (&(t, j), n) in coords.iter().zip(&numeric) {
        let a = analytic[t][j];
        let e = &mut entries[t];
        let rel = relative_error(a, *n);
        e.max_abs = e.max_abs.max((a - n).abs());
        if rel > e.max_rel || !rel.is_finite() {
            e.max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            e.worst_index = j;
        }
    }
    Ok(Report { entries })
}

fn coordinate<'a>(store: &'a mut ParamStore, inputs: &'a mut [Tensor], target: Target, j: usize) -> &'a mut f64 {
    match target {
        Target::Input(i) => &mut inputs[i].data_mut()[j],
        Target::Param(p) => &mut store.iter_mut().nth(p).expect("param index").tensor.data_mut()[j],
    }
}

/// Reduces any tensor to a scalar through fixed random weights, so one
/// backward pass exercises every output coordinate.
pub fn project(tape: &Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v);
    let mut rng = Rng::new(seed);
    let w = tape.constant(Tensor::from_fn(&shape, |_| rng.uniform_range(-1.0, 1.0)));
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

/// Random tensor with entries in [-2, 2].
pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-2.0, 2.0))
}

/// Which parameter groups a model check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    All,
    Enhancer,
    Encoder,
    /// Projector and decoder.
    Bridge,
}

impl Module {
    pub fn groups(self) -> GroupSet {
        match self {
            Module::All => GroupSet::all(),
            Module::Enhancer => [Group::Enhancer].into_iter().collect(),
            Module::Encoder => [Group::Encoder].into_iter().collect(),
            Module::Bridge => [Group::Projector, Group::Decoder].into_iter().collect(),
        }
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Module::All),
            "enhancer" => Ok(Module::Enhancer),
            "encoder" => Ok(Module::Encoder),
            "bridge" => Ok(Module::Bridge),
            _ => Err(Error::invalid("gradcheck", format!("unknown module '{s}' (all|enhancer|encoder|bridge)"))),
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::All => "all",
            Module::Enhancer => "enhancer",
            Module::Encoder => "encoder",
            Module::Bridge => "bridge",
        })
    }
}

/// Small model geometry for whole-model checks: 16 tokens of width 8,
/// decoder width 12, two taps and two change-aware layers.
pub fn gradcheck_config() -> ModelConfig {
    let encoder = EncoderConfig {
        image_size: 16,
        patch_size: 4,
        depth: 3,
        d_model: 8,
        heads: 2,
        tap_indices: vec![-3, -2],
        residual_index: -2,
    };
    ModelConfig {
        enhancer: EnhancerConfig {
            heads: 2,
            num_catl_layers: 2,
            ..EnhancerConfig::for_width(encoder.d_model)
        },
        encoder,
        decoder: DecoderConfig {
            c_model: 12,
            depth: 1,
            heads: 2,
            max_len: 12,
        },
    }
}

/// A seeded model plus one synthetic pair and its caption.
pub struct ModelCase {
    pub model: ChangeCaptioner,
    pub image1: Tensor,
    pub image2: Tensor,
    pub caption: Vec<usize>,
}

impl ModelCase {
    pub fn new(seed: u64) -> Result<Self> {
        let config = gradcheck_config();
        let captions = all_captions();
        let vocab = Vocabulary::build(std::iter::once(PROMPT).chain(captions.iter().map(String::as_str)))?;
        let model = ChangeCaptioner::new(config.clone(), vocab, seed)?;
        let mut rng = Rng::new(seed).fork(7);
        let before = Scene::random(&mut rng);
        let event = loop {
            let e = ChangeEvent::random(&before, &mut rng);
            if e != ChangeEvent::NONE {
                break e;
            }
        };
        let after = event.apply(&before, &mut rng);
        let size = config.encoder.image_size;
        let texture: Vec<f64> = (0..size * size).map(|_| rng.uniform_range(-0.04, 0.04)).collect();
        let image1 = before.render(size, &texture);
        let image2 = after.render(size, &texture);
        let text = caption(&event, 0);
        let caption = model.vocab.encode(&text)?;
        Ok(ModelCase {
            model,
            image1,
            image2,
            caption,
        })
    }

    pub fn check(&self, module: Module, fault: Option<Fault>, threads: usize) -> Result<Report> {
        check(&self.model.store, module.groups(), &[], fault, threads, |cx, _| {
            self.model.loss(cx, &self.image1, &self.image2, &self.caption)
        })
    }
}

/// Whole-model check of the caption loss for the chosen module.
pub fn check_model(module: Module, seed: u64, fault: Option<Fault>, threads: usize) -> Result<Report> {
    ModelCase::new(seed)?.check(module, fault, threads)
}

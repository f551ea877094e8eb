//! Checkpoint directories: parameters, optimizer moments, config,
//! vocabulary and a small text state record.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bridge::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ChangeCaptioner;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Group;
use crate::tensor::Tensor;

use super::config::Config;

const STATE_HEADER: &str = "CCSTATE 1";

/// Progress counters saved next to the weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainState {
    /// Last completed stage (0 for a freshly initialized model).
    pub stage: u8,
    pub epoch: u64,
    /// Optimizer steps over the whole run.
    pub step: u64,
    pub rng_seed: u64,
    pub rng_counter: u64,
    pub adam_steps: BTreeMap<Group, u64>,
    pub fingerprint: String,
}

impl TrainState {
    pub fn to_text(&self) -> String {
        let mut s = format!("{STATE_HEADER}\n");
        let _ = writeln!(s, "fingerprint={}", self.fingerprint);
        let _ = writeln!(s, "stage={}", self.stage);
        let _ = writeln!(s, "epoch={}", self.epoch);
        let _ = writeln!(s, "step={}", self.step);
        let _ = writeln!(s, "rng_seed={}", self.rng_seed);
        let _ = writeln!(s, "rng_counter={}", self.rng_counter);
        for (g, n) in &self.adam_steps {
            let _ = writeln!(s, "adam_steps.{g}={n}");
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(STATE_HEADER) {
            return Err(err(1, format!("expected header '{STATE_HEADER}'")));
        }
        let mut fields = BTreeMap::new();
        let mut adam_steps = BTreeMap::new();
        for (i, line) in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, format!("expected key=value, got '{line}'")))?;
            if let Some(g) = k.strip_prefix("adam_steps.") {
                let g: Group = g.parse().map_err(|e: Error| err(i + 1, e.to_string()))?;
                adam_steps.insert(g, v.parse().map_err(|_| err(i + 1, format!("bad count '{v}'")))?);
            } else {
                fields.insert(k.to_string(), (i + 1, v.to_string()));
            }
        }
        let take = |k: &str| fields.get(k).cloned().ok_or_else(|| err(0, format!("missing field '{k}'")));
        let num = |k: &str| -> Result<u64> {
            let (line, v) = take(k)?;
            v.parse().map_err(|_| err(line, format!("bad value for {k}: '{v}'")))
        };
        Ok(TrainState {
            fingerprint: take("fingerprint")?.1,
            stage: num("stage")? as u8,
            epoch: num("epoch")?,
            step: num("step")?,
            rng_seed: num("rng_seed")?,
            rng_counter: num("rng_counter")?,
            adam_steps,
        })
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub model: ChangeCaptioner,
    pub optimizer: AdamW,
    pub state: TrainState,
}

fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    t.save_cct8(path)
}

pub fn save_checkpoint(dir: &Path, config: &Config, model: &ChangeCaptioner, opt: &AdamW, state: &TrainState) -> Result<()> {
    let params = dir.join("params");
    let optim = dir.join("optim");
    for d in [&params, &optim] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (id, p) in model.store.iter() {
        write_tensor(&p.tensor, &params.join(format!("{}.cct1", p.name)))?;
        let (m, v) = opt.moments(id.index(), p.tensor.shape());
        write_tensor(&m, &optim.join(format!("{}.m.cct1", p.name)))?;
        write_tensor(&v, &optim.join(format!("{}.v.cct1", p.name)))?;
    }
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    write("config.toml", config.to_toml())?;
    write("vocab.txt", model.vocab.to_text())?;
    write("state", state.to_text())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config = Config::load(&dir.join("config.toml"))?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let state_path = dir.join("state");
    let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state = TrainState::from_text(&text, &state_path.display().to_string())?;
    if state.fingerprint != config.fingerprint() {
        return Err(Error::Config(format!(
            "checkpoint {} fingerprint does not match its config",
            dir.display()
        )));
    }
    let mut model = ChangeCaptioner::new(config.model(), vocab, config.seed)?;
    let mut optimizer = AdamW::new(AdamWConfig::default(), &model.store);
    let names: Vec<(usize, String, Vec<usize>)> = model
        .store
        .iter()
        .map(|(id, p)| (id.index(), p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    for (index, name, shape) in names {
        let read = |path: PathBuf| -> Result<Tensor> {
            let t = Tensor::load(&path)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("load_checkpoint", t.shape(), &shape));
            }
            Ok(t)
        };
        let value = read(dir.join("params").join(format!("{name}.cct1")))?;
        optimizer.m[index] = read(dir.join("optim").join(format!("{name}.m.cct1")))?.into_data();
        optimizer.v[index] = read(dir.join("optim").join(format!("{name}.v.cct1")))?.into_data();
        let id = model.store.id(&name).expect("registered");
        let mut t = Tensor::new(shape, value.into_data())?;
        t.requires_grad = true;
        model.store.get_mut(id).tensor = t;
    }
    optimizer.steps = state.adam_steps.clone();
    Ok(Checkpoint {
        config,
        model,
        optimizer,
        state,
    })
}

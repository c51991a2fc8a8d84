//! `DECOCK01` checkpoints: named parameter stacks plus metadata.
//!
//! Header keys: `stage`, `seed`, `stacks` (comma-separated names in
//! payload order), `spec.<name>` for each stack, and free-form metadata
//! under `meta.<key>`. The payload is each stack's parameters as
//! little-endian `f64`, weights then bias per layer, in declaration order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cbm::DcbmModel;
use crate::container::{read_f64s, read_fully, read_header, write_f64s, write_header, Header};
use crate::error::{Error, Result};
use crate::numerics::{DifferentiableStack, StackSpec};
use crate::scalar::Scalar;
use crate::strategy::{FusionNet, GateInput, GateTrainConfig, GatingNet, LabelKind};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DECOCK01";

pub const STAGE_CBM: &str = "cbm";
pub const STAGE_GATE: &str = "gate";

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub stage: String,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
    pub stacks: Vec<(String, DifferentiableStack<T>)>,
}

impl<T: Scalar> PartialEq for Checkpoint<T> {
    fn eq(&self, other: &Self) -> bool {
        self.stage == other.stage && self.seed == other.seed && self.meta == other.meta && self.stacks == other.stacks
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(stage: impl Into<String>, seed: u64) -> Self {
        Self {
            stage: stage.into(),
            seed,
            meta: BTreeMap::new(),
            stacks: Vec::new(),
        }
    }

    pub fn with_stack(mut self, name: &str, stack: DifferentiableStack<T>) -> Self {
        self.stacks.push((name.to_string(), stack));
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MalformedHeader(format!("checkpoint lacks metadata '{key}'")))
    }

    pub fn expect_stage(&self, stage: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::MalformedHeader(format!(
                "expected a '{stage}' checkpoint, found stage '{}'",
                self.stage
            )));
        }
        Ok(())
    }

    /// Removes and returns the named stack.
    pub fn take_stack(&mut self, name: &str) -> Result<DifferentiableStack<T>> {
        let pos = self
            .stacks
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MalformedHeader(format!("checkpoint lacks stack '{name}'")))?;
        Ok(self.stacks.remove(pos).1)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut h = Header::new();
        h.set("stage", &self.stage).set("seed", self.seed);
        let names: Vec<&str> = self.stacks.iter().map(|(n, _)| n.as_str()).collect();
        for n in &names {
            if n.is_empty() || n.contains(',') || n.contains('=') {
                return Err(Error::InvalidArgument(format!("invalid stack name '{n}'")));
            }
        }
        h.set("stacks", names.join(","));
        for (name, stack) in &self.stacks {
            h.set(&format!("spec.{name}"), stack.spec().encode());
        }
        for (k, v) in &self.meta {
            h.set(&format!("meta.{k}"), v);
        }
        write_header(w, CHECKPOINT_MAGIC, &h)?;
        for (_, stack) in &self.stacks {
            write_f64s(w, stack.parameters().into_iter().map(|v| v.as_f64()))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let h = read_header(r, CHECKPOINT_MAGIC)?
            .ok_or_else(|| Error::MalformedHeader("empty checkpoint file".into()))?;
        let stage = h.get("stage")?.to_string();
        let seed: u64 = h.parse("seed")?;
        let names: Vec<String> = h
            .get("stacks")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let mut stacks = Vec::with_capacity(names.len());
        for name in names {
            let spec = StackSpec::decode(h.get(&format!("spec.{name}"))?)?;
            let mut stack = DifferentiableStack::<T>::zeros(&spec);
            let values = read_f64s(r, stack.num_parameters(), &format!("stack '{name}'"))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("checkpoint parameters"));
            }
            let values: Vec<T> = values.into_iter().map(T::lit).collect();
            stack.set_parameters(&values)?;
            stacks.push((name, stack));
        }
        let mut trailing = [0u8; 1];
        if read_fully(r, &mut trailing)? != 0 {
            return Err(Error::MalformedHeader("trailing bytes after checkpoint payload".into()));
        }
        let meta = h
            .entries()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.to_string())))
            .collect();
        Ok(Self {
            stage,
            seed,
            meta,
            stacks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

impl<T: Scalar> DcbmModel<T> {
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint<T> {
        Checkpoint::new(STAGE_CBM, seed)
            .with_meta("D", self.input_dim())
            .with_meta("d", self.num_concepts())
            .with_meta("K", self.num_classes())
            .with_meta("h", self.implicit_dim())
            .with_stack("g", self.concept_encoder.clone())
            .with_stack("g_tilde", self.implicit_encoder.clone())
            .with_stack("f", self.explicit_head.clone())
            .with_stack("f_tilde", self.implicit_head.clone())
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.expect_stage(STAGE_CBM)?;
        let model = Self::from_parts(
            ckpt.take_stack("g")?,
            ckpt.take_stack("g_tilde")?,
            ckpt.take_stack("f")?,
            ckpt.take_stack("f_tilde")?,
        )?;
        for (key, actual) in [
            ("D", model.input_dim()),
            ("d", model.num_concepts()),
            ("K", model.num_classes()),
            ("h", model.implicit_dim()),
        ] {
            let declared: usize = ckpt
                .meta(key)?
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad value for meta.{key}")))?;
            if declared != actual {
                return Err(Error::DimensionMismatch(format!(
                    "header declares {key} = {declared} but the stacks imply {actual}"
                )));
            }
        }
        Ok(model)
    }
}

/// A trained gate and fusion head with the recipe that produced them.
#[derive(Debug, Clone)]
pub struct GateArtifacts<T> {
    pub gate: GatingNet<T>,
    pub fusion: FusionNet<T>,
    pub config: GateTrainConfig,
}

impl<T: Scalar> PartialEq for GateArtifacts<T> {
    fn eq(&self, other: &Self) -> bool {
        self.gate == other.gate && self.fusion == other.fusion && self.config == other.config
    }
}

impl<T: Scalar> GateArtifacts<T> {
    /// Recipe floats use Rust's shortest round-trip formatting.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let c = &self.config;
        Checkpoint::new(STAGE_GATE, c.seed)
            .with_meta("gate_input", self.gate.mode.name())
            .with_meta("defer_only", self.gate.defer_only)
            .with_meta("lambda", c.lambda)
            .with_meta("alpha", c.alpha)
            .with_meta("beta", c.beta)
            .with_meta(
                "pseudo_label",
                match c.pseudo_label {
                    LabelKind::Hard => "hard",
                    LabelKind::Soft => "soft",
                },
            )
            .with_meta("epochs", c.epochs)
            .with_meta("batch_size", c.batch_size)
            .with_meta("learning_rate", c.learning_rate)
            .with_meta("momentum", c.momentum)
            .with_stack("gate", self.gate.stack.clone())
            .with_stack("fusion", self.fusion.stack.clone())
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.expect_stage(STAGE_GATE)?;
        fn parse<V: std::str::FromStr, T: Scalar>(c: &Checkpoint<T>, key: &str) -> Result<V> {
            c.meta(key)?
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad value for meta.{key}")))
        }
        let mode = GateInput::parse(ckpt.meta("gate_input")?)?;
        let defer_only: bool = parse(&ckpt, "defer_only")?;
        let pseudo_label = match ckpt.meta("pseudo_label")? {
            "hard" => LabelKind::Hard,
            "soft" => LabelKind::Soft,
            other => return Err(Error::MalformedHeader(format!("unknown pseudo-label kind '{other}'"))),
        };
        let config = GateTrainConfig {
            lambda: parse(&ckpt, "lambda")?,
            alpha: parse(&ckpt, "alpha")?,
            beta: parse(&ckpt, "beta")?,
            pseudo_label,
            epochs: parse(&ckpt, "epochs")?,
            batch_size: parse(&ckpt, "batch_size")?,
            learning_rate: parse(&ckpt, "learning_rate")?,
            momentum: parse(&ckpt, "momentum")?,
            seed: ckpt.seed,
            gate_input: mode,
            defer_only,
        };
        let gate = GatingNet::from_stack(mode, defer_only, ckpt.take_stack("gate")?)?;
        let fusion = FusionNet::from_stack(ckpt.take_stack("fusion")?)?;
        Ok(Self { gate, fusion, config })
    }
}

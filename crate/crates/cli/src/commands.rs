use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use decode_core::cbm::{train_cbm, CbmTrainConfig, DcbmConfig};
use decode_core::checkpoint::GateArtifacts;
use decode_core::dataio::{generate_synthetic, save_dataset, SyntheticConfig};
use decode_core::eval::{concept_strategy_heatmap, emit, evaluate, sweep_lambda, OutputFormat, DEFAULT_LAMBDA_GRID};
use decode_core::expert::SimulatedExpert;
use decode_core::intervene::{ConceptEdit, EditTarget};
use decode_core::strategy::{train_gate, GateInput, GateTrainConfig, LabelKind};
use decode_core::{DcbmModel, SplitBundle};

use crate::api::{
    load_bundle, load_gate, load_model, ExpertRequest, ExpertView, InterveneRequest, InterventionView,
    RectificationView, Snapshot,
};
use crate::error::{CliError, Result};
use crate::layout::RunDir;
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "decode", version, about = "Concept-driven AI/human routing pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset into <out>/dataset.bin.
    Generate(GenerateArgs),
    /// Train the concept bottleneck model (stage 1).
    TrainCbm(TrainCbmArgs),
    /// Train the gating and fusion networks at one λ (stage 2).
    TrainGate(TrainGateArgs),
    /// Evaluate the trained gate on the test split.
    Evaluate(EvaluateArgs),
    /// Retrain the gate across a λ grid and write the coverage curve.
    Sweep(SweepArgs),
    /// Edit concepts of one test instance, optionally fuse an expert label
    /// or rectify towards a known label.
    Intervene(InterveneArgs),
    /// Serve the HTTP JSON API over the trained artifacts.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    /// Dataset file; defaults to <out>/dataset.bin.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

impl DatasetArgs {
    fn path(&self, dir: &RunDir) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| dir.dataset())
    }
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    /// Concept completeness κ.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub concept_noise: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

impl SyntheticArgs {
    fn is_set(&self) -> bool {
        self.kappa.is_some()
            || self.concept_noise.is_some()
            || self.n_train.is_some()
            || self.n_val.is_some()
            || self.n_test.is_some()
    }

    fn config(&self, seed: u64) -> SyntheticConfig {
        let base = SyntheticConfig::default().with_seed(seed);
        let base = match self.kappa {
            Some(k) => base.with_completeness(k),
            None => base,
        };
        SyntheticConfig {
            concept_noise: self.concept_noise.unwrap_or(base.concept_noise),
            n_train: self.n_train.unwrap_or(base.n_train),
            n_val: self.n_val.unwrap_or(base.n_val),
            n_test: self.n_test.unwrap_or(base.n_test),
            ..base
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainCbmArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Dataset file; defaults to <out>/dataset.bin. Conflicts with the
    /// synthetic flags.
    #[arg(long, conflicts_with_all = ["kappa", "concept_noise", "n_train", "n_val", "n_test"])]
    pub dataset: Option<PathBuf>,
    /// Generate a synthetic dataset in place of --dataset and save it to
    /// <out>/dataset.bin.
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateInputArg {
    Concept,
    Image,
}

impl From<GateInputArg> for GateInput {
    fn from(g: GateInputArg) -> Self {
        match g {
            GateInputArg::Concept => GateInput::Concept,
            GateInputArg::Image => GateInput::Image,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PseudoLabelArg {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Args)]
pub struct GateArgs {
    /// Expert label-noise rate ρ.
    #[arg(long, default_value_t = 0.3)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub expert_seed: u64,
    /// Train the deferral-only variant (no AI+Human strategy).
    #[arg(long)]
    pub defer_only: bool,
    #[arg(long, value_enum, default_value_t = GateInputArg::Concept)]
    pub gate_input: GateInputArg,
    #[arg(long, value_enum, default_value_t = PseudoLabelArg::Soft)]
    pub pseudo_label: PseudoLabelArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

impl GateArgs {
    fn config(&self, lambda: f64) -> GateTrainConfig {
        let base = GateTrainConfig::default();
        GateTrainConfig {
            lambda,
            pseudo_label: match self.pseudo_label {
                PseudoLabelArg::Hard => LabelKind::Hard,
                PseudoLabelArg::Soft => LabelKind::Soft,
            },
            epochs: self.epochs.unwrap_or(base.epochs),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            seed: self.seed,
            gate_input: self.gate_input.into(),
            defer_only: self.defer_only,
            ..base
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainGateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub gate: GateArgs,
    /// Human-cost weight λ.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Defaults to the ρ recorded in the gate checkpoint.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Defaults to the expert seed recorded in the gate checkpoint.
    #[arg(long)]
    pub expert_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub gate: GateArgs,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDA_GRID)]
    pub lambda_grid: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Test-instance id.
    #[arg(long)]
    pub instance: u64,
    /// Concept edit `<index>=on|off`; repeatable.
    #[arg(long = "edit", value_parser = parse_edit)]
    pub edits: Vec<ConceptEdit>,
    /// Expert label to fuse after the edits.
    #[arg(long)]
    pub expert_label: Option<usize>,
    /// Known label to rectify the concepts towards.
    #[arg(long)]
    pub rectify_label: Option<usize>,
    /// Flip budget for rectification; defaults to d.
    #[arg(long, requires = "rectify_label")]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

pub fn parse_edit(s: &str) -> std::result::Result<ConceptEdit, String> {
    let (index, target) = s.split_once('=').ok_or_else(|| format!("expected <index>=on|off, got '{s}'"))?;
    let concept = index
        .trim()
        .parse()
        .map_err(|_| format!("bad concept index '{index}'"))?;
    let target = match target.trim() {
        "on" => EditTarget::On,
        "off" => EditTarget::Off,
        other => return Err(format!("edit target must be 'on' or 'off', got '{other}'")),
    };
    Ok(ConceptEdit { concept, target })
}

/// What `decode intervene` prints and writes to `intervention.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneOutput {
    pub intervention: InterventionView,
    pub expert: Option<ExpertView>,
    pub rectification: Option<RectificationView>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::TrainCbm(a) => cmd_train_cbm(&a),
        Command::TrainGate(a) => cmd_train_gate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Intervene(a) => cmd_intervene(&a).map(|out| println!("{}", render_json(&out))),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn render_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("views serialize")
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--rho must lie in [0, 1], got {rho}")))
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let dir = RunDir::new(&a.out.out);
    dir.create()?;
    let bundle: SplitBundle = generate_synthetic(&a.synthetic.config(a.seed))?;
    save_dataset(&bundle, dir.dataset())?;
    println!(
        "wrote {} ({} / {} / {} instances)",
        dir.dataset().display(),
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len()
    );
    Ok(())
}

pub fn cmd_train_cbm(a: &TrainCbmArgs) -> Result<()> {
    let dir = RunDir::new(&a.out.out);
    dir.create()?;
    let bundle = if a.synthetic.is_set() {
        let bundle: SplitBundle = generate_synthetic(&a.synthetic.config(a.data_seed))?;
        save_dataset(&bundle, dir.dataset())?;
        bundle
    } else {
        load_bundle(&a.dataset.clone().unwrap_or_else(|| dir.dataset()))?
    };
    let base = CbmTrainConfig::default();
    let config = CbmTrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
        seed: a.seed,
        ..base
    };
    let model = DcbmModel::new(&DcbmConfig::for_bundle(&bundle), a.seed);
    let (model, _) = train_cbm(model, &bundle, &config)?;
    model.to_checkpoint(a.seed).save(dir.cbm())?;
    let (concept_acc, label_acc) = model.accuracy(&bundle.test)?;
    println!(
        "wrote {}: test concept accuracy {concept_acc:.4}, label accuracy {label_acc:.4}",
        dir.cbm().display()
    );
    Ok(())
}

pub fn cmd_train_gate(a: &TrainGateArgs) -> Result<()> {
    check_rho(a.gate.rho)?;
    let dir = RunDir::new(&a.out.out);
    let model = load_model(&dir.cbm())?;
    let bundle = load_bundle(&a.data.path(&dir))?;
    let expert = SimulatedExpert::new(a.gate.rho, bundle.num_classes(), a.gate.expert_seed)?;
    let config = a.gate.config(a.lambda);
    let (gate, fusion) = config.init_networks(&model);
    let (gate, fusion, _) = train_gate(gate, fusion, &model, &bundle, &expert, &config)?;
    GateArtifacts { gate, fusion, config }
        .to_checkpoint()
        .with_meta("rho", a.gate.rho)
        .with_meta("expert_seed", a.gate.expert_seed)
        .save(dir.gate())?;
    println!("wrote {}", dir.gate().display());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let dir = RunDir::new(&a.out.out);
    let model = load_model(&dir.cbm())?;
    let (artifacts, ckpt) = load_gate(&dir.gate())?;
    let bundle = load_bundle(&a.data.path(&dir))?;
    let recorded = |key: &str| -> Result<String> { Ok(ckpt.meta(key)?.to_string()) };
    let rho = match a.rho {
        Some(r) => r,
        None => recorded("rho")?
            .parse()
            .map_err(|_| CliError::Usage("gate checkpoint has a bad rho".into()))?,
    };
    let expert_seed = match a.expert_seed {
        Some(s) => s,
        None => recorded("expert_seed")?
            .parse()
            .map_err(|_| CliError::Usage("gate checkpoint has a bad expert_seed".into()))?,
    };
    check_rho(rho)?;
    let expert = SimulatedExpert::new(rho, bundle.num_classes(), expert_seed)?;
    let report = evaluate(
        &model,
        &artifacts.gate,
        &artifacts.fusion,
        &expert,
        &bundle.test,
        artifacts.config.lambda,
    )?;
    emit(&report, dir.report("csv"), OutputFormat::Csv)?;
    emit(&report, dir.report("json"), OutputFormat::Json)?;
    let heatmap = concept_strategy_heatmap(&model, &artifacts.gate, &bundle.test)?;
    emit(&heatmap, dir.heatmap(), OutputFormat::Csv)?;
    println!(
        "system accuracy {:.4} (AI {:.4}, expert {:.4}), participation {:.4}; wrote {}",
        report.system_accuracy,
        report.ai_accuracy,
        report.expert_accuracy,
        report.participation_ratio,
        dir.report("csv").display()
    );
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    check_rho(a.gate.rho)?;
    let dir = RunDir::new(&a.out.out);
    let model = load_model(&dir.cbm())?;
    let bundle = load_bundle(&a.data.path(&dir))?;
    let expert = SimulatedExpert::new(a.gate.rho, bundle.num_classes(), a.gate.expert_seed)?;
    let curve = sweep_lambda(&model, &bundle, &expert, &a.lambda_grid, &a.gate.config(0.0))?;
    let csv = dir.curve(a.gate.rho, a.gate.defer_only, "csv");
    emit(&curve, &csv, OutputFormat::Csv)?;
    emit(&curve, dir.curve(a.gate.rho, a.gate.defer_only, "json"), OutputFormat::Json)?;
    for p in curve.points() {
        println!(
            "lambda {:<6} participation {:.4} system accuracy {:.4}",
            p.lambda, p.participation_ratio, p.system_accuracy
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}

pub fn cmd_intervene(a: &InterveneArgs) -> Result<InterveneOutput> {
    let dir = RunDir::new(&a.out.out);
    let snapshot = Snapshot::load(&dir, &a.data.path(&dir))?;
    let intervention = snapshot.intervene(&InterveneRequest {
        id: a.instance,
        edits: a.edits.clone(),
    })?;
    let expert = a
        .expert_label
        .map(|label| {
            snapshot.expert(&ExpertRequest {
                id: a.instance,
                label,
                edits: a.edits.clone(),
            })
        })
        .transpose()?;
    let rectification = a
        .rectify_label
        .map(|label| snapshot.rectify(a.instance, label, a.budget))
        .transpose()?;
    let out = InterveneOutput {
        intervention,
        expert,
        rectification,
    };
    fs::write(dir.intervention(), render_json(&out))?;
    Ok(out)
}

pub fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let dir = RunDir::new(&a.out.out);
    let snapshot = Arc::new(Snapshot::load(&dir, &a.data.path(&dir))?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = server::bind(a.port).await?;
        println!("listening on http://{}", listener.local_addr()?);
        server::serve(listener, snapshot).await
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edits_parse() {
        assert_eq!(parse_edit("3=on").unwrap(), ConceptEdit::on(3));
        assert_eq!(parse_edit(" 0 = off ").unwrap(), ConceptEdit::off(0));
        assert!(parse_edit("3").is_err());
        assert!(parse_edit("x=on").is_err());
        assert!(parse_edit("3=maybe").is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "decode",
            "sweep",
            "--out",
            "r",
            "--lambda-grid",
            "0,0.5,2",
            "--rho",
            "0.5",
            "--defer-only",
            "--gate-input",
            "image",
        ])
        .unwrap();
        match cli.command {
            Command::Sweep(a) => {
                assert_eq!(a.lambda_grid, vec![0.0, 0.5, 2.0]);
                assert!(a.gate.defer_only);
                assert_eq!(a.gate.gate_input, GateInputArg::Image);
                assert_eq!(a.gate.rho, 0.5);
            }
            other => panic!("parsed {other:?}"),
        }
        let default_grid = Cli::try_parse_from(["decode", "sweep"]).unwrap();
        match default_grid.command {
            Command::Sweep(a) => assert_eq!(a.lambda_grid, DEFAULT_LAMBDA_GRID.to_vec()),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn dataset_sources_are_exclusive() {
        assert!(Cli::try_parse_from(["decode", "train-cbm", "--dataset", "d.bin", "--kappa", "0.5"]).is_err());
        assert!(Cli::try_parse_from(["decode", "train-cbm", "--kappa", "0.5"]).is_ok());
    }
}

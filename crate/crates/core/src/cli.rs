// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. Each subcommand wraps one library operation,
//! reads and writes plain files, and leaves a `*.manifest.json` next to its
//! primary output.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{self, ScatterCategory};
use crate::dumpio::{self, Trait};
use crate::error::{Error, Result};
use crate::intervene::{self, InterventionConfig, Mode, SteerDirection};
use crate::select::{self, NeuronSelection, SelectionParams};
use crate::stats::{self, LayerStats};
use crate::toymodel::{self, PlantSpec, ToyModel, ToyModelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Caps the worker threads used for per-layer parallelism.
pub const THREADS_ENV: &str = "NEURON_STEER_THREADS";

/// Per-direction neuron count of a dense neuron-editing baseline, used as
/// the reference for the sparsity reduction figure.
pub const DENSE_BASELINE_NEURONS: usize = 20_000;

/// Layer list: `12-31`, `0,2,5` or a single index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Layers(pub Vec<usize>);

impl FromStr for Layers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParam(format!("cannot parse layer list {s:?}"));
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once('-') {
                Some((a, b)) => {
                    let a: usize = a.trim().parse().map_err(|_| bad())?;
                    let b: usize = b.trim().parse().map_err(|_| bad())?;
                    if b < a {
                        return Err(bad());
                    }
                    out.extend(a..=b);
                }
                None => out.push(part.parse().map_err(|_| bad())?),
            }
        }
        if out.is_empty() {
            return Err(bad());
        }
        out.sort_unstable();
        out.dedup();
        Ok(Layers(out))
    }
}

#[derive(Debug, Parser)]
#[command(name = "neuron-steer", version, about = "Steering vectors, dual-criterion neuron selection and sparse intervention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-neuron synthetic dump plus its oracle file.
    GenSynthetic(GenSyntheticArgs),
    /// Capture a contrastive dump from the seeded toy model.
    CaptureToy(CaptureToyArgs),
    /// Steering vectors and Cohen's d per layer (dump -> stats CSV).
    BuildVectors(BuildVectorsArgs),
    /// Dual-criterion neuron selection (stats CSV -> selection JSON).
    Select(SelectArgs),
    /// Sparse intervention plan (selection JSON -> config JSON).
    MakeConfig(MakeConfigArgs),
    /// Run the toy model with a config applied.
    Intervene(InterveneArgs),
    /// Two-component PCA per layer with CSV and SVG output.
    Pca(PcaArgs),
    /// Neurons above each |d| threshold for one layer.
    Census(CensusArgs),
    /// Selection totals, census, separation and recovery in one bundle.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the planted sets; defaults to `<out>.oracle.json`.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 512)]
    pub neurons: usize,
    #[arg(long, default_value = "0-3")]
    pub layers: Layers,
    #[arg(long, default_value_t = 10)]
    pub planted_high: usize,
    #[arg(long, default_value_t = 10)]
    pub planted_low: usize,
    #[arg(long, default_value_t = 4.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value = "openness")]
    pub r#trait: Trait,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyArgs {
    /// Seed for the toy model weights.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 128)]
    pub d_mlp: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
}

impl ToyArgs {
    fn model(&self) -> Result<ToyModel> {
        ToyModel::new(ToyModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_mlp: self.d_mlp,
            vocab: self.vocab,
            seed: self.model_seed,
        })
    }

    fn model_id(&self) -> String {
        format!(
            "toy-l{}-d{}-k{}-v{}-s{}",
            self.n_layers, self.d_model, self.d_mlp, self.vocab, self.model_seed
        )
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CaptureToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Seed for the contrastive prompt generator.
    #[arg(long, default_value_t = 0)]
    pub prompt_seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    /// Layers to keep; defaults to all.
    #[arg(long)]
    pub layers: Option<Layers>,
    #[arg(long, default_value = "openness")]
    pub r#trait: Trait,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVectorsArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layers to process; defaults to every layer in the dump.
    #[arg(long)]
    pub layers: Option<Layers>,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub r#trait: Trait,
    #[arg(long, default_value_t = 0.995)]
    pub q: f64,
    #[arg(long, default_value_t = 0.8)]
    pub tau_d: f64,
    /// Target layers; defaults to every layer in the stats file.
    #[arg(long)]
    pub layers: Option<Layers>,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeConfigArgs {
    #[arg(long)]
    pub selection: PathBuf,
    /// Full steering vectors; without it the `s` recorded in the selection
    /// is used.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value = "uniform")]
    pub mode: Mode,
    #[arg(long, default_value = "enhance")]
    pub direction: SteerDirection,
}

#[derive(Debug, Args, Serialize)]
pub struct InterveneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tokens: Vec<usize>,
    #[command(flatten)]
    pub toy: ToyArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PcaArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub layers: Option<Layers>,
}

#[derive(Debug, Args, Serialize)]
pub struct CensusArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer to census; defaults to the first layer in the stats file.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.8,1.0")]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub selection: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Adds PCA separation scores for every selected layer.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Planted-set oracle from `gen-synthetic`; adds a recovery section.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.8,1.0")]
    pub thresholds: Vec<f64>,
}

/// Record of one stage run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub params: serde_json::Value,
    /// sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every output file.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub timestamp: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

/// Path of the manifest that accompanies `primary`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        return primary.join("manifest.json");
    }
    let mut name = primary.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn write_manifest(
    command: &str,
    params: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&Path],
    primary: &Path,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        params: serde_json::to_value(params).map_err(|e| Error::InvalidParam(e.to_string()))?,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let path = manifest_path(primary);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidParam(e.to_string()))?;
    write_text(&path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn open_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    }
}

fn read_stats(path: &Path) -> Result<BTreeMap<usize, LayerStats>> {
    stats::read_stats_csv(open_file(path)?).map_err(with_path(path))
}

fn read_plant_spec(path: &Path) -> Result<PlantSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: PlantSpec = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    spec.validate()?;
    Ok(spec)
}

fn json_pretty(value: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::InvalidParam(e.to_string()))
}

fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            // a pool may already exist when running in-process more than once
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_threads();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(&a),
        Command::CaptureToy(a) => capture_toy(&a),
        Command::BuildVectors(a) => build_vectors(&a),
        Command::Select(a) => select_cmd(&a),
        Command::MakeConfig(a) => make_config(&a),
        Command::Intervene(a) => intervene_cmd(&a),
        Command::Pca(a) => pca_cmd(&a),
        Command::Census(a) => census_cmd(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

fn gen_synthetic(a: &GenSyntheticArgs) -> Result<()> {
    let mut spec = PlantSpec::random(
        a.layers.0.clone(),
        a.neurons,
        a.planted_high,
        a.planted_low,
        a.shift,
        a.noise,
        a.pairs,
        a.seed,
    )?;
    spec.trait_name = a.r#trait;
    let dump = toymodel::plant(&spec)?;
    dumpio::write_dump(&a.out, &dump)?;
    let oracle = a.oracle.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".oracle.json");
        a.out.with_file_name(name)
    });
    write_text(&oracle, &json_pretty(&spec)?)?;
    write_manifest("gen-synthetic", a, &[], &[&a.out, &oracle], &a.out)
}

fn capture_toy(a: &CaptureToyArgs) -> Result<()> {
    let model = a.toy.model()?;
    let layers = match &a.layers {
        Some(l) => l.0.clone(),
        None => (0..a.toy.n_layers).collect(),
    };
    let pairs = toymodel::toy_prompt_pairs(a.toy.vocab, a.pairs, a.prompt_seed)?;
    let dump = model.capture_dump(&pairs, &layers, a.r#trait, &a.toy.model_id())?;
    dumpio::write_dump(&a.out, &dump)?;
    write_manifest("capture-toy", a, &[], &[&a.out], &a.out)
}

fn build_vectors(a: &BuildVectorsArgs) -> Result<()> {
    let dump = dumpio::read_dump(&a.dump)?;
    let all = stats::compute_all_layer_stats(&dump, a.layers.as_ref().map(|l| l.0.as_slice()))?;
    stats::write_stats_csv(create_file(&a.out)?, all.values()).map_err(with_path(&a.out))?;
    write_manifest("build-vectors", a, &[&a.dump], &[&a.out], &a.out)
}

fn select_cmd(a: &SelectArgs) -> Result<()> {
    let all = read_stats(&a.stats)?;
    let layers = match &a.layers {
        Some(l) => l.0.clone(),
        None => all.keys().copied().collect(),
    };
    let params = SelectionParams::new(a.tau_d, a.q, layers)?;
    let selection = select::select_all(a.r#trait, &all, &params)?;
    write_text(&a.out, &selection.to_json()?)?;
    write_manifest("select", a, &[&a.stats], &[&a.out], &a.out)
}

fn make_config(a: &MakeConfigArgs) -> Result<()> {
    let selection = NeuronSelection::read(&a.selection)?;
    let steering = match &a.stats {
        Some(p) => read_stats(p)?
            .into_iter()
            .map(|(l, st)| (l, st.steering))
            .collect(),
        None => selection.recorded_steering(),
    };
    let config = intervene::build_config(&selection, &steering, a.gamma, a.mode, a.direction)?;
    write_text(&a.out, &config.to_json()?)?;
    let mut inputs: Vec<&Path> = vec![&a.selection];
    inputs.extend(a.stats.as_deref());
    write_manifest("make-config", a, &inputs, &[&a.out], &a.out)
}

/// Toy-model forward output as written by `intervene`.
#[derive(Debug, Serialize)]
struct InterventionRun<'a> {
    tokens: &'a [usize],
    logits: Vec<f64>,
    baseline_logits: Vec<f64>,
    layers: Vec<CapturedLayer>,
}

#[derive(Debug, Serialize)]
struct CapturedLayer {
    layer: usize,
    pre_edit: Vec<f64>,
    captured: Vec<f64>,
}

fn intervene_cmd(a: &InterveneArgs) -> Result<()> {
    let config = InterventionConfig::read(&a.config)?;
    let model = a.toy.model()?;
    let out = model.forward_intervened(&a.tokens, &config)?;
    let baseline = model.forward(&a.tokens)?;
    let layers = config
        .layers
        .iter()
        .map(|l| CapturedLayer {
            layer: l.layer,
            pre_edit: out.pre_edit[l.layer].clone(),
            captured: out.captures[l.layer].clone(),
        })
        .collect();
    let run = InterventionRun {
        tokens: &a.tokens,
        logits: out.logits,
        baseline_logits: baseline.logits,
        layers,
    };
    write_text(&a.out, &json_pretty(&run)?)?;
    write_manifest("intervene", a, &[&a.config], &[&a.out], &a.out)
}

fn pca_cmd(a: &PcaArgs) -> Result<()> {
    let dump = dumpio::read_dump(&a.dump)?;
    let layers = match &a.layers {
        Some(l) => l.0.clone(),
        None => dump.layer_indices(),
    };
    create_dir(&a.out_dir)?;
    let mut summary = String::from("layer,explained_pc1,explained_pc2,separation\n");
    let mut outputs = Vec::new();
    for layer in layers {
        let acts = dump.layer(layer).ok_or(Error::MissingLayer(layer))?;
        let result = analysis::pca_layer(&acts.high, &acts.low)?;
        let score = analysis::separation_score(&result)?;
        let _ = writeln!(
            summary,
            "{layer},{},{},{score}",
            result.explained_variance_ratio[0], result.explained_variance_ratio[1]
        );
        let csv_path = a.out_dir.join(format!("pca_layer_{layer}.csv"));
        analysis::write_projections_csv(create_file(&csv_path)?, &result).map_err(with_path(&csv_path))?;
        let svg_path = a.out_dir.join(format!("pca_layer_{layer}.svg"));
        write_text(&svg_path, &analysis::pca_svg(&result))?;
        outputs.push(csv_path);
        outputs.push(svg_path);
    }
    let summary_path = a.out_dir.join("pca_summary.csv");
    write_text(&summary_path, &summary)?;
    outputs.push(summary_path);
    let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest("pca", a, &[&a.dump], &out_refs, &a.out_dir)
}

fn census_cmd(a: &CensusArgs) -> Result<()> {
    let all = read_stats(&a.stats)?;
    let layer = match a.layer {
        Some(l) => l,
        None => *all
            .keys()
            .next()
            .ok_or_else(|| Error::format(&a.stats, "no layers in stats file"))?,
    };
    let st = all.get(&layer).ok_or(Error::MissingLayer(layer))?;
    check_ascending(&a.thresholds)?;
    let rows = analysis::census(&st.cohens_d, &a.thresholds);
    let text = format!(
        "layer {layer} ({} neurons)\n{}",
        analysis::group_thousands(st.n_neurons()),
        analysis::render_census(&rows)
    );
    write_text(&a.out, &text)?;
    write_manifest("census", a, &[&a.stats], &[&a.out], &a.out)
}

fn check_ascending(thresholds: &[f64]) -> Result<()> {
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParam("census thresholds must be ascending".into()));
    }
    Ok(())
}

/// Fraction of neurons saved relative to the dense baseline, counting both
/// directions: `1 - (high + low) / (2 * baseline)`.
pub fn baseline_reduction(totals: &select::SelectionTotals, baseline_per_direction: usize) -> f64 {
    1.0 - totals.total as f64 / (2 * baseline_per_direction) as f64
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let selection = NeuronSelection::read(&a.selection)?;
    let all = read_stats(&a.stats)?;
    check_ascending(&a.thresholds)?;
    create_dir(&a.out_dir)?;
    let mut inputs: Vec<&Path> = vec![&a.selection, &a.stats];
    let mut outputs: Vec<PathBuf> = Vec::new();
    let p = &selection.params;

    let mut txt = String::new();
    let _ = writeln!(
        txt,
        "trait: {}   q = {}   tau_d = {}   layers: {}",
        selection.trait_name,
        p.q,
        p.tau_d,
        selection.layers.len()
    );

    // per-layer counts
    let mut counts_csv = String::from("layer,n_neurons,threshold,high,low,total\n");
    let _ = writeln!(txt, "\nSelected neurons per layer\n{:>6} {:>6} {:>6} {:>6}", "layer", "high", "low", "total");
    for l in &selection.layers {
        let _ = writeln!(txt, "{:>6} {:>6} {:>6} {:>6}", l.layer, l.high.len(), l.low.len(), l.len());
        let _ = writeln!(
            counts_csv,
            "{},{},{},{},{},{}",
            l.layer,
            l.n_neurons,
            l.threshold,
            l.high.len(),
            l.low.len(),
            l.len()
        );
    }
    let n_layers = selection.layers.len().max(1) as f64;
    let t = selection.totals;
    let _ = writeln!(
        txt,
        "{:>6} {:>6.0} {:>6.0} {:>6.0}",
        "avg",
        t.high as f64 / n_layers,
        t.low as f64 / n_layers,
        t.total as f64 / n_layers
    );
    let total_neurons: usize = selection.layers.iter().map(|l| l.n_neurons).sum();
    let _ = writeln!(
        txt,
        "\nTotals: high {}  low {}  total {} of {} neurons ({:.2}%)",
        analysis::group_thousands(t.high),
        analysis::group_thousands(t.low),
        analysis::group_thousands(t.total),
        analysis::group_thousands(total_neurons),
        100.0 * t.total as f64 / total_neurons.max(1) as f64
    );
    let _ = writeln!(
        txt,
        "Reduction vs a {}-neuron-per-direction dense baseline: {:.1}%",
        analysis::group_thousands(DENSE_BASELINE_NEURONS),
        100.0 * baseline_reduction(&t, DENSE_BASELINE_NEURONS)
    );
    let counts_path = a.out_dir.join("selection_counts.csv");
    write_text(&counts_path, &counts_csv)?;
    outputs.push(counts_path);

    // census per selected layer
    let mut census_csv = String::from("layer,threshold,count,fraction\n");
    let _ = writeln!(txt, "\nEffect-size census");
    for l in &selection.layers {
        let st = all.get(&l.layer).ok_or(Error::MissingLayer(l.layer))?;
        let rows = analysis::census(&st.cohens_d, &a.thresholds);
        let _ = writeln!(txt, "layer {} ({} neurons)", l.layer, analysis::group_thousands(st.n_neurons()));
        for line in analysis::render_census(&rows).lines() {
            let _ = writeln!(txt, "  {line}");
        }
        for r in rows {
            let _ = writeln!(census_csv, "{},{},{},{}", l.layer, r.threshold, r.count, r.fraction);
        }
    }
    let census_path = a.out_dir.join("census.csv");
    write_text(&census_path, &census_csv)?;
    outputs.push(census_path);

    // dual-criterion categories
    let mut scatter_csv = String::from("layer,both,only_quantile,only_effect_size,neither\n");
    for l in &selection.layers {
        let st = &all[&l.layer];
        let sc = analysis::dual_scatter(st, p)?;
        let _ = writeln!(
            scatter_csv,
            "{},{},{},{},{}",
            l.layer,
            sc.count(ScatterCategory::Both),
            sc.count(ScatterCategory::OnlyQuantile),
            sc.count(ScatterCategory::OnlyEffectSize),
            sc.count(ScatterCategory::Neither)
        );
        if Some(l) == selection.layers.first() {
            let svg = a.out_dir.join(format!("scatter_layer_{}.svg", l.layer));
            write_text(&svg, &analysis::dual_scatter_svg(&sc))?;
            outputs.push(svg);
        }
    }
    let scatter_path = a.out_dir.join("dual_criterion.csv");
    write_text(&scatter_path, &scatter_csv)?;
    outputs.push(scatter_path);

    if let Some(dump_path) = &a.dump {
        inputs.push(dump_path);
        let dump = dumpio::read_dump(dump_path)?;
        let mut sep_csv = String::from("layer,separation\n");
        let _ = writeln!(txt, "\nPCA separation");
        for l in &selection.layers {
            let acts = dump.layer(l.layer).ok_or(Error::MissingLayer(l.layer))?;
            let score = analysis::separation_score(&analysis::pca_layer(&acts.high, &acts.low)?)?;
            let _ = writeln!(txt, "  layer {:>3}: {score:.3}", l.layer);
            let _ = writeln!(sep_csv, "{},{score}", l.layer);
        }
        let sep_path = a.out_dir.join("separation.csv");
        write_text(&sep_path, &sep_csv)?;
        outputs.push(sep_path);
    }

    if let Some(oracle_path) = &a.oracle {
        inputs.push(oracle_path);
        let spec = read_plant_spec(oracle_path)?;
        let rec = toymodel::planted_recovery(&spec, &selection);
        let mut rec_csv = String::from("layer,planted_high,recovered_high,planted_low,recovered_low,unplanted_selected\n");
        for r in &rec.layers {
            let _ = writeln!(
                rec_csv,
                "{},{},{},{},{},{}",
                r.layer, r.planted_high, r.recovered_high, r.planted_low, r.recovered_low, r.unplanted_selected
            );
        }
        let _ = writeln!(
            txt,
            "\nPlanted recovery: high {:.1}%  low {:.1}%  overall {:.1}%  max unplanted per layer {}",
            100.0 * rec.high_rate(),
            100.0 * rec.low_rate(),
            100.0 * rec.overall_rate(),
            rec.max_unplanted()
        );
        let rec_path = a.out_dir.join("recovery.csv");
        write_text(&rec_path, &rec_csv)?;
        outputs.push(rec_path);
    }

    let txt_path = a.out_dir.join("report.txt");
    write_text(&txt_path, &txt)?;
    outputs.push(txt_path);
    let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest("report", a, &inputs, &out_refs, &a.out_dir)
}

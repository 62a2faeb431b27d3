use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fsdet::manifest::{sha256_hex, RunManifest};
use fsdet::oracle::{run_checks, write_probit_grid};
use fsdet::protocol::{
    evaluate_merged, finetune_new, merge_checkpoints, pretrain_base, representative, seed_trunk, sweep, Checkpoint,
    ExperimentConfig, Metrics, SeedWorld, Variant,
};
use fsdet::report::{
    comparison_table, markdown_table, metric_rows, read_metrics_csv, summarize, write_metrics_csv, MetricRow,
};
use fsdet::world::{generate_dataset, generate_shots, Dataset, DatasetBundle, Detection};
use fsdet::Error;

#[derive(Parser, Debug)]
#[command(name = "fsdet", version, about = "Incremental few-shot detection heads on a synthetic world")]
struct Cli {
    /// Config file of dotted `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; every artifact path is relative to it.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Cell {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    variant: Option<Variant>,
    /// Shots per new class; defaults to `world.shots`.
    #[arg(long = "K")]
    k: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and store the scenes of one seed.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the base model of a seed.
    Pretrain(Cell),
    /// Fine-tune new-class heads on top of a base checkpoint.
    Finetune {
        #[command(flatten)]
        cell: Cell,
        /// Base checkpoint; defaults to the one `pretrain` writes.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Check that a base and a new checkpoint combine, and record the pair.
    Merge(Cell),
    /// Detect and score the test scenes with a merged model.
    Eval(Cell),
    /// Run the numerical oracle suites.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Every (variant, K, seed) cell.
    Sweep {
        /// Comma-separated variant names, or `all`.
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated shot counts.
        #[arg(long = "K")]
        k: Option<String>,
        /// A count `n` (seeds 0..n), a range `a..b`, or a comma-separated list.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Aggregate a metrics file over seeds.
    Report {
        /// Metrics CSV; defaults to the sweep output.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 3,
            Failure::Core(Error::MissingArtifact(_)) => 2,
            Failure::Core(Error::NonFinite(_) | Error::NegativeVariance(_) | Error::NonPositiveUncertainty(_)) => 4,
            Failure::Core(_) => 1,
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Pulls `--section.key value` and `--section.key=value` pairs out of `args`.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.contains('.') && !k.starts_with('.'));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => overrides.push((k.to_string(), it.next().unwrap_or_default())),
            },
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn parse_seeds(text: &str) -> Outcome<Vec<u64>> {
    let bad = || Failure::Core(Error::Config(format!("cannot read seeds `{text}`")));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    if text.contains(',') {
        return text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = text.trim().parse().map_err(|_| bad())?;
    Ok((0..n).collect())
}

fn parse_shots(text: &str) -> Outcome<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::Core(Error::Config(format!("cannot read K `{text}`"))))
        })
        .collect()
}

struct Run {
    dir: PathBuf,
    cfg: ExperimentConfig,
    config_path: Option<PathBuf>,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn ensure_parent(&self, rel: &str) -> Outcome<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(Error::from)?;
        }
        Ok(p)
    }

    fn manifest(&self, command: &str, seeds: &[u64]) -> Outcome<RunManifest> {
        let mut m = RunManifest::new(command, &self.cfg, seeds);
        if let Some(p) = &self.config_path {
            let bytes = std::fs::read(p).map_err(Error::from)?;
            m.inputs.insert(format!("config:{}", p.display()), sha256_hex(&bytes));
        }
        Ok(m)
    }

    fn finish(&self, m: RunManifest, name: &str) -> Outcome<()> {
        let path = self.ensure_parent(&format!("manifests/{name}.json"))?;
        Ok(m.finish(&path)?)
    }

    fn cell(&self, cell: &Cell) -> (Variant, usize, ExperimentConfig) {
        let variant = cell.variant.unwrap_or(self.cfg.experiment.variant);
        let k = cell.k.unwrap_or(self.cfg.world.shots);
        (variant, k, self.cfg.for_cell(variant, k))
    }
}

fn data_rel(seed: u64) -> String {
    format!("data/seed{seed}.json")
}

fn base_rel(variant: Variant, seed: u64) -> String {
    format!("ckpt/base_{}_s{seed}.ckpt", representative(variant.pretrain_family()))
}

fn cell_tag(variant: Variant, k: usize, seed: u64) -> String {
    format!("{variant}_K{k}_s{seed}")
}

fn load_checkpoint(run: &Run, rel: &str, m: &mut RunManifest) -> Outcome<Checkpoint> {
    let ckpt = Checkpoint::load(&run.path(rel))?;
    m.add_input(&run.dir, Path::new(rel))?;
    Ok(ckpt)
}

fn gen_data(run: &Run, seed: u64) -> Outcome<()> {
    let mut m = run.manifest("gen-data", &[seed])?;
    let bundle = generate_dataset(&run.cfg.world, seed)?;
    let rel = data_rel(seed);
    bundle.save(&run.ensure_parent(&rel)?)?;
    m.add_output(&run.dir, Path::new(&rel))?;
    println!("wrote {rel}: {} base, {} shot, {} test scenes", bundle.base.scenes.len(), bundle.shot_set.scenes.len(), bundle.test.scenes.len());
    run.finish(m, &format!("gen-data-s{seed}"))
}

fn pretrain(run: &Run, cell: &Cell) -> Outcome<()> {
    let (variant, _, cfg) = run.cell(cell);
    let seed = cell.seed;
    let mut m = run.manifest("pretrain", &[seed])?;
    let rel = data_rel(seed);
    let bundle = DatasetBundle::load(&run.path(&rel))?;
    m.add_input(&run.dir, Path::new(&rel))?;
    let mut stored = bundle.world.clone();
    stored.shots = cfg.world.shots;
    if stored != cfg.world {
        return Err(Error::Config(format!("{rel} was generated under a different world config")).into());
    }
    let trunk = seed_trunk(&cfg.world, seed);
    let rep = representative(variant.pretrain_family());
    let (ckpt, log) = pretrain_base(&bundle.base, &trunk, &cfg.for_cell(rep, cfg.world.shots), rep, seed)?;
    let out = base_rel(variant, seed);
    ckpt.save(&run.ensure_parent(&out)?)?;
    m.add_output(&run.dir, Path::new(&out))?;
    println!("wrote {out} after {} joint and {} box iterations", log.joint.len(), log.boxes.len());
    run.finish(m, &format!("pretrain-{rep}-s{seed}"))
}

fn finetune(run: &Run, cell: &Cell, base: Option<&Path>) -> Outcome<()> {
    let (variant, k, cfg) = run.cell(cell);
    let seed = cell.seed;
    let mut m = run.manifest("finetune", &[seed])?;
    let base_rel = base.map_or_else(|| base_rel(variant, seed), |p| p.to_string_lossy().into_owned());
    let base = load_checkpoint(run, &base_rel, &mut m)?;
    let shots: Dataset = generate_shots(k, seed, &cfg.world)?;
    let (new, _) = finetune_new(&base, &shots, &cfg, variant, seed)?;
    let out = format!("ckpt/{}.ckpt", cell_tag(variant, k, seed));
    new.save(&run.ensure_parent(&out)?)?;
    m.add_output(&run.dir, Path::new(&out))?;
    println!("wrote {out}");
    run.finish(m, &format!("finetune-{}", cell_tag(variant, k, seed)))
}

#[derive(Serialize, serde::Deserialize)]
struct MergeRecord {
    variant: Variant,
    k: usize,
    seed: u64,
    base: String,
    base_sha256: String,
    new: String,
    new_sha256: String,
    classes: Vec<usize>,
}

fn merge(run: &Run, cell: &Cell) -> Outcome<()> {
    let (variant, k, cfg) = run.cell(cell);
    let seed = cell.seed;
    let mut m = run.manifest("merge", &[seed])?;
    let (b, n) = (base_rel(variant, seed), format!("ckpt/{}.ckpt", cell_tag(variant, k, seed)));
    let base = load_checkpoint(run, &b, &mut m)?;
    let new = load_checkpoint(run, &n, &mut m)?;
    let merged = merge_checkpoints(&base, &new, cfg.model.mc_samples)?;
    let record = MergeRecord {
        variant,
        k,
        seed,
        base_sha256: m.inputs[&b].clone(),
        new_sha256: m.inputs[&n].clone(),
        base: b,
        new: n,
        classes: merged.registry.iter().map(|e| e.id).collect(),
    };
    let out = format!("merged/{}.json", cell_tag(variant, k, seed));
    std::fs::write(run.ensure_parent(&out)?, serde_json::to_vec_pretty(&record).map_err(Error::from)?)
        .map_err(Error::from)?;
    m.add_output(&run.dir, Path::new(&out))?;
    println!("wrote {out}: {} classes", record.classes.len());
    run.finish(m, &format!("merge-{}", cell_tag(variant, k, seed)))
}

#[derive(Serialize)]
struct SceneDetections {
    scene: u64,
    detections: Vec<DetectionRecord>,
}

#[derive(Serialize)]
struct DetectionRecord {
    class: usize,
    score: f64,
    bbox: [f64; 4],
    mask_size: usize,
    mask_rle: Vec<u32>,
}

fn detection_record(d: &Detection) -> DetectionRecord {
    DetectionRecord {
        class: d.class,
        score: d.score,
        bbox: d.bx.sides(),
        mask_size: d.mask.as_ref().map_or(0, |m| m.size()),
        mask_rle: d.mask.as_ref().map_or_else(Vec::new, |m| m.to_rle()),
    }
}

fn write_rows(path: &Path, rows: &[MetricRow]) -> Outcome<()> {
    let file = std::fs::File::create(path).map_err(Error::from)?;
    write_metrics_csv(rows, file)?;
    Ok(())
}

fn eval(run: &Run, cell: &Cell) -> Outcome<()> {
    let (variant, k, cfg) = run.cell(cell);
    let seed = cell.seed;
    let tag = cell_tag(variant, k, seed);
    let mut m = run.manifest("eval", &[seed])?;
    let rec_rel = format!("merged/{tag}.json");
    let rec_path = run.path(&rec_rel);
    if !rec_path.exists() {
        return Err(Error::MissingArtifact(rec_path).into());
    }
    let record: MergeRecord =
        serde_json::from_slice(&std::fs::read(&rec_path).map_err(Error::from)?).map_err(Error::from)?;
    m.add_input(&run.dir, Path::new(&rec_rel))?;
    let base = load_checkpoint(run, &record.base, &mut m)?;
    let new = load_checkpoint(run, &record.new, &mut m)?;
    if m.inputs[&record.base] != record.base_sha256 || m.inputs[&record.new] != record.new_sha256 {
        return Err(Error::Checkpoint("checkpoints changed since they were merged".into()).into());
    }
    let merged = merge_checkpoints(&base, &new, cfg.model.mc_samples)?;
    let world = SeedWorld::new(&cfg, seed)?;
    let (metrics, dets) = evaluate_merged(&world, &base, &merged, &cfg, variant)?;
    let metrics_rel = format!("eval/{tag}.csv");
    write_rows(&run.ensure_parent(&metrics_rel)?, &metric_rows(std::slice::from_ref(&metrics)))?;
    let dets_rel = format!("eval/{tag}.detections.json");
    let scenes: Vec<SceneDetections> = world
        .test
        .scenes
        .iter()
        .zip(&dets)
        .map(|(s, d)| SceneDetections {
            scene: s.id,
            detections: d.iter().map(detection_record).collect(),
        })
        .collect();
    std::fs::write(run.path(&dets_rel), serde_json::to_vec(&scenes).map_err(Error::from)?).map_err(Error::from)?;
    m.add_output(&run.dir, Path::new(&metrics_rel))?;
    m.add_output(&run.dir, Path::new(&dets_rel))?;
    print_metrics(&metrics);
    run.finish(m, &format!("eval-{tag}"))
}

fn print_metrics(m: &Metrics) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    println!(
        "{} K={} seed={}: box AP new {} base {} all {} | mask AP new {} base {} all {} | non-forgetting {}",
        m.variant,
        m.k,
        m.seed,
        fmt(m.box_ap.new),
        fmt(m.box_ap.base),
        fmt(m.box_ap.all),
        fmt(m.mask_ap.new),
        fmt(m.mask_ap.base),
        fmt(m.mask_ap.all),
        m.non_forgetting
    );
}

fn check(run: &Run, seed: u64) -> Outcome<()> {
    let mut m = run.manifest("check", &[seed])?;
    let report = run_checks(seed)?;
    let grid_rel = "check/probit_grid.csv";
    let file = std::fs::File::create(run.ensure_parent(grid_rel)?).map_err(Error::from)?;
    write_probit_grid(&report.probit_grid, file)?;
    let results_rel = "check/results.csv";
    let mut w = csv::Writer::from_path(run.path(results_rel)).map_err(Error::from)?;
    for o in &report.outcomes {
        w.serialize(o).map_err(Error::from)?;
        println!("{:<28} {:>12.3e}  {:<16} {}", o.name, o.value, o.tolerance, if o.passed { "ok" } else { "FAILED" });
    }
    w.flush().map_err(Error::from)?;
    m.add_output(&run.dir, Path::new(grid_rel))?;
    m.add_output(&run.dir, Path::new(results_rel))?;
    run.finish(m, &format!("check-s{seed}"))?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}

fn run_sweep(run: &Run, variants: Option<&str>, k: Option<&str>, seeds: Option<&str>) -> Outcome<()> {
    let variants = match variants {
        None | Some("all") => Variant::ALL.to_vec(),
        Some(text) => Variant::parse_list(text)?,
    };
    let shots = match k {
        Some(t) => parse_shots(t)?,
        None => run.cfg.experiment.shots.clone(),
    };
    let seeds = match seeds {
        Some(t) => parse_seeds(t)?,
        None => run.cfg.experiment.seeds.clone(),
    };
    let mut m = run.manifest("sweep", &seeds)?;
    m.inputs.insert(
        "grid".into(),
        sha256_hex(format!("{variants:?}|{shots:?}|{seeds:?}").as_bytes()),
    );
    let results = sweep(&run.cfg, &variants, &shots, &seeds)?;
    let mut cells = Vec::new();
    for r in &results {
        let rel = format!("sweep/cells/{}.csv", cell_tag(r.variant, r.k, r.seed));
        write_rows(&run.ensure_parent(&rel)?, &metric_rows(std::slice::from_ref(r)))?;
        m.add_output(&run.dir, Path::new(&rel))?;
        cells.push(rel);
    }
    let mut rows = Vec::new();
    for rel in &cells {
        let file = std::fs::File::open(run.path(rel)).map_err(Error::from)?;
        rows.extend(read_metrics_csv(file)?);
    }
    write_rows(&run.path("sweep/metrics.csv"), &rows)?;
    m.add_output(&run.dir, Path::new("sweep/metrics.csv"))?;
    let nf_rel = "sweep/non_forgetting.csv";
    let mut w = csv::Writer::from_path(run.path(nf_rel)).map_err(Error::from)?;
    w.write_record(["variant", "K", "seed", "non_forgetting"]).map_err(Error::from)?;
    for r in &results {
        w.write_record([r.variant.name().to_string(), r.k.to_string(), r.seed.to_string(), r.non_forgetting.to_string()])
            .map_err(Error::from)?;
        print_metrics(r);
    }
    w.flush().map_err(Error::from)?;
    m.add_output(&run.dir, Path::new(nf_rel))?;
    println!("{} cells, {} metric rows, outputs {}", results.len(), rows.len(), m.outputs_hash());
    run.finish(m, "sweep")
}

fn report(run: &Run, metrics: Option<&Path>) -> Outcome<()> {
    let rel = metrics.map_or_else(|| "sweep/metrics.csv".to_string(), |p| p.to_string_lossy().into_owned());
    let mut m = run.manifest("report", &[])?;
    let path = run.path(&rel);
    if !path.exists() {
        return Err(Error::MissingArtifact(path).into());
    }
    let rows = read_metrics_csv(std::fs::File::open(&path).map_err(Error::from)?)?;
    m.add_input(&run.dir, Path::new(&rel))?;
    let seeds: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    m.seeds = seeds.into_iter().collect();
    let summaries = summarize(&rows);
    write_rows(&run.ensure_parent("report/metrics.csv")?, &rows)?;
    let mut w = csv::Writer::from_path(run.path("report/summary.csv")).map_err(Error::from)?;
    for s in &summaries {
        w.serialize(s).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    let text = format!(
        "## AP over seeds (mean ± 95% CI, percent)\n\n{}\n## New-class box AP, one-sided paired t-tests\n\n{}",
        markdown_table(&summaries),
        comparison_table(&rows)
    );
    std::fs::write(run.path("report/report.md"), &text).map_err(Error::from)?;
    for out in ["report/metrics.csv", "report/summary.csv", "report/report.md"] {
        m.add_output(&run.dir, Path::new(out))?;
    }
    print!("{text}");
    run.finish(m, "report")
}

fn set_workers() -> Outcome<()> {
    if let Ok(v) = std::env::var("FSDET_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("FSDET_WORKERS must be a number, got `{v}`")))?;
        // A pool that was already built keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn execute(cli: Cli, overrides: &[(String, String)]) -> Outcome<()> {
    set_workers()?;
    let cfg = ExperimentConfig::load(cli.config.as_deref(), overrides)?;
    std::fs::create_dir_all(&cli.out).map_err(Error::from)?;
    let run = Run {
        dir: cli.out,
        cfg,
        config_path: cli.config,
    };
    match &cli.command {
        Command::GenData { seed } => gen_data(&run, *seed),
        Command::Pretrain(c) => pretrain(&run, c),
        Command::Finetune { cell, base } => finetune(&run, cell, base.as_deref()),
        Command::Merge(c) => merge(&run, c),
        Command::Eval(c) => eval(&run, c),
        Command::Check { seed } => check(&run, *seed),
        Command::Sweep { variants, k, seeds } => run_sweep(&run, variants.as_deref(), k.as_deref(), seeds.as_deref()),
        Command::Report { metrics } => report(&run, metrics.as_deref()),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Check(names) => eprintln!("check failed: {names}"),
            }
            ExitCode::from(f.code())
        }
    }
}

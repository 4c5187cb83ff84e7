use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use qground_cli::config::CliConfig;
use qground_cli::service::{self, ServiceOptions, DEFAULT_BLOCK};
use qground_core::agreement::{dataset_agreement, AgreementOptions, PairingMode};
use qground_core::dataset::{load_manifest, make_split, stats, DatasetManifest, Provenance, Region, Source, Split, SplitSpec};
use qground_core::msfa::suite::run_suite;
use qground_core::scorer::{evaluate_run, export_ground_truth, EvalMode};
use qground_core::som::pipeline::{autolabel_manifest, plan_manifest};
use qground_core::som::{LlmClient, LlmEndpointConfig};
use qground_core::synth::{flat_image, random_specs, synth_triplet, DistortionSpec, TextTemplates};
use qground_core::{Dims, DistortionClass};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "qground", version, about = "Distortion grounding corpora: manifests, metrics, auto-labeling and annotation service")]
struct Cli {
    /// Manifest used when a subcommand is given none.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// TOML file with defaults for these flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest, including that images and sidecar masks exist.
    Validate {
        #[arg(value_name = "MANIFEST")]
        path: Option<PathBuf>,
    },
    /// Item, annotation and region counts.
    Stats {
        #[arg(value_name = "MANIFEST")]
        path: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Seeded train/test split over items with human annotations.
    Split {
        #[arg(value_name = "MANIFEST")]
        path: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        test_count: usize,
        /// Write the split here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inter-annotator recall per source.
    Agreement {
        #[arg(value_name = "MANIFEST")]
        path: Option<PathBuf>,
        #[arg(long)]
        source: Option<Source>,
        #[arg(long, default_value = "per-class")]
        mode: PairingMode,
        /// human, lmm or all.
        #[arg(long, default_value = "human")]
        provenance: String,
        /// Also print each annotator's mean pairwise recall.
        #[arg(long)]
        per_annotator: bool,
        /// Write the JSON report here; the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score label-map predictions against human ground truth.
    Score {
        #[arg(value_name = "MANIFEST")]
        path: Option<PathBuf>,
        /// Restrict to one partition of --split-file.
        #[arg(long, value_parser = parse_split, requires = "split_file")]
        split: Option<Split>,
        #[arg(long)]
        split_file: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "per-annotation")]
        mode: EvalMode,
        /// Row name in the report.
        #[arg(long)]
        method: Option<String>,
        /// Write the ground truth into --pred before scoring.
        #[arg(long)]
        export_gt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label region proposals with a vision-language model.
    Autolabel {
        #[arg(value_name = "MANIFEST")]
        path: Option<PathBuf>,
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<PathBuf>,
        /// Build every request but send nothing and write nothing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Render a synthetic triplet with perfect ground truth.
    Synth {
        /// Image path, or flat:WxH for a mid-gray canvas.
        #[arg(long)]
        base: String,
        /// JSON list of distortion specs, or {"random": N}.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        item_id: Option<String>,
    },
    /// Attention abstractor and loss invariants with gradient checks.
    MsfaCheck {
        #[arg(long)]
        json: bool,
    },
    /// HTTP API for the annotation workbench.
    Serve {
        #[arg(value_name = "MANIFEST")]
        path: Option<PathBuf>,
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        /// Edge length of adjust blocks in pixels.
        #[arg(long)]
        block: Option<u32>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}, expected train or test")),
    }
}

fn init_logging(level: &str) -> Result<()> {
    let level: tracing::Level = level.parse().with_context(|| format!("bad log level {level:?}"))?;
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    Ok(())
}

struct Ctx {
    cfg: CliConfig,
    manifest: Option<PathBuf>,
}

impl Ctx {
    fn manifest(&self, positional: Option<PathBuf>) -> Result<PathBuf> {
        positional
            .or_else(|| self.manifest.clone())
            .or_else(|| self.cfg.manifest.clone())
            .context("no manifest given (positional, --manifest or config)")
    }
}

fn write_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    init_logging(cli.log_level.as_deref().or(cfg.log_level.as_deref()).unwrap_or("warn"))?;
    let ctx = Ctx {
        cfg,
        manifest: cli.manifest,
    };
    match cli.command {
        Command::Validate { path } => validate(&ctx.manifest(path)?),
        Command::Stats { path, json } => {
            let s = stats(&load(&ctx.manifest(path)?)?);
            if json {
                write_json(None, &s)?;
            } else {
                print!("{}", stats_table(&s));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Split {
            path,
            seed,
            test_count,
            out,
        } => {
            let m = load(&ctx.manifest(path)?)?;
            let split = make_split(&m, seed, test_count)?;
            write_json(out.as_deref(), &split)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Agreement {
            path,
            source,
            mode,
            provenance,
            per_annotator,
            out,
        } => {
            let provenance = match provenance.as_str() {
                "human" => Some(Provenance::Human),
                "lmm" => Some(Provenance::Lmm),
                "all" => None,
                other => bail!("unknown provenance {other:?}, expected human, lmm or all"),
            };
            let m = load(&ctx.manifest(path)?)?;
            let report = dataset_agreement(&m, &AgreementOptions { source, mode, provenance })?;
            print!("{}", report.to_table());
            if per_annotator {
                print!("\n{}", report.annotator_table());
            }
            if let Some(out) = out {
                write_json(Some(&out), &report)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Score {
            path,
            split,
            split_file,
            pred,
            mode,
            method,
            export_gt,
            out,
        } => {
            let m = load(&ctx.manifest(path)?)?;
            let spec = split_file.as_deref().map(SplitSpec::load).transpose()?;
            let sel = match (&spec, split) {
                (Some(s), Some(p)) => Some((s, p)),
                (Some(s), None) => Some((s, Split::Test)),
                (None, _) => None,
            };
            if export_gt {
                fs::create_dir_all(&pred)?;
                export_ground_truth(&m, sel, &pred)?;
            }
            let mut report = evaluate_run(&m, sel, &pred, mode)?;
            if let Some(name) = method {
                report = report.with_method(name);
            }
            print!("{}", report.to_table());
            if let Some(out) = out {
                write_json(Some(&out), &report)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Autolabel {
            path,
            regions,
            endpoint,
            dry_run,
        } => {
            let manifest = ctx.manifest(path)?;
            let regions = regions.or(ctx.cfg.regions.clone()).context("--regions is required")?;
            let endpoint = endpoint.or(ctx.cfg.endpoint.clone()).context("--endpoint is required")?;
            let config = LlmEndpointConfig::load(&endpoint)?;
            let report = if dry_run {
                plan_manifest(&manifest, &regions, &config.model)?
            } else {
                autolabel_manifest(&manifest, &regions, &LlmClient::from_config(config)?)?
            };
            write_json(None, &report)?;
            Ok(if report.failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Synth {
            base,
            spec,
            seed,
            out,
            item_id,
        } => synth(&base, &spec, seed, &out, item_id),
        Command::MsfaCheck { json } => {
            let results = run_suite();
            if json {
                write_json(None, &results)?;
            } else {
                let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
                for r in &results {
                    let mark = if r.passed { "PASS" } else { "FAIL" };
                    println!("{mark}  {:width$}  {}", r.name, r.detail);
                }
            }
            Ok(if results.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Serve {
            path,
            regions,
            bind,
            block,
        } => {
            let manifest = ctx.manifest(path)?;
            let regions = regions.or(ctx.cfg.regions.clone()).context("--regions is required")?;
            let opts = ServiceOptions {
                manifest_path: manifest,
                regions_dir: regions,
                block: block.or(ctx.cfg.block).unwrap_or(DEFAULT_BLOCK),
            };
            let bind = bind.or(ctx.cfg.bind.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
            tokio::runtime::Runtime::new()?.block_on(service::serve(&opts, &bind))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn validate(path: &Path) -> Result<ExitCode> {
    let violations = match load_manifest(path) {
        Ok(m) => {
            let v = m.validate();
            if v.is_empty() {
                println!("ok: {} items, {} annotations", m.items.len(), m.annotation_count());
                return Ok(ExitCode::SUCCESS);
            }
            v
        }
        Err(qground_core::dataset::ManifestError::Invalid(v)) => v,
        Err(e) => return Err(e.into()),
    };
    for v in &violations {
        println!("{v}");
    }
    println!("{} violation(s)", violations.len());
    Ok(ExitCode::FAILURE)
}

fn stats_table(s: &qground_core::dataset::DatasetStats) -> String {
    let mut out = format!("items {}\n\n{:<14}{:>8}{:>8}{:>8}{:>8}{:>8}\n", s.items, "source", "items", "h_img", "h_ann", "l_img", "l_ann");
    for (src, st) in &s.by_source {
        out += &format!(
            "{:<14}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
            src.name(),
            st.items,
            st.human_images,
            st.human_annotations,
            st.lmm_images,
            st.lmm_annotations
        );
    }
    out += &format!("\n{:<14}{:>10}{:>10}{:>14}\n", "class", "h_regions", "l_regions", "h_pixels");
    for c in DistortionClass::ALL {
        out += &format!("{:<14}{:>10}{:>10}{:>14}\n", c.name(), s.human.regions[&c], s.lmm.regions[&c], s.human.region_pixels[&c]);
    }
    out
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    List(Vec<DistortionSpec>),
    Random { random: usize },
}

fn synth(base: &str, spec: &Path, seed: u64, out: &Path, item_id: Option<String>) -> Result<ExitCode> {
    let img = match base.strip_prefix("flat:") {
        Some(size) => {
            let (w, h) = size.split_once('x').context("flat base must look like flat:WxH")?;
            flat_image(w.parse()?, h.parse()?, 128)
        }
        None => image::open(base).with_context(|| format!("reading {base}"))?.to_rgb8(),
    };
    let dims = Dims::new(img.height(), img.width())?;
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let specs = match serde_json::from_str(&text)? {
        SpecFile::List(v) => v,
        SpecFile::Random { random } => random_specs(dims, random, seed)?,
    };
    let item_id = item_id.unwrap_or_else(|| format!("synth-{seed}"));
    let image_rel = format!("{item_id}.png");
    let mut t = synth_triplet(&item_id, &image_rel, &img, &specs, &TextTemplates::default(), seed)?;

    fs::create_dir_all(out)?;
    let manifest_path = out.join("manifest.jsonl");
    let mut manifest = if manifest_path.exists() {
        load(&manifest_path)?
    } else {
        DatasetManifest::new(out, Vec::new())
    };
    if manifest.get(&item_id).is_some() {
        bail!("item {item_id:?} already exists in {}", manifest_path.display());
    }
    t.image.save(out.join(&image_rel))?;
    for (k, r) in t.triplet.annotations[0].regions.iter_mut().enumerate() {
        *r = Region {
            sidecar: Some(format!("masks/{item_id}_{k}.json")),
            ..r.clone()
        };
    }
    manifest.items.push(t.triplet);
    manifest.save(&manifest_path)?;
    println!("{}", manifest_path.display());
    Ok(ExitCode::SUCCESS)
}

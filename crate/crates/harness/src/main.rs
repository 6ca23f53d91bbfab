//! `firm` command line: train, score, localize, eval, synth.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use firm::dataset::{ingest_dataset, Layout};
use firm::experiment::{run_experiment, ExperimentConfig, ScoreKind};
use firm::io::{load_png, save_heatmap_pgm, save_mask_png, save_png};
use firm::{exit_code, ConfigError, DataError};
use firm_core::batch::normalize_embedding;
use firm_core::encoder::EncoderState;
use firm_core::image::resize_bilinear;
use firm_core::metrics::{auroc, ScoredSet};
use firm_core::patch::{foreground_mask, grid_shape, ThresholdMode};
use firm_core::scoring::{
    build_prototype, image_score, kde_score, localization_map, median_gamma, s_con, s_con_norm,
    s_ens, s_proto, s_shift, BankLevel, MemoryBank, Polarity, Provenance, RotationBanks,
    ScoreConfig,
};
use firm_core::synth::{
    cutpaste_perturb, inject_anomaly, perlin_anomaly_mask, rotate_image, Blend, CutPasteParams,
    PerlinParams, RotationTag,
};

#[derive(Parser)]
#[command(name = "firm", about = "Contrastive representation learning for anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Con,
    ConNorm,
    Shift,
    Ens,
    Proto,
    Kde,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthMode {
    Rot,
    Cutpaste,
    Perlin,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a dataset's test split against its training split.
    Score {
        #[arg(long)]
        model: PathBuf,
        /// Dataset root (MVTec-style layout).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        score: ScoreArg,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Patch-score one image and write a localization heatmap.
    Localize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Dataset root providing the normal patches for the memory bank.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        patch: usize,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute AUROC from a scores CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic outliers (and masks) from a directory of PNGs.
    Synth {
        #[arg(long, value_enum)]
        mode: SynthMode,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Score {
            model,
            data,
            score,
            k,
            out,
            seed,
        } => cmd_score(&model, &data, score, k, &out, seed),
        Command::Localize {
            model,
            image,
            data,
            patch,
            stride,
            out,
        } => cmd_localize(&model, &image, &data, patch, stride, &out),
        Command::Eval { scores, out } => cmd_eval(&scores, &out),
        Command::Synth {
            mode,
            input,
            out,
            seed,
        } => cmd_synth(mode, &input, &out, seed),
    }
}

fn cmd_train(config: &PathBuf, out: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| ConfigError(format!("reading {}: {e}", config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(out) = out {
        cfg.output = out;
    }
    let report = run_experiment(&cfg)?;
    println!("report written to {}", cfg.output.join("report.json").display());
    for (name, value) in &report.score_aurocs {
        println!("auroc[{name}] = {value:.4}");
    }
    println!("aulc = {:.4}", report.aulc);
    Ok(())
}

fn load_model(path: &PathBuf) -> Result<EncoderState<f32>> {
    EncoderState::<f32>::load(path)
        .map_err(|e| anyhow::Error::new(e).context(format!("loading {}", path.display())))
}

fn cmd_score(
    model: &PathBuf,
    data: &PathBuf,
    score: ScoreArg,
    k: usize,
    out: &PathBuf,
    seed: u64,
) -> Result<()> {
    let state = load_model(model)?;
    let (h, _, c) = state.config().input;
    let dataset = ingest_dataset(data, &Layout::MvTec, h, c)?;
    let embed = |img: &firm_core::image::Image<f32>| {
        let (feat, _) = state.forward(img)?;
        normalize_embedding(&feat)
    };
    let mut embeddings = Vec::new();
    let mut provenance = Vec::new();
    for s in &dataset.train {
        embeddings.push(embed(&s.image).map_err(anyhow::Error::new)?);
        provenance.push(Provenance {
            source_id: s.source_id.clone(),
            origin: None,
        });
    }
    let bank =
        MemoryBank::new(embeddings, BankLevel::Image, provenance).map_err(anyhow::Error::new)?;
    let k = k.min(bank.len()).max(1);

    let needs_rotation = matches!(score, ScoreArg::Shift | ScoreArg::Ens);
    let rotation_banks = if needs_rotation {
        let memory: Vec<_> = dataset.train.iter().map(|s| s.image.clone()).collect();
        Some(RotationBanks::build(&memory, embed).map_err(anyhow::Error::new)?)
    } else {
        None
    };
    let prototype = if matches!(score, ScoreArg::Proto) {
        Some(build_prototype(&bank).map_err(anyhow::Error::new)?)
    } else {
        None
    };
    let raw_features = if matches!(score, ScoreArg::Kde) {
        let mut rows = ndarray::Array2::zeros((dataset.train.len(), state.config().d));
        for (i, s) in dataset.train.iter().enumerate() {
            rows.row_mut(i)
                .assign(&state.forward(&s.image).map_err(anyhow::Error::new)?.0);
        }
        Some(rows)
    } else {
        None
    };

    let score_cfg = ScoreConfig {
        k,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut writer = csv::Writer::from_path(out)?;
    let name = match score {
        ScoreArg::Con => "con",
        ScoreArg::ConNorm => "con-norm",
        ScoreArg::Shift => "shift",
        ScoreArg::Ens => "ens",
        ScoreArg::Proto => "proto",
        ScoreArg::Kde => "kde",
    };
    writer.write_record(["id", "label", name])?;
    for t in &dataset.test {
        let value: f32 = match score {
            ScoreArg::Con => -s_con(&embed(&t.image).map_err(anyhow::Error::new)?, &bank, k)
                .map_err(anyhow::Error::new)?,
            ScoreArg::ConNorm => {
                let raw = state.forward(&t.image).map_err(anyhow::Error::new)?.0;
                -s_con_norm(&raw, &bank, k).map_err(anyhow::Error::new)?
            }
            ScoreArg::Shift => -s_shift(&t.image, rotation_banks.as_ref().unwrap(), embed, k)
                .map_err(anyhow::Error::new)?,
            ScoreArg::Ens => -s_ens(
                &t.image,
                rotation_banks.as_ref().unwrap(),
                embed,
                &score_cfg,
                &mut rng,
            )
            .map_err(anyhow::Error::new)?,
            ScoreArg::Proto => s_proto(
                &embed(&t.image).map_err(anyhow::Error::new)?,
                prototype.as_ref().unwrap(),
            )
            .map_err(anyhow::Error::new)?,
            ScoreArg::Kde => {
                let rows = raw_features.as_ref().unwrap();
                let gamma = median_gamma(rows).map_err(anyhow::Error::new)?;
                let raw = state.forward(&t.image).map_err(anyhow::Error::new)?.0;
                kde_score(&raw, rows, gamma).map_err(anyhow::Error::new)?
            }
        };
        writer.write_record([
            t.id.clone(),
            if t.is_anomaly { "anomaly" } else { "inlier" }.to_string(),
            format!("{value}"),
        ])?;
    }
    writer.flush()?;
    println!("scores written to {}", out.display());
    Ok(())
}

fn cmd_localize(
    model: &PathBuf,
    image_path: &PathBuf,
    data: &PathBuf,
    patch: usize,
    stride: usize,
    out: &PathBuf,
) -> Result<()> {
    if stride == 0 || stride >= patch {
        anyhow::bail!(ConfigError(format!(
            "need 0 < stride < patch, got stride {stride}, patch {patch}"
        )));
    }
    let state = load_model(model)?;
    let (ph, pw, c) = state.config().input;
    if (ph, pw) != (patch, patch) {
        anyhow::bail!(ConfigError(format!(
            "model expects {ph}x{pw} patches, --patch is {patch}"
        )));
    }
    let img = load_png(image_path, c)?;
    let (h, w) = firm_core::image::dims(&img);
    if patch > h.min(w) {
        anyhow::bail!(DataError(format!(
            "patch {patch} exceeds image {h}x{w}"
        )));
    }
    let embed = |img: &firm_core::image::Image<f32>| {
        let (feat, _) = state.forward(img)?;
        normalize_embedding(&feat)
    };

    // memory bank: all grid patches of the dataset's normal training images
    let train_dir = data.join("train").join("good");
    let mut embeddings = Vec::new();
    let mut provenance = Vec::new();
    for path in firm::dataset::pool_files(&train_dir)? {
        let normal = load_png(&path, c)?;
        for p in firm_core::patch::extract_patch_grid(&normal, patch, stride)
            .map_err(anyhow::Error::new)?
        {
            embeddings.push(embed(&p.pixels).map_err(anyhow::Error::new)?);
            provenance.push(Provenance {
                source_id: path.display().to_string(),
                origin: Some(p.origin),
            });
        }
    }
    let bank =
        MemoryBank::new(embeddings, BankLevel::Patch, provenance).map_err(anyhow::Error::new)?;

    let (agg, sims) = image_score(&img, &bank, embed, patch, stride, Polarity::AnomalyHigh)
        .map_err(anyhow::Error::new)?;
    let grid = grid_shape(h, w, patch, stride);
    let anomaly_scores: Vec<f32> = sims.iter().map(|&s| 1.0 - s).collect();
    let map = localization_map(&anomaly_scores, grid, (h, w), patch, stride)
        .map_err(anyhow::Error::new)?;
    save_heatmap_pgm(out, &map)?;
    let csv_path = out.with_extension("csv");
    firm::experiment::write_patch_csv(&csv_path, &sims, grid, stride)?;
    println!(
        "heatmap written to {} (image score {agg:.4}, patch csv {})",
        out.display(),
        csv_path.display()
    );
    Ok(())
}

fn cmd_eval(scores: &PathBuf, out: &PathBuf) -> Result<()> {
    let mut reader = csv::Reader::from_path(scores)
        .map_err(|e| DataError(format!("reading {}: {e}", scores.display())))?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        anyhow::bail!(DataError(
            "scores CSV must start with id,label columns".into()
        ));
    }
    let score_names: Vec<String> = headers.iter().skip(2).map(String::from).collect();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); score_names.len()];
    for record in reader.records() {
        let record = record?;
        ids.push(record[0].to_string());
        labels.push(match &record[1] {
            "anomaly" => true,
            "inlier" => false,
            other => anyhow::bail!(DataError(format!("unknown label {other}"))),
        });
        for (c, column) in columns.iter_mut().enumerate() {
            let raw = &record[2 + c];
            column.push(raw.parse::<f64>().map_err(|e| {
                DataError(format!("bad score {raw} in {}: {e}", scores.display()))
            })?);
        }
    }
    let mut metrics = BTreeMap::new();
    for (name, column) in score_names.iter().zip(columns) {
        let set = ScoredSet::new(column, labels.clone(), ids.clone())
            .map_err(anyhow::Error::new)?;
        metrics.insert(
            format!("auroc_{name}"),
            auroc(&set).map_err(anyhow::Error::new)?,
        );
    }
    std::fs::write(out, serde_json::to_string_pretty(&metrics)?)?;
    println!("metrics written to {}", out.display());
    for (name, value) in &metrics {
        println!("{name} = {value:.4}");
    }
    Ok(())
}

fn cmd_synth(mode: SynthMode, input: &PathBuf, out: &PathBuf, seed: u64) -> Result<()> {
    let files = firm::dataset::pool_files(input)?;
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = 0usize;
    for (i, path) in files.iter().enumerate() {
        let img = load_png(path, 1)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:04}"));
        match mode {
            SynthMode::Rot => {
                for tag in RotationTag::OUTLIERS {
                    let rotated = rotate_image(&img, tag).map_err(anyhow::Error::new)?;
                    save_png(&out.join(format!("{stem}_rot{}.png", tag.degrees())), &rotated)?;
                    written += 1;
                }
            }
            SynthMode::Cutpaste => {
                let (perturbed, mask) =
                    cutpaste_perturb(&img, &CutPasteParams::default(), &mut rng)
                        .map_err(anyhow::Error::new)?;
                save_png(&out.join(format!("{stem}_cutpaste.png")), &perturbed)?;
                save_mask_png(&out.join(format!("{stem}_cutpaste_mask.png")), &mask)?;
                written += 1;
            }
            SynthMode::Perlin => {
                let (fg, empty) = foreground_mask(&img, ThresholdMode::Otsu, 3);
                let fg = if empty {
                    ndarray::Array2::from_elem(fg.dim(), true)
                } else {
                    fg
                };
                let params = PerlinParams {
                    seed,
                    ..Default::default()
                };
                let mask =
                    perlin_anomaly_mask(&fg, &params, &mut rng).map_err(anyhow::Error::new)?;
                let donor_path = &files[(i + 1) % files.len()];
                let donor = load_png(donor_path, 1)?;
                let donor = if donor.shape() != img.shape() {
                    let (h, w) = firm_core::image::dims(&img);
                    resize_bilinear(&donor, h, w)
                } else {
                    donor
                };
                let injected = inject_anomaly(&img, &donor, &mask, Blend::LinearFeather)
                    .map_err(anyhow::Error::new)?;
                save_png(&out.join(format!("{stem}_perlin.png")), &injected)?;
                save_mask_png(&out.join(format!("{stem}_perlin_mask.png")), &mask)?;
                written += 1;
            }
        }
    }
    println!("wrote {written} synthetic outliers to {}", out.display());
    Ok(())
}

// keep the parsed enum aligned with the experiment-config one
impl From<ScoreArg> for ScoreKind {
    fn from(value: ScoreArg) -> Self {
        match value {
            ScoreArg::Con => ScoreKind::Con,
            ScoreArg::ConNorm => ScoreKind::ConNorm,
            ScoreArg::Shift => ScoreKind::Shift,
            ScoreArg::Ens => ScoreKind::Ens,
            ScoreArg::Proto => ScoreKind::Proto,
            ScoreArg::Kde => ScoreKind::Kde,
        }
    }
}

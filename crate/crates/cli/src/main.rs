use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use npkit::dataio::{
    load_checkpoint, load_config, load_mnist, parse_config, render_config, render_grid, save_checkpoint, Checkpoint,
    GridColumn, ImageDataset, RunConfig, Split,
};
use npkit::diagnostics::{
    class_means, elimination_sequence, embedding_stats, entropy_curve, greedy_select, image_matrix, digit_labels,
    inception_curve, prediction_histogram, size_classification_data, train_digit_classifier, train_size_classifier,
    Classifier, ClassifierOptions, Criterion,
};
use npkit::model::{NeuralProcess, PointSet};
use npkit::objectives::iwae_loglik;
use npkit::rng::Rng;
use npkit::tensor::PoolMode;
use npkit::training::train;

const BUILD_ID: &str = match option_env!("NPKIT_BUILD_ID") {
    Some(id) => id,
    None => env!("CARGO_PKG_VERSION"),
};

#[derive(Parser)]
#[command(name = "npkit", version, about = "Neural process training and posterior diagnostics on image data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a per-epoch metrics table.
    Train(Common),
    /// Importance-weighted predictive log-likelihood on held-out images.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Importance samples per task.
        #[arg(long, default_value_t = 1000)]
        k: usize,
        /// Number of test tasks; defaults to every loaded test image.
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Render completion grids for random context sets of several sizes.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Posterior samples per column.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "10,50,100,300,784")]
        sizes: Vec<usize>,
        /// Test image to condition on.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Paste observed values over their pixels in the samples.
        #[arg(long)]
        copy_context: bool,
    },
    /// Entropy curve, pooled-embedding statistics and the context-size classifier.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50,100,200,400,784")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        /// Test images averaged over in the entropy curve.
        #[arg(long, default_value_t = 100)]
        images: usize,
    },
    /// Greedy context selection and the digit-elimination sequence.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = CriterionArg::Kl)]
        criterion: CriterionArg,
        /// Pixels to select.
        #[arg(long, default_value_t = 50)]
        budget: usize,
        /// Candidates scored per step; all unobserved pixels when absent.
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Completions per elimination step.
        #[arg(long, default_value_t = 1000)]
        k: usize,
        #[command(flatten)]
        classifier: ClassifierArgs,
    },
    /// Inception score of completions per context size.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50,100,200,400,784")]
        sizes: Vec<usize>,
        /// Random context sets per size.
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// Completions per context set.
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[command(flatten)]
        classifier: ClassifierArgs,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct ClassifierArgs {
    /// Digit classifier to load, or to train and save if missing.
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Kl,
    Entropy,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(common) => cmd_train(&common),
        Command::Eval { common, k, tasks } => cmd_eval(&common, k, tasks),
        Command::Sample {
            common,
            k,
            sizes,
            image,
            copy_context,
        } => cmd_sample(&common, k, &sizes, image, copy_context),
        Command::Diagnose {
            common,
            sizes,
            reps,
            images,
        } => cmd_diagnose(&common, &sizes, reps, images),
        Command::Select {
            common,
            criterion,
            budget,
            candidates,
            image,
            k,
            classifier,
        } => {
            let criterion = match criterion {
                CriterionArg::Kl => Criterion::KlToFull,
                CriterionArg::Entropy => Criterion::Entropy,
            };
            cmd_select(&common, criterion, budget, candidates, image, k, &classifier)
        }
        Command::Score {
            common,
            sizes,
            reps,
            k,
            classifier,
        } => cmd_score(&common, &sizes, reps, k, &classifier),
    }
}

/// Config file (or the checkpoint's own config), then overrides, then the seed.
fn resolve_config(common: &Common, checkpoint: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, checkpoint) {
        (Some(path), _) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(c)) => parse_config(&c.metadata).context("reading checkpoint configuration")?,
        (None, None) => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o).with_context(|| format!("applying --set {o}"))?;
    }
    cfg.validate().context("invalid configuration")?;
    cfg.seed = Some(common.seed);
    Ok(cfg)
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut text = format!("# npkit {command}\n# build = {BUILD_ID}\n");
    for (k, v) in extra {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    text.push_str(&render_config(cfg));
    fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<ImageDataset> {
    let limit = match split {
        Split::Train => cfg.train.train_images,
        Split::Test => cfg.train.test_images,
    };
    load_mnist(&cfg.train.data_dir, split, Some(limit))
        .with_context(|| format!("loading MNIST from {}", cfg.train.data_dir.display()))
}

/// Checkpoint, resolved config and model for evaluation commands.
fn load_model(common: &Common, command: &str) -> Result<(RunConfig, NeuralProcess<f32>)> {
    let path = common
        .checkpoint
        .as_ref()
        .with_context(|| format!("`{command}` needs --checkpoint"))?;
    let checkpoint = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = resolve_config(common, Some(&checkpoint))?;
    let model = checkpoint
        .model::<f32>(&cfg.model)
        .context("checkpoint does not match the model configuration")?;
    write_manifest(
        &common.out,
        command,
        &cfg,
        &[("checkpoint", path.display().to_string())],
    )?;
    Ok((cfg, model))
}

fn checkpoint_for(cfg: &RunConfig, seed: u64, epoch: usize, model: &NeuralProcess<f32>) -> Checkpoint {
    let mut meta = cfg.clone();
    meta.seed = Some(seed);
    meta.epoch = Some(epoch);
    let mut c = Checkpoint::new(render_config(&meta));
    c.push_params("", &model.params);
    c
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    write_manifest(&common.out, "train", &cfg, &[])?;
    let data = load_split(&cfg, Split::Train)?;
    let out = common.out.clone();
    let every = cfg.train.checkpoint_every;
    let mut metrics = String::from("epoch\tmean_objective\tlr\tseconds\n");
    let outcome = train::<f32, _>(&cfg.model, &cfg.train, &data, common.seed, |m, model, adam| {
        println!("{}", m.tsv());
        metrics.push_str(&m.tsv());
        metrics.push('\n');
        if every > 0 && (m.epoch + 1) % every == 0 {
            let mut c = checkpoint_for(&cfg, common.seed, m.epoch + 1, model);
            adam.push_to(&mut c);
            save_checkpoint(&out.join(format!("epoch-{}.npc", m.epoch + 1)), &c)
                .map_err(|e| npkit::training::TrainError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    })?;
    write(&out, "metrics.tsv", &metrics)?;
    let mut c = checkpoint_for(&cfg, common.seed, cfg.train.epochs, &outcome.model);
    outcome.adam.push_to(&mut c);
    save_checkpoint(&out.join("model.npc"), &c)?;
    println!("wrote {}", out.join("model.npc").display());
    Ok(())
}

fn cmd_eval(common: &Common, k: usize, tasks: Option<usize>) -> Result<()> {
    if k == 0 {
        bail!("--k must be at least 1");
    }
    let (cfg, model) = load_model(common, "eval")?;
    let test = load_split(&cfg, Split::Test)?;
    let grid = test.grid();
    let count = tasks.unwrap_or(test.len()).min(test.len());
    let (lo, hi) = cfg.train.n_range;
    let hi = hi.min(grid.pixels());
    let mut rng = Rng::seed(common.seed);
    let mut table = String::from("image\tcontext\tloglik_per_pixel\n");
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let n = rng.range(lo, hi);
        let order = rng.choose_distinct(grid.pixels(), grid.pixels());
        let ctx = PointSet::from_pixels(grid, test.image(i), &order[..n])?;
        let target = PointSet::from_pixels(grid, test.image(i), &order[n..])?;
        let v = iwae_loglik(&model, &ctx, &target, k, &mut rng)?;
        table.push_str(&format!("{i}\t{n}\t{v:.6}\n"));
        values.push(v);
    }
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len().max(2) - 1) as f64;
    write(&common.out, "eval.tsv", &table)?;
    println!("iwae_loglik K={k} over {count} tasks: {mean:.4} ± {:.4} nats/pixel", var.sqrt());
    Ok(())
}

fn cmd_sample(common: &Common, k: usize, sizes: &[usize], image: usize, copy_context: bool) -> Result<()> {
    let (cfg, model) = load_model(common, "sample")?;
    let test = load_split(&cfg, Split::Test)?;
    if image >= test.len() {
        bail!("--image {image} out of range ({} test images)", test.len());
    }
    let grid = test.grid();
    let img = test.image(image);
    let mut rng = Rng::seed(common.seed);
    let mut contexts = Vec::new();
    let mut completions = Vec::new();
    for &n in sizes {
        if n == 0 || n > grid.pixels() {
            bail!("context size {n} outside 1..={}", grid.pixels());
        }
        let pixels = rng.choose_distinct(grid.pixels(), n);
        let mut shown = vec![None; grid.pixels()];
        for &p in &pixels {
            shown[p] = Some(img[p] as f64);
        }
        let ctx = PointSet::from_pixels(grid, img, &pixels)?;
        completions.push(model.sample_completion(&ctx, grid, k, copy_context, &mut rng)?);
        contexts.push(shown);
    }
    let columns: Vec<GridColumn> = contexts
        .iter()
        .zip(&completions)
        .map(|(c, s)| GridColumn {
            context: c,
            samples: &s.means,
            std: &s.std,
        })
        .collect();
    let truth: Vec<f64> = img.iter().map(|&v| v as f64).collect();
    let raster = render_grid(grid.height, grid.width, &columns, Some(&truth))?;
    let path = common.out.join("samples.pgm");
    raster.write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_diagnose(common: &Common, sizes: &[usize], reps: usize, images: usize) -> Result<()> {
    let (cfg, model) = load_model(common, "diagnose")?;
    let test = load_split(&cfg, Split::Test)?;
    let grid = test.grid();
    let mut rng = Rng::seed(common.seed);
    let train_max = cfg.train.n_range.1 - 1;

    let ids: Vec<usize> = (0..images.min(test.len())).collect();
    let curve = entropy_curve(&model, &test, &ids, sizes, reps, train_max, &mut rng)?;
    write(&common.out, "entropy.tsv", &curve.tsv())?;

    if model.config.pooling == PoolMode::Max {
        let ordering = rng.choose_distinct(grid.pixels(), grid.pixels());
        let all: Vec<usize> = (1..=grid.pixels()).collect();
        let stats = embedding_stats(&model, test.image(0), grid, &ordering, &all, &mut rng)?;
        write(&common.out, "embedding.tsv", &stats.tsv())?;
    }

    // Classifier trains and tests on embeddings of disjoint image sets.
    let split = test.len() * 4 / 5;
    if split == 0 || split == test.len() {
        bail!("size classifier needs at least two test images");
    }
    let train_ids: Vec<usize> = (0..split).collect();
    let test_ids: Vec<usize> = (split..test.len()).collect();
    let (x, y) = size_classification_data(&model, &test, &train_ids, 10, &mut rng)?;
    let (xt, yt) = size_classification_data(&model, &test, &test_ids, 10, &mut rng)?;
    let (_, report) = train_size_classifier((&x, &y), (&xt, &yt), ClassifierOptions::sizes(), &mut rng)?;
    let mut text = format!(
        "# accuracy = {:.4}\n# chance = {:.4}\n# p_value = {:.3e}\n# adjacent_error_share = {:.4}\n",
        report.accuracy,
        report.chance,
        report.p_value,
        report.adjacent_error_share()
    );
    text.push_str("true\\predicted");
    for b in 0..report.confusion.len() {
        text.push_str(&format!("\t{b}"));
    }
    text.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        text.push_str(&t.to_string());
        for c in row {
            text.push_str(&format!("\t{c}"));
        }
        text.push('\n');
    }
    write(&common.out, "size_classifier.tsv", &text)?;
    println!(
        "size classifier accuracy {:.3} (chance {:.3}, p = {:.2e})",
        report.accuracy, report.chance, report.p_value
    );
    Ok(())
}

/// Loads the digit classifier at `path`, or trains one on the full training
/// split and saves it there.
fn digit_classifier(cfg: &RunConfig, args: &ClassifierArgs, out: &Path, seed: u64) -> Result<Classifier> {
    let path = args.classifier.clone().unwrap_or_else(|| out.join("digit_classifier.npc"));
    if path.exists() {
        let c = load_checkpoint(&path)?;
        return Ok(Classifier::from_checkpoint(&c)?);
    }
    let train = load_mnist(&cfg.train.data_dir, Split::Train, None)?;
    let mut rng = Rng::stream(seed, 10);
    let clf = train_digit_classifier(&train, ClassifierOptions::digits(), &mut rng)?;
    let test = load_mnist(&cfg.train.data_dir, Split::Test, None)?;
    let ids: Vec<usize> = (0..test.len()).collect();
    let acc = clf.accuracy(&image_matrix(&test, &ids), &digit_labels(&test)?);
    println!("digit classifier test accuracy {acc:.4}");
    save_checkpoint(&path, &clf.to_checkpoint())?;
    println!("wrote {}", path.display());
    Ok(clf)
}

fn cmd_select(
    common: &Common,
    criterion: Criterion,
    budget: usize,
    candidates: Option<usize>,
    image: usize,
    k: usize,
    classifier: &ClassifierArgs,
) -> Result<()> {
    let (cfg, model) = load_model(common, "select")?;
    let test = load_split(&cfg, Split::Test)?;
    if image >= test.len() {
        bail!("--image {image} out of range ({} test images)", test.len());
    }
    let grid = test.grid();
    let mut rng = Rng::seed(common.seed);

    let sel = greedy_select(&model, test.image(image), grid, budget, criterion, candidates, &mut rng)?;
    let mut text = String::from("step\tpixel\tcriterion\tentropy\n");
    for (i, ((p, c), h)) in sel.chosen.iter().zip(&sel.trace).zip(&sel.entropy).enumerate() {
        text.push_str(&format!("{}\t{p}\t{c:.6}\t{h:.6}\n", i + 1));
    }
    write(&common.out, "greedy.tsv", &text)?;

    let train_set = load_mnist(&cfg.train.data_dir, Split::Train, None)?;
    let means = class_means(&train_set)?;
    let sequence = elimination_sequence(&means, 3)?;
    let labels = digit_labels(&test)?;
    let query = labels.iter().position(|&l| l == 3).context("no test image of a 3")?;
    let clf = digit_classifier(&cfg, classifier, &common.out, common.seed)?;
    let mut text = String::from("step\tsize\tp0\tp1\tp2\tp3\tp4\tp5\tp6\tp7\tp8\tp9\n");
    for (step, pixels) in sequence.iter().enumerate() {
        let ctx = PointSet::from_pixels(grid, test.image(query), pixels)?;
        let hist = prediction_histogram(&model, &ctx, grid, &clf, k, &mut rng)?;
        text.push_str(&format!("{step}\t{}", pixels.len()));
        for h in hist {
            text.push_str(&format!("\t{h:.4}"));
        }
        text.push('\n');
    }
    write(&common.out, "elimination.tsv", &text)?;
    Ok(())
}

fn cmd_score(common: &Common, sizes: &[usize], reps: usize, k: usize, classifier: &ClassifierArgs) -> Result<()> {
    let (cfg, model) = load_model(common, "score")?;
    let test = load_split(&cfg, Split::Test)?;
    let clf = digit_classifier(&cfg, classifier, &common.out, common.seed)?;
    let mut rng = Rng::seed(common.seed);
    let curve = inception_curve(&model, &test, &clf, sizes, reps, k, &mut rng)?;
    write(&common.out, "inception.tsv", &curve.tsv())?;
    Ok(())
}

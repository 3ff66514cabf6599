use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use wvae_core::metric::{
    self, FactorSource, IdentityOracle, MeanEncoder, MetricReport, SampledEncoder,
};
use wvae_core::objectives::{self, DEFAULT_DISC_HIDDEN};
use wvae_core::render::{self, GrayImage};
use wvae_core::shapes::{self, NUM_FACTORS};
use wvae_core::{
    persist, FactorSpace, ImageBatch, LatentBatch, MetricConfig, Objective, RmspropConfig,
    TrainConfig, WhiteningTransform,
};

use crate::config::{join, usage, Resolver};
use crate::{
    Cli, Command, DataArgs, EncoderKind, GenDataArgs, ScoreArgs, TrainArgs, TraverseArgs,
    WhitenArgs,
};

struct Run {
    out: PathBuf,
    seed: u64,
    cfg: Resolver,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(self, command: &str) -> anyhow::Result<()> {
        fs::write(self.path("manifest.txt"), self.cfg.manifest(command))
            .context("writing manifest")?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = Resolver::new(cli.common.config.as_deref())?;
    let seed = cfg.get("seed", cli.common.seed, 0u64)?;
    let out: String = cfg.get(
        "out",
        cli.common.out.map(|p| p.display().to_string()),
        "out".to_string(),
    )?;
    let out = PathBuf::from(out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut run = Run { out, seed, cfg };
    let name = match cli.command {
        Command::GenData(a) => {
            gen_data(&mut run, a)?;
            "gen-data"
        }
        Command::Train(a) => {
            train(&mut run, a)?;
            "train"
        }
        Command::Whiten(a) => {
            whiten(&mut run, a)?;
            "whiten"
        }
        Command::Score(a) => {
            score(&mut run, a)?;
            "score"
        }
        Command::Traverse(a) => {
            traverse(&mut run, a)?;
            "traverse"
        }
    };
    run.finish(name)
}

enum Dataset {
    Shapes(FactorSpace),
    Idx(PathBuf),
}

fn dataset(cfg: &mut Resolver, args: DataArgs) -> anyhow::Result<Dataset> {
    let idx: Option<String> = cfg.get_opt(
        "idx_images",
        args.idx_images.map(|p| p.display().to_string()),
    )?;
    if let Some(p) = idx {
        return Ok(Dataset::Idx(PathBuf::from(p)));
    }
    let default = FactorSpace::default();
    let canvas = cfg.get("canvas", args.canvas, default.canvas)?;
    let counts = cfg.get_list("counts", args.counts, default.counts.to_vec())?;
    let counts: [usize; NUM_FACTORS] = counts
        .try_into()
        .map_err(|c: Vec<usize>| usage(format!("--counts needs {NUM_FACTORS} values, got {}", c.len())))?;
    Ok(Dataset::Shapes(
        FactorSpace::new(counts, canvas).map_err(|e| usage(e.to_string()))?,
    ))
}

impl Dataset {
    fn images(&self) -> anyhow::Result<ImageBatch> {
        match self {
            Dataset::Shapes(space) => Ok(shapes::enumerate_dataset(space)?.0),
            Dataset::Idx(path) => {
                let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(shapes::load_idx(&bytes, None)?.0)
            }
        }
    }

    fn image(&self, index: usize) -> anyhow::Result<ImageBatch> {
        match self {
            Dataset::Shapes(space) => {
                if index >= space.len() {
                    bail!("image index {index} out of range for {} images", space.len());
                }
                let f = space.tuple_at(index);
                Ok(ImageBatch::new(
                    1,
                    space.canvas,
                    space.canvas,
                    shapes::render_shape(&f, space)?,
                )?)
            }
            Dataset::Idx(_) => {
                let all = self.images()?;
                if index >= all.len() {
                    bail!("image index {index} out of range for {} images", all.len());
                }
                Ok(ImageBatch::new(
                    1,
                    all.height(),
                    all.width(),
                    all.image(index).to_vec(),
                )?)
            }
        }
    }

    fn range(&self, start: usize, n: usize) -> anyhow::Result<ImageBatch> {
        let mut data = Vec::new();
        let mut dims = (0, 0);
        for i in start..start + n {
            let img = self.image(i)?;
            dims = (img.height(), img.width());
            data.extend_from_slice(img.data());
        }
        Ok(ImageBatch::new(n, dims.0, dims.1, data)?)
    }
}

fn require(path: Option<String>, flag: &str) -> anyhow::Result<PathBuf> {
    path.map(PathBuf::from)
        .ok_or_else(|| usage(format!("--{flag} is required")))
}

fn gen_data(run: &mut Run, args: GenDataArgs) -> anyhow::Result<()> {
    let Dataset::Shapes(space) = dataset(&mut run.cfg, args.data)? else {
        return Err(usage("gen-data renders the shapes corpus; --idx-images is not accepted"));
    };
    let (images, labels) = shapes::enumerate_dataset(&space)?;
    fs::write(run.path("images.idx"), shapes::encode_idx_images(&images))?;
    fs::write(run.path("labels.csv"), shapes::factors_to_csv(&labels))?;
    println!("wrote {} images to {}", images.len(), run.out.display());
    Ok(())
}

fn train(run: &mut Run, args: TrainArgs) -> anyhow::Result<()> {
    let data = dataset(&mut run.cfg, args.data)?;
    let defaults = TrainConfig::default();
    let cfg = &mut run.cfg;
    let objective: String = cfg.get("objective", args.objective, defaults.objective.to_string())?;
    let objective: Objective = objective.parse().map_err(|e| usage(format!("{e}")))?;
    let config = TrainConfig {
        objective,
        beta: cfg.get("beta", args.beta, defaults.beta)?,
        gamma: cfg.get("gamma", args.gamma, defaults.gamma)?,
        latent_dim: cfg.get("latent_dim", args.latent_dim, defaults.latent_dim)?,
        hidden: cfg.get_list("hidden", args.hidden, defaults.hidden.clone())?,
        batch_size: cfg.get("batch_size", args.batch_size, defaults.batch_size)?,
        epochs: cfg.get("epochs", args.epochs, defaults.epochs)?,
        optimizer: RmspropConfig {
            learning_rate: cfg.get(
                "learning_rate",
                args.learning_rate,
                defaults.optimizer.learning_rate,
            )?,
            ..defaults.optimizer
        },
        disc_hidden: cfg.get_list("disc_hidden", args.disc_hidden, DEFAULT_DISC_HIDDEN.to_vec())?,
        disc_optimizer: RmspropConfig {
            learning_rate: cfg.get(
                "disc_learning_rate",
                args.disc_learning_rate,
                defaults.disc_optimizer.learning_rate,
            )?,
            ..defaults.disc_optimizer
        },
        seed: run.seed,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let images = data.images()?;
    eprintln!(
        "training {} on {} images ({}×{}), {} epochs",
        config.objective,
        images.len(),
        images.height(),
        images.width(),
        config.epochs
    );
    let outcome = objectives::train_with_progress(&images, &config, |p| {
        eprintln!(
            "epoch {:>3}  recon {:.4}  kl {:.4}  tc {:.4}",
            p.epoch, p.recon, p.kl, p.tc
        );
    })?;
    persist::save_checkpoint(&run.path("checkpoint.bin"), &outcome.model, config.objective)?;
    render::write_curves(&outcome.curves, &run.path("curves.csv"))?;
    Ok(())
}

fn load_model(cfg: &mut Resolver, flag: Option<PathBuf>) -> anyhow::Result<wvae_core::Vae> {
    let path = require(
        cfg.get_opt("checkpoint", flag.map(|p| p.display().to_string()))?,
        "checkpoint",
    )?;
    let (model, _) = persist::load_checkpoint(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn load_transform(
    cfg: &mut Resolver,
    flag: Option<PathBuf>,
) -> anyhow::Result<Option<WhiteningTransform>> {
    cfg.get_opt("transform", flag.map(|p| p.display().to_string()))?
        .map(|p| {
            persist::load_transform(Path::new(&p)).with_context(|| format!("loading transform {p}"))
        })
        .transpose()
}

fn whiten(run: &mut Run, args: WhitenArgs) -> anyhow::Result<()> {
    let model = load_model(&mut run.cfg, args.checkpoint)?;
    let data = dataset(&mut run.cfg, args.data)?;
    let z = model.encode_images(&data.images()?)?;
    let t = WhiteningTransform::fit(&z)?;
    persist::save_transform(&run.path("transform.bin"), &t)?;
    render::write_spectrum(t.spectrum(), &run.path("spectrum.csv"))?;
    println!("spectrum: {}", join(t.spectrum()));
    Ok(())
}

fn write_votes(run: &Run, tag: &str, report: &MetricReport) -> anyhow::Result<()> {
    fs::write(
        run.path(&format!("votes_{tag}_train.csv")),
        metric::votes_to_csv(&report.train_votes),
    )?;
    fs::write(
        run.path(&format!("votes_{tag}_test.csv")),
        metric::votes_to_csv(&report.test_votes),
    )?;
    Ok(())
}

fn score(run: &mut Run, args: ScoreArgs) -> anyhow::Result<()> {
    let defaults = MetricConfig::default();
    let cfg = &mut run.cfg;
    let encoder = cfg.get("encoder", args.encoder, EncoderKind::Mean)?;
    let config = MetricConfig {
        samples_per_vote: cfg.get("samples_per_vote", args.samples_per_vote, defaults.samples_per_vote)?,
        train_votes: cfg.get("train_votes", args.train_votes, defaults.train_votes)?,
        test_votes: cfg.get("test_votes", args.test_votes, defaults.test_votes)?,
        collapse_threshold: cfg.get(
            "collapse_threshold",
            args.collapse_threshold,
            defaults.collapse_threshold,
        )?,
        seed: run.seed,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let Dataset::Shapes(space) = dataset(cfg, args.data)? else {
        return Err(usage("scoring needs the labelled shapes corpus, not --idx-images"));
    };

    let mut lines = Vec::new();
    if encoder == EncoderKind::Oracle {
        let report = metric::evaluate(&space, &IdentityOracle { dim: NUM_FACTORS }, &config)?;
        write_votes(run, "oracle", &report)?;
        lines.push(format!("oracle={}", report.score));
    } else {
        let model = load_model(cfg, args.checkpoint)?;
        let transform = load_transform(cfg, args.transform)?;
        let mut scored: Vec<(&str, MetricReport)> = Vec::new();
        match encoder {
            EncoderKind::Mean => {
                let (images, _) = space.corpus()?;
                let z = model.encode_images(&images)?;
                drop(images);
                let enc = MeanEncoder(&model);
                scored.push(("vae", metric::evaluate_with_corpus(&space, &enc, &z, &config)?));
                if let Some(t) = &transform {
                    let zw = t.whiten_batch(&z)?;
                    let enc = metric::WhitenedEncoder {
                        model: &model,
                        transform: t,
                    };
                    scored.push(("wvae", metric::evaluate_with_corpus(&space, &enc, &zw, &config)?));
                }
            }
            EncoderKind::Sampled => {
                let enc = SampledEncoder::new(&model, None, run.seed);
                scored.push(("vae", metric::evaluate(&space, &enc, &config)?));
                if let Some(t) = &transform {
                    let enc = SampledEncoder::new(&model, Some(t), run.seed);
                    scored.push(("wvae", metric::evaluate(&space, &enc, &config)?));
                }
            }
            EncoderKind::Oracle => unreachable!(),
        }
        for (tag, report) in &scored {
            write_votes(run, tag, report)?;
            lines.push(format!("{tag}={}", report.score));
        }
    }
    let text = lines.join("\n") + "\n";
    fs::write(run.path("score.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn traverse(run: &mut Run, args: TraverseArgs) -> anyhow::Result<()> {
    let model = load_model(&mut run.cfg, args.checkpoint)?;
    let transform = load_transform(&mut run.cfg, args.transform)?;
    let data = dataset(&mut run.cfg, args.data)?;
    let cfg = &mut run.cfg;
    let index = cfg.get("image_index", args.image_index, 0usize)?;
    let all_dims: Vec<usize> = (0..model.latent_dim()).collect();
    let dims = cfg.get_list("dims", args.dims, all_dims)?;
    let range = cfg.get_list("range", args.range, render::DEFAULT_RANGE.to_vec())?;
    let range: [f64; 2] = range
        .try_into()
        .map_err(|_| usage("--range takes exactly two values lo,hi"))?;
    let steps = cfg.get("steps", args.steps, 10usize)?;
    let panel = cfg.get("panel", args.panel, 0usize)?;
    if steps < 2 {
        return Err(usage("--steps must be at least 2"));
    }
    if let Some(&bad) = dims.iter().find(|&&d| d >= model.latent_dim()) {
        return Err(usage(format!(
            "dimension {bad} out of range for a {}-d model",
            model.latent_dim()
        )));
    }

    let image = data.image(index)?;
    let z: LatentBatch = model.encode_images(&image)?;
    let base = match &transform {
        Some(t) => t.whiten(z.row(0))?,
        None => z.row(0).to_vec(),
    };
    let anchor = GrayImage::new(image.width(), image.height(), image.image(0).to_vec())?;
    let grid =
        render::traversal_grid(&model, transform.as_ref(), &base, &anchor, &dims, range, steps)?;
    render::write_pgm(&grid, &run.path("traversal.pgm"))?;
    if panel > 0 {
        let batch = data.range(index, panel)?;
        let p = render::reconstruction_panel(&model, &batch)?;
        render::write_pgm(&p, &run.path("reconstructions.pgm"))?;
    }
    Ok(())
}

use std::path::{Path, PathBuf};

use hdre_core::fusion::exposure_fuse;
use hdre_core::imageio::{read_png, read_radiance_hdr, write_png, write_radiance_hdr, HdrImage, LdrImage};
use hdre_core::metrics::{evaluate, Method};
use hdre_core::neuralnet::checkpoint::load_checkpoint;
use hdre_core::neuralnet::{enhance_image, Network};
use hdre_core::scenes::generate_corpus;
use hdre_core::synthpipe::{generate_dataset, write_pair};
use hdre_core::training::{self, TrainConfig};
use hdre_core::{Error, Result};

use crate::config::{existing_dir, existing_file, required, CliConfig};
use crate::{EnhanceArgs, EvalArgs, FuseArgs, ScenesArgs, SynthArgs, TrainArgs};

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    out.sort();
    Ok(out)
}

/// Every readable `.hdr` in `dir`, in file-name order. Unreadable files are
/// skipped with a warning.
pub fn load_hdr_dir(dir: &Path) -> Result<Vec<(String, HdrImage)>> {
    let mut corpus = Vec::new();
    for path in files_with_extension(dir, "hdr")? {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        match std::fs::read(&path).map_err(Error::from).and_then(|b| read_radiance_hdr(&b)) {
            Ok(img) => corpus.push((name, img)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if corpus.is_empty() {
        return Err(Error::Input(format!("no readable .hdr files in {}", dir.display())));
    }
    log::info!("loaded {} HDR images from {}", corpus.len(), dir.display());
    Ok(corpus)
}

fn hdr_corpus(flag: Option<PathBuf>, config: &CliConfig) -> Result<Vec<(String, HdrImage)>> {
    let dir = existing_dir(required(flag, config.hdr_dir.as_ref(), "hdr-dir")?, "hdr-dir")?;
    load_hdr_dir(&dir)
}

fn load_network(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let (net, manifest) = load_checkpoint(&bytes)?;
    log::info!(
        "loaded {} ({} parameters, global branch: {})",
        path.display(),
        net.parameter_count(),
        manifest.has_global_branch()
    );
    Ok(net)
}

fn read_png_file(path: &Path) -> Result<LdrImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    read_png(&bytes)
}

pub fn synth(args: SynthArgs, config: &CliConfig) -> Result<String> {
    let corpus = hdr_corpus(args.hdr_dir, config)?;
    let out = required(args.out, config.data_dir.as_ref(), "out")?;
    let seed = config.seed(args.seed);
    let pairs = generate_dataset(&corpus, seed, args.count, args.size)?;
    std::fs::create_dir_all(&out)?;
    for (i, pair) in pairs.iter().enumerate() {
        write_pair(&out, &format!("pair_{i:05}"), pair)?;
    }
    Ok(format!(
        "wrote {} pairs of {}x{} from {} HDR images to {} (seed {seed})",
        pairs.len(),
        args.size,
        args.size,
        corpus.len(),
        out.display()
    ))
}

pub fn train(args: TrainArgs, config: &CliConfig) -> Result<String> {
    let mut cfg: TrainConfig = config.train.clone().unwrap_or_default();
    if let Some(seed) = args.seed.or(config.seed) {
        cfg.seed = seed;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.iters {
        cfg.iterations_per_epoch = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.width_scale {
        cfg.width_scale = v;
    }
    if let Some(v) = args.ckpt_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.patch_size {
        cfg.patch_size = v;
    }
    if args.no_global_encoder {
        cfg.use_global_encoder = false;
    }
    if args.precompute {
        cfg.precompute = true;
    }
    // Reject bad settings before loading any data.
    cfg.validate()?;
    let out = required(args.out, config.data_dir.as_ref(), "out")?;
    let corpus = hdr_corpus(args.hdr_dir, config)?;
    let epochs = cfg.epochs;
    let outcome = training::train(&corpus, &cfg, Some(&out), |r| {
        log::info!("epoch {}/{epochs} iter {} loss {:.6}", r.epoch, r.iter, r.loss);
    })?;
    let last = outcome.losses.last().map_or(f64::NAN, |r| r.loss);
    Ok(format!(
        "trained {} steps, final loss {last:.6}, {} checkpoints in {}",
        outcome.losses.len(),
        outcome.checkpoints.len(),
        out.display()
    ))
}

pub fn enhance(args: EnhanceArgs, config: &CliConfig) -> Result<String> {
    let ckpt = existing_file(required(args.checkpoint, config.checkpoint.as_ref(), "checkpoint")?, "checkpoint")?;
    let net = load_network(&ckpt)?;
    if args.input.is_dir() {
        let inputs = files_with_extension(&args.input, "png")?;
        // Everything is enhanced before anything is written.
        let mut results = Vec::with_capacity(inputs.len());
        for path in &inputs {
            let img = read_png_file(path)?;
            let out = enhance_image(&net, &img)?;
            results.push((path.file_name().expect("listed file").to_owned(), write_png(&out)?));
            log::info!("enhanced {}", path.display());
        }
        std::fs::create_dir_all(&args.out)?;
        for (name, bytes) in &results {
            std::fs::write(args.out.join(name), bytes)?;
        }
        Ok(format!("enhanced {} images into {}", results.len(), args.out.display()))
    } else {
        let input = existing_file(args.input, "input")?;
        let img = read_png_file(&input)?;
        let out = enhance_image(&net, &img)?;
        std::fs::write(&args.out, write_png(&out)?)?;
        Ok(format!("enhanced {}x{} image into {}", out.width, out.height, args.out.display()))
    }
}

pub fn eval(args: EvalArgs, config: &CliConfig) -> Result<String> {
    let checkpoint = args.checkpoint.or_else(|| config.checkpoint.clone());
    let methods: Vec<Method> = match (args.methods, &config.methods) {
        (Some(names), _) => names.iter().map(|s| s.parse()).collect::<Result<_>>()?,
        (None, Some(m)) => m.clone(),
        (None, None) if checkpoint.is_some() => Method::ALL.to_vec(),
        (None, None) => vec![Method::Input, Method::He],
    };
    if methods.is_empty() {
        return Err(Error::Config("no evaluation methods given".into()));
    }
    let net = if methods.contains(&Method::Proposed) {
        let path = checkpoint.ok_or_else(|| Error::Config("method \"proposed\" needs --checkpoint".into()))?;
        Some(load_network(&existing_file(path, "checkpoint")?)?)
    } else {
        None
    };
    let out = args
        .out
        .or_else(|| config.report.clone())
        .or_else(|| config.data_dir.clone())
        .ok_or_else(|| Error::Input("missing --out (flag or config file)".into()))?;
    let corpus = hdr_corpus(args.hdr_dir, config)?;
    let seed = config.seed(args.seed);
    let report = evaluate(net.as_ref(), &corpus, &methods, seed, args.size)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    std::fs::write(out.join("summary.json"), report.summary_json()? + "\n")?;
    let means: Vec<String> = report
        .summary()
        .iter()
        .map(|(m, s)| format!("{} tmqi {:.4} entropy {:.4}", m.as_str(), s.tmqi, s.entropy))
        .collect();
    Ok(format!("{} images; {}", corpus.len(), means.join("; ")))
}

pub fn fuse(args: FuseArgs) -> Result<String> {
    let imgs = args
        .inputs
        .iter()
        .map(|p| read_png_file(p).map(|i| i.to_float()))
        .collect::<Result<Vec<_>>>()?;
    let fused = LdrImage::from_float(&exposure_fuse(&imgs)?);
    std::fs::write(&args.out, write_png(&fused)?)?;
    Ok(format!("fused {} images into {}", imgs.len(), args.out.display()))
}

pub fn scenes(args: ScenesArgs, config: &CliConfig) -> Result<String> {
    let out = required(args.out, config.hdr_dir.as_ref(), "out")?;
    let seed = config.seed(args.seed);
    let corpus = generate_corpus(seed, args.count, args.width, args.height)?;
    std::fs::create_dir_all(&out)?;
    for (name, img) in &corpus {
        std::fs::write(out.join(format!("{name}.hdr")), write_radiance_hdr(img))?;
    }
    Ok(format!(
        "wrote {} scenes of {}x{} to {} (seed {seed})",
        corpus.len(),
        args.width,
        args.height,
        out.display()
    ))
}

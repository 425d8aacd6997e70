//! Command implementations. Every run resolves its configuration up front,
//! hashes its inputs, and embeds the resulting reproducibility stanza in the
//! report it writes; reports are checked against the published schemas
//! before they reach disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latent_steer::alp::{
    aggregate_impact, alp_analyze, encode_sample, impact_score, ErrorReference, ImpactRecord,
    OracleSegmenter,
};
use latent_steer::checkpoint::{blob_path, load_checkpoint, save_checkpoint};
use latent_steer::figures::{
    render_bar_chart, render_box_plot, render_frame, render_heatmap, render_overlay, upscale,
    write_png,
};
use latent_steer::model::{Profile, SteerModel};
use latent_steer::report::{
    check_against_schema, schemas, write_json_report, AlpDimRecord, AlpReportFile,
    CrossvalReportFile, EvalReportFile, GenDataReportFile, ImpactReportFile, InputHash,
    ReproStanza, TrainReportFile,
};
use latent_steer::scenegen::{class, generate_sequence, read_dataset, write_dataset, SceneConfig};
use latent_steer::trainer::{cross_validate, offline_eval, train, TrainConfig};
use latent_steer::util::sha256_file;
use latent_steer::{Error, Result};

use crate::{AlpArgs, Command, CrossvalArgs, EvalArgs, GenDataArgs, ImpactArgs, TrainArgs, TrainOpts};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Nearest-neighbour factor applied to every emitted frame-sized figure.
const FIG_SCALE: u32 = 4;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Crossval(args) => crossval(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Alp(args) => alp_cmd(args),
        Command::Impact(args) => impact_cmd(args),
    }
}

fn input_hash(path: &Path) -> Result<InputHash> {
    Ok(InputHash {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let profile: Profile = args.profile.parse()?;
    let (h, w) = profile.model_config().vae.in_hw;
    let cfg = SceneConfig {
        h,
        w,
        frames: args.frames,
        seed: args.seed,
        ..SceneConfig::default()
    };
    let samples = generate_sequence(&cfg)?;
    write_dataset(&samples, &args.out)?;

    let sidecar = GenDataReportFile {
        repro: ReproStanza {
            command: format!(
                "gen-data --profile {} --frames {} --seed {} --out {}",
                profile.name(),
                cfg.frames,
                cfg.seed,
                args.out.display()
            ),
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
            inputs: vec![],
            tool_version: TOOL_VERSION.into(),
        },
        output_path: args.out.display().to_string(),
        output_sha256: sha256_file(&args.out)?,
    };
    check_against_schema(&sidecar, schemas::GEN_DATA)?;
    write_json_report(&sidecar_path(&args.out), &sidecar)?;
    println!(
        "wrote {} frames ({h}x{w}) to {}",
        samples.len(),
        args.out.display()
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.repro.json", out.display()))
}

fn train_config(opts: &TrainOpts) -> TrainConfig {
    TrainConfig {
        beta: opts.beta,
        gamma: opts.gamma,
        alpha: opts.alpha,
        lambda: opts.lambda,
        lr: opts.lr,
        batch: opts.batch,
        seq_len: opts.seq_len,
        epochs: opts.epochs,
        seed: opts.seed,
        ..TrainConfig::default()
    }
}

fn train_flags(opts: &TrainOpts) -> String {
    format!(
        "--profile {} --seed {} --epochs {} --lr {} --beta {} --gamma {} --alpha {} \
         --lambda {} --batch {} --seq-len {}",
        opts.profile,
        opts.seed,
        opts.epochs,
        opts.lr,
        opts.beta,
        opts.gamma,
        opts.alpha,
        opts.lambda,
        opts.batch,
        opts.seq_len,
    )
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let profile: Profile = args.opts.profile.parse()?;
    let cfg = train_config(&args.opts);
    let dataset = read_dataset(&args.data)?;
    let data_hash = input_hash(&args.data)?;

    let model = SteerModel::<f32>::new(profile.model_config(), args.opts.seed)?;
    let outcome = train(model, &dataset, &cfg)?;
    save_checkpoint(&args.out, &outcome.model, &cfg)?;

    let report = TrainReportFile {
        repro: ReproStanza {
            command: format!(
                "train --data {} --out {} {}",
                args.data.display(),
                args.out.display(),
                train_flags(&args.opts)
            ),
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
            inputs: vec![data_hash],
            tool_version: TOOL_VERSION.into(),
        },
        curves: outcome.curves,
        checkpoint_path: args.out.display().to_string(),
        checkpoint_sha256: sha256_file(&args.out)?,
        blob_sha256: sha256_file(&blob_path(&args.out))?,
    };
    check_against_schema(&report, schemas::TRAIN)?;
    let report_path = PathBuf::from(format!("{}.report.json", args.out.display()));
    write_json_report(&report_path, &report)?;

    let last = report.curves.combined.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs; final combined loss {last:.6}; checkpoint {}",
        cfg.epochs,
        args.out.display()
    );
    Ok(())
}

fn crossval(args: CrossvalArgs) -> Result<()> {
    let profile: Profile = args.opts.profile.parse()?;
    let cfg = train_config(&args.opts);
    let dataset = read_dataset(&args.data)?;
    let data_hash = input_hash(&args.data)?;

    let init = SteerModel::<f32>::new(profile.model_config(), args.opts.seed)?;
    let folds = cross_validate(&init, &dataset, &cfg, args.folds)?;

    let report = CrossvalReportFile {
        repro: ReproStanza {
            command: format!(
                "crossval --data {} --out {} --folds {} {}",
                args.data.display(),
                args.out.display(),
                args.folds,
                train_flags(&args.opts)
            ),
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
            inputs: vec![data_hash],
            tool_version: TOOL_VERSION.into(),
        },
        folds,
    };
    check_against_schema(&report, schemas::CROSSVAL)?;
    write_json_report(&args.out, &report)?;

    for f in &report.folds {
        println!(
            "fold {:2}: train {:.6} ± {:.6}  test {:.6} ± {:.6}",
            f.fold, f.train_mean, f.train_std, f.test_mean, f.test_std
        );
    }
    println!("report {}", args.out.display());
    Ok(())
}

/// Inputs common to the checkpoint-consuming commands: manifest, blob, data.
fn checkpoint_inputs(ckpt: &Path, data: &Path) -> Result<Vec<InputHash>> {
    Ok(vec![
        input_hash(ckpt)?,
        input_hash(&blob_path(ckpt))?,
        input_hash(data)?,
    ])
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let (model, manifest) = load_checkpoint(&args.ckpt)?;
    let dataset = read_dataset(&args.data)?;
    let inputs = checkpoint_inputs(&args.ckpt, &args.data)?;

    let eval = offline_eval(&model, &dataset)?;
    let report = EvalReportFile {
        repro: ReproStanza {
            command: format!(
                "eval --ckpt {} --data {} --out {}",
                args.ckpt.display(),
                args.data.display(),
                args.out.display()
            ),
            seed: manifest.train.seed,
            config: serde_json::to_value(manifest.train)?,
            inputs,
            tool_version: TOOL_VERSION.into(),
        },
        eval,
    };
    check_against_schema(&report, schemas::EVAL)?;
    write_json_report(&args.out, &report)?;
    println!(
        "mean squared steering error {:.6} ± {:.6} over {} steps; report {}",
        report.eval.mean,
        report.eval.std,
        report.eval.n_steps,
        args.out.display()
    );
    Ok(())
}

/// `all` or a comma list of 1-based indices, returned sorted and deduplicated.
fn parse_dims(spec: &str, m: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((1..=m).collect());
    }
    let mut dims = Vec::new();
    for part in spec.split(',') {
        let d: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad --dims entry '{part}'")))?;
        if d < 1 || d > m {
            return Err(Error::index(format!(
                "latent dim {d} out of range 1..={m}"
            )));
        }
        dims.push(d);
    }
    dims.sort_unstable();
    dims.dedup();
    Ok(dims)
}

fn widen_impact(r: ImpactRecord<f32>) -> ImpactRecord<f64> {
    ImpactRecord {
        dim: r.dim,
        y0: r.y0 as f64,
        y_plus: r.y_plus as f64,
        y_minus: r.y_minus as f64,
        d_minus: r.d_minus as f64,
        d_plus: r.d_plus as f64,
        d_per: r.d_per as f64,
        impact: r.impact as f64,
    }
}

fn alp_cmd(args: AlpArgs) -> Result<()> {
    let (model, manifest) = load_checkpoint(&args.ckpt)?;
    let dataset = read_dataset(&args.data)?;
    let inputs = checkpoint_inputs(&args.ckpt, &args.data)?;
    let sample = dataset.get(args.frame).ok_or_else(|| {
        Error::index(format!(
            "frame {} out of range 0..{}",
            args.frame,
            dataset.len()
        ))
    })?;
    let dims = parse_dims(&args.dims, model.cfg.vae.latent_dim)?;

    let segmenter = OracleSegmenter {
        seg_mask: sample.seg_mask.clone(),
    };
    let results = alp_analyze(&sample.image.view(), &model, &segmenter, args.threshold_quantile)?;
    let code = encode_sample(&model, sample)?;

    fs::create_dir_all(&args.out)?;
    let frame_png = upscale(&render_frame(&sample.image.view()), FIG_SCALE);
    let mut records = Vec::with_capacity(dims.len());
    for r in results.iter().filter(|r| dims.contains(&r.dim)) {
        let stem = args.out.join(format!("dim{:02}", r.dim));
        write_png(&stem.with_file_name(format!("dim{:02}_original.png", r.dim)), &frame_png)?;
        write_png(
            &stem.with_file_name(format!("dim{:02}_delta.png", r.dim)),
            &upscale(&render_heatmap(&r.delta.view()), FIG_SCALE),
        )?;
        write_png(
            &stem.with_file_name(format!("dim{:02}_overlay.png", r.dim)),
            &upscale(&render_overlay(&sample.image.view(), &r.mask.view()), FIG_SCALE),
        )?;
        let named_counts: BTreeMap<String, usize> = r
            .class_counts
            .iter()
            .map(|(&id, &n)| (class::name(id).to_string(), n))
            .collect();
        records.push(AlpDimRecord {
            dim: r.dim,
            region_count: r.region_count,
            class_counts: named_counts,
            impact: widen_impact(impact_score(&code, r.dim, &model)?),
        });
    }

    let report = AlpReportFile {
        repro: ReproStanza {
            command: format!(
                "alp --ckpt {} --data {} --frame {} --dims {} --threshold-quantile {} --out {}",
                args.ckpt.display(),
                args.data.display(),
                args.frame,
                args.dims,
                args.threshold_quantile,
                args.out.display()
            ),
            seed: manifest.train.seed,
            config: serde_json::json!({
                "frame": args.frame,
                "dims": dims,
                "threshold_quantile": args.threshold_quantile,
            }),
            inputs,
            tool_version: TOOL_VERSION.into(),
        },
        checkpoint_sha256: sha256_file(&args.ckpt)?,
        dataset_sha256: sha256_file(&args.data)?,
        frame: args.frame,
        threshold_quantile: args.threshold_quantile,
        dims: records,
    };
    check_against_schema(&report, schemas::ALP)?;
    write_json_report(&args.out.join("alp.json"), &report)?;
    println!(
        "wrote {} dimension triplets and alp.json to {}",
        report.dims.len(),
        args.out.display()
    );
    Ok(())
}

fn impact_cmd(args: ImpactArgs) -> Result<()> {
    let (model, manifest) = load_checkpoint(&args.ckpt)?;
    let dataset = read_dataset(&args.data)?;
    let inputs = checkpoint_inputs(&args.ckpt, &args.data)?;

    let reference = ErrorReference::GroundTruth;
    let aggregate = aggregate_impact(&dataset, &model, args.sample, args.decile, reference)?;

    fs::create_dir_all(&args.out)?;
    let mean_minus: Vec<f64> = aggregate.per_dim_error.iter().map(|d| d.mean_minus).collect();
    let std_minus: Vec<f64> = aggregate.per_dim_error.iter().map(|d| d.std_minus).collect();
    let mean_plus: Vec<f64> = aggregate.per_dim_error.iter().map(|d| d.mean_plus).collect();
    let std_plus: Vec<f64> = aggregate.per_dim_error.iter().map(|d| d.std_plus).collect();
    write_png(&args.out.join("error_minus.png"), &render_bar_chart(&mean_minus, &std_minus)?)?;
    write_png(&args.out.join("error_plus.png"), &render_bar_chart(&mean_plus, &std_plus)?)?;
    write_png(
        &args.out.join("impact_top_decile.png"),
        &render_box_plot(&aggregate.top_decile)?,
    )?;
    write_png(
        &args.out.join("impact_bottom_decile.png"),
        &render_box_plot(&aggregate.bottom_decile)?,
    )?;

    let report = ImpactReportFile {
        repro: ReproStanza {
            command: format!(
                "impact --ckpt {} --data {} --sample {} --decile {} --out {}",
                args.ckpt.display(),
                args.data.display(),
                args.sample,
                args.decile,
                args.out.display()
            ),
            seed: manifest.train.seed,
            config: serde_json::json!({
                "sample": args.sample,
                "decile": args.decile,
                "error_reference": reference,
            }),
            inputs,
            tool_version: TOOL_VERSION.into(),
        },
        checkpoint_sha256: sha256_file(&args.ckpt)?,
        dataset_sha256: sha256_file(&args.data)?,
        error_reference: reference,
        aggregate,
    };
    check_against_schema(&report, schemas::IMPACT)?;
    write_json_report(&args.out.join("impact.json"), &report)?;
    println!(
        "scored {} frames over {} dims; report and figures in {}",
        report.aggregate.sample_size,
        report.aggregate.per_dim_error.len(),
        args.out.display()
    );
    Ok(())
}

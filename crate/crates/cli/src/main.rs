use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crowdprompt::bench::{
    eval_counts, gen_dataset, run_ablation, run_convergence_study, run_noise_sweep, Dataset, EvalResult, Scene,
};
use crowdprompt::config::RunConfig;
use crowdprompt::geometry::binarize;
use crowdprompt::io::{
    read_annotations, read_checkpoint, read_image_pfm, read_metrics, render_overlay, write_annotations,
    write_checkpoint, write_density_pfm, write_file, write_image_pfm, write_mask_pgm, write_metrics, FileDigest,
    Manifest, Table,
};
use crowdprompt::model::ModelState;
use crowdprompt::prompt::context_mask;
use crowdprompt::targets::{box_seg_map, density_from_points};
use crowdprompt::trainer::{emit_pseudo_masks, predict, pretrain_segmenter, train, Variant};
use crowdprompt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "crowdprompt",
    version,
    about = "Mutual prompt learning for crowd counting on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory written by `gen-synth`; without it the synthetic dataset is
    /// regenerated from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: annotations and images.
    GenSynth(Common),
    /// Write density maps, box maps and context masks for every scene.
    MakeTargets(Common),
    /// Pretrain the segmenter on head boxes and emit pseudo masks.
    PretrainSeg(Common),
    /// Train one variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        /// Pretrained segmenter checkpoint; without it the segmenter is
        /// pretrained first when the variant needs one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every variant of the ablation ladder and tabulate test errors.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of variants (default: all seven).
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
    },
    /// Test error under increasing box noise.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (default: rsg,ddag).
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
        /// Comma-separated noise levels (overrides `alphas`).
        #[arg(long, value_delimiter = ',')]
        alpha_list: Vec<f64>,
    },
    /// Per-epoch test error with and without the context loss.
    Converge(Common),
    /// Evaluate a trained checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training metrics log to tabulate alongside the evaluation.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Overlay predicted density and mask on the test images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test scenes to render.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
}

/// Resolved config plus the bookkeeping every command shares.
struct Run {
    cfg: RunConfig,
    command: &'static str,
    out: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, common: &Common, variant: Option<&str>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut cfg = match &common.config {
            Some(p) => {
                inputs.push(FileDigest::of(p, "config")?);
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = &common.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
        }
        if let Some(v) = variant {
            cfg.variant = v.parse()?;
        }
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        Ok(Self {
            cfg,
            command,
            out,
            inputs,
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path, label: &str) -> Result<()> {
        self.inputs.push(FileDigest::of(path, label)?);
        Ok(())
    }

    fn path(&mut self, rel: impl Into<PathBuf>) -> PathBuf {
        let rel = rel.into();
        let full = self.out.join(&rel);
        self.outputs.push(rel);
        full
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        let p = self.path(rel);
        write_file(&p, text.as_bytes())
    }

    fn dataset(&mut self, common: &Common) -> Result<Dataset> {
        match &common.data {
            None => gen_dataset(&self.cfg.scene, self.cfg.n_train, self.cfg.n_test),
            Some(dir) => {
                let load = |run: &mut Self, split: &str| -> Result<Vec<Scene>> {
                    let ann_path = dir.join(format!("{split}.json"));
                    run.input(&ann_path, &format!("data/{split}.json"))?;
                    read_annotations(&ann_path)?
                        .into_iter()
                        .map(|ann| {
                            let rel = format!("images/{}.pfm", ann.id);
                            let img_path = dir.join(&rel);
                            run.input(&img_path, &format!("data/{rel}"))?;
                            let image = read_image_pfm(&img_path)?;
                            if image.width != ann.width || image.height != ann.height {
                                return Err(Error::DimensionMismatch {
                                    left_w: image.width,
                                    left_h: image.height,
                                    right_w: ann.width,
                                    right_h: ann.height,
                                });
                            }
                            let centers = ann.points.clone();
                            Ok(Scene { image, ann, centers })
                        })
                        .collect()
                };
                let train = load(self, "train")?;
                let test = load(self, "test")?;
                Ok(Dataset {
                    spec: self.cfg.scene.clone(),
                    train,
                    test,
                })
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        let resolved = self.cfg.canonical_json();
        let p = self.path("config.json");
        write_file(&p, resolved.as_bytes())?;
        let manifest = Manifest::build(
            self.command,
            &self.cfg.hash(),
            self.cfg.seed(),
            self.inputs,
            &self.out,
            &self.outputs,
        )?;
        manifest.write(&self.out.join("manifest.json"))?;
        println!(
            "wrote {} files and manifest.json to {}",
            self.outputs.len(),
            self.out.display()
        );
        Ok(())
    }
}

fn parse_variants(names: &[String], default: &[Variant]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn gen_synth(common: Common) -> Result<()> {
    let mut run = Run::new("gen-synth", &common, None)?;
    let data = run.dataset(&common)?;
    for (split, scenes) in [("train", &data.train), ("test", &data.test)] {
        let anns: Vec<_> = scenes.iter().map(|s| s.ann.clone()).collect();
        let p = run.path(format!("{split}.json"));
        write_annotations(&p, &anns)?;
        for s in scenes {
            let p = run.path(format!("images/{}.pfm", s.ann.id));
            write_image_pfm(&s.image, &p)?;
        }
    }
    run.finish()
}

fn make_targets(common: Common) -> Result<()> {
    let mut run = Run::new("make-targets", &common, None)?;
    let data = run.dataset(&common)?;
    let (kernel, k) = (run.cfg.train.kernel, run.cfg.train.prompt.k);
    for s in data.train.iter().chain(&data.test) {
        let id = s.ann.id;
        let p = run.path(format!("density/{id}.pfm"));
        write_density_pfm(&density_from_points(&s.ann, &kernel)?, &p)?;
        let p = run.path(format!("context/{id}.pgm"));
        write_mask_pgm(&context_mask(&s.ann, k)?, &p)?;
        if s.ann.boxes.is_some() {
            let p = run.path(format!("boxes/{id}.pgm"));
            write_mask_pgm(&box_seg_map(&s.ann)?, &p)?;
        }
    }
    run.finish()
}

fn pretrain_seg(common: Common) -> Result<()> {
    let mut run = Run::new("pretrain-seg", &common, None)?;
    let data = run.dataset(&common)?;
    let pre = pretrain_segmenter(&data.train, &run.cfg.train)?;
    let p = run.path("segmenter.ckpt");
    write_checkpoint(&pre.state, &p)?;
    let mut table = Table::new(&["epoch", "l_seg"]);
    for (e, l) in pre.losses.iter().enumerate() {
        table.push(vec![e.to_string(), fmt_f(*l)]);
    }
    let p = run.path("pretrain_losses.csv");
    table.write(&p)?;
    let masks = emit_pseudo_masks(Some(&pre.state), &data.train, run.cfg.train.tau_mask)?;
    for (s, m) in data.train.iter().zip(&masks) {
        let p = run.path(format!("pseudo/{}.pgm", s.ann.id));
        write_mask_pgm(m, &p)?;
    }
    run.finish()
}

fn train_cmd(common: Common, variant: Option<String>, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut run = Run::new("train", &common, variant.as_deref())?;
    let data = run.dataset(&common)?;
    let cfg = run.cfg.train.clone();
    let spec = run.cfg.variant.spec();
    let pseudo = if spec.use_segmenter {
        let segmenter = match &checkpoint {
            Some(p) => {
                run.input(p, "checkpoint")?;
                read_checkpoint(p)?
            }
            None => pretrain_segmenter(&data.train, &cfg)?.state,
        };
        Some(emit_pseudo_masks(Some(&segmenter), &data.train, cfg.tau_mask)?)
    } else {
        None
    };
    let out = train(spec, &data.train, &data.test, pseudo.as_deref(), &cfg)?;
    let p = run.path("model.ckpt");
    write_checkpoint(&out.state, &p)?;
    let p = run.path("metrics.jsonl");
    write_metrics(&out.log, &p)?;
    for (id, m) in out.targets.iter() {
        let p = run.path(format!("targets/{id}.pgm"));
        write_mask_pgm(m, &p)?;
    }
    run.finish()
}

fn ablate(common: Common, variants: Vec<String>) -> Result<()> {
    let mut run = Run::new("ablate", &common, None)?;
    let variants = parse_variants(&variants, &Variant::ALL)?;
    let data = run.dataset(&common)?;
    let rows = run_ablation(&data, &variants, &run.cfg.train)?;
    let mut table = Table::new(&["variant", "mae", "rmse"]);
    for r in &rows {
        table.push(vec![r.variant.name().to_string(), fmt_f(r.mae), fmt_f(r.rmse)]);
    }
    let p = run.path("ablation.csv");
    table.write(&p)?;
    print!("{}", table.to_csv());
    run.finish()
}

fn noise_sweep(common: Common, variants: Vec<String>, alphas: Vec<f64>) -> Result<()> {
    let mut run = Run::new("noise-sweep", &common, None)?;
    if !alphas.is_empty() {
        run.cfg.alphas = alphas;
        run.cfg.validate()?;
    }
    let variants = parse_variants(&variants, &[Variant::Rsg, Variant::Ddag])?;
    let data = run.dataset(&common)?;
    let rows = run_noise_sweep(&data, &run.cfg.alphas, &variants, &run.cfg.train)?;
    let mut table = Table::new(&["alpha", "variant", "mae", "rmse"]);
    for r in &rows {
        table.push(vec![
            r.alpha.to_string(),
            r.variant.name().to_string(),
            fmt_f(r.mae),
            fmt_f(r.rmse),
        ]);
    }
    let p = run.path("noise.csv");
    table.write(&p)?;
    print!("{}", table.to_csv());
    run.finish()
}

fn converge(common: Common) -> Result<()> {
    let mut run = Run::new("converge", &common, None)?;
    let data = run.dataset(&common)?;
    let curves = run_convergence_study(&data, &run.cfg.train)?;
    let mut table = Table::new(&["epoch", "mae_lc0", "rmse_lc0", "mae_lc1", "rmse_lc1"]);
    for (a, b) in curves.without_context.iter().zip(&curves.with_context) {
        table.push(vec![
            a.epoch.to_string(),
            fmt_f(a.test_mae),
            fmt_f(a.test_rmse),
            fmt_f(b.test_mae),
            fmt_f(b.test_rmse),
        ]);
    }
    let p = run.path("convergence.csv");
    table.write(&p)?;
    run.finish()
}

fn load_model(run: &mut Run, checkpoint: &Path) -> Result<ModelState> {
    run.input(checkpoint, "checkpoint")?;
    let state = read_checkpoint(checkpoint)?;
    if state.plan() != &run.cfg.train.plan {
        return Err(Error::InvalidArgument(
            "checkpoint channel plan differs from the config's".into(),
        ));
    }
    Ok(state)
}

fn eval_cmd(common: Common, variant: Option<String>, checkpoint: PathBuf, metrics: Option<PathBuf>) -> Result<()> {
    let mut run = Run::new("eval", &common, variant.as_deref())?;
    let state = load_model(&mut run, &checkpoint)?;
    let data = run.dataset(&common)?;
    let topology = run.cfg.variant.spec().topology();
    let preds = predict(&state, &data.test, topology, run.cfg.train.density_factor)?;
    let anns: Vec<_> = data.test.iter().map(|s| s.ann.clone()).collect();
    let result: EvalResult = eval_counts(&preds, &anns)?;
    run.write_json("eval.json", &result)?;
    println!("mae {:.4} rmse {:.4}", result.mae, result.rmse);
    if let Some(m) = metrics {
        run.input(&m, "metrics")?;
        let log = read_metrics(&m)?;
        let mut table = Table::new(&["epoch", "l_den", "l_seg", "l_con", "train_mae", "test_mae", "test_rmse"]);
        for r in &log {
            table.push(vec![
                r.epoch.to_string(),
                fmt_f(r.l_den),
                fmt_f(r.l_seg),
                fmt_f(r.l_con),
                fmt_f(r.train_mae),
                fmt_f(r.test_mae),
                fmt_f(r.test_rmse),
            ]);
        }
        let p = run.path("epochs.csv");
        table.write(&p)?;
    }
    run.finish()
}

fn render(common: Common, variant: Option<String>, checkpoint: PathBuf, limit: usize) -> Result<()> {
    let mut run = Run::new("render", &common, variant.as_deref())?;
    let state = load_model(&mut run, &checkpoint)?;
    let data = run.dataset(&common)?;
    let topology = run.cfg.variant.spec().topology();
    let factor = run.cfg.train.density_factor;
    for s in data.test.iter().take(limit) {
        let out = state.forward(&s.image, topology)?;
        let y_hat = out.density.map(|v| v / factor);
        let mask = match &out.mask {
            Some(m) => binarize(m, run.cfg.train.tau_mask),
            None => crowdprompt::geometry::Mask::empty(s.ann.width, s.ann.height),
        };
        let id = s.ann.id;
        let p = run.path(format!("overlay/{id}.ppm"));
        render_overlay(&s.image, &y_hat, &mask, &p)?;
        let p = run.path(format!("density/{id}.pfm"));
        write_density_pfm(&y_hat, &p)?;
        let p = run.path(format!("mask/{id}.pgm"));
        write_mask_pgm(&mask, &p)?;
    }
    run.finish()
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "io" => 3,
        "parse" => 4,
        "schema" => 5,
        "bounds" => 6,
        "invalid-argument" => 7,
        "missing-boxes" => 8,
        "non-finite" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(c) => gen_synth(c),
        Command::MakeTargets(c) => make_targets(c),
        Command::PretrainSeg(c) => pretrain_seg(c),
        Command::Train {
            common,
            variant,
            checkpoint,
        } => train_cmd(common, variant, checkpoint),
        Command::Ablate { common, variant } => ablate(common, variant),
        Command::NoiseSweep {
            common,
            variant,
            alpha_list,
        } => noise_sweep(common, variant, alpha_list),
        Command::Converge(c) => converge(c),
        Command::Eval {
            common,
            variant,
            checkpoint,
            metrics,
        } => eval_cmd(common, variant, checkpoint, metrics),
        Command::Render {
            common,
            variant,
            checkpoint,
            limit,
        } => render(common, variant, checkpoint, limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}

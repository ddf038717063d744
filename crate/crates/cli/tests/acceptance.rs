//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 and 11 are exact properties and make the run fail when they
//! do not hold. Criteria 7-10 compare trained models on the default synthetic
//! benchmark; their lines are reported either way and only fail the run when
//! `ACCEPTANCE_STRICT=1` is set. `ACCEPTANCE_ONLY=1,2,11` runs a subset.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdprompt::bench::{
    gen_dataset, gen_scene, run_ablation, run_convergence_study, run_iou_study, run_noise_sweep, SceneSpec,
};
use crowdprompt::config::RunConfig;
use crowdprompt::geometry::{k_nearest, min_enclosing_circle, Circle, DensityMap, Mask, Point2, ProbabilityMap};
use crowdprompt::io::{
    read_annotations, read_checkpoint, read_density_pfm, read_image_pfm, read_mask_pgm, read_metrics, read_ppm,
    render_overlay, write_annotations, write_checkpoint, write_density_pfm, write_image_pfm, write_mask_pgm,
    write_metrics, FileDigest, Manifest, Table,
};
use crowdprompt::losses::{con_metric, loss_con, loss_den, loss_seg, LossWeights};
use crowdprompt::model::{grad_check, ChannelPlan, FeatureMap, GradCheckOptions, ModelState};
use crowdprompt::prompt::{context_mask, offline_prompt, online_prompt};
use crowdprompt::targets::{box_seg_map, density_from_points, pixel_of, KernelSpec, SceneAnnotation};
use crowdprompt::trainer::{train, Variant};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Suite {
    strict: bool,
    only: Option<Vec<u8>>,
    passed: usize,
    failed_hard: Vec<u8>,
    failed_soft: Vec<u8>,
}

impl Suite {
    fn run(&mut self, id: u8, name: &str, hard: bool, f: impl FnOnce() -> Outcome) {
        if self.only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("SKIP {id:>2} {name}");
            return;
        }
        let t = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {id:>2} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        if o.pass {
            self.passed += 1;
        } else if hard || self.strict {
            self.failed_hard.push(id);
        } else {
            self.failed_soft.push(id);
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mask(r: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    Mask::from_vec(w, h, (0..w * h).map(|_| r.random_bool(p)).collect()).unwrap()
}

/// Density with a random share of exact zeros.
fn random_density(r: &mut ChaCha8Rng, w: usize, h: usize) -> DensityMap {
    let zero_share = r.random_range(0.0..1.0);
    let data = (0..w * h)
        .map(|_| {
            if r.random_bool(zero_share) {
                0.0
            } else {
                r.random_range(0.0..0.1)
            }
        })
        .collect();
    DensityMap::from_vec(w, h, data).unwrap()
}

fn elapsed_ok(t: Instant, limit_s: f64) -> (bool, f64) {
    let s = t.elapsed().as_secs_f64();
    (s < limit_s, s)
}

// 1. Offline and online prompt operations against pixel loops.
fn set_algebra() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (w, h) = (r.random_range(1..=32), r.random_range(1..=32));
        let p = r.random_range(0.0..1.0);
        let m_p = random_mask(&mut r, w, h, p);
        let y = random_density(&mut r, w, h);
        let y_hat = random_density(&mut r, w, h);
        let p = r.random_range(0.0..1.0);
        let m_k = random_mask(&mut r, w, h, p);
        let tau = [0.0, 1e-3, 0.05][r.random_range(0..3)];

        let off = offline_prompt(&m_p, &y).unwrap();
        let on = online_prompt(&m_p, &y_hat, &m_k, tau).unwrap();
        for i in 0..w * h {
            let want_off = m_p.data()[i] || y.data()[i] > 0.0;
            let want_on = (m_p.data()[i] || y_hat.data()[i] > tau) && m_k.data()[i];
            if off.data()[i] != want_off || on.data()[i] != want_on {
                mismatches += 1;
            }
        }
    }
    let (fast, s) = elapsed_ok(t, 5.0);
    Outcome::new(
        mismatches == 0 && fast,
        format!("1000 mask pairs, {mismatches} pixel mismatches, {s:.2}s (limit 5s)"),
    )
}

fn brute_force_mec(pts: &[Point2]) -> Circle {
    let covers_all = |c: &Circle| pts.iter().all(|&p| c.center.dist(p) <= c.radius + 1e-9);
    let mut candidates: Vec<Circle> = pts.iter().map(|&p| Circle::point(p)).collect();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            candidates.push(Circle::from_diameter(pts[i], pts[j]));
            for k in j + 1..pts.len() {
                if let Some(c) = Circle::circumcircle(pts[i], pts[j], pts[k]) {
                    candidates.push(c);
                }
            }
        }
    }
    candidates
        .into_iter()
        .filter(covers_all)
        .min_by(|a, b| a.radius.total_cmp(&b.radius))
        .expect("the widest pair always covers")
}

// 2. Welzl against the cubic enumeration.
fn mec_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2);
    let (mut worst_radius, mut worst_containment) = (0.0f64, 0.0f64);
    for case in 0..200 {
        let n = r.random_range(1..=8);
        let pts: Vec<Point2> = (0..n)
            .map(|_| {
                if case % 4 == 0 {
                    // Lattice points: duplicates and collinear triples.
                    Point2::new(r.random_range(0..4) as f64, r.random_range(0..4) as f64)
                } else {
                    Point2::new(r.random_range(0.0..32.0), r.random_range(0.0..32.0))
                }
            })
            .collect();
        let got = min_enclosing_circle(&pts).unwrap();
        let want = brute_force_mec(&pts);
        worst_radius = worst_radius.max((got.radius - want.radius).abs());
        for &p in &pts {
            worst_containment = worst_containment.max(got.center.dist(p) - got.radius);
        }
    }
    let (fast, s) = elapsed_ok(t, 5.0);
    Outcome::new(
        worst_radius <= 1e-9 && worst_containment <= 1e-9 && fast,
        format!(
            "200 sets, max radius gap {worst_radius:.2e}, max overshoot {worst_containment:.2e}, {s:.2}s (limit 5s)"
        ),
    )
}

// 3. K-NN against a full sort.
fn knn_oracle() -> Outcome {
    let mut r = rng(3);
    let mut failures = 0;
    for case in 0..200 {
        let n = r.random_range(1..=20);
        let pts: Vec<Point2> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    // Small integer lattice: many equal distances.
                    Point2::new(r.random_range(0..5) as f64, r.random_range(0..5) as f64)
                } else {
                    Point2::new(r.random_range(0.0..32.0), r.random_range(0.0..32.0))
                }
            })
            .collect();
        let anchor = r.random_range(0..n);
        let k = r.random_range(1..=6);
        let origin = pts[anchor];
        let mut all: Vec<(f64, Point2)> = pts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != anchor)
            .map(|(_, &p)| (origin.dist(p), p))
            .collect();
        all.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.y.total_cmp(&b.1.y))
                .then(a.1.x.total_cmp(&b.1.x))
        });
        let want: Vec<Point2> = all.into_iter().take(k.min(n - 1)).map(|(_, p)| p).collect();
        if k_nearest(&pts, anchor, k).unwrap() != want {
            failures += 1;
        }
    }
    Outcome::new(failures == 0, format!("200 instances, {failures} mismatches"))
}

// 4. Each point contributes unit mass.
fn conservation() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut border_points = 0;
    for id in 0..100 {
        let (w, h) = (r.random_range(4..=40), r.random_range(4..=40));
        let n = r.random_range(1..=30);
        let points: Vec<Point2> = (0..n)
            .map(|_| {
                let edge = |r: &mut ChaCha8Rng, len: usize| match r.random_range(0..4) {
                    0 => 0.0,
                    1 => len as f64 - 1e-9,
                    _ => r.random_range(0.0..len as f64),
                };
                Point2::new(edge(&mut r, w), edge(&mut r, h))
            })
            .collect();
        border_points += points
            .iter()
            .filter(|p| p.x < 1.0 || p.y < 1.0 || p.x >= w as f64 - 1.0 || p.y >= h as f64 - 1.0)
            .count();
        let ann = SceneAnnotation {
            id,
            width: w,
            height: h,
            points,
            boxes: None,
        };
        let size = [5, 9, 15][r.random_range(0..3)];
        let y = density_from_points(&ann, &KernelSpec::with_size(size)).unwrap();
        worst = worst.max((y.sum() - n as f64).abs() / n as f64);
    }
    Outcome::new(
        worst <= 1e-5,
        format!("100 annotations ({border_points} border points), max relative mass error {worst:.2e}"),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn central_diff(f: impl Fn(&DensityMap) -> f64, at: &DensityMap, i: usize, step: f64) -> f64 {
    let mut g = at.clone();
    g.data_mut()[i] = at.data()[i] + step;
    let plus = f(&g);
    g.data_mut()[i] = at.data()[i] - step;
    let minus = f(&g);
    (plus - minus) / (2.0 * step)
}

// 5. Loss ranges, loss gradients, and the full backward pass.
fn loss_checks() -> Outcome {
    let t = Instant::now();
    let mut r = rng(5);
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let (w, h) = (r.random_range(1..=16), r.random_range(1..=16));
        let y_hat = random_density(&mut r, w, h);
        let m_hat = ProbabilityMap::from_vec(w, h, (0..w * h).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let c = con_metric(&y_hat, &m_hat, 1e-3, 0.5).unwrap();
        let l = loss_con(&y_hat, &m_hat, 0.5).unwrap().value;
        if !(-1.0..=0.0).contains(&c) || !(-1.0..=0.0).contains(&l) {
            out_of_range += 1;
        }
    }

    let mut worst_loss = 0.0f64;
    for _ in 0..50 {
        let (w, h) = (r.random_range(2..=8), r.random_range(2..=8));
        let y = DensityMap::from_vec(w, h, (0..w * h).map(|_| r.random_range(0.01..1.0)).collect()).unwrap();
        let target = random_density(&mut r, w, h);
        let p = ProbabilityMap::from_vec(w, h, (0..w * h).map(|_| r.random_range(0.02..0.98)).collect()).unwrap();
        let m = random_mask(&mut r, w, h, 0.4);
        let den = loss_den(&y, &target).unwrap();
        let seg = loss_seg(&p, &m).unwrap();
        let con = loss_con(&y, &p, 0.5).unwrap();
        for i in 0..w * h {
            let fd = central_diff(|g| loss_den(g, &target).unwrap().value, &y, i, 1e-5);
            worst_loss = worst_loss.max(rel_err(den.grad.data()[i], fd));
            let fd = central_diff(|g| loss_seg(g, &m).unwrap().value, &p, i, 1e-6);
            worst_loss = worst_loss.max(rel_err(seg.grad.data()[i], fd));
            let fd = central_diff(|g| loss_con(g, &p, 0.5).unwrap().value, &y, i, 1e-6);
            worst_loss = worst_loss.max(rel_err(con.grad.data()[i], fd));
        }
    }

    let plan = ChannelPlan {
        backbone: vec![4, 6],
        branch: vec![4, 3],
        ..ChannelPlan::default()
    };
    let state = ModelState::init(11, plan).unwrap();
    let (w, h) = (8, 8);
    let x = FeatureMap::from_vec(3, h, w, (0..3 * w * h).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let y = DensityMap::from_vec(w, h, (0..w * h).map(|_| r.random_range(0.0..0.05)).collect()).unwrap();
    let m = random_mask(&mut r, w, h, 0.3);
    let opts = GradCheckOptions {
        samples: 300,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&state, &x, &y, &m, &LossWeights::default(), &opts).unwrap();

    let (fast, s) = elapsed_ok(t, 60.0);
    Outcome::new(
        out_of_range == 0 && worst_loss < 1e-4 && report.checked >= 200 && report.max_rel_err < 1e-3 && fast,
        format!(
            "{out_of_range}/1000 context values outside [-1, 0]; loss gradient rel. err {worst_loss:.2e} (limit 1e-4); \
             model rel. err {:.2e} over {} coordinates, {} skipped at kinks (limit 1e-3); {s:.1}s (limit 60s)",
            report.max_rel_err,
            report.checked,
            report.skipped.len()
        ),
    )
}

// 6. Containment properties of the prompts on generated scenes.
fn prompt_monotonicity() -> Outcome {
    let mut r = rng(6);
    let mut violations = 0;
    for i in 0..100 {
        let spec = SceneSpec {
            seed: r.random(),
            ..SceneSpec::default()
        };
        let scene = gen_scene(&spec, i).unwrap();
        let (w, h) = (scene.ann.width, scene.ann.height);
        let y = density_from_points(&scene.ann, &KernelSpec::with_size(5)).unwrap();
        let m_p = random_mask(&mut r, w, h, 0.2);
        let off = offline_prompt(&m_p, &y).unwrap();
        let by = crowdprompt::geometry::binarize(&y, 0.0);
        if !m_p.is_subset_of(&off) || !by.is_subset_of(&off) {
            violations += 1;
        }
        if scene.ann.points.iter().any(|&p| {
            let (x, y) = pixel_of(p, w, h);
            !off.get(x, y)
        }) {
            violations += 1;
        }
        let m_k = context_mask(&scene.ann, 3).unwrap();
        let y_hat = random_density(&mut r, w, h);
        let on = online_prompt(&off, &y_hat, &m_k, 1e-3).unwrap();
        if !on.is_subset_of(&m_k) {
            violations += 1;
        }
    }
    Outcome::new(violations == 0, format!("100 scenes, {violations} violations"))
}

fn mae_of(rows: &[crowdprompt::bench::AblationRow], v: Variant) -> f64 {
    rows.iter().find(|r| r.variant == v).expect("variant trained").mae
}

// 7. Ordering of the ablation ladder.
fn ablation(cfg: &RunConfig) -> Outcome {
    let t = Instant::now();
    let data = gen_dataset(&cfg.scene, cfg.n_train, cfg.n_test).unwrap();
    let rows = run_ablation(&data, &Variant::ALL, &cfg.train).unwrap();
    let (fast, s) = elapsed_ok(t, 600.0);
    let [reg, rsg, pdd, cd, dd] =
        [Variant::Reg, Variant::Rsg, Variant::PDdag, Variant::CDag, Variant::Ddag].map(|v| mae_of(&rows, v));
    let chain = dd < rsg && rsg < reg;
    let middle = dd <= 1.05 * pdd && dd <= 1.05 * cd;
    let hard = dd < 0.9 * reg;
    let table: Vec<String> = rows.iter().map(|r| format!("{}={:.3}", r.variant, r.mae)).collect();
    Outcome::new(
        chain && middle && hard && fast,
        format!(
            "MAE {}; ddag<rsg<reg {chain}; ddag within 5% of p-ddag and c-dag {middle}; \
             ddag at least 10% below reg {hard}; {s:.0}s (limit 600s)",
            table.join(" ")
        ),
    )
}

// 8. Degradation under box noise.
fn noise(cfg: &RunConfig) -> Outcome {
    let t = Instant::now();
    let data = gen_dataset(&cfg.scene, cfg.n_train, cfg.n_test).unwrap();
    let alphas = [0.0, 0.25, 0.5];
    let rows = run_noise_sweep(&data, &alphas, &[Variant::Rsg, Variant::Ddag], &cfg.train).unwrap();
    let (fast, s) = elapsed_ok(t, 1800.0);
    let at = |a: f64, v: Variant| rows.iter().find(|r| r.alpha == a && r.variant == v).unwrap().mae;
    let deg = |v: Variant| at(0.5, v) - at(0.0, v);
    let (d_rsg, d_dd) = (deg(Variant::Rsg), deg(Variant::Ddag));
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}@{}={:.3}", r.variant, r.alpha, r.mae))
        .collect();
    Outcome::new(
        d_dd < d_rsg && fast,
        format!(
            "MAE {}; degradation ddag {d_dd:+.3} vs rsg {d_rsg:+.3}; {s:.0}s (limit 1800s)",
            table.join(" ")
        ),
    )
}

// 9. Context loss at epoch 10.
fn convergence(cfg: &RunConfig) -> Outcome {
    let t = Instant::now();
    let data = gen_dataset(&cfg.scene, cfg.n_train, cfg.n_test).unwrap();
    let curves = run_convergence_study(&data, &cfg.train).unwrap();
    let (fast, s) = elapsed_ok(t, 600.0);
    let (off, on) = (curves.without_context[9].test_mae, curves.with_context[9].test_mae);
    let lower = curves
        .without_context
        .iter()
        .zip(&curves.with_context)
        .filter(|(a, b)| b.test_mae <= a.test_mae)
        .count();
    Outcome::new(
        on <= off && fast,
        format!(
            "epoch-10 MAE lambda_c=1 {on:.3} vs lambda_c=0 {off:.3}; lambda_c=1 at or below on {lower}/{} epochs; \
             {s:.0}s (limit 600s)",
            curves.with_context.len()
        ),
    )
}

// 10. Mask quality after prompting.
fn iou(cfg: &RunConfig) -> Outcome {
    let data = gen_dataset(&cfg.scene, cfg.n_train, cfg.n_test).unwrap();
    let rep = run_iou_study(&data, &cfg.train).unwrap();
    Outcome::new(
        rep.prompted_test > rep.pseudo_test,
        format!(
            "test split: prompted {:.3} vs pseudo {:.3}; training split: stored targets {:.3} vs pseudo {:.3}",
            rep.prompted_test, rep.pseudo_test, rep.stored_train, rep.pseudo_train
        ),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_crowdprompt"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn commands_reproduce(dir: &Path) -> Result<usize, String> {
    fs::write(
        dir.join("tiny.json"),
        r#"{"n_train": 6, "n_test": 3, "train": {"epochs": 3, "prompt": {"kappa": 1}, "pretrain": {"epochs": 2}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let commands: [&[&str]; 9] = [
        &["gen-synth"],
        &["make-targets"],
        &["pretrain-seg"],
        &["train", "--variant", "ddag"],
        &[
            "eval",
            "--checkpoint",
            "ref/model.ckpt",
            "--metrics",
            "ref/metrics.jsonl",
        ],
        &["render", "--checkpoint", "ref/model.ckpt", "--limit", "3"],
        &["ablate"],
        &["noise-sweep", "--alpha-list", "0,0.5"],
        &["converge"],
    ];
    cli(
        dir,
        &["train", "--config", "tiny.json", "--variant", "ddag", "--out", "ref"],
    )?;
    let mut files = 0;
    for cmd in commands {
        let mut digests = Vec::new();
        for (i, out) in ["a", "a", "b"].iter().enumerate() {
            let mut args = cmd.to_vec();
            args.extend(["--config", "tiny.json", "--out", out]);
            cli(dir, &args)?;
            let text = fs::read(dir.join(out).join("manifest.json")).map_err(|e| e.to_string())?;
            let m = Manifest::read(&dir.join(out).join("manifest.json")).map_err(|e| e.to_string())?;
            for o in &m.outputs {
                let now = FileDigest::of(&dir.join(out).join(&o.path), o.path.clone()).map_err(|e| e.to_string())?;
                if now.sha256 != o.sha256 {
                    return Err(format!("{}: manifest digest of {} is stale", cmd[0], o.path));
                }
            }
            if i == 0 {
                files += m.outputs.len();
            }
            digests.push((text, m));
        }
        if digests[0].0 != digests[1].0 {
            return Err(format!("{}: manifest differs on rerun", cmd[0]));
        }
        let (a, b) = (&digests[0].1, &digests[2].1);
        let same = a.config_hash == b.config_hash
            && a.outputs.len() == b.outputs.len()
            && a.outputs
                .iter()
                .zip(&b.outputs)
                .all(|(x, y)| x.path == y.path && (x.path == "config.json" || x.sha256 == y.sha256));
        if !same {
            return Err(format!("{}: outputs differ between output directories", cmd[0]));
        }
        fs::remove_dir_all(dir.join("a")).ok();
        fs::remove_dir_all(dir.join("b")).ok();
    }
    Ok(files)
}

fn formats_round_trip(dir: &Path) -> Result<usize, String> {
    let e = |e: crowdprompt::Error| e.to_string();
    let cfg = RunConfig::default();
    let data = gen_dataset(&cfg.scene, cfg.n_train, cfg.n_test).map_err(e)?;
    let mut checked = 0;

    let anns: Vec<SceneAnnotation> = data.train.iter().chain(&data.test).map(|s| s.ann.clone()).collect();
    let p = dir.join("ann.json");
    write_annotations(&p, &anns).map_err(e)?;
    if read_annotations(&p).map_err(e)? != anns {
        return Err("annotations".into());
    }
    let mut no_boxes = anns[0].clone();
    no_boxes.boxes = None;
    no_boxes.points.push(Point2::new(31.999, 0.0));
    write_annotations(&p, std::slice::from_ref(&no_boxes)).map_err(e)?;
    if read_annotations(&p).map_err(e)? != [no_boxes] {
        return Err("annotations without boxes".into());
    }
    checked += 2;

    let state = ModelState::init(1, cfg.train.plan.clone()).map_err(e)?;
    for s in data.train.iter().chain(&data.test) {
        let y = density_from_points(&s.ann, &cfg.train.kernel).map_err(e)?;
        // Density values are stored as f32.
        let y32 = y.map(|&v| f64::from(v as f32));
        let p = dir.join("d.pfm");
        write_density_pfm(&y32, &p).map_err(e)?;
        if read_density_pfm(&p).map_err(e)? != y32 {
            return Err(format!("density PFM, scene {}", s.ann.id));
        }
        let m = box_seg_map(&s.ann).map_err(e)?;
        let p = dir.join("m.pgm");
        write_mask_pgm(&m, &p).map_err(e)?;
        if read_mask_pgm(&p).map_err(e)? != m {
            return Err(format!("mask PGM, scene {}", s.ann.id));
        }
        let p = dir.join("i.pfm");
        write_image_pfm(&s.image, &p).map_err(e)?;
        if read_image_pfm(&p).map_err(e)? != s.image {
            return Err(format!("image PFM, scene {}", s.ann.id));
        }
        let out = state.forward(&s.image, Variant::Ddag.spec().topology()).map_err(e)?;
        let p = dir.join("o.ppm");
        render_overlay(&s.image, &out.density, &m, &p).map_err(e)?;
        let img = read_ppm(&p).map_err(e)?;
        if (img.width, img.height) != (s.ann.width, s.ann.height) {
            return Err(format!("overlay size, scene {}", s.ann.id));
        }
        checked += 4;
    }

    let p = dir.join("model.ckpt");
    write_checkpoint(&state, &p).map_err(e)?;
    if read_checkpoint(&p).map_err(e)? != state {
        return Err("checkpoint".into());
    }
    let mut small = cfg.train.clone();
    small.epochs = 2;
    small.prompt.kappa = 1;
    let run = train(Variant::Reg.spec(), &data.train[..8], &data.test[..4], None, &small).map_err(e)?;
    let p = dir.join("metrics.jsonl");
    write_metrics(&run.log, &p).map_err(e)?;
    if read_metrics(&p).map_err(e)? != run.log {
        return Err("metrics".into());
    }
    let mut table = Table::new(&["variant", "mae", "rmse"]);
    table.push(vec!["ddag".into(), "0.5".into(), "0.7".into()]);
    let p = dir.join("t.csv");
    table.write(&p).map_err(e)?;
    if Table::read(&p).map_err(e)? != table {
        return Err("table".into());
    }
    Ok(checked + 3)
}

// 11. Reruns are byte-identical and every format reads back what was written.
fn determinism_and_io() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let commands = commands_reproduce(dir.path());
    let formats = formats_round_trip(dir.path());
    match (commands, formats) {
        (Ok(files), Ok(rounds)) => Outcome::new(
            true,
            format!("9 commands rerun with identical manifests ({files} outputs); {rounds} format round trips exact"),
        ),
        (c, f) => Outcome::new(
            false,
            format!(
                "commands: {:?}; formats: {:?}",
                c.err().unwrap_or_default(),
                f.err().unwrap_or_default()
            ),
        ),
    }
}

fn main() -> ExitCode {
    let mut suite = Suite {
        strict: std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1"),
        only: std::env::var("ACCEPTANCE_ONLY")
            .ok()
            .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect()),
        passed: 0,
        failed_hard: Vec::new(),
        failed_soft: Vec::new(),
    };
    let cfg = RunConfig::default();
    println!(
        "default benchmark: {} train / {} test scenes, {} epochs, kappa {}, lr {}, seed {}",
        cfg.n_train,
        cfg.n_test,
        cfg.train.epochs,
        cfg.train.prompt.kappa,
        cfg.train.learning_rate,
        cfg.seed()
    );

    suite.run(1, "set algebra", true, set_algebra);
    suite.run(2, "enclosing circle", true, mec_oracle);
    suite.run(3, "nearest neighbours", true, knn_oracle);
    suite.run(4, "density conservation", true, conservation);
    suite.run(5, "loss bounds and gradients", true, loss_checks);
    suite.run(6, "prompt monotonicity", true, prompt_monotonicity);
    suite.run(7, "ablation ordering", false, || ablation(&cfg));
    suite.run(8, "noise robustness", false, || noise(&cfg));
    suite.run(9, "context-loss convergence", false, || convergence(&cfg));
    suite.run(10, "mask IoU after prompting", false, || iou(&cfg));
    suite.run(11, "determinism and IO", true, determinism_and_io);

    println!(
        "{} criteria passed; failing exact criteria {:?}; failing benchmark criteria {:?}{}",
        suite.passed,
        suite.failed_hard,
        suite.failed_soft,
        if suite.strict { " (strict)" } else { "" }
    );
    if suite.failed_hard.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

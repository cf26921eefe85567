use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use scg_core::analysis::{
    self,
    equivariance_error, hstack, kernel_grid_image, min_max_normalize, module_reconstruction, plot_curves, psnr,
    rotation_path, ssim, submanifold_sweep, vstack, write_curve_csv, write_lines, write_png, AnalysisConfig,
    TuningSummary,
};
use scg_core::completion::{completion_views, evaluate_completion, train_completion, CompletionMetrics};
use scg_core::dataset::{Dataset, SeededRng};
use scg_core::objective::{verify_gradients, ObjectiveConfig};
use scg_core::tensor::{ImageTensor, Tensor3};
use scg_core::trainer::{load_checkpoint, train, Checkpoint, TrainOutput, PAPER_TOTAL_STEPS};

use crate::config::RunConfig;

/// `<out>/{checkpoints,logs,figures,tables}`.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "figures", "tables"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let path = self.root.join("config.toml");
        fs::write(&path, cfg.to_text()?).with_context(|| format!("cannot write {}", path.display()))
    }

    /// Analysis commands keep a training run's config when sharing its directory.
    pub fn write_config_if_absent(&self, cfg: &RunConfig) -> Result<()> {
        if self.root.join("config.toml").exists() {
            return Ok(());
        }
        self.write_config(cfg)
    }
}

/// Figures are upscaled so 28-pixel digits stay legible.
const FIGURE_SCALE: usize = 4;

fn upscale(img: &ImageTensor<f32>) -> ImageTensor<f32> {
    analysis::upscale(img, FIGURE_SCALE)
}

fn clamp01(img: &ImageTensor<f32>) -> Result<ImageTensor<f32>> {
    let data = img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor3::from_vec(img.channels(), img.height(), img.width(), data)?)
}

fn normalized(img: &ImageTensor<f32>) -> Result<ImageTensor<f32>> {
    let vals: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let data = min_max_normalize(&vals).into_iter().map(|v| v as f32).collect();
    Ok(Tensor3::from_vec(img.channels(), img.height(), img.width(), data)?)
}

fn mean_psnr_ssim(cp: &Checkpoint, images: &[ImageTensor<f32>]) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for img in images {
        let rec = clamp01(&cp.bank.reconstruct(img)?)?;
        p += psnr(&rec, img, 1.0)?;
        s += ssim(&rec, img)?;
    }
    let n = images.len().max(1) as f64;
    Ok((p / n, s / n))
}

pub fn run_train(cfg: &RunConfig, resume: Option<&Path>, quiet: bool) -> Result<Checkpoint> {
    let layout = RunLayout::create(&cfg.output_dir)?;
    layout.write_config(cfg)?;
    let data = cfg.data.load_train()?;
    let resume = resume
        .map(|p| load_checkpoint(p).with_context(|| format!("cannot resume from {}", p.display())))
        .transpose()?;
    let output = TrainOutput {
        checkpoint_dir: Some(layout.checkpoints()),
        loss_csv: Some(layout.logs().join("loss.csv")),
    };
    let every = (cfg.train.total_steps / 20).max(1) as u64;
    let cp = train(&cfg.train, &data, resume, &output, |r| {
        if !quiet && (r.step % every == 0 || r.step == 1) {
            eprintln!(
                "step {:>6}  lr {:.2e}  recon {:.4}  equ {:.4}  sym {:.4}  total {:.4}",
                r.step, r.lr, r.recon, r.equ, r.sym, r.total
            );
        }
    })?;
    println!("final checkpoint: {}", layout.checkpoints().join("final.ckpt").display());
    Ok(cp)
}

pub fn run_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let started = std::time::Instant::now();
    let summary = verify_gradients(&cfg.gradcheck, &cfg.train.model, &cfg.train.objective)?;
    println!("term   max_rel_error  analytic        numeric         checked");
    for (name, r) in summary.rows() {
        println!(
            "{name:<6} {:<14.3e} {:<15.6e} {:<15.6e} {}",
            r.max_rel_error, r.analytic, r.numeric, r.checked
        );
    }
    let worst = summary.max_rel_error();
    let ok = worst < cfg.gradcheck.tolerance;
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e}) in {:.1?}: {}",
        cfg.gradcheck.tolerance,
        started.elapsed(),
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

/// Headline numbers of one model, shared by `analyze` and `ablate`.
pub struct ModelReport {
    pub tuning: TuningSummary,
    pub equivariance_error: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn model_report(cp: &Checkpoint, test: &Dataset, cfg: &AnalysisConfig) -> Result<ModelReport> {
    let tuning = TuningSummary::compute(&cp.bank, cfg)?;
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let equivariance_error = equivariance_error(
        &cp.bank,
        &cp.codebook,
        test,
        &cp.config.aug,
        cfg.equivariance_samples,
        &mut rng,
    )?;
    let n = cfg.equivariance_samples.min(test.len());
    let (psnr, ssim) = mean_psnr_ssim(cp, &test.images()[..n])?;
    Ok(ModelReport {
        tuning,
        equivariance_error,
        psnr,
        ssim,
    })
}

pub fn run_analyze(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let cp = load_checkpoint(checkpoint)?;
    let layout = RunLayout::create(&cfg.output_dir)?;
    layout.write_config_if_absent(cfg)?;
    let test = cfg.data.load_test()?;
    if test.channels() != cp.bank.in_channels() {
        bail!(
            "test images have {} channels, checkpoint expects {}",
            test.channels(),
            cp.bank.in_channels()
        );
    }
    let ac = &cfg.analysis;
    let (figs, tabs) = (layout.figures(), layout.tables());
    write_png(figs.join("kernels.png"), &upscale(&kernel_grid_image(&cp.bank)))?;

    let report = model_report(&cp, &test, ac)?;
    let t = &report.tuning;
    let mut cv_rows = vec!["module,kernel,preferred_frequency,circular_variance,selective".to_string()];
    for i in 0..cp.bank.modules() {
        let orient = &t.orientation[i];
        let cols: Vec<(String, Vec<f64>)> = orient
            .iter()
            .enumerate()
            .map(|(m, c)| (format!("m{i}k{m}"), c.responses.clone()))
            .collect();
        write_curve_csv(tabs.join(format!("orientation_m{i}.csv")), &orient[0].axis, &cols)?;
        let curves: Vec<Vec<f64>> = orient.iter().map(|c| c.responses.clone()).collect();
        write_png(figs.join(format!("orientation_m{i}.png")), &plot_curves(&curves, None, 360, 160))?;

        let freq = &t.frequency[i];
        let mut cols: Vec<(String, Vec<f64>)> = freq
            .iter()
            .enumerate()
            .map(|(m, c)| (format!("m{i}k{m}"), c.responses.clone()))
            .collect();
        cols.push((format!("m{i}mean"), t.module_frequency[i].responses.clone()));
        write_curve_csv(tabs.join(format!("frequency_m{i}.csv")), &freq[0].axis, &cols)?;
        let curves: Vec<Vec<f64>> = freq.iter().map(|c| c.responses.clone()).collect();
        write_png(
            figs.join(format!("frequency_m{i}.png")),
            &plot_curves(&curves, Some(&t.module_frequency[i].responses), 320, 160),
        )?;

        for m in 0..cp.bank.module_len() {
            let cv = t.circular_variance[i][m];
            cv_rows.push(format!(
                "{i},{m},{:.5},{cv:.5},{}",
                t.preferred_frequency[i][m],
                cv < ac.selectivity_threshold
            ));
        }
    }
    write_lines(&tabs.join("circular_variance.csv"), &cv_rows)?;

    // One row per test image: original, full decode, then each module alone.
    let rows = test.images()[..test.len().min(4)]
        .iter()
        .map(|img| {
            let mut tiles = vec![img.clone(), clamp01(&cp.bank.reconstruct(img)?)?];
            for i in 0..cp.bank.modules() {
                tiles.push(normalized(&module_reconstruction(&cp.bank, img, &[i])?)?);
            }
            hstack(&tiles.iter().map(upscale).collect::<Vec<_>>(), 2).map_err(anyhow::Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    write_png(figs.join("module_reconstructions.png"), &vstack(&rows, 2)?)?;

    let path = rotation_path(ac.sweep_frames);
    let sweeps = (0..cp.bank.modules())
        .map(|i| {
            let frames = submanifold_sweep(&cp.bank, &cp.codebook, i, 0, test.side(), &path)?;
            let frames = frames.iter().map(|f| normalized(f).map(|f| upscale(&f))).collect::<Result<Vec<_>>>()?;
            hstack(&frames, 2).map_err(anyhow::Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    write_png(figs.join("submanifold_sweeps.png"), &vstack(&sweeps, 4)?)?;

    let r = &t.frequency_ratio;
    let summary = [
        "metric,value".to_string(),
        format!("fraction_selective,{:.5}", t.fraction_selective),
        format!("selectivity_threshold,{}", ac.selectivity_threshold),
        format!("frequency_between_variance,{:.6e}", r.between),
        format!("frequency_within_variance,{:.6e}", r.within),
        format!("frequency_variance_ratio,{:.6}", r.ratio),
        format!("equivariance_error,{:.6}", report.equivariance_error),
        format!("reconstruction_psnr,{:.4}", report.psnr),
        format!("reconstruction_ssim,{:.6}", report.ssim),
    ];
    write_lines(&tabs.join("analysis_summary.csv"), &summary)?;
    for line in &summary[1..] {
        println!("{}", line.replace(',', ": "));
    }
    Ok(())
}

pub fn run_complete(cfg: &RunConfig, checkpoint: &Path, group: &str) -> Result<()> {
    let cp = load_checkpoint(checkpoint)?;
    let names: Vec<String> = if group == "all" {
        cfg.groups.groups.iter().map(|g| g.name.clone()).collect()
    } else {
        vec![group.to_string()]
    };
    for name in &names {
        if cfg.groups.get(name).is_none() {
            let known: Vec<&str> = cfg.groups.groups.iter().map(|g| g.name.as_str()).collect();
            bail!("unknown group {name:?}; configured groups: {}", known.join(", "));
        }
    }
    cfg.groups.validate(cp.bank.modules())?;
    let layout = RunLayout::create(&cfg.output_dir)?;
    layout.write_config_if_absent(cfg)?;
    let train_set = cfg.data.load_train()?;
    let test = cfg.data.load_test()?;
    let cc = &cfg.completion;
    let train_images = &train_set.images()[..cc.train_images.min(train_set.len())];
    let eval_images = &test.images()[..cc.eval_images.min(test.len())];

    let mut rows = vec![CompletionMetrics::CSV_HEADER.to_string()];
    let mut base_rows = vec![CompletionMetrics::CSV_HEADER.to_string()];
    for name in &names {
        let g = cfg.groups.get(name).expect("checked above");
        let map = train_completion(&cp.bank, train_images, name, &g.modules, cc)?;
        map.save(layout.checkpoints().join(format!("completion_{name}.scgc")))?;
        let (done, base) = evaluate_completion(&map, &cp.bank, eval_images)?;
        println!(
            "{name}: completed psnr {:.2} dB ssim {:.4} | zero-padded psnr {:.2} dB ssim {:.4}",
            done.psnr_gray, done.ssim, base.psnr_gray, base.ssim
        );
        rows.push(done.csv_row());
        base_rows.push(base.csv_row());

        // Original, condition (zero-padded decode) and completed decode.
        let strips = eval_images[..eval_images.len().min(6)]
            .iter()
            .map(|img| {
                let (completed, padded) = completion_views(&map, &cp.bank, img)?;
                let tiles = [img.clone(), clamp01(&padded)?, clamp01(&completed)?];
                hstack(&tiles.iter().map(upscale).collect::<Vec<_>>(), 2).map_err(anyhow::Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        write_png(layout.figures().join(format!("completion_{name}.png")), &vstack(&strips, 4)?)?;
    }
    let suffix = if names.len() == 1 { format!("_{}", names[0]) } else { String::new() };
    write_lines(&layout.tables().join(format!("completion{suffix}.csv")), &rows)?;
    write_lines(&layout.tables().join(format!("completion_baseline{suffix}.csv")), &base_rows)?;
    Ok(())
}

pub fn run_ablate(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let layout = RunLayout::create(&cfg.output_dir)?;
    layout.write_config(cfg)?;
    let test = cfg.data.load_test()?;
    let mut lines = vec![
        "run,lambda1,lambda2,frequency_variance_ratio,between,within,fraction_selective,equivariance_error,psnr,ssim"
            .to_string(),
    ];
    let mut reports = Vec::new();
    for (name, objective) in [
        (
            "ablation",
            ObjectiveConfig {
                lambda1: 0.0,
                lambda2: 0.0,
                ..cfg.train.objective.clone()
            },
        ),
        ("constrained", cfg.train.objective.clone()),
    ] {
        let mut run = cfg.clone();
        run.output_dir = cfg.output_dir.join(name);
        run.train.objective = objective;
        if !quiet {
            eprintln!("== {name} run");
        }
        let init = Checkpoint::initialize(&run.train)?;
        let cp = run_train(&run, None, quiet)?;
        for (tag, c) in [("init", &init), ("trained", &cp)] {
            let r = model_report(c, &test, &cfg.analysis)?;
            let f = &r.tuning.frequency_ratio;
            lines.push(format!(
                "{name}_{tag},{},{},{:.6},{:.6e},{:.6e},{:.5},{:.6},{:.4},{:.6}",
                run.train.objective.lambda1,
                run.train.objective.lambda2,
                f.ratio,
                f.between,
                f.within,
                r.tuning.fraction_selective,
                r.equivariance_error,
                r.psnr,
                r.ssim
            ));
            if tag == "trained" {
                reports.push((name, r));
            }
        }
    }
    write_lines(&layout.tables().join("ablation.csv"), &lines)?;
    let (abl, con) = (&reports[0].1, &reports[1].1);
    println!(
        "frequency variance ratio: constrained {:.4} vs ablation {:.4} (x{:.2})",
        con.tuning.frequency_ratio.ratio,
        abl.tuning.frequency_ratio.ratio,
        con.tuning.frequency_ratio.ratio / abl.tuning.frequency_ratio.ratio
    );
    println!(
        "reconstruction psnr: constrained {:.2} dB vs ablation {:.2} dB",
        con.psnr, abl.psnr
    );
    Ok(())
}

/// Applies `--paper-steps`.
pub fn with_paper_steps(mut cfg: RunConfig, paper_steps: bool) -> RunConfig {
    if paper_steps {
        cfg.train.total_steps = PAPER_TOTAL_STEPS;
    }
    cfg
}

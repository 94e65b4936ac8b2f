//! Command implementations. Artifacts land in a fixed layout under the
//! experiment directory: `checkpoints/`, `curves/`, and `reports/`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use wd_core::checkpoint::{digest_file, load_model, save_generator, save_model};
use wd_core::data::{Corpus, TrainDataSplit};
use wd_core::distill::{
    assemble_student, build_pseudo_corpus, init_baseline, init_unselected,
    teacher_forced_accuracy, teacher_prob_cache, train_phase1, train_phase2, train_plain,
    LossCurve, TeacherBundle, TeacherProbCache,
};
use wd_core::generator::{Generator, SelectedClasses};
use wd_core::metrics::{bench_decode, corpus_bleu, median, BenchResult, EvalReport};
use wd_core::model::{greedy_decode, ModelConfig, TransformerParams};

use crate::config::{ExperimentConfig, SweepKind, TrainSection};

/// Salts that split one run seed into independent streams.
const SALT_TEACHER_INIT: u64 = 11;
const SALT_STUDENT_INIT: u64 = 12;
const SALT_GENERATOR: u64 = 13;

fn derive(seed: u64, salt: u64) -> u64 {
    wd_core::data::derive_seed(seed, salt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    None,
    Kd,
    Wd,
    Init,
    #[value(name = "init+kd")]
    InitKd,
}

impl Method {
    fn file_tag(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Kd => "kd",
            Method::Wd => "wd",
            Method::Init => "init",
            Method::InitKd => "init_kd",
        }
    }

    fn needs_teacher(self) -> bool {
        !matches!(self, Method::None)
    }

    fn uses_pseudo_data(self) -> bool {
        matches!(self, Method::Kd | Method::Wd | Method::InitKd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.file_tag())
    }
}

/// Experiment directory layout.
pub struct Dirs {
    out: PathBuf,
}

impl Dirs {
    pub fn new(out: PathBuf) -> Result<Dirs> {
        for sub in ["checkpoints", "curves", "reports"] {
            fs::create_dir_all(out.join(sub))
                .with_context(|| format!("creating {}/{}", out.display(), sub))?;
        }
        Ok(Dirs { out })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(name)
    }

    pub fn curve(&self, name: &str) -> PathBuf {
        self.out.join("curves").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(name)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_curve(path: &Path, curve: &LossCurve, echo: &serde_json::Value) -> Result<()> {
    let mut text = format!("# config: {}\n", serde_json::to_string(echo)?);
    text.push_str(&curve.to_csv_string());
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Accuracy, BLEU, throughput, and parameter count of one model on the
/// validation corpus.
fn eval_model(
    params: &TransformerParams,
    cfg: &ModelConfig,
    valid: &Corpus,
    batch_size: usize,
    bench_sample: usize,
    bench_repeats: usize,
    echo: serde_json::Value,
) -> Result<EvalReport> {
    let token_accuracy = teacher_forced_accuracy(params, cfg, valid, batch_size)?;
    let max_steps = cfg.max_len - 1;
    let sources = valid.sources();
    let hyps = greedy_decode(params, cfg, &sources, max_steps)?;
    let refs = valid.target_contents();
    let bleu = corpus_bleu(&hyps, &refs, 4)?;
    let sample: Vec<Vec<u32>> = sources
        .iter()
        .take(bench_sample.clamp(1, sources.len()))
        .cloned()
        .collect();
    let bench = bench_decode(params, cfg, &sample, max_steps, bench_repeats)?;
    Ok(EvalReport {
        token_accuracy,
        bleu,
        sentences_per_second: bench.median,
        params_count: params.param_count(),
        config: echo,
    })
}

/// Surfaces the batcher's over-length filtering as a counted warning.
fn warn_dropped(corpus: &Corpus, what: &str, batch_size: usize, max_len: usize) {
    if let Ok(batcher) = wd_core::data::Batcher::new(corpus, batch_size, max_len) {
        if batcher.dropped() > 0 {
            eprintln!(
                "warning: dropped {} over-length pair(s) from the {what} corpus (max_len {max_len})",
                batcher.dropped()
            );
        }
    }
}

fn load_teacher(dirs: &Dirs, cfg: &ExperimentConfig) -> Result<(ModelConfig, TransformerParams)> {
    let path = dirs.checkpoint("teacher.ckpt");
    if !path.exists() {
        bail!(
            "teacher checkpoint {} not found; run train-teacher first",
            path.display()
        );
    }
    let (teacher_cfg, teacher_params) = load_model(&path)?;
    let expected = cfg.teacher_cfg();
    if teacher_cfg != expected {
        bail!(
            "teacher checkpoint config {:?} does not match the experiment config {:?}",
            teacher_cfg,
            expected
        );
    }
    Ok((teacher_cfg, teacher_params))
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<()> {
    let dirs = Dirs::new(cfg.experiment.out_dir.clone())?;
    let seed = seed.unwrap_or(cfg.experiment.seeds[0]);
    let teacher_cfg = cfg.teacher_cfg();
    let train = cfg.train_corpus()?;
    let valid = cfg.valid_corpus()?;
    warn_dropped(&train, "training", cfg.train.batch_size, cfg.task.max_len);
    let data = TrainDataSplit {
        train: &train,
        valid: &valid,
    };
    let section = cfg.teacher_train_section();
    let tcfg = section.to_train_config(seed);
    let echo = json!({ "command": "train-teacher", "seed": seed, "experiment": cfg.echo() });

    let mut params = wd_core::model::init_params(&teacher_cfg, derive(seed, SALT_TEACHER_INIT))?;
    let outcome = train_plain(&mut params, &teacher_cfg, &data, &tcfg, "teacher")?;

    let ckpt = dirs.checkpoint("teacher.ckpt");
    save_model(&ckpt, &teacher_cfg, &params)?;
    write_curve(&dirs.curve("teacher.csv"), &outcome.curve, &echo)?;
    let report = eval_model(
        &params,
        &teacher_cfg,
        &valid,
        tcfg.batch_size,
        cfg.bench.sample_size,
        cfg.bench.repeats,
        echo.clone(),
    )?;
    let mut value = serde_json::to_value(&report)?;
    value["checkpoint_digest"] = json!(digest_file(&ckpt)?);
    value["final_valid_loss"] = json!(outcome.final_valid_loss);
    write_json(&dirs.report("teacher.json"), &value)?;
    println!(
        "teacher: accuracy {:.4}, bleu {:.2}, {:.1} sent/s, {} params -> {}",
        report.token_accuracy,
        report.bleu,
        report.sentences_per_second,
        report.params_count,
        ckpt.display()
    );
    Ok(())
}

/// Everything a single distillation run needs.
struct DistillCtx<'a> {
    teacher: Option<(&'a ModelConfig, &'a TransformerParams)>,
    cache: Option<&'a TeacherProbCache>,
    pseudo: Option<&'a Corpus>,
    train: &'a Corpus,
    valid: &'a Corpus,
    student_cfg: &'a ModelConfig,
    train_sec: &'a TrainSection,
    phase1_sec: &'a TrainSection,
    selected: SelectedClasses,
}

struct MethodRun {
    params: TransformerParams,
    generator: Option<Generator>,
    curves: Vec<(String, LossCurve)>,
}

fn run_method(ctx: &DistillCtx, method: Method, seed: u64) -> Result<MethodRun> {
    let real = TrainDataSplit {
        train: ctx.train,
        valid: ctx.valid,
    };
    let bundle = ctx.teacher.map(|(cfg, params)| TeacherBundle {
        params,
        cfg,
        probs: ctx.cache,
    });
    let student_init_seed = derive(seed, SALT_STUDENT_INIT);

    match method {
        Method::None => {
            let mut params = wd_core::model::init_params(ctx.student_cfg, student_init_seed)?;
            let tcfg = ctx.train_sec.to_train_config(seed);
            let out = train_plain(&mut params, ctx.student_cfg, &real, &tcfg, "student")?;
            Ok(MethodRun {
                params,
                generator: None,
                curves: vec![("student".into(), out.curve)],
            })
        }
        Method::Kd => {
            let pseudo = ctx.pseudo.ok_or_else(|| anyhow!("kd requires pseudo data"))?;
            let data = TrainDataSplit {
                train: pseudo,
                valid: ctx.valid,
            };
            let mut params = wd_core::model::init_params(ctx.student_cfg, student_init_seed)?;
            // Training from scratch keeps the full warmup.
            let mut tcfg = ctx.train_sec.to_train_config(seed);
            tcfg.phase2_warmup_factor = 1.0;
            let out = train_phase2(
                &mut params,
                ctx.student_cfg,
                bundle.as_ref(),
                &data,
                &tcfg,
            )?;
            Ok(MethodRun {
                params,
                generator: None,
                curves: vec![("kd".into(), out.curve)],
            })
        }
        Method::Wd => {
            let (teacher_cfg, teacher_params) =
                ctx.teacher.ok_or_else(|| anyhow!("wd requires a teacher"))?;
            let pseudo = ctx.pseudo.ok_or_else(|| anyhow!("wd requires pseudo data"))?;
            let data = TrainDataSplit {
                train: pseudo,
                valid: ctx.valid,
            };
            let mut gen = Generator::build(
                teacher_cfg,
                ctx.student_cfg,
                ctx.selected,
                derive(seed, SALT_GENERATOR),
            )?;
            let mut unselected =
                init_unselected(ctx.student_cfg, ctx.selected, student_init_seed)?;
            let p1_cfg = ctx.phase1_sec.to_train_config(seed);
            let p1 = train_phase1(
                &mut gen,
                bundle.as_ref().expect("teacher present"),
                &mut unselected,
                &data,
                &p1_cfg,
            )?;
            let mut params = assemble_student(&gen, teacher_params, &unselected)?;
            let p2_cfg = ctx.train_sec.to_train_config(seed);
            let p2 = train_phase2(&mut params, ctx.student_cfg, bundle.as_ref(), &data, &p2_cfg)?;
            Ok(MethodRun {
                params,
                generator: Some(gen),
                curves: vec![("phase1".into(), p1.curve), ("phase2".into(), p2.curve)],
            })
        }
        Method::Init => {
            let (teacher_cfg, teacher_params) =
                ctx.teacher.ok_or_else(|| anyhow!("init requires a teacher"))?;
            let mut params = init_baseline(teacher_params, teacher_cfg, ctx.student_cfg)?;
            let tcfg = ctx.train_sec.to_train_config(seed);
            let out = train_plain(&mut params, ctx.student_cfg, &real, &tcfg, "student")?;
            Ok(MethodRun {
                params,
                generator: None,
                curves: vec![("init".into(), out.curve)],
            })
        }
        Method::InitKd => {
            let (teacher_cfg, teacher_params) =
                ctx.teacher.ok_or_else(|| anyhow!("init+kd requires a teacher"))?;
            let pseudo = ctx
                .pseudo
                .ok_or_else(|| anyhow!("init+kd requires pseudo data"))?;
            let data = TrainDataSplit {
                train: pseudo,
                valid: ctx.valid,
            };
            let mut params = init_baseline(teacher_params, teacher_cfg, ctx.student_cfg)?;
            let mut tcfg = ctx.train_sec.to_train_config(seed);
            tcfg.phase2_warmup_factor = 1.0;
            let out = train_phase2(
                &mut params,
                ctx.student_cfg,
                bundle.as_ref(),
                &data,
                &tcfg,
            )?;
            Ok(MethodRun {
                params,
                generator: None,
                curves: vec![("init_kd".into(), out.curve)],
            })
        }
    }
}

pub fn cmd_distill(cfg: &ExperimentConfig, method: Method, seed: Option<u64>) -> Result<()> {
    let dirs = Dirs::new(cfg.experiment.out_dir.clone())?;
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => cfg.experiment.seeds.clone(),
    };
    let student_cfg = cfg.student_cfg();
    let train = cfg.train_corpus()?;
    let valid = cfg.valid_corpus()?;
    warn_dropped(&train, "training", cfg.train.batch_size, cfg.task.max_len);

    let teacher = if method.needs_teacher() {
        Some(load_teacher(&dirs, cfg)?)
    } else {
        None
    };
    // The pseudo corpus and the teacher's distributions depend only on the
    // teacher, so they are shared across seeds.
    let pseudo = if method.uses_pseudo_data() {
        let (tc, tp) = teacher.as_ref().expect("teacher loaded");
        Some(build_pseudo_corpus(
            tp,
            tc,
            &train.sources(),
            cfg.experiment.pseudo_decode.to_decode()?,
        )?)
    } else {
        None
    };
    let cache = match (&teacher, &pseudo) {
        (Some((tc, tp)), Some(ps)) if cfg.train.alpha < 1.0 => {
            Some(teacher_prob_cache(tp, tc, ps, cfg.train.batch_size)?)
        }
        _ => None,
    };

    let ctx = DistillCtx {
        teacher: teacher.as_ref().map(|(c, p)| (c, p)),
        cache: cache.as_ref(),
        pseudo: pseudo.as_ref(),
        train: &train,
        valid: &valid,
        student_cfg: &student_cfg,
        train_sec: &cfg.train,
        phase1_sec: &cfg.phase1_section(),
        selected: cfg.experiment.selected_classes,
    };

    let tag = method.file_tag();
    let mut accuracies = Vec::new();
    for &s in &seeds {
        let run = run_method(&ctx, method, s)?;
        let echo = json!({
            "command": "distill",
            "method": tag,
            "seed": s,
            "experiment": cfg.echo(),
        });
        let ckpt = dirs.checkpoint(&format!("student_{tag}_s{s}.ckpt"));
        save_model(&ckpt, &student_cfg, &run.params)?;
        if let Some(gen) = &run.generator {
            save_generator(&dirs.checkpoint(&format!("generator_s{s}.ckpt")), gen)?;
        }
        for (phase, curve) in &run.curves {
            let name = if run.curves.len() > 1 {
                format!("{tag}_s{s}_{phase}.csv")
            } else {
                format!("{tag}_s{s}.csv")
            };
            write_curve(&dirs.curve(&name), curve, &echo)?;
        }
        let report = eval_model(
            &run.params,
            &student_cfg,
            &valid,
            cfg.train.batch_size,
            cfg.bench.sample_size,
            cfg.bench.repeats,
            echo,
        )?;
        accuracies.push(report.token_accuracy);
        write_json(
            &dirs.report(&format!("{tag}_s{s}.json")),
            &serde_json::to_value(&report)?,
        )?;
        println!(
            "distill {tag} seed {s}: accuracy {:.4}, bleu {:.2}, {:.1} sent/s",
            report.token_accuracy, report.bleu, report.sentences_per_second
        );
    }
    let summary = json!({
        "command": "distill",
        "method": tag,
        "seeds": seeds,
        "token_accuracies": accuracies,
        "median_token_accuracy": median(&accuracies),
        "experiment": cfg.echo(),
    });
    write_json(&dirs.report(&format!("{tag}_summary.json")), &summary)?;
    println!(
        "distill {tag}: median accuracy {:.4} over {} seed(s)",
        median(&accuracies),
        accuracies.len()
    );
    Ok(())
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = Dirs::new(cfg.experiment.out_dir.clone())?;
    let (teacher_cfg, teacher_params) = load_teacher(&dirs, cfg)?;
    let student_cfg = cfg.student_cfg();
    let train = cfg.train_corpus()?;
    let valid = cfg.valid_corpus()?;
    let data = TrainDataSplit {
        train: &train,
        valid: &valid,
    };

    // Per-class generation without the distillation loss term: alpha is
    // forced to 1 everywhere in this table.
    let mut train_sec = cfg.train.clone();
    train_sec.alpha = 1.0;
    let mut phase1_sec = cfg.phase1_section();
    phase1_sec.alpha = 1.0;
    let echo = json!({
        "command": "ablate",
        "alpha": 1.0,
        "experiment": cfg.echo(),
    });

    let sets = [
        SelectedClasses::None,
        SelectedClasses::Encoder,
        SelectedClasses::Decoder,
        SelectedClasses::EmbedEnc,
        SelectedClasses::EmbedDec,
        SelectedClasses::Output,
        SelectedClasses::All,
    ];
    let mut csv = format!("# config: {}\n", serde_json::to_string(&echo)?);
    csv.push_str("selected,alpha,n_seeds,median_token_accuracy,median_valid_loss\n");
    for set in sets {
        let mut accs = Vec::new();
        let mut losses = Vec::new();
        for &seed in &cfg.experiment.seeds {
            let student_init_seed = derive(seed, SALT_STUDENT_INIT);
            let params = if set == SelectedClasses::None {
                // Plain student baseline row.
                let mut params =
                    wd_core::model::init_params(&student_cfg, student_init_seed)?;
                let tcfg = train_sec.to_train_config(seed);
                train_plain(&mut params, &student_cfg, &data, &tcfg, "student")?;
                params
            } else {
                let mut gen = Generator::build(
                    &teacher_cfg,
                    &student_cfg,
                    set,
                    derive(seed, SALT_GENERATOR),
                )?;
                let mut unselected = init_unselected(&student_cfg, set, student_init_seed)?;
                let bundle = TeacherBundle {
                    params: &teacher_params,
                    cfg: &teacher_cfg,
                    probs: None,
                };
                let p1_cfg = phase1_sec.to_train_config(seed);
                train_phase1(&mut gen, &bundle, &mut unselected, &data, &p1_cfg)?;
                let mut params = assemble_student(&gen, &teacher_params, &unselected)?;
                let p2_cfg = train_sec.to_train_config(seed);
                train_phase2(&mut params, &student_cfg, None, &data, &p2_cfg)?;
                params
            };
            accs.push(teacher_forced_accuracy(
                &params,
                &student_cfg,
                &valid,
                cfg.train.batch_size,
            )?);
            losses.push(wd_core::distill::validation_loss(
                &params,
                &student_cfg,
                &valid,
                cfg.train.batch_size,
            )?);
        }
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            set.name(),
            1.0,
            cfg.experiment.seeds.len(),
            median(&accs),
            median(&losses)
        ));
        println!("ablate {}: median accuracy {:.4}", set.name(), median(&accs));
    }
    let path = dirs.report("ablation.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("ablation table -> {}", path.display());
    Ok(())
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = Dirs::new(cfg.experiment.out_dir.clone())?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| anyhow!("config has no [sweep] section"))?;
    let method = match sweep.method.as_str() {
        "none" => Method::None,
        "kd" => Method::Kd,
        "wd" => Method::Wd,
        "init" => Method::Init,
        "init+kd" => Method::InitKd,
        other => bail!("unknown sweep method {other:?}"),
    };
    // The teacher reference row appears whenever a teacher exists; methods
    // that distill require it.
    let teacher = if method.needs_teacher() || dirs.checkpoint("teacher.ckpt").exists() {
        Some(load_teacher(&dirs, cfg)?)
    } else {
        None
    };
    let train = cfg.train_corpus()?;
    let valid = cfg.valid_corpus()?;
    let max_steps = cfg.task.max_len - 1;
    let bench_sample: Vec<Vec<u32>> = valid
        .sources()
        .into_iter()
        .take(cfg.bench.sample_size.max(1))
        .collect();

    let pseudo = match (&teacher, method.uses_pseudo_data()) {
        (Some((tc, tp)), true) => Some(build_pseudo_corpus(
            tp,
            tc,
            &train.sources(),
            cfg.experiment.pseudo_decode.to_decode()?,
        )?),
        _ => None,
    };
    let cache = match (&teacher, &pseudo) {
        (Some((tc, tp)), Some(ps)) if cfg.train.alpha < 1.0 => {
            Some(teacher_prob_cache(tp, tc, ps, cfg.train.batch_size)?)
        }
        _ => None,
    };

    let echo = json!({
        "command": "sweep",
        "kind": sweep.kind,
        "method": sweep.method,
        "experiment": cfg.echo(),
    });
    let mut csv = format!("# config: {}\n", serde_json::to_string(&echo)?);
    csv.push_str(
        "row,lr,warmup,depth,width,seed,token_accuracy,sents_per_s,params,speedup\n",
    );

    // Teacher reference row: speedup is normalized to exactly 1x.
    let teacher_speed = match &teacher {
        Some((tc, tp)) => {
            let bench = bench_decode(tp, tc, &bench_sample, max_steps, cfg.bench.repeats)?;
            let acc = teacher_forced_accuracy(tp, tc, &valid, cfg.train.batch_size)?;
            csv.push_str(&format!(
                "teacher,,,{},{},{},{:.6},{:.3},{},{:.2}\n",
                tc.enc_depth,
                tc.width,
                cfg.experiment.seeds[0],
                acc,
                bench.median,
                tp.param_count(),
                1.00
            ));
            Some(bench.median)
        }
        None => None,
    };

    let cells: Vec<(Option<f64>, Option<usize>, Option<usize>, Option<usize>)> = match sweep.kind {
        SweepKind::LrWarmup => {
            if sweep.lrs.is_empty() || sweep.warmups.is_empty() {
                bail!("lr_warmup sweep needs non-empty lrs and warmups");
            }
            sweep
                .lrs
                .iter()
                .flat_map(|&lr| sweep.warmups.iter().map(move |&w| (Some(lr), Some(w), None, None)))
                .collect()
        }
        SweepKind::DepthWidth => {
            if sweep.depths.is_empty() || sweep.widths.is_empty() {
                bail!("depth_width sweep needs non-empty depths and widths");
            }
            sweep
                .depths
                .iter()
                .flat_map(|&d| sweep.widths.iter().map(move |&w| (None, None, Some(d), Some(w))))
                .collect()
        }
    };

    for (lr, warmup, depth, width) in cells {
        let mut train_sec = cfg.train.clone();
        if let Some(lr) = lr {
            train_sec.base_lr = lr;
        }
        if let Some(w) = warmup {
            train_sec.warmup_steps = w;
        }
        let mut student_cfg = cfg.student_cfg();
        if let (Some(d), Some(w)) = (depth, width) {
            student_cfg.enc_depth = d;
            student_cfg.dec_depth = d;
            student_cfg.width = w;
            student_cfg.ffn_hidden = 4 * w;
            if w % student_cfg.heads != 0 {
                bail!(
                    "sweep width {w} not divisible by student heads {}",
                    student_cfg.heads
                );
            }
        }
        let phase1_sec = cfg.phase1_section();
        let ctx = DistillCtx {
            teacher: teacher.as_ref().map(|(c, p)| (c, p)),
            cache: cache.as_ref(),
            pseudo: pseudo.as_ref(),
            train: &train,
            valid: &valid,
            student_cfg: &student_cfg,
            train_sec: &train_sec,
            phase1_sec: &phase1_sec,
            selected: cfg.experiment.selected_classes,
        };
        for &seed in &cfg.experiment.seeds {
            let run = run_method(&ctx, method, seed)?;
            let acc =
                teacher_forced_accuracy(&run.params, &student_cfg, &valid, train_sec.batch_size)?;
            let bench = bench_decode(
                &run.params,
                &student_cfg,
                &bench_sample,
                max_steps,
                cfg.bench.repeats,
            )?;
            let speedup = teacher_speed.map(|t| bench.median / t);
            csv.push_str(&format!(
                "cell,{},{},{},{},{},{:.6},{:.3},{},{}\n",
                lr.map(|v| v.to_string()).unwrap_or_default(),
                warmup.map(|v| v.to_string()).unwrap_or_default(),
                depth.map(|v| v.to_string()).unwrap_or_else(|| student_cfg.enc_depth.to_string()),
                width.map(|v| v.to_string()).unwrap_or_else(|| student_cfg.width.to_string()),
                seed,
                acc,
                bench.median,
                run.params.param_count(),
                speedup
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_default(),
            ));
        }
    }
    let path = dirs.report("sweep.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("sweep table -> {}", path.display());
    Ok(())
}

pub fn cmd_bench(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let dirs = Dirs::new(cfg.experiment.out_dir.clone())?;
    let valid = cfg.valid_corpus()?;
    let max_steps = cfg.task.max_len - 1;
    let sample: Vec<Vec<u32>> = valid
        .sources()
        .into_iter()
        .take(cfg.bench.sample_size.max(1))
        .collect();
    let repeats = cfg.bench.repeats;

    let bench_one = |path: &Path| -> Result<(ModelConfig, usize, BenchResult)> {
        let (model_cfg, params) = load_model(path)?;
        let res = bench_decode(&params, &model_cfg, &sample, max_steps, repeats)?;
        Ok((model_cfg, params.param_count(), res))
    };

    if let Some(path) = checkpoint {
        if !path.exists() {
            bail!("checkpoint {} not found", path.display());
        }
        let (model_cfg, n_params, res) = bench_one(&path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        let value = json!({
            "command": "bench",
            "checkpoint": path.display().to_string(),
            "model": model_cfg,
            "params_count": n_params,
            "sentences_per_second": res.median,
            "per_run": res.per_run,
            "sample_size": sample.len(),
            "repeats": repeats,
            "experiment": cfg.echo(),
        });
        let out = dirs.report(&format!("bench_{stem}.json"));
        write_json(&out, &value)?;
        println!(
            "bench {stem}: {:.2} sent/s (median of {repeats}) -> {}",
            res.median,
            out.display()
        );
        return Ok(());
    }

    // Default: the teacher plus every student checkpoint in the experiment.
    let teacher_path = dirs.checkpoint("teacher.ckpt");
    if !teacher_path.exists() {
        bail!(
            "no --checkpoint given and {} not found",
            teacher_path.display()
        );
    }
    let (teacher_cfg, teacher_params, teacher_res) = {
        let (c, n, r) = bench_one(&teacher_path)?;
        (c, n, r)
    };
    let mut students = Vec::new();
    let ckpt_dir = dirs.checkpoint("");
    let mut names: Vec<_> = fs::read_dir(&ckpt_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("student_") && n.ends_with(".ckpt"))
        .collect();
    names.sort();
    for name in names {
        let (model_cfg, n_params, res) = bench_one(&dirs.checkpoint(&name))?;
        println!(
            "bench {name}: {:.2} sent/s, speedup {:.2}x",
            res.median,
            res.median / teacher_res.median
        );
        students.push(json!({
            "checkpoint": name,
            "model": model_cfg,
            "params_count": n_params,
            "sentences_per_second": res.median,
            "per_run": res.per_run,
            "speedup": res.median / teacher_res.median,
        }));
    }
    let value = json!({
        "command": "bench",
        "sample_size": sample.len(),
        "repeats": repeats,
        "teacher": {
            "model": teacher_cfg,
            "params_count": teacher_params,
            "sentences_per_second": teacher_res.median,
            "per_run": teacher_res.per_run,
            "speedup": 1.0,
        },
        "students": students,
        "experiment": cfg.echo(),
    });
    let out = dirs.report("bench.json");
    write_json(&out, &value)?;
    println!(
        "bench teacher: {:.2} sent/s -> {}",
        teacher_res.median,
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: PathBuf) -> Result<()> {
    let dirs = Dirs::new(cfg.experiment.out_dir.clone())?;
    if !checkpoint.exists() {
        bail!("checkpoint {} not found", checkpoint.display());
    }
    let (model_cfg, params) = load_model(&checkpoint)?;
    let valid = cfg.valid_corpus()?;
    let echo = json!({
        "command": "eval",
        "checkpoint": checkpoint.display().to_string(),
        "experiment": cfg.echo(),
    });
    let report = eval_model(
        &params,
        &model_cfg,
        &valid,
        cfg.train.batch_size,
        cfg.bench.sample_size.min(50),
        1,
        echo,
    )?;
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let out = dirs.report(&format!("eval_{stem}.json"));
    write_json(&out, &serde_json::to_value(&report)?)?;
    println!(
        "eval {stem}: accuracy {:.4}, bleu {:.2} -> {}",
        report.token_accuracy,
        report.bleu,
        out.display()
    );
    Ok(())
}

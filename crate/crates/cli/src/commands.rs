//! The pipeline verbs. Each one resolves the config, locks the output
//! directory and writes its artifacts there.
//!
//! CSV columns:
//! - `{teacher,intermediate}_log.csv`: `epoch,train_loss,train_accuracy,test_accuracy,config_hash`
//! - `distill_log.csv`: `epoch,mode,ce,attention,total,train_accuracy,test_accuracy,config_hash`;
//!   row 0 holds the starting accuracy with empty loss fields
//! - `calibration.csv`: `layer,threshold,max_preactivation`
//! - `<ckpt>_eval*.csv`: `role,time_steps,samples,accuracy,config_hash`
//! - `<ckpt>_energy_T<T>.csv`: `layer,neurons,total_spikes,avg_spikes_per_neuron`

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use spikedistill::ann::{self, TrainConfig};
use spikedistill::checkpoint::{Checkpoint, CheckpointMeta};
use spikedistill::conversion::{self, CalibrationConfig};
use spikedistill::datasets::Dataset;
use spikedistill::distill::{self, AttentionMode};
use spikedistill::metrics::EnergyReport;
use spikedistill::network::{Network, Role};
use spikedistill::optim::Optimizer;
use spikedistill::rng::Rng;
use spikedistill::snn::evaluate_snn;

use crate::config::RunConfig;
use crate::UsageError;

const INIT_STREAM: u64 = 0x1417;

/// Removes the output directory's lock file when dropped.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(UsageError(format!(
                "{} is locked by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))
            .into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub seed: u64,
    pub out: PathBuf,
    _lock: Lock,
}

impl Run {
    /// Locks the output directory and records the resolved config as
    /// `<verb>.cfg`, which can be passed back with `--config` to replay.
    pub fn start(cfg: RunConfig, verb: &str) -> Result<Run> {
        let seed = cfg.seed()?;
        let out = cfg.out_dir();
        let lock = Lock::acquire(&out)?;
        let hash = cfg.hash();
        let text = format!("# config hash {hash}\n{}", cfg.render());
        std::fs::write(out.join(format!("{verb}.cfg")), text)?;
        info!("{verb}: config hash {hash}, output {}", out.display());
        Ok(Run {
            cfg,
            hash,
            seed,
            out,
            _lock: lock,
        })
    }

    fn meta(&self, epoch: usize, leak: Option<f32>, accuracy: Option<f64>) -> CheckpointMeta {
        CheckpointMeta {
            epoch,
            seed: self.seed,
            config_hash: self.hash.clone(),
            leak,
            accuracy,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

struct Csv {
    w: BufWriter<File>,
    path: PathBuf,
}

impl Csv {
    fn create(path: PathBuf, header: &str) -> Result<Csv> {
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut csv = Csv {
            w: BufWriter::new(f),
            path,
        };
        csv.row(header)?;
        Ok(csv)
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "{line}")
            .and_then(|_| self.w.flush())
            .with_context(|| format!("writing {}", self.path.display()))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn head(data: &Dataset, n: usize) -> Dataset {
    if n == 0 || n >= data.len() {
        data.clone()
    } else {
        data.head(n)
    }
}

fn threshold_setting(ck: &Checkpoint) -> String {
    match &ck.calibration {
        Some(c) if c.percentile < 100.0 => format!("p{}", c.percentile),
        _ => "max".to_string(),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
}

fn train_stage(run: &Run, stage: &str) -> Result<PathBuf> {
    let cfg = &run.cfg;
    let (train, test) = cfg.dataset()?.load()?;
    let input = train.image_shape.to_vec();
    let (spec, stage_id) = match stage {
        "teacher" => (cfg.teacher_spec(&input, train.classes)?, 0),
        _ => (cfg.intermediate_spec(&input, train.classes)?, 1),
    };
    let net = Network::init(spec, &mut Rng::derived(run.seed, &[INIT_STREAM, stage_id]))?;
    info!(
        "{stage}: {} parameters, {} train / {} test images",
        net.parameter_count(),
        train.len(),
        test.len()
    );
    let tc = TrainConfig {
        epochs: cfg.epochs(stage)?,
        batch_size: cfg.batch_size(stage)?,
        optimizer: cfg.optimizer(stage)?,
        seed: run.seed,
        eval_batch_size: 100,
    };
    if tc.epochs == 0 {
        bail!(UsageError(format!("{stage}.epochs must be positive")));
    }
    let mut log = Csv::create(
        run.path(&format!("{stage}_log.csv")),
        "epoch,train_loss,train_accuracy,test_accuracy,config_hash",
    )?;
    let mut io_err = None;
    let on_epoch = |l: &ann::EpochLog| {
        info!(
            "{stage} epoch {}: loss {:.4}, train {:.4}, test {:.4}",
            l.epoch, l.train_loss, l.train_accuracy, l.test_accuracy
        );
        let line = format!("{},{},{},{},{}", l.epoch, l.train_loss, l.train_accuracy, l.test_accuracy, run.hash);
        if let Err(e) = log.row(&line) {
            io_err.get_or_insert(e);
        }
    };
    let outcome = if stage == "teacher" {
        ann::train_teacher(net, &train, &test, &tc, on_epoch)?
    } else {
        ann::train_intermediate(net, &train, &test, &tc, on_epoch)?
    };
    if let Some(e) = io_err {
        return Err(e);
    }
    let path = run.path(&format!("{stage}.ckpt"));
    let meta = run.meta(outcome.best_epoch, None, Some(outcome.best_accuracy));
    Checkpoint::new(outcome.best, None, meta)?.save(&path)?;
    println!(
        "{stage}: best test accuracy {:.4} at epoch {} -> {}",
        outcome.best_accuracy,
        outcome.best_epoch,
        path.display()
    );
    Ok(path)
}

pub fn train_teacher(run: &Run) -> Result<PathBuf> {
    train_stage(run, "teacher")
}

pub fn train_intermediate(run: &Run) -> Result<PathBuf> {
    train_stage(run, "intermediate")
}

pub fn convert(run: &Run, checkpoint: &Path) -> Result<PathBuf> {
    let cfg = &run.cfg;
    let ann_ck = load_checkpoint(checkpoint)?;
    if ann_ck.network.spec.role == Role::StudentSnn {
        bail!(UsageError(format!("{} is already a spiking network", checkpoint.display())));
    }
    if let Err(violations) = conversion::validate_convertible(&ann_ck.network.spec) {
        return Err(spikedistill::Error::NotConvertible(violations).into());
    }
    let (train, _) = cfg.dataset()?.load()?;
    let n = cfg.calibration_samples()?.min(train.len());
    let snn = cfg.snn()?;
    let cc = CalibrationConfig {
        time_steps: cfg.conversion_steps()?,
        leak: snn.leak,
        percentile: cfg.percentile()?,
        coding: cfg.coding()?,
        seed: run.seed,
    };
    info!("calibrating on {n} images for {} steps", cc.time_steps);
    let report = conversion::balance_thresholds(&ann_ck.network, &train.items[..n], &cc)?;
    let mut student = conversion::convert(&ann_ck, &report)?;
    student.meta = run.meta(ann_ck.meta.epoch, Some(snn.leak), ann_ck.meta.accuracy);
    let mut csv = Csv::create(run.path("calibration.csv"), "layer,threshold,max_preactivation")?;
    println!("layer  threshold  max preactivation");
    for ((l, t), m) in report.layers.iter().zip(&report.thresholds).zip(&report.maxima) {
        csv.row(&format!("{l},{t},{m}"))?;
        println!("{l:>5}  {t:>9.5}  {m:>9.5}");
    }
    let path = run.path("student.ckpt");
    student.save(&path)?;
    println!("student -> {}", path.display());
    Ok(path)
}

pub struct DistillOutcome {
    pub path: PathBuf,
    pub mode: &'static str,
    pub start_accuracy: f64,
    /// Test accuracy after each epoch.
    pub accuracy: Vec<f64>,
    pub metrics: Vec<distill::EpochMetrics>,
}

pub fn distill(run: &Run, teacher: &Path, student: &Path) -> Result<DistillOutcome> {
    let cfg = &run.cfg;
    let teacher_ck = load_checkpoint(teacher)?;
    let student_ck = load_checkpoint(student)?;
    if student_ck.network.spec.role != Role::StudentSnn {
        bail!(UsageError(format!("{} is not a converted student", student.display())));
    }
    if teacher_ck.network.spec.role == Role::StudentSnn {
        bail!(UsageError(format!("{} is a spiking network, not a teacher", teacher.display())));
    }
    let (train, test) = cfg.dataset()?.load()?;
    let dc = cfg.distill()?;
    let snn = cfg.snn()?;
    if let Some(l) = student_ck.meta.leak.filter(|&l| l != snn.leak) {
        warn!("student was converted with leak {l}, training with {}", snn.leak);
    }
    let mode = if dc.alpha == 0.0 {
        "hybrid"
    } else {
        match dc.mode {
            AttentionMode::Activation => "lasnn-activation",
            AttentionMode::Gradient => "lasnn-gradient",
        }
    };
    if dc.alpha > 0.0 {
        distill::pair_layers(&teacher_ck.network.spec, &student_ck.network.spec, &dc.levels, dc.pairs.as_deref())?;
    }
    let thresholds = student_ck.thresholds().to_vec();
    let mut net = student_ck.network.clone();
    let mut opt = Optimizer::new(cfg.optimizer("distill")?);
    let epochs = cfg.epochs("distill")?;
    let eval = |net: &Network| evaluate_snn(net, &thresholds, &test, &snn, dc.coding, run.seed, false);

    let start = eval(&net)?.accuracy;
    println!("{mode}: starting test accuracy {start:.4}");
    let mut best = (start, 0usize, net.clone());
    let (mut accuracy, mut metrics) = (Vec::new(), Vec::new());
    let mut log = Csv::create(
        run.path("distill_log.csv"),
        "epoch,mode,ce,attention,total,train_accuracy,test_accuracy,config_hash",
    )?;
    log.row(&format!("0,{mode},,,,,{start},{}", run.hash))?;
    for e in 0..epochs {
        let m = if dc.alpha == 0.0 {
            distill::hybrid_epoch(&mut net, &thresholds, &train, dc.coding, dc.batch_size, dc.seed, &snn, &mut opt, e)?
        } else {
            distill::distill_epoch(&teacher_ck.network, &mut net, &thresholds, &train, &dc, &snn, &mut opt, e)?
        };
        let acc = eval(&net)?.accuracy;
        log.row(&format!(
            "{},{mode},{},{},{},{},{acc},{}",
            e + 1,
            m.ce,
            m.attention,
            m.total,
            m.train_accuracy,
            run.hash
        ))?;
        println!(
            "{mode} epoch {}: ce {:.4}, attention {:.4}, total {:.4}, train {:.4}, test {acc:.4}",
            e + 1,
            m.ce,
            m.attention,
            m.total,
            m.train_accuracy
        );
        if acc > best.0 {
            best = (acc, e + 1, net.clone());
        }
        accuracy.push(acc);
        metrics.push(m);
    }
    let (acc, epoch, net) = best;
    let ck = Checkpoint::new(net, student_ck.calibration.clone(), run.meta(epoch, Some(snn.leak), Some(acc)))?;
    let path = run.path("distilled.ckpt");
    ck.save(&path)?;
    println!("best test accuracy {acc:.4} after {epoch} epochs -> {}", path.display());
    Ok(DistillOutcome {
        path,
        mode,
        start_accuracy: start,
        accuracy,
        metrics,
    })
}

pub struct Evaluation {
    pub accuracy: f64,
    pub energy: Option<EnergyReport>,
}

pub fn evaluate(run: &Run, checkpoint: &Path) -> Result<Evaluation> {
    let ck = load_checkpoint(checkpoint)?;
    let (_, test) = run.cfg.dataset()?.load()?;
    let data = head(&test, run.cfg.eval_samples()?);
    let name = stem(checkpoint);
    let header = "role,time_steps,samples,accuracy,config_hash";
    let role = ck.network.spec.role;
    if role != Role::StudentSnn {
        let (acc, _) = ann::evaluate_ann(&ck.network, &data, 100)?;
        let mut csv = Csv::create(run.path(&format!("{name}_eval.csv")), header)?;
        csv.row(&format!("{role},0,{},{acc},{}", data.len(), run.hash))?;
        println!("{role}: accuracy {acc:.4} on {} images", data.len());
        return Ok(Evaluation {
            accuracy: acc,
            energy: None,
        });
    }
    let snn = run.cfg.snn()?;
    let t = snn.time_steps;
    let ev = evaluate_snn(&ck.network, ck.thresholds(), &data, &snn, run.cfg.coding()?, run.seed, false)?;
    let report = ev.tally.report(&threshold_setting(&ck))?;
    let mut csv = Csv::create(run.path(&format!("{name}_eval_T{t}.csv")), header)?;
    csv.row(&format!("{role},{t},{},{},{}", data.len(), ev.accuracy, run.hash))?;
    std::fs::write(run.path(&format!("{name}_energy_T{t}.csv")), report.to_csv())?;
    println!("{role}: accuracy {:.4} on {} images at T = {t}", ev.accuracy, data.len());
    print!("{}", report.summary());
    Ok(Evaluation {
        accuracy: ev.accuracy,
        energy: Some(report),
    })
}

pub fn energy_report(run: &Run, checkpoint: &Path) -> Result<EnergyReport> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.network.spec.role != Role::StudentSnn {
        bail!(UsageError(format!(
            "{} is a {} network; spike reports need a spiking student",
            checkpoint.display(),
            ck.network.spec.role
        )));
    }
    let (_, test) = run.cfg.dataset()?.load()?;
    let data = head(&test, run.cfg.eval_samples()?);
    let snn = run.cfg.snn()?;
    let t = snn.time_steps;
    let ev = evaluate_snn(&ck.network, ck.thresholds(), &data, &snn, run.cfg.coding()?, run.seed, false)?;
    let report = ev.tally.report(&threshold_setting(&ck))?;
    let name = stem(checkpoint);
    std::fs::write(run.path(&format!("{name}_energy_T{t}.csv")), report.to_csv())?;
    let summary = format!("config_hash = {}\n{}", run.hash, report.summary());
    std::fs::write(run.path(&format!("{name}_energy_T{t}.txt")), &summary)?;
    print!("{summary}");
    Ok(report)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use advtext::adversary::FreeLbConfig;
use advtext::checkpoint::{load_model, save_model};
use advtext::data::{build_vocab, load_tsv, Dataset, RawDataset, Vocabulary};
use advtext::eval::{
    accuracy, reconstruction_accuracy, reconstruction_rows, robustness_report, RobustnessReport,
};
use advtext::model::{ModelConfig, ModelParams};
use advtext::trainer::{Mode, TrainHistory, Trainer};

use crate::config::CliConfig;
use crate::error::CliError;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", path.display())))
}

fn load_split(cfg: &CliConfig, key: &str) -> Result<Option<RawDataset>, CliError> {
    match cfg.path(key) {
        Some(p) => Ok(Some(load_tsv(&p)?)),
        None => Ok(None),
    }
}

/// What `cmd_train` reports back, also written to `summary.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub best_val_acc: Option<f64>,
    pub best_step: Option<usize>,
    pub final_val_acc: Option<f64>,
    pub out_dir: PathBuf,
}

impl TrainSummary {
    fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "best_val_acc = {}\nbest_step = {}\nfinal_val_acc = {}\n",
            opt(self.best_val_acc.map(|v| v.to_string())),
            opt(self.best_step.map(|v| v.to_string())),
            opt(self.final_val_acc.map(|v| v.to_string())),
        )
    }
}

pub fn cmd_train(cfg: &CliConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let train_cfg = cfg.train_config()?;
    let train_path = cfg
        .path("data.train")
        .ok_or_else(|| CliError::config("data.train is not set"))?;
    let train_raw = load_tsv(&train_path)?;
    let dev_raw = load_split(cfg, "data.dev")?;

    let vocab = build_vocab(
        &train_raw,
        cfg.get("data.min_freq")?,
        cfg.get("data.max_vocab")?,
    )?;
    let vocab_size = match cfg.get::<usize>("model.vocab_size")? {
        0 => vocab.len(),
        v if v < vocab.len() => {
            return Err(CliError::config(format!(
                "model.vocab_size {v} is smaller than the built vocabulary ({})",
                vocab.len()
            )))
        }
        v => v,
    };
    let max_len: usize = cfg.get("model.max_len")?;
    let num_classes = train_raw
        .num_classes
        .max(dev_raw.as_ref().map_or(0, |d| d.num_classes));
    let model = ModelConfig {
        vocab_size,
        embed_dim: cfg.get("model.embed_dim")?,
        hidden_dim: cfg.get("model.hidden_dim")?,
        num_classes,
        max_len,
        reconstructor: train_cfg.mode == Mode::Rar,
    };
    model.validate()?;
    let train = Dataset {
        num_classes,
        ..Dataset::from_raw(&train_raw, &vocab, max_len)
    };
    let dev = dev_raw.map(|d| Dataset {
        num_classes,
        ..Dataset::from_raw(&d, &vocab, max_len)
    });

    let out = cfg.out_dir();
    create_dir(&out)?;
    vocab.save(out.join("vocab.txt"))?;
    write(&out.join("config.txt"), cfg.to_text())?;

    let mut trainer = Trainer::new(model, train_cfg)?;
    for w in &trainer.history.warnings {
        eprintln!("warning: {w}");
    }
    let (latest, best_path) = (out.join("latest.ckpt"), out.join("best.ckpt"));
    trainer.run(&train, dev.as_ref(), |t| {
        let r = t.history.records.last().expect("evaluation follows a step");
        eprintln!(
            "step {:>6}  l_c {:.5}  val_acc {:.4}",
            t.step,
            r.l_c,
            r.val_acc.unwrap_or(f64::NAN)
        );
        t.to_checkpoint().save(&latest)?;
        if let Some(b) = &t.best {
            if b.step + 1 == t.step {
                save_model(&b.params, &best_path)?;
            }
        }
        Ok(())
    })?;

    save_model(&trainer.params, &out.join("final.ckpt"))?;
    trainer.to_checkpoint().save(&latest)?;
    if trainer.best.is_none() {
        save_model(&trainer.params, &best_path)?;
    }
    trainer.history.write_csv(&out.join("history.csv"))?;
    let summary = TrainSummary {
        best_val_acc: trainer.best.as_ref().map(|b| b.val_acc),
        best_step: trainer.best.as_ref().map(|b| b.step),
        final_val_acc: final_accuracy(&trainer.history),
        out_dir: out.clone(),
    };
    write(&out.join("summary.txt"), summary.to_text())?;
    Ok(summary)
}

fn final_accuracy(h: &TrainHistory) -> Option<f64> {
    h.records.last().and_then(|r| r.val_acc)
}

struct Loaded {
    params: ModelParams,
    vocab: Vocabulary,
    data: Dataset,
}

fn checkpoint_path(cfg: &CliConfig) -> PathBuf {
    cfg.path("checkpoint")
        .unwrap_or_else(|| cfg.out_dir().join("best.ckpt"))
}

fn load_for_eval(cfg: &CliConfig) -> Result<Loaded, CliError> {
    cfg.validate()?;
    let ck = checkpoint_path(cfg);
    let params = load_model(&ck)?;
    let vocab_path = cfg.path("vocab").unwrap_or_else(|| {
        ck.parent()
            .map(|p| p.join("vocab.txt"))
            .unwrap_or_else(|| PathBuf::from("vocab.txt"))
    });
    let vocab = Vocabulary::load(&vocab_path)?;
    check_compatible(cfg, &params.config, &vocab)?;
    let split = cfg.raw("eval.split");
    let key = format!("data.{split}");
    let raw = load_split(cfg, &key)?
        .ok_or_else(|| CliError::config(format!("{key} is not set (eval.split = {split})")))?;
    if raw.num_classes > params.config.num_classes {
        return Err(CliError::config(format!(
            "{key} has {} classes but the checkpoint predicts {}",
            raw.num_classes, params.config.num_classes
        )));
    }
    let data = Dataset {
        num_classes: params.config.num_classes,
        ..Dataset::from_raw(&raw, &vocab, params.config.max_len)
    };
    Ok(Loaded {
        params,
        vocab,
        data,
    })
}

/// The checkpoint must agree with the configured model shape and vocabulary.
fn check_compatible(cfg: &CliConfig, m: &ModelConfig, vocab: &Vocabulary) -> Result<(), CliError> {
    let mut expected = vec![
        (
            "model.embed_dim",
            cfg.get::<usize>("model.embed_dim")?,
            m.embed_dim,
        ),
        (
            "model.hidden_dim",
            cfg.get("model.hidden_dim")?,
            m.hidden_dim,
        ),
        ("model.max_len", cfg.get("model.max_len")?, m.max_len),
    ];
    let v: usize = cfg.get("model.vocab_size")?;
    if v != 0 {
        expected.push(("model.vocab_size", v, m.vocab_size));
    }
    for (key, want, got) in expected {
        if want != got {
            return Err(CliError::config(format!(
                "incompatible checkpoint: {key} is {want} in the config but {got} in the checkpoint"
            )));
        }
    }
    if vocab.len() > m.vocab_size {
        return Err(CliError::config(format!(
            "incompatible checkpoint: vocabulary has {} entries, model embeds {}",
            vocab.len(),
            m.vocab_size
        )));
    }
    Ok(())
}

fn report_path(cfg: &CliConfig) -> PathBuf {
    cfg.path("report")
        .unwrap_or_else(|| cfg.out_dir().join("report.csv"))
}

fn write_reports(cfg: &CliConfig, reports: &[RobustnessReport]) -> Result<(), CliError> {
    let mut csv = format!("{}\n", RobustnessReport::CSV_HEADER);
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        println!("{r}");
    }
    let path = report_path(cfg);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&path, csv)
}

/// Clean accuracy only.
pub fn cmd_eval(cfg: &CliConfig) -> Result<Vec<RobustnessReport>, CliError> {
    let l = load_for_eval(cfg)?;
    let reports = vec![RobustnessReport::clean_only(accuracy(&l.params, &l.data)?)];
    write_reports(cfg, &reports)?;
    Ok(reports)
}

/// One full report per configured attack epsilon.
pub fn cmd_attack(cfg: &CliConfig) -> Result<Vec<RobustnessReport>, CliError> {
    let l = load_for_eval(cfg)?;
    let reports = cfg
        .attacks()?
        .iter()
        .map(|a| robustness_report(&l.params, &l.data, a))
        .collect::<Result<Vec<_>, _>>()?;
    write_reports(cfg, &reports)?;
    Ok(reports)
}

/// Writes `original<TAB>reconstructed[<TAB>pred_orig<TAB>pred_recon]` per
/// example and returns the token match rate.
pub fn cmd_reconstruct(cfg: &CliConfig) -> Result<f64, CliError> {
    let l = load_for_eval(cfg)?;
    if l.params.reconstructor.is_none() {
        return Err(CliError::config(format!(
            "{}: no reconstructor head (train with mode = rar)",
            checkpoint_path(cfg).display()
        )));
    }
    let attacks = cfg.attacks()?;
    let [attack] = attacks.as_slice() else {
        return Err(CliError::config(
            "reconstruct takes a single attack.epsilon",
        ));
    };
    let baseline = cfg
        .path("baseline_checkpoint")
        .map(|p| load_model(&p))
        .transpose()?;
    let rows = reconstruction_rows(&l.params, &l.data, attack, &l.vocab, baseline.as_ref())?;
    let text: String = rows.iter().map(|r| r.to_tsv() + "\n").collect();
    let path = cfg
        .path("output")
        .unwrap_or_else(|| cfg.out_dir().join("reconstruct.tsv"));
    write(&path, text)?;
    let matched = reconstruction_accuracy(&l.params, &l.data, attack)?;
    println!("{} lines written to {}", rows.len(), path.display());
    println!("token match {matched:.4}");
    Ok(matched)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub index: usize,
    pub point: FreeLbConfig,
    pub outcome: Result<f64, String>,
}

pub const GRID_CSV_HEADER: &str = "rank,point,gamma,alpha,epsilon,n_steps,val_acc,status";

/// Successful points first by accuracy (descending), ties to smaller
/// n_steps, then smaller alpha, then listed order; failed points last.
pub fn rank(results: &mut [GridResult]) {
    results.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => y
            .total_cmp(x)
            .then(a.point.n_steps.cmp(&b.point.n_steps))
            .then(a.point.alpha.total_cmp(&b.point.alpha))
            .then(a.index.cmp(&b.index)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.index.cmp(&b.index),
    });
}

fn point_config(cfg: &CliConfig, index: usize, p: &FreeLbConfig) -> Result<CliConfig, CliError> {
    let mut c = cfg.clone();
    c.set("freelb.gamma", &p.gamma.to_string())?;
    c.set("freelb.alpha", &p.alpha.to_string())?;
    c.set("freelb.epsilon", &p.epsilon.to_string())?;
    c.set("freelb.n_steps", &p.n_steps.to_string())?;
    for key in ["grid.gamma", "grid.alpha", "grid.epsilon", "grid.n_steps"] {
        c.set(key, "")?;
    }
    let dir = cfg.out_dir().join("grid").join(format!("point-{index:03}"));
    c.set("out_dir", &dir.display().to_string())?;
    Ok(c)
}

/// Trains every grid point (up to `jobs` at a time), then ranks them.
pub fn cmd_gridsearch(cfg: &CliConfig, jobs: usize) -> Result<Vec<GridResult>, CliError> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    if cfg.path("data.dev").is_none() {
        return Err(CliError::config(
            "gridsearch ranks by validation accuracy; set data.dev",
        ));
    }
    let points = grid.points();
    let configs = points
        .iter()
        .enumerate()
        .map(|(i, p)| point_config(cfg, i, p))
        .collect::<Result<Vec<_>, _>>()?;

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(points.len()));
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let outcome = cmd_train(&configs[i]).and_then(|s| {
                    s.best_val_acc
                        .ok_or_else(|| CliError::runtime("no validation accuracy recorded"))
                });
                if let Err(e) = &outcome {
                    eprintln!("grid point {i} failed: {e}");
                }
                results
                    .lock()
                    .expect("no panics while holding the lock")
                    .push(GridResult {
                        index: i,
                        point: points[i],
                        outcome: outcome.map_err(|e| e.to_string()),
                    });
            });
        }
    });
    let mut results = results.into_inner().expect("workers finished");
    rank(&mut results);

    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut csv = format!("{GRID_CSV_HEADER}\n");
    for (rank, r) in results.iter().enumerate() {
        let (acc, status) = match &r.outcome {
            Ok(a) => (a.to_string(), "ok".to_string()),
            Err(e) => (
                String::new(),
                format!("failed: {}", e.replace([',', '\n'], " ")),
            ),
        };
        let p = r.point;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{acc},{status}\n",
            rank + 1,
            r.index,
            p.gamma,
            p.alpha,
            p.epsilon,
            p.n_steps
        ));
    }
    write(&out.join("grid.csv"), csv)?;

    let winner = results
        .first()
        .filter(|r| r.outcome.is_ok())
        .ok_or_else(|| CliError::runtime("every grid point failed"))?;
    let mut best = configs[winner.index].clone();
    best.set("out_dir", &out.join("best").display().to_string())?;
    write(&out.join("best_config.txt"), best.to_text())?;
    println!(
        "best point {}: gamma={} alpha={} epsilon={} n_steps={} val_acc={}",
        winner.index,
        winner.point.gamma,
        winner.point.alpha,
        winner.point.epsilon,
        winner.point.n_steps,
        winner.outcome.as_ref().expect("filtered")
    );
    Ok(results)
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advtext::data::{synth_generate, SynthSpec};

pub fn advtext() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advtext"))
}

pub fn run(args: &[&str]) -> Output {
    advtext().args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes a synthetic train/dev split into `dir`.
pub fn write_synth(dir: &Path, n_train: usize, n_dev: usize, seed: u64) -> (PathBuf, PathBuf) {
    let raw = synth_generate(&SynthSpec {
        num_classes: 2,
        num_examples: n_train + n_dev,
        vocab_size: 60,
        len_range: (4, 10),
        keyword_count_per_class: 4,
        seed,
    })
    .unwrap();
    let (train, dev) = raw.split_at(n_train).unwrap();
    let (tp, dp) = (dir.join("train.tsv"), dir.join("dev.tsv"));
    train.write_tsv(&tp).unwrap();
    dev.write_tsv(&dp).unwrap();
    (tp, dp)
}

/// A small, fast run over the synthetic files in `dir`.
pub fn small_config(dir: &Path, mode: &str) -> PathBuf {
    let (tp, dp) = write_synth(dir, 160, 40, 5);
    let text = format!(
        "# quick run\n\
         mode = {mode}\n\
         seed = 3\n\
         learning_rate = 0.003\n\
         batch_size = 8\n\
         max_steps = 40\n\
         eval_every = 20\n\
         carl.m = 4\n\
         carl.start_step = 10\n\
         model.embed_dim = 12\n\
         model.hidden_dim = 12\n\
         model.max_len = 12\n\
         data.train = {}\n\
         data.dev = {}\n\
         out_dir = {}\n",
        tp.display(),
        dp.display(),
        dir.join("out").display()
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use dvmerge::dvbasi::{
    addition_run, isotropic_addition_run, negation_run, random_addition_run, single_task_boost,
    tta_run, RunReport,
};
use dvmerge::paramspace::Checkpoint;
use dvmerge::refnet::{accuracy, fine_tune, make_task_in, Mlp, TaskData};
use dvmerge::vectors::task_vector;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Addition,
    Negation,
    Tta,
    Boost,
    BaselineIso,
    BaselineRandom,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::Addition => "addition",
            Self::Negation => "negation",
            Self::Tta => "tta",
            Self::Boost => "boost",
            Self::BaselineIso => "baseline-iso",
            Self::BaselineRandom => "baseline-random",
        }
    }
}

/// Filesystem-safe form of a task id: `rotated-moons(45)` -> `rotated-moons_45_`.
pub fn file_stem(task_id: &str) -> String {
    task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn pre_path(dir: &Path) -> PathBuf {
    dir.join("pre.ckpt")
}

pub fn ft_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("ft_{}.ckpt", file_stem(task_id)))
}

pub fn data_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("data_{}.csv", file_stem(task_id)))
}

/// Generates every task, initializes `θ_pre` and fine-tunes one model per
/// task. Writes `pre.ckpt`, `ft_<task>.ckpt` and `data_<task>.csv`.
pub fn finetune(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let mlp = Mlp::new(cfg.network.clone());
    let pre = mlp.init_weights(cfg.init_seed());
    save_ckpt(&pre, &pre_path(dir))?;
    writeln!(out, "{:<22} {:>9} {:>9}", "task", "pre", "finetuned")?;
    for (i, &kind) in cfg.tasks.iter().enumerate() {
        let data = make_task_in(kind, cfg.data_seed(i), &cfg.space)?;
        let path = data_path(dir, &data.task_id);
        data.save_csv(&path).with_context(|| format!("cannot write {}", path.display()))?;
        let (ft, _) = fine_tune(&mlp, &pre, &data.train, &cfg.finetune_hyper(i))?;
        save_ckpt(&ft, &ft_path(dir, &data.task_id))?;
        writeln!(
            out,
            "{:<22} {:>9.2} {:>9.2}",
            data.task_id,
            100.0 * accuracy(&mlp, &pre, &data.test)?,
            100.0 * accuracy(&mlp, &ft, &data.test)?
        )?;
    }
    Ok(())
}

fn save_ckpt(c: &Checkpoint, path: &Path) -> Result<()> {
    c.save(path).with_context(|| format!("cannot write {}", path.display()))
}

fn load_ckpt(mlp: &Mlp, path: &Path) -> Result<Checkpoint> {
    let c = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    mlp.check_weights(&c)
        .with_context(|| format!("checkpoint {} does not match network.layer_dims", path.display()))?;
    Ok(c)
}

/// Artifacts written by [`finetune`], read back for a run.
pub struct Workspace {
    pub mlp: Mlp,
    pub pre: Checkpoint,
    pub data: Vec<TaskData>,
    pub fine_tuned: Vec<Checkpoint>,
}

impl Workspace {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = &cfg.output_dir;
        let mlp = Mlp::new(cfg.network.clone());
        let pre = load_ckpt(&mlp, &pre_path(dir))?;
        let mut data = Vec::new();
        let mut fine_tuned = Vec::new();
        for id in cfg.task_ids() {
            let path = data_path(dir, &id);
            let d = TaskData::load_csv(&path).with_context(|| format!("cannot load data {}", path.display()))?;
            if d.task_id != id {
                bail!("{} holds task `{}`, expected `{id}`", path.display(), d.task_id);
            }
            data.push(d);
            fine_tuned.push(load_ckpt(&mlp, &ft_path(dir, &id))?);
        }
        Ok(Self {
            mlp,
            pre,
            data,
            fine_tuned,
        })
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.data
            .iter()
            .position(|t| t.task_id == id)
            .with_context(|| format!("unknown task `{id}`"))
    }
}

/// Runs `protocol` on the artifacts in the output directory and writes
/// `report_<protocol>.json`, `report_<protocol>.csv` and
/// `final_<protocol>.ckpt` (one set per task for `boost`). Returns the JSON
/// report paths.
pub fn run(cfg: &ExperimentConfig, protocol: Protocol, threads: usize, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let ws = Workspace::load(cfg)?;
    let rc = cfg.run_config(threads);
    let ids = cfg.task_ids();
    let (m, pre) = (&ws.mlp, &ws.pre);
    let mut results: Vec<(String, Checkpoint, RunReport)> = Vec::new();
    match protocol {
        Protocol::Addition => {
            let (w, r) = addition_run(m, pre, &ws.fine_tuned, &ws.data, &rc)?;
            results.push((protocol.name().into(), w, r));
        }
        Protocol::BaselineIso => {
            let (w, r) = isotropic_addition_run(m, pre, &ws.fine_tuned, &ws.data, &rc)?;
            results.push((protocol.name().into(), w, r));
        }
        Protocol::BaselineRandom => {
            let (w, r) = random_addition_run(m, pre, &ws.fine_tuned, &ws.data, &rc)?;
            results.push((protocol.name().into(), w, r));
        }
        Protocol::Negation => {
            if ids.len() < 2 {
                bail!("negation needs at least two tasks");
            }
            let target = cfg.negation_target.clone().unwrap_or_else(|| ids[0].clone());
            let control = cfg
                .negation_control
                .clone()
                .unwrap_or_else(|| ids.iter().find(|t| **t != target).expect("two tasks").clone());
            let (t, c) = (ws.index(&target)?, ws.index(&control)?);
            let tau = task_vector(&ws.fine_tuned[t], pre)?;
            let (w, r) = negation_run(m, pre, &tau, &ws.data[t], &ws.data[c], &rc)?;
            results.push((protocol.name().into(), w, r));
        }
        Protocol::Tta => {
            let target = cfg.tta_target.clone().unwrap_or_else(|| ids[ids.len() - 1].clone());
            let vectors = ids
                .iter()
                .zip(&ws.fine_tuned)
                .map(|(id, ft)| Ok((id.clone(), task_vector(ft, pre)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let (w, r) = tta_run(m, pre, &vectors, &target, &ws.data, &rc)?;
            results.push((protocol.name().into(), w, r));
        }
        Protocol::Boost => {
            for (ft, data) in ws.fine_tuned.iter().zip(&ws.data) {
                let (w, r) = single_task_boost(m, ft, pre, data, &rc)?;
                results.push((format!("boost_{}", file_stem(&data.task_id)), w, r));
            }
        }
    }
    let dir = &cfg.output_dir;
    let mut written = Vec::new();
    for (stem, w, report) in &results {
        let json = dir.join(format!("report_{stem}.json"));
        fs::write(&json, report.to_json()?).with_context(|| format!("cannot write {}", json.display()))?;
        let csv = dir.join(format!("report_{stem}.csv"));
        fs::write(&csv, report.to_csv()).with_context(|| format!("cannot write {}", csv.display()))?;
        save_ckpt(w, &dir.join(format!("final_{stem}.ckpt")))?;
        write!(out, "{}", report.summary_text())?;
        write!(out, "{}", report.accuracy_table())?;
        written.push(json);
    }
    Ok(written)
}

/// Reads a JSON run report and writes `<stem>.epochs.csv` and
/// `<stem>.summary.txt` into `out_dir` (default: next to the report).
pub fn report(path: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<(PathBuf, PathBuf)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read report {}", path.display()))?;
    let r = RunReport::from_json(&text).with_context(|| format!("malformed report {}", path.display()))?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let csv = dir.join(format!("{stem}.epochs.csv"));
    let txt = dir.join(format!("{stem}.summary.txt"));
    fs::write(&csv, r.to_csv()).with_context(|| format!("cannot write {}", csv.display()))?;
    let summary = r.summary_text();
    fs::write(&txt, &summary).with_context(|| format!("cannot write {}", txt.display()))?;
    write!(out, "{summary}")?;
    write!(out, "{}", r.accuracy_table())?;
    Ok((csv, txt))
}

//! Training loop, evaluation, attention export and the ablation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::arm::{RunningStats, StatsMode};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::data::{foreground_patches, DataError, Dataset, Split};
use crate::esam::LossError;
use crate::model::{LossFlags, LossValues, Model, Perturbation, QuerySource, TripletInput};
use crate::numerics::{AdamW, Graph, Params, Rng, Tensor};
use crate::retrieval::{EmbeddingIndex, RecallReport, RetrievalError};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.farn";
pub const REPORT_FILE: &str = "report.json";
pub const ATTENTION_DIR: &str = "attention";
pub const LOCALIZATION_FILE: &str = "localization.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_late: f64,
    pub l_attention: f64,
    pub l_res: f64,
    pub l_pi: f64,
    pub l_total: f64,
    pub val_r1: f64,
    pub val_r5: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, losses: LossValues, val: &RecallReport) -> Self {
        Self {
            epoch,
            l_late: losses.late,
            l_attention: losses.attention,
            l_res: losses.res,
            l_pi: losses.pi,
            l_total: losses.total,
            val_r1: val.recall(1),
            val_r5: val.recall(5),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub const CSV_HEADER: &'static str = "epoch,l_late,l_attention,l_res,l_pi,l_total,val_r1,val_r5";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.l_late, self.l_attention, self.l_res, self.l_pi, self.l_total, self.val_r1, self.val_r5
        )
    }
}

/// Everything a run carries between epochs.
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub params: Params,
    pub optimizer: AdamW,
    /// Root stream; one draw per epoch seeds that epoch's shuffling and noise.
    pub rng: Rng,
    pub running: RunningStats,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let rng = Rng::new(config.seed);
        let mut init = rng.substream(0x1a17);
        let (model, params) = Model::new(config.model_config(), &mut init).map_err(TrainError::Config)?;
        let optimizer = AdamW::new(&params, config.optimizer());
        Ok(Self {
            config: config.clone(),
            model,
            params,
            optimizer,
            rng,
            running: RunningStats::default(),
            epoch: 0,
        })
    }

    /// Rebuilds a state from a checkpoint, using its config snapshot.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config = RunConfig::parse(&ckpt.config)
            .map_err(|e| CheckpointError::Malformed(format!("config snapshot: {e}")))?;
        let mut state = Self::new(&config)?;
        ckpt.restore_params(&mut state.params)?;
        state.optimizer = ckpt.restore_optimizer(config.optimizer(), &state.params)?;
        state.rng = ckpt.rng();
        state.running = RunningStats {
            current: ckpt.running_stats,
        };
        state.epoch = ckpt.epoch as usize;
        Ok(state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.config.to_text(),
            &self.params,
            &self.optimizer,
            self.epoch as u64,
            &self.rng,
            self.running.current,
        )
    }

    fn inputs<'a>(&self, dataset: &'a Dataset, ids: &[usize]) -> Vec<TripletInput<'a>> {
        ids.iter()
            .map(|&id| {
                let t = dataset.triplet(id);
                TripletInput {
                    reference: dataset.image(t.reference),
                    target: dataset.image(t.target),
                    tokens: &t.tokens,
                }
            })
            .collect()
    }

    fn batches(&self, ids: &[usize]) -> Vec<Vec<usize>> {
        ids.chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Mean loss values over training batches at the current parameters.
    pub fn measure_losses(&self, dataset: &Dataset) -> Result<LossValues, TrainError> {
        let cfg = self.config.loss_config();
        let mut noise_rng = self.rng.substream(0x0e);
        let mut sum = LossValues::default();
        let batches = self.batches(dataset.split(Split::Train));
        for ids in &batches {
            let mut g = Graph::inference();
            let inputs = self.inputs(dataset, ids);
            let stats = self.stats_override();
            let l = self.model.batch_losses(
                &mut g,
                &self.params,
                &inputs,
                &cfg,
                Perturbation::Sample {
                    rng: &mut noise_rng,
                    stats,
                },
            )?;
            add_values(&mut sum, l.values(&g));
        }
        Ok(scale_values(sum, batches.len()))
    }

    fn stats_override(&self) -> Option<crate::arm::TargetStats> {
        match self.config.stats_mode {
            StatsMode::PerBatch => None,
            StatsMode::Running => self.running.current,
        }
    }

    /// One pass over the shuffled training split. Returns mean losses.
    pub fn train_epoch(&mut self, dataset: &Dataset) -> Result<LossValues, TrainError> {
        let cfg = self.config.loss_config();
        let epoch_rng = Rng::new(self.rng.next_u64());
        let mut order = dataset.split(Split::Train).to_vec();
        epoch_rng.substream(0).shuffle(&mut order);
        let batches = self.batches(&order);
        let mut sum = LossValues::default();
        for (step, ids) in batches.iter().enumerate() {
            let mut noise_rng = epoch_rng.substream(1 + step as u64);
            let inputs = self.inputs(dataset, ids);
            let mut g = Graph::new();
            let stats = self.stats_override();
            let l = self.model.batch_losses(
                &mut g,
                &self.params,
                &inputs,
                &cfg,
                Perturbation::Sample {
                    rng: &mut noise_rng,
                    stats,
                },
            )?;
            if let Some(s) = l.batch_stats {
                if self.config.stats_mode == StatsMode::Running {
                    self.running.update(s);
                }
            }
            add_values(&mut sum, l.values(&g));
            g.backward(l.total).map_err(LossError::from)?;
            self.params.zero_grad();
            g.accumulate_param_grads(&mut self.params);
            self.optimizer.step(&mut self.params).map_err(LossError::from)?;
        }
        self.epoch += 1;
        Ok(scale_values(sum, batches.len()))
    }

    pub fn evaluate(&self, dataset: &Dataset, split: Split) -> Result<RecallReport, TrainError> {
        let source = self.config.query_source.resolve(self.config.flags());
        evaluate(&self.model, &self.params, dataset, split, self.config.lambda1, source)
    }
}

/// How training triplets are arranged into batches each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSampler {
    /// Plain shuffle.
    Random,
    /// Shuffle, then make triplets whose targets differ in only one
    /// (per-epoch random) attribute adjacent, so in-batch negatives are hard.
    Grouped,
}

impl std::str::FromStr for BatchSampler {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "grouped" => Ok(Self::Grouped),
            other => Err(format!("unknown batch sampler {other:?} (expected random or grouped)")),
        }
    }
}

impl std::fmt::Display for BatchSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Grouped => "grouped",
        })
    }
}

fn add_values(acc: &mut LossValues, v: LossValues) {
    acc.late += v.late;
    acc.attention += v.attention;
    acc.res += v.res;
    acc.pi += v.pi;
    acc.total += v.total;
}

fn scale_values(v: LossValues, n: usize) -> LossValues {
    let s = 1.0 / n.max(1) as f64;
    LossValues {
        late: v.late * s,
        attention: v.attention * s,
        res: v.res * s,
        pi: v.pi * s,
        total: v.total * s,
    }
}

/// Embeds the whole gallery once.
pub fn gallery_index(model: &Model, params: &Params, dataset: &Dataset) -> Result<EmbeddingIndex, TrainError> {
    let mut ids = Vec::with_capacity(dataset.gallery_len());
    let mut rows = Vec::with_capacity(dataset.gallery_len());
    for entry in &dataset.manifest.gallery {
        ids.push(entry.id);
        rows.push(model.embed_gallery(params, dataset.image(entry.id)).map_err(LossError::from)?);
    }
    Ok(EmbeddingIndex::new(ids, rows)?)
}

/// Ranks the full gallery for every query in `split`.
pub fn evaluate(
    model: &Model,
    params: &Params,
    dataset: &Dataset,
    split: Split,
    lambda1: f64,
    source: QuerySource,
) -> Result<RecallReport, TrainError> {
    let ids = dataset.split(split);
    if ids.is_empty() {
        return Err(DataError::Invalid(format!("split {} is empty", split.as_str())).into());
    }
    let index = gallery_index(model, params, dataset)?;
    let mut rankings = Vec::with_capacity(ids.len());
    let mut truths = Vec::with_capacity(ids.len());
    let mut groups = Vec::with_capacity(ids.len());
    for &id in ids {
        let t = dataset.triplet(id);
        let q = model.embed_query(params, dataset.image(t.reference), &t.tokens, lambda1, source)?;
        rankings.push(index.rank(&q)?);
        truths.push(t.target);
        groups.push(dataset.group_members(t.subset_group).to_vec());
    }
    Ok(RecallReport::compute(&rankings, &truths, &groups)?)
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    pub report: RecallReport,
}

/// Trains for `config.epochs` epochs. Record 0 is measured before any
/// update. `on_epoch` sees each record as soon as it exists.
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    check_compatible(config, dataset)?;
    let mut state = TrainState::new(config)?;
    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let initial = state.measure_losses(dataset)?;
    let mut report = state.evaluate(dataset, Split::Val)?;
    let m = EpochMetrics::new(0, initial, &report);
    on_epoch(&m)?;
    metrics.push(m);
    for epoch in 1..=config.epochs {
        let losses = state.train_epoch(dataset)?;
        report = state.evaluate(dataset, Split::Val)?;
        let m = EpochMetrics::new(epoch, losses, &report);
        on_epoch(&m)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { state, metrics, report })
}

pub fn check_compatible(config: &RunConfig, dataset: &Dataset) -> Result<(), TrainError> {
    let size = dataset.manifest.image_size;
    if size != config.image_size {
        return Err(TrainError::Config(format!(
            "config image_size {} but dataset images are {size}",
            config.image_size
        )));
    }
    if !dataset.manifest.patch_sizes.contains(&config.patch_size) {
        return Err(TrainError::Config(format!(
            "patch_size {} does not tile {size}x{size} images",
            config.patch_size
        )));
    }
    if dataset.split(Split::Train).len() < 2 {
        return Err(DataError::Invalid("training split needs at least 2 triplets".into()).into());
    }
    Ok(())
}

/// Trains and writes the metrics log, CSV summary, checkpoint and
/// validation report into `out`.
pub fn run_train(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<TrainOutcome, TrainError> {
    check_compatible(config, dataset)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(METRICS_FILE);
    fs::write(&log_path, "").map_err(io_err(&log_path))?;
    let outcome = train(config, dataset, |m| {
        use std::io::Write;
        let line = m.to_json();
        let mut f = fs::OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?;
        writeln!(f, "{line}").map_err(io_err(&log_path))
    })?;
    let mut csv = String::from(EpochMetrics::CSV_HEADER);
    csv.push('\n');
    for m in &outcome.metrics {
        csv.push_str(&m.to_csv());
        csv.push('\n');
    }
    write_file(&out.join(SUMMARY_FILE), &csv)?;
    outcome.state.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(REPORT_FILE), &(outcome.report.to_json() + "\n"))?;
    Ok(outcome)
}

fn write_file(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Column-normalized attention mass on foreground regions, and the
/// foreground fraction it is compared against.
///
/// Rows of the map already sum to one over tokens, so the token-summed
/// row mass is uniform by construction; each token column is instead
/// normalized over regions before summing.
pub fn foreground_mass(map: &Tensor, foreground: &[bool]) -> (f64, f64) {
    let (r, t) = (map.rows(), map.cols());
    assert_eq!(r, foreground.len(), "one foreground flag per region");
    let mut weights = vec![0.0; r];
    for j in 0..t {
        let col: f64 = (0..r).map(|i| map.at(i, j)).sum();
        for (i, w) in weights.iter_mut().enumerate() {
            *w += map.at(i, j) / col / t as f64;
        }
    }
    let mass = weights.iter().zip(foreground).filter(|(_, &f)| f).map(|(w, _)| w).sum();
    let baseline = foreground.iter().filter(|&&f| f).count() as f64 / r as f64;
    (mass, baseline)
}

/// Row-major CSV: header `region,<token>...`, one line per region.
pub fn attention_csv(map: &Tensor, tokens: &[&str]) -> String {
    let mut s = String::from("region");
    for t in tokens {
        s.push(',');
        s.push_str(t);
    }
    s.push('\n');
    for i in 0..map.rows() {
        let _ = write!(s, "{i}");
        for j in 0..map.cols() {
            let _ = write!(s, ",{}", map.at(i, j));
        }
        s.push('\n');
    }
    s
}

pub fn parse_attention_csv(text: &str) -> Result<Tensor, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty attention csv")?;
    let cols = header.split(',').count().saturating_sub(1);
    if cols == 0 {
        return Err("attention csv has no token columns".into());
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let idx: usize = fields.next().and_then(|f| f.parse().ok()).ok_or(format!("row {i}: bad region index"))?;
        if idx != i {
            return Err(format!("row {i}: region index {idx} out of order"));
        }
        let vals: Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| format!("row {i}: {e}"))?;
        if vals.len() != cols {
            return Err(format!("row {i}: {} values, header has {cols}", vals.len()));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(vec![rows, cols], data).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationRow {
    pub triplet: usize,
    pub foreground_mass: f64,
    pub baseline: f64,
}

impl LocalizationRow {
    pub fn hit(&self) -> bool {
        self.foreground_mass > self.baseline
    }
}

/// Writes reference/target maps for every triplet of `split` under
/// `out/attention/` plus a localization summary.
pub fn export_attention(
    model: &Model,
    params: &Params,
    dataset: &Dataset,
    split: Split,
    patch: usize,
    out: &Path,
) -> Result<Vec<LocalizationRow>, TrainError> {
    let dir = out.join(ATTENTION_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let vocab = &dataset.manifest.vocabulary;
    let size = dataset.manifest.image_size;
    let mut rows = Vec::new();
    let mut summary = String::from("triplet,foreground_mass,baseline,hit\n");
    for &id in dataset.split(split) {
        let t = dataset.triplet(id);
        let words: Vec<&str> = t.tokens.iter().map(|&k| vocab.token(k).unwrap_or("?")).collect();
        for (branch, img, target) in [
            ("reference", t.reference, false),
            ("target", t.target, true),
        ] {
            let map = model.attention_map(params, dataset.image(img), &t.tokens, target)?;
            write_file(&dir.join(format!("{id:04}_{branch}.csv")), &attention_csv(&map, &words))?;
            if !target {
                let fg = foreground_patches(dataset.scene(img), size, patch)?;
                let (mass, baseline) = foreground_mass(&map, &fg);
                let row = LocalizationRow {
                    triplet: id,
                    foreground_mass: mass,
                    baseline,
                };
                let _ = writeln!(summary, "{id},{mass},{baseline},{}", row.hit());
                rows.push(row);
            }
        }
    }
    write_file(&dir.join(LOCALIZATION_FILE), &summary)?;
    Ok(rows)
}

/// Row labels and loss switches of the ablation table, in table order.
pub const ABLATION_SETTINGS: [(&str, LossFlags); 7] = [
    ("w/o L_Late", LossFlags { late: false, attention: true, res: true, pi: true }),
    ("w/o L_Attention", LossFlags { late: true, attention: false, res: true, pi: true }),
    ("w/o L_PI", LossFlags { late: true, attention: true, res: true, pi: false }),
    ("w/o L_Res", LossFlags { late: true, attention: true, res: false, pi: true }),
    ("ESAM only", LossFlags { late: true, attention: true, res: false, pi: false }),
    ("ARM only", LossFlags { late: false, attention: false, res: true, pi: true }),
    ("FAR-Net", LossFlags::ALL),
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: &'static str,
    pub flags: LossFlags,
    /// Final validation report per seed, in seed order.
    pub reports: Vec<RecallReport>,
}

impl AblationRow {
    pub fn mean(&self, f: impl Fn(&RecallReport) -> f64) -> f64 {
        self.reports.iter().map(f).sum::<f64>() / self.reports.len() as f64
    }
}

fn slug(setting: &str) -> String {
    setting
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Trains every ablation setting for every seed in `config.ablation_seeds`,
/// writing each run under `out/<setting>/seed<k>/` and the tables to `out`.
pub fn run_ablation(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<Vec<AblationRow>, TrainError> {
    check_compatible(config, dataset)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rows = Vec::new();
    let mut runs = String::from("setting,seed,val_r1,val_r5,val_r10,val_r50,val_subset_r1,val_avg\n");
    for (setting, flags) in ABLATION_SETTINGS {
        let mut reports = Vec::new();
        for &seed in &config.ablation_seeds {
            let mut cfg = config.clone();
            cfg.seed = seed;
            cfg.use_late = flags.late;
            cfg.use_attention = flags.attention;
            cfg.use_res = flags.res;
            cfg.use_pi = flags.pi;
            let dir = out.join(slug(setting)).join(format!("seed{seed}"));
            let outcome = run_train(&cfg, dataset, &dir)?;
            let r = outcome.report;
            let _ = writeln!(
                runs,
                "{setting},{seed},{},{},{},{},{},{}",
                r.recall(1),
                r.recall(5),
                r.recall(10),
                r.recall(50),
                r.subset_recall(1),
                r.avg
            );
            reports.push(r);
        }
        rows.push(AblationRow { setting, flags, reports });
    }
    write_file(&out.join(ABLATION_RUNS_FILE), &runs)?;
    write_file(&out.join(ABLATION_FILE), &ablation_csv(&rows))?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "setting,l_late,l_attention,l_res,l_pi,seeds,val_r1,val_r5,val_r10,val_r50,val_subset_r1,val_avg\n",
    );
    for row in rows {
        let f = row.flags;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            row.setting,
            f.late,
            f.attention,
            f.res,
            f.pi,
            row.reports.len(),
            row.mean(|r| r.recall(1)),
            row.mean(|r| r.recall(5)),
            row.mean(|r| r.recall(10)),
            row.mean(|r| r.recall(50)),
            row.mean(|r| r.subset_recall(1)),
            row.mean(|r| r.avg),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreground_mass_of_uniform_map_is_baseline() {
        let map = Tensor::filled(&[4, 3], 1.0 / 3.0);
        let (m, b) = foreground_mass(&map, &[true, false, false, true]);
        assert!((m - 0.5).abs() < 1e-15 && b == 0.5);
    }

    #[test]
    fn foreground_mass_concentrated() {
        // token 0 attended mostly from region 0
        let map = Tensor::matrix(&[vec![0.9, 0.5], vec![0.1, 0.5]]);
        let (m, b) = foreground_mass(&map, &[true, false]);
        assert!((m - (0.9 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn attention_csv_round_trip() {
        let map = Tensor::matrix(&[vec![0.25, 0.75], vec![1.0 / 3.0, 2.0 / 3.0]]);
        let text = attention_csv(&map, &["make", "red"]);
        assert!(text.starts_with("region,make,red\n0,0.25,0.75\n"));
        assert_eq!(parse_attention_csv(&text).unwrap(), map);
        assert!(parse_attention_csv("region,a\n0,1,2\n").is_err());
    }

    #[test]
    fn ablation_rows_are_the_seven_settings() {
        let labels: Vec<&str> = ABLATION_SETTINGS.iter().map(|(l, _)| *l).collect();
        assert_eq!(
            labels,
            ["w/o L_Late", "w/o L_Attention", "w/o L_PI", "w/o L_Res", "ESAM only", "ARM only", "FAR-Net"]
        );
        assert_eq!(slug("w/o L_Late"), "w_o_l_late");
    }
}

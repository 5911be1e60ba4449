//! The pipeline commands. Each reads its inputs from, and writes its outputs
//! to, one run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nmvq_autodiff::rng;
use nmvq_autodiff::Tensor;
use nmvq_core::checkpoint::Checkpoint;
use nmvq_core::dataset::{
    from_tensor, load_labeled_tsv, load_ucr_tsv, stratified_resplit, synthesize_series, to_tensor, write_tsv, znormalize,
    Dataset, LabeledSeries,
};
use nmvq_core::fcn::{train_fcn, FcnClassifier, FcnConfig};
use nmvq_core::features::{l2_normalize_rows, FeatureMatrix};
use nmvq_core::kv::KvMap;
use nmvq_core::mapper::{Mapper, Stage3Run};
use nmvq_core::metrics::{change_higher_better, change_lower_better, cfid, fid_features, inception_score, pca_fit};
use nmvq_core::rocket::{rocket_fit, RocketTransform};
use nmvq_core::tau_search::{proportional_counts, search_tau, TauSearchResult, MAX_GENERATED};
use nmvq_core::train::LossLog;
use nmvq_core::tsgen::{
    check_compatible, generate_per_class, PriorConfig, PriorModel, Stage1Model, Stage1Run, Stage2Run, TrainSettings,
};
use rand::seq::index::sample;

use crate::config::{DataSource, RunConfig};
use crate::error::{io_err, CliError, Result};
use crate::manifest::Manifest;
use crate::svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
    Fcn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::Three => "stage3",
            Stage::Fcn => "fcn",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "3" => Ok(Stage::Three),
            "fcn" => Ok(Stage::Fcn),
            _ => Err(CliError::Config(format!("unknown stage {s:?}; expected 1, 2, 3 or fcn"))),
        }
    }
}

/// A configured run rooted at an output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PrepareSummary {
    pub train: usize,
    pub test: usize,
    pub length: usize,
    /// `(train, test)` count per class.
    pub histogram: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub stage: Stage,
    pub resumed_from: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub generated: PathBuf,
    pub refined: Option<PathBuf>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub metric: String,
    pub feature_source: String,
    pub value: f64,
    pub seed: String,
}

#[derive(Debug, Clone)]
pub struct VisualizeSummary {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn missing(artifact: &str, path: PathBuf, hint: &str) -> CliError {
    CliError::Missing { artifact: artifact.into(), path, hint: hint.into() }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn comment_block(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}

/// Rows of a loss CSV written by [`LossLog::to_csv`], skipping comments.
pub fn parse_loss_csv(text: &str) -> Result<LossLog> {
    let mut log = LossLog::default();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Config(format!("malformed loss log line {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        log.push(f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?);
    }
    Ok(log)
}

pub fn metrics_csv(rows: &[MetricRow], provenance: &[String]) -> String {
    let mut s = comment_block(provenance);
    s.push_str("dataset,metric,feature_source,value,seed\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.dataset, r.metric, r.feature_source, r.value, r.seed));
    }
    s
}

/// Scores for one metric under both conditions, plus the change column.
pub fn change_rows(
    dataset: &str,
    metric: &str,
    source: &str,
    seed: &str,
    generated: f64,
    refined: f64,
    higher_is_better: bool,
) -> Vec<MetricRow> {
    let change = if higher_is_better {
        change_higher_better(generated, refined)
    } else {
        change_lower_better(generated, refined)
    };
    [("generated", generated), ("refined", refined), ("change_pct", change)]
        .into_iter()
        .map(|(cond, value)| MetricRow {
            dataset: dataset.into(),
            metric: format!("{metric}_{cond}"),
            feature_source: source.into(),
            value,
            seed: seed.into(),
        })
        .collect()
}

fn labels_of(series: &[LabeledSeries]) -> Vec<usize> {
    series.iter().map(|s| s.label).collect()
}

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

impl Run {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Run { config, out: out.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn train_tsv(&self) -> PathBuf {
        self.path("data/train.tsv")
    }

    pub fn test_tsv(&self) -> PathBuf {
        self.path("data/test.tsv")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.path(&format!("checkpoints/{}.ckpt", stage.name()))
    }

    pub fn loss_csv(&self, stage: Stage) -> PathBuf {
        self.path(&format!("logs/{}_loss.csv", stage.name()))
    }

    pub fn tau_csv(&self) -> PathBuf {
        self.path("tau/tau_search.csv")
    }

    pub fn tau_result(&self) -> PathBuf {
        self.path("tau/result.txt")
    }

    pub fn generated_tsv(&self) -> PathBuf {
        self.path("samples/generated.tsv")
    }

    pub fn refined_tsv(&self) -> PathBuf {
        self.path("samples/refined.tsv")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.path("metrics/metrics.csv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path("manifest.txt")
    }

    fn provenance(&self, extra: &[String]) -> Vec<String> {
        let mut p = self.config.provenance();
        p.extend_from_slice(extra);
        p
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::open(&self.manifest_path(), &self.config)
    }

    fn settings(&self, steps: u64) -> TrainSettings {
        TrainSettings { steps, batch: self.config.batch, optim: self.config.optim, seed: self.config.seeds.model }
    }

    fn checkpoint_extra(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("config_hash", self.config.hash());
        kv
    }

    // ------------------------------------------------------------ data

    pub fn prepare_data(&self, input: Option<&Path>) -> Result<PrepareSummary> {
        let cfg = &self.config;
        let source = match input {
            Some(p) => DataSource::File(p.to_path_buf()),
            None => cfg.source.clone(),
        };
        let all = match &source {
            DataSource::File(p) => load_ucr_tsv(p)?,
            DataSource::Synthetic { kind, n, length, noise } => {
                synthesize_series(*kind, *n, *length, *noise, cfg.seeds.data)?
            }
        };
        let ds = znormalize(stratified_resplit(&all, cfg.train_fraction, cfg.seeds.data)?);
        let origin = match &source {
            DataSource::File(p) => format!("source={}", p.display()),
            DataSource::Synthetic { kind, n, length, noise } => {
                format!("source=synthetic kind={kind} n={n} length={length} noise={noise}")
            }
        };
        for (path, split, rows) in [(self.train_tsv(), "train", &ds.train), (self.test_tsv(), "test", &ds.test)] {
            ensure_parent(&path)?;
            write_tsv(&path, rows, &self.provenance(&[origin.clone(), format!("split={split}")]))?;
        }
        let mut m = self.manifest()?;
        m.set_file("data.train", &self.train_tsv());
        m.set_file("data.test", &self.test_tsv());
        m.save()?;
        Ok(PrepareSummary { train: ds.train.len(), test: ds.test.len(), length: ds.length, histogram: ds.class_histogram() })
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let load = |path: PathBuf| -> Result<Vec<LabeledSeries>> {
            if !path.exists() {
                return Err(missing("dataset split", path, "run `nmvq prepare-data` first"));
            }
            Ok(load_labeled_tsv(&path)?)
        };
        let train = load(self.train_tsv())?;
        let test = load(self.test_tsv())?;
        let length = train[0].values.len();
        if test.iter().any(|s| s.values.len() != length) {
            return Err(CliError::Config("train and test series differ in length".into()));
        }
        let num_classes = num_classes(&labels_of(&train)).max(num_classes(&labels_of(&test)));
        Ok(Dataset { train, test, num_classes, length })
    }

    // ------------------------------------------------------------ checkpoints

    fn load_checkpoint(&self, stage: Stage) -> Result<Checkpoint> {
        let path = self.checkpoint(stage);
        if !path.exists() {
            let hint = match stage {
                Stage::Fcn => "run `nmvq train --stage fcn` or `nmvq evaluate`".to_string(),
                s => format!("run `nmvq train --stage {}` first", &s.name()[5..]),
            };
            return Err(missing(&format!("{} checkpoint", stage.name()), path, &hint));
        }
        Ok(Checkpoint::load(&path)?)
    }

    pub fn load_stage1(&self) -> Result<Stage1Model> {
        Ok(Stage1Model::load(&self.load_checkpoint(Stage::One)?)?)
    }

    pub fn load_prior(&self) -> Result<PriorModel> {
        Ok(PriorModel::load(&self.load_checkpoint(Stage::Two)?)?)
    }

    pub fn load_mapper(&self) -> Result<Mapper> {
        Ok(Mapper::load(&self.load_checkpoint(Stage::Three)?)?)
    }

    /// The checkpoint at `stage`, if one exists and was written under the same config.
    fn resumable(&self, stage: Stage) -> Result<Option<Checkpoint>> {
        let path = self.checkpoint(stage);
        if !path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&path)?;
        let hash = ck.config.get_str("config_hash").unwrap_or("");
        if hash != self.config.hash() {
            return Err(CliError::Config(format!(
                "{} was written under config {hash}, current config is {}; remove it or pick another --out-dir",
                path.display(),
                self.config.hash()
            )));
        }
        Ok(Some(ck))
    }

    fn previous_log(&self, stage: Stage, upto: u64) -> Result<LossLog> {
        let path = self.loss_csv(stage);
        if upto == 0 || !path.exists() {
            return Ok(LossLog::default());
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut log = parse_loss_csv(&text)?;
        log.rows.retain(|r| r.0 <= upto);
        Ok(log)
    }

    fn save_progress(&self, stage: Stage, ck: &Checkpoint, log: &LossLog) -> Result<()> {
        let path = self.checkpoint(stage);
        ensure_parent(&path)?;
        ck.save(&path)?;
        let csv = comment_block(&self.provenance(&[format!("stage={}", stage.name())])) + &log.to_csv();
        write_text(&self.loss_csv(stage), &csv)
    }

    /// Stage-3 temperature: the override, else the recorded search result.
    pub fn resolve_tau(&self, tau_override: Option<f64>) -> Result<f64> {
        if let Some(t) = tau_override {
            return Ok(t);
        }
        let path = self.tau_result();
        if !path.exists() {
            return Err(missing("τ-search result", path, "run search-tau first, or pass --tau"));
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(KvMap::parse(&text)?.require("tau_star")?)
    }

    // ------------------------------------------------------------ training

    /// Trains `stage` up to its configured step count, resuming from an
    /// existing checkpoint and saving every `checkpoint_every` steps.
    pub fn train(&self, stage: Stage, tau_override: Option<f64>) -> Result<TrainSummary> {
        self.train_until(stage, tau_override, None)
    }

    /// Like [`Run::train`], but stops once `until` steps are done; a later
    /// call picks up from there.
    pub fn train_until(&self, stage: Stage, tau_override: Option<f64>, until: Option<u64>) -> Result<TrainSummary> {
        let start = Instant::now();
        let summary = match stage {
            Stage::One => self.train_stage1(until)?,
            Stage::Two => self.train_stage2(until)?,
            Stage::Three => self.train_stage3(tau_override, until)?,
            Stage::Fcn if until.is_some() => {
                return Err(CliError::Config("the FCN trains in one go; --until applies to stages 1-3".into()))
            }
            Stage::Fcn => self.train_fcn()?,
        };
        let mut m = self.manifest()?;
        m.set_file(&format!("{}.checkpoint", stage.name()), &self.checkpoint(stage));
        m.set_file(&format!("{}.loss_log", stage.name()), &self.loss_csv(stage));
        m.set(&format!("{}.steps", stage.name()), summary.steps);
        m.set_timing(stage.name(), start.elapsed().as_secs_f64());
        m.save()?;
        Ok(summary)
    }

    /// Step counts at which to checkpoint when training from `from` to
    /// `total`, or to `until` when that comes first.
    fn chunks(&self, from: u64, total: u64, until: Option<u64>) -> Vec<u64> {
        let every = self.config.checkpoint_every;
        let total = until.map_or(total, |u| u.min(total));
        let mut out = Vec::new();
        let mut at = from;
        while at < total {
            at = ((at / every + 1) * every).min(total);
            out.push(at);
        }
        out
    }

    fn train_stage1(&self, until: Option<u64>) -> Result<TrainSummary> {
        let data = self.load_data()?;
        let x = data.train_tensor();
        let settings = self.settings(self.config.steps[0]);
        let config = nmvq_core::tsgen::Stage1Config { length: data.length, ..self.config.stage1 };
        let mut run = match self.resumable(Stage::One)? {
            Some(ck) => Stage1Run::resume(&ck, &settings)?,
            None => Stage1Run::new(config, &settings)?,
        };
        let from = run.trainer.steps();
        let mut log = self.previous_log(Stage::One, from)?;
        for until in self.chunks(from, settings.steps, until) {
            run.train_until(&x, &settings, until)?;
            log.rows.append(&mut run.log.rows);
            self.save_progress(Stage::One, &run.model.save(Some(&run.trainer), &self.checkpoint_extra()), &log)?;
        }
        Ok(TrainSummary { stage: Stage::One, resumed_from: from, steps: run.trainer.steps(), final_loss: log.last() })
    }

    fn train_stage2(&self, until: Option<u64>) -> Result<TrainSummary> {
        let data = self.load_data()?;
        let stage1 = self.load_stage1()?;
        let tokens = stage1.tokenize(&data.train_tensor())?;
        let labels = data.train_labels();
        let settings = self.settings(self.config.steps[1]);
        let config = PriorConfig {
            seq_len: stage1.config.tokens(),
            codebook_size: stage1.config.codebook_size,
            num_classes: data.num_classes,
            dim: self.config.prior_dim,
            layers: self.config.prior_layers,
            heads: self.config.prior_heads,
        };
        let mut run = match self.resumable(Stage::Two)? {
            Some(ck) => Stage2Run::resume(&ck, &settings)?,
            None => Stage2Run::new(config, &settings)?,
        };
        check_compatible(&stage1, &run.model)?;
        let from = run.trainer.steps();
        let mut log = self.previous_log(Stage::Two, from)?;
        for until in self.chunks(from, settings.steps, until) {
            run.train_until(&tokens, Some(&labels), &settings, until)?;
            log.rows.append(&mut run.log.rows);
            self.save_progress(Stage::Two, &run.model.save(Some(&run.trainer), &self.checkpoint_extra()), &log)?;
        }
        Ok(TrainSummary { stage: Stage::Two, resumed_from: from, steps: run.trainer.steps(), final_loss: log.last() })
    }

    fn train_stage3(&self, tau_override: Option<f64>, until: Option<u64>) -> Result<TrainSummary> {
        let tau = self.resolve_tau(tau_override)?;
        let data = self.load_data()?;
        let stage1 = self.load_stage1()?;
        let x = data.train_tensor();
        let settings = self.settings(self.config.steps[2]);
        let mut run = match self.resumable(Stage::Three)? {
            Some(ck) => {
                let run = Stage3Run::resume(&ck, &settings)?;
                if run.mapper.tau != tau {
                    return Err(CliError::Config(format!(
                        "stage-3 checkpoint was trained at τ={}, requested τ={tau}",
                        run.mapper.tau
                    )));
                }
                run
            }
            None => Stage3Run::new(self.config.unet, tau, data.length, &settings)?,
        };
        let from = run.trainer.steps();
        let mut log = self.previous_log(Stage::Three, from)?;
        for until in self.chunks(from, settings.steps, until) {
            run.train_until(&x, &stage1, &settings, until)?;
            log.rows.append(&mut run.log.rows);
            self.save_progress(Stage::Three, &run.mapper.save(Some(&run.trainer), &self.checkpoint_extra()), &log)?;
        }
        Ok(TrainSummary { stage: Stage::Three, resumed_from: from, steps: run.trainer.steps(), final_loss: log.last() })
    }

    fn train_fcn(&self) -> Result<TrainSummary> {
        let data = self.load_data()?;
        let config = FcnConfig { length: data.length, num_classes: data.num_classes, widths: self.config.fcn_widths };
        let run = train_fcn(&data.train_tensor(), &data.train_labels(), config, &self.settings(self.config.fcn_steps))?;
        self.save_progress(Stage::Fcn, &run.model.save(&self.checkpoint_extra()), &run.log)?;
        Ok(TrainSummary { stage: Stage::Fcn, resumed_from: 0, steps: self.config.fcn_steps, final_loss: run.log.last() })
    }

    /// The FCN feature extractor, trained on first use.
    pub fn fcn(&self) -> Result<FcnClassifier> {
        if self.resumable(Stage::Fcn)?.is_none() {
            self.train(Stage::Fcn, None)?;
        }
        Ok(FcnClassifier::load(&self.load_checkpoint(Stage::Fcn)?)?)
    }

    // ------------------------------------------------------------ τ search

    pub fn rocket(&self, length: usize, seed: u64) -> Result<RocketTransform> {
        Ok(rocket_fit(length, self.config.rocket_kernels, seed)?)
    }

    pub fn search_tau(&self) -> Result<TauSearchResult> {
        let start = Instant::now();
        let data = self.load_data()?;
        let stage1 = self.load_stage1()?;
        let prior = self.load_prior()?;
        check_compatible(&stage1, &prior)?;
        let rocket = self.rocket(data.length, self.config.seeds.rocket)?;
        let result = search_tau(
            &data.train_tensor(),
            &data.train_labels(),
            &stage1,
            &prior,
            &self.config.tau_candidates,
            self.config.tau_n_gen,
            &rocket,
            self.config.sampling_iterations,
            self.config.seeds.sampling,
        )?;
        let extra = [format!("rocket_seed={} rocket_kernels={}", result.rocket_seed, result.rocket_kernels)];
        write_text(&self.tau_csv(), &(comment_block(&self.provenance(&extra)) + &result.to_csv()))?;
        let mut kv = KvMap::new();
        kv.set("tau_star", result.tau_star)
            .set("rocket_seed", result.rocket_seed)
            .set("rocket_kernels", result.rocket_kernels)
            .set("config_hash", self.config.hash());
        write_text(&self.tau_result(), &kv.to_text())?;
        let mut m = self.manifest()?;
        m.set_file("tau.table", &self.tau_csv());
        m.set_file("tau.result", &self.tau_result());
        m.set("tau.star", result.tau_star);
        for (t, f) in result.candidates.iter().zip(&result.fid_per_tau) {
            m.set(&format!("tau.fid.{t}"), f);
        }
        m.set_timing("search_tau", start.elapsed().as_secs_f64());
        m.save()?;
        Ok(result)
    }

    // ------------------------------------------------------------ sampling

    /// Generates `n` series (class-proportional, or all of `class`) and
    /// optionally refines them with the stage-3 mapper.
    pub fn generate(&self, n: Option<usize>, class: Option<usize>, refine: bool) -> Result<GenerateSummary> {
        let start = Instant::now();
        let data = self.load_data()?;
        let stage1 = self.load_stage1()?;
        let prior = self.load_prior()?;
        check_compatible(&stage1, &prior)?;
        let mapper = if refine { Some(self.load_mapper()?) } else { None };
        let n = n.or(self.config.generate_n).unwrap_or(data.train.len().min(MAX_GENERATED));
        let classes = prior.config.num_classes.max(1);
        let counts = match class {
            Some(c) if c >= classes => {
                return Err(CliError::Config(format!("class {c} out of range for {classes} classes")))
            }
            Some(c) => {
                let mut v = vec![0; classes];
                v[c] = n;
                v
            }
            None => proportional_counts(&data.train_labels(), classes, n),
        };
        let mut r = rng::stream(self.config.seeds.sampling, "generate");
        let (x_hat, labels) = generate_per_class(&stage1, &prior, &counts, self.config.sampling_iterations, &mut r)?;
        let generated = self.generated_tsv();
        self.write_samples(&generated, &x_hat, &labels, "generated")?;
        let refined = match mapper {
            Some(m) => {
                let path = self.refined_tsv();
                self.write_samples(&path, &m.refine(&x_hat)?, &labels, "refined")?;
                Some(path)
            }
            None => None,
        };
        let mut m = self.manifest()?;
        m.set_file("samples.generated", &generated);
        if let Some(p) = &refined {
            m.set_file("samples.refined", p);
        }
        m.set_timing("generate", start.elapsed().as_secs_f64());
        m.save()?;
        Ok(GenerateSummary { generated, refined, rows: labels.len() })
    }

    fn write_samples(&self, path: &Path, x: &Tensor<f32>, labels: &[usize], provenance: &str) -> Result<()> {
        ensure_parent(path)?;
        let header = self.provenance(&[format!("provenance={provenance}")]);
        Ok(write_tsv(path, &from_tensor(x, Some(labels)), &header)?)
    }

    fn read_samples(&self, path: &Path, what: &str) -> Result<(Tensor<f32>, Vec<usize>)> {
        if !path.exists() {
            return Err(missing(what, path.to_path_buf(), "run `nmvq generate --refine` first"));
        }
        let rows = load_labeled_tsv(path)?;
        Ok((to_tensor(&rows), labels_of(&rows)))
    }

    pub fn refine(&self, input: Option<&Path>, output: Option<&Path>) -> Result<PathBuf> {
        let mapper = self.load_mapper()?;
        let input = input.map_or_else(|| self.generated_tsv(), Path::to_path_buf);
        let output = output.map_or_else(|| self.refined_tsv(), Path::to_path_buf);
        let (x, labels) = self.read_samples(&input, "generated samples")?;
        self.write_samples(&output, &mapper.refine(&x)?, &labels, "refined")?;
        let mut m = self.manifest()?;
        m.set_file("samples.refined", &output);
        m.save()?;
        Ok(output)
    }

    // ------------------------------------------------------------ evaluation

    /// FID, cFID and IS of generated and refined samples against the test
    /// split, with ROCKET features for each configured seed and FCN features.
    pub fn evaluate(&self, generated: Option<&Path>, refined: Option<&Path>) -> Result<Vec<MetricRow>> {
        let start = Instant::now();
        let data = self.load_data()?;
        let gen_path = generated.map_or_else(|| self.generated_tsv(), Path::to_path_buf);
        let ref_path = refined.map_or_else(|| self.refined_tsv(), Path::to_path_buf);
        let (xg, yg) = self.read_samples(&gen_path, "generated samples")?;
        let (xr, yr) = self.read_samples(&ref_path, "refined samples")?;
        let xt = data.test_tensor();
        let yt = data.test_labels();
        let name = &self.config.dataset_name;
        let mut rows = Vec::new();

        let seeds = self.config.rocket_seeds();
        let mut sums = [0.0; 4];
        for &seed in &seeds {
            let rocket = self.rocket(data.length, seed)?;
            let feats = |x: &Tensor<f32>| -> Result<FeatureMatrix> { Ok(l2_normalize_rows(&rocket.apply(x)?)) };
            let (ft, fg, fr) = (feats(&xt)?, feats(&xg)?, feats(&xr)?);
            let scores = [
                fid_features(&ft, &fg)?,
                fid_features(&ft, &fr)?,
                cfid(&ft, &yt, &fg, &yg)?,
                cfid(&ft, &yt, &fr, &yr)?,
            ];
            let s = seed.to_string();
            rows.extend(change_rows(name, "fid", "rocket", &s, scores[0], scores[1], false));
            rows.extend(change_rows(name, "cfid", "rocket", &s, scores[2], scores[3], false));
            for (a, b) in sums.iter_mut().zip(scores) {
                *a += b;
            }
        }
        if seeds.len() > 1 {
            let m: Vec<f64> = sums.iter().map(|s| s / seeds.len() as f64).collect();
            rows.extend(change_rows(name, "fid", "rocket", "mean", m[0], m[1], false));
            rows.extend(change_rows(name, "cfid", "rocket", "mean", m[2], m[3], false));
        }

        let fcn = self.fcn()?;
        let (ut, ug, ur) = (fcn.features(&xt)?, fcn.features(&xg)?, fcn.features(&xr)?);
        let s = self.config.seeds.model.to_string();
        rows.extend(change_rows(name, "fid", "fcn", &s, fid_features(&ut, &ug)?, fid_features(&ut, &ur)?, false));
        rows.extend(change_rows(name, "cfid", "fcn", &s, cfid(&ut, &yt, &ug, &yg)?, cfid(&ut, &yt, &ur, &yr)?, false));
        let is_g = inception_score(&fcn.probabilities(&xg)?)?;
        let is_r = inception_score(&fcn.probabilities(&xr)?)?;
        rows.extend(change_rows(name, "is", "fcn", &s, is_g, is_r, true));
        rows.push(MetricRow {
            dataset: name.clone(),
            metric: "is_test".into(),
            feature_source: "fcn".into(),
            value: inception_score(&fcn.probabilities(&xt)?)?,
            seed: s,
        });

        let path = self.metrics_csv();
        write_text(&path, &metrics_csv(&rows, &self.config.provenance()))?;
        let mut m = self.manifest()?;
        m.set_file("metrics.csv", &path);
        for r in &rows {
            m.set(&format!("metrics.{}.{}.{}", r.feature_source, r.metric, r.seed), r.value);
        }
        m.set_timing("evaluate", start.elapsed().as_secs_f64());
        m.save()?;
        Ok(rows)
    }

    // ------------------------------------------------------------ figures

    /// Overlay of up to `visual_samples` series from each of X, X̂ and X̂_R,
    /// and a 2-component PCA scatter of their features.
    pub fn visualize(&self) -> Result<VisualizeSummary> {
        let data = self.load_data()?;
        let (xg, _) = self.read_samples(&self.generated_tsv(), "generated samples")?;
        let (xr, _) = self.read_samples(&self.refined_tsv(), "refined samples")?;
        let xt = data.train_tensor();
        let want = self.config.visual_samples;
        let mut warnings = Vec::new();
        let mut picked = Vec::new();
        for (name, x) in [("X", &xt), ("X_hat", &xg), ("X_hat_R", &xr)] {
            let n = x.dim(0);
            if n < want {
                warnings.push(format!("{name} has {n} series, fewer than {want}; plotting all"));
            }
            let mut r = rng::stream(self.config.seeds.sampling, &format!("visualize/{name}"));
            let mut idx = sample(&mut r, n, want.min(n)).into_vec();
            idx.sort_unstable();
            picked.push((name, nmvq_core::tsgen::gather(x, &idx)));
        }
        let provenance = self.config.provenance();

        let mut overlay_csv = comment_block(&provenance);
        overlay_csv.push_str("provenance,row");
        for t in 0..data.length {
            overlay_csv.push_str(&format!(",t{t}"));
        }
        overlay_csv.push('\n');
        let mut groups = Vec::new();
        for (name, x) in &picked {
            let series: Vec<Vec<f64>> = from_tensor(x, None).into_iter().map(|s| s.values).collect();
            for (i, s) in series.iter().enumerate() {
                overlay_csv.push_str(&format!("{name},{i}"));
                for v in s {
                    overlay_csv.push_str(&format!(",{v}"));
                }
                overlay_csv.push('\n');
            }
            groups.push((*name, series));
        }

        let (source, feats) = if self.checkpoint(Stage::Fcn).exists() {
            let fcn = FcnClassifier::load(&self.load_checkpoint(Stage::Fcn)?)?;
            ("fcn", picked.iter().map(|(_, x)| fcn.features(x)).collect::<Result<Vec<_>, _>>()?)
        } else {
            let rocket = self.rocket(data.length, self.config.seeds.rocket)?;
            let f = picked.iter().map(|(_, x)| Ok(l2_normalize_rows(&rocket.apply(x)?))).collect::<Result<Vec<_>>>()?;
            ("rocket", f)
        };
        let pca = pca_fit(&feats[0], 2)?;
        let mut pca_csv = comment_block(&self.provenance(&[format!("feature_source={source}")]));
        pca_csv.push_str("x,y,provenance\n");
        let mut points = Vec::new();
        for ((name, _), f) in picked.iter().zip(&feats) {
            let label = match *name {
                "X" => "U",
                "X_hat" => "U_hat",
                _ => "U_hat_R",
            };
            let p = pca.project(f)?;
            let pts: Vec<(f64, f64)> = (0..p.rows()).map(|i| (p.row(i)[0], p.row(i)[1])).collect();
            for (x, y) in &pts {
                pca_csv.push_str(&format!("{x},{y},{label}\n"));
            }
            points.push((label, pts));
        }

        let files = [
            ("figures/overlay.csv", overlay_csv),
            ("figures/overlay.svg", svg::overlay(&groups, &provenance)),
            ("figures/pca.csv", pca_csv),
            ("figures/pca.svg", svg::scatter(&points, &provenance)),
        ];
        let mut written = Vec::new();
        let mut m = self.manifest()?;
        for (rel, text) in files {
            let path = self.path(rel);
            write_text(&path, &text)?;
            m.set_file(&format!("figures.{}", rel.trim_start_matches("figures/").replace('.', "_")), &path);
            written.push(path);
        }
        m.save()?;
        Ok(VisualizeSummary { files: written, warnings })
    }

    /// Every step in order: data, stages 1 and 2, τ search, stage 3,
    /// generation with refinement, evaluation and figures.
    pub fn run_all(&self) -> Result<Vec<MetricRow>> {
        self.prepare_data(None)?;
        self.train(Stage::One, None)?;
        self.train(Stage::Two, None)?;
        self.search_tau()?;
        self.train(Stage::Three, None)?;
        self.generate(None, None, true)?;
        let rows = self.evaluate(None, None)?;
        self.visualize()?;
        Ok(rows)
    }
}

//! One method per command. Every stage writes its artifact under `out_dir`
//! with a provenance sidecar, and is skipped when already up to date.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use zskd_core::augment::{all_ops, AugmentedView, OUTPUTS_PER_IMPRESSION};
use zskd_core::data::{load_split, preprocess, synthetic_digits, write_atomically, Dataset, Split};
use zskd_core::distill::{
    evaluate, finetune_augmented, train_student_ce, train_student_kd, train_teacher, zskd_distill, TrainContext,
    TrainOutcome, TrainReport,
};
use zskd_core::impressions::{
    di_schedule, generate_class_impressions, generate_transfer_set, load_transfer_set, write_pgm, TransferSet,
    TransferSpec,
};
use zskd_core::models::{build_lenet5, build_lenet5_half, load_checkpoint, save_checkpoint, Network};
use zskd_core::prior::{class_similarity, uniform_prior};
use zskd_core::rng::derive_seed;

use crate::artifacts::{sha256_file, sidecar_path, Sidecar, Stage, Status};
use crate::config::{fraction_label, ConfigErrors, ExperimentConfig, Method, PriorChoice};
use crate::error::{CliError, CliResult};

const TEACHER_INIT: u64 = 1;
const TEACHER_ORDER: u64 = 2;
const STUDENT_INIT: u64 = 3;
const STUDENT_CE_ORDER: u64 = 4;
const STUDENT_KD_ORDER: u64 = 5;
const DI_SEED: u64 = 6;
const CI_SEED: u64 = 7;
const ZSKD_ORDER: u64 = 8;
const REAL_SAMPLE: u64 = 9;
const REAL_ORDER: u64 = 10;
const FINETUNE_ORDER: u64 = 11;
const SYNTHETIC_TRAIN: u64 = 12;
const SYNTHETIC_TEST: u64 = 13;

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: Method,
    pub count: usize,
    pub accuracy: f64,
    pub best_accuracy: f64,
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: &'static str,
    pub model: &'static str,
    pub transfer_set: String,
    pub accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub force: bool,
    train: OnceCell<Dataset>,
    test: OnceCell<Dataset>,
}

fn config_error(msg: String) -> CliError {
    CliError::Config(ConfigErrors(vec![msg]))
}

impl Pipeline {
    /// Creates the output directory and records the resolved config in it.
    pub fn new(cfg: ExperimentConfig, force: bool) -> CliResult<Self> {
        fs::create_dir_all(&cfg.out_dir).map_err(|e| zskd_core::Error::Io {
            path: cfg.out_dir.clone(),
            source: e,
        })?;
        write_atomically(&cfg.out_dir.join("config.resolved.toml"), cfg.to_toml().as_bytes())?;
        Ok(Self::planner(cfg, force))
    }

    /// A pipeline that touches nothing on disk until a stage runs, for
    /// dry runs.
    pub fn planner(cfg: ExperimentConfig, force: bool) -> Self {
        Self {
            cfg,
            force,
            train: OnceCell::new(),
            test: OnceCell::new(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn seed(&self, tags: &[u64]) -> u64 {
        derive_seed(self.cfg.seed, tags)
    }

    fn load(&self, split: Split) -> CliResult<Dataset> {
        let resize = self.cfg.resize.into();
        Ok(match self.cfg.synthetic {
            Some(s) => {
                let (n, tag) = match split {
                    Split::Train => (s.train, SYNTHETIC_TRAIN),
                    Split::Test => (s.test, SYNTHETIC_TEST),
                };
                preprocess(&synthetic_digits(n, self.seed(&[tag])), split, resize)?
            }
            None => load_split(&self.cfg.data_dir, split, resize)?,
        })
    }

    pub fn train_data(&self) -> CliResult<&Dataset> {
        if self.train.get().is_none() {
            let _ = self.train.set(self.load(Split::Train)?);
        }
        Ok(self.train.get().expect("just set"))
    }

    pub fn test_data(&self) -> CliResult<&Dataset> {
        if self.test.get().is_none() {
            let _ = self.test.set(self.load(Split::Test)?);
        }
        Ok(self.test.get().expect("just set"))
    }

    fn data_settings(&self, with_train: bool) -> CliResult<serde_json::Value> {
        let test = self.test_data()?.checksum.clone();
        let train = if with_train {
            Some(self.train_data()?.checksum.clone())
        } else {
            None
        };
        Ok(json!({
            "dataset": self.cfg.dataset.as_str(),
            "resize": self.cfg.resize,
            "train": train,
            "test": test,
        }))
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.path("teacher.ckpt")
    }

    fn load_network(&self, path: &Path) -> CliResult<Network> {
        if !path.exists() {
            return Err(CliError::Missing(path.display().to_string()));
        }
        Ok(load_checkpoint(path)?)
    }

    fn finish(&self, out: &TrainOutcome, artifact: &Path, stem: &str) -> CliResult<()> {
        log::info!(
            "{stem}: final accuracy {:?}, {:.1}s",
            out.report.final_accuracy,
            out.report.wall_clock_secs
        );
        out.report.without_timing().save(&self.cfg.out_dir, stem)?;
        save_checkpoint(&out.network, artifact)?;
        Ok(())
    }

    /// The stored report for `stem`, if that stage has run.
    pub fn report_of(&self, stem: &str) -> CliResult<Option<TrainReport>> {
        let path = self.path(&format!("{stem}.json"));
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(TrainReport::from_json(&text)?)),
            Err(_) => Ok(None),
        }
    }

    pub fn train_teacher(&self) -> CliResult<Status> {
        let mut dc = self.cfg.teacher_distill();
        dc.seed = self.seed(&[TEACHER_ORDER]);
        let init = self.seed(&[TEACHER_INIT]);
        let stage = Stage {
            command: "train-teacher",
            artifact: self.teacher_path(),
            settings: json!({ "data": self.data_settings(true)?, "train": dc, "init": init }),
            upstream: vec![],
            resumable: false,
        };
        stage.run(self.force, || {
            let ctx = TrainContext::with_test(self.test_data()?);
            let out = train_teacher(build_lenet5(init), self.train_data()?, &dc, ctx)?;
            self.finish(&out, &stage.artifact, "teacher")
        })
    }

    pub fn train_student_ce(&self) -> CliResult<Status> {
        let mut dc = self.cfg.student_ce_distill();
        dc.seed = self.seed(&[STUDENT_CE_ORDER]);
        let init = self.seed(&[STUDENT_INIT]);
        let stage = Stage {
            command: "train-student-ce",
            artifact: self.path("student_ce.ckpt"),
            settings: json!({ "data": self.data_settings(true)?, "train": dc, "init": init }),
            upstream: vec![],
            resumable: false,
        };
        stage.run(self.force, || {
            let ctx = TrainContext::with_test(self.test_data()?);
            let out = train_student_ce(build_lenet5_half(init), self.train_data()?, &dc, ctx)?;
            self.finish(&out, &stage.artifact, "student_ce")
        })
    }

    /// Classical distillation on the full training set, or with `fraction`
    /// on a seeded sample of that share (the real-data baseline).
    pub fn train_student_kd(&self, fraction: Option<f64>) -> CliResult<Status> {
        let (stem, count) = match fraction {
            None => ("student_kd".to_string(), None),
            Some(f) => (format!("student_real_{}", fraction_label(f)), Some(self.cfg.count_for(f))),
        };
        let mut dc = self.cfg.student_kd_distill();
        dc.seed = match count {
            None => self.seed(&[STUDENT_KD_ORDER]),
            Some(n) => self.seed(&[REAL_ORDER, n as u64]),
        };
        let init = self.seed(&[STUDENT_INIT]);
        let sample_seed = self.seed(&[REAL_SAMPLE]);
        let stage = Stage {
            command: "train-student-kd",
            artifact: self.path(&format!("{stem}.ckpt")),
            settings: json!({
                "data": self.data_settings(true)?,
                "train": dc,
                "init": init,
                "count": count,
                "sample_seed": sample_seed,
            }),
            upstream: vec![self.teacher_path()],
            resumable: false,
        };
        stage.run(self.force, || {
            let teacher = self.load_network(&self.teacher_path())?;
            let full = self.train_data()?;
            let sampled;
            let data = match count {
                Some(n) => {
                    sampled = full.sample(n, sample_seed)?;
                    &sampled
                }
                None => full,
            };
            let ctx = TrainContext::with_test(self.test_data()?);
            let out = train_student_kd(build_lenet5_half(init), &teacher, data, &dc, ctx)?;
            self.finish(&out, &stage.artifact, &stem)
        })
    }

    pub fn extract_prior(&self) -> CliResult<Status> {
        let stage = Stage {
            command: "extract-prior",
            artifact: self.path("prior_normalized.csv"),
            settings: json!({ "prior": "class-similarity" }),
            upstream: vec![self.teacher_path()],
            resumable: false,
        };
        stage.run(self.force, || {
            let teacher = self.load_network(&self.teacher_path())?;
            class_similarity(&teacher)?.export_csv(&self.cfg.out_dir, "prior")?;
            Ok(())
        })
    }

    fn set_path(&self, method: Method, fraction: f64) -> PathBuf {
        let label = fraction_label(fraction);
        match (method, self.cfg.prior.kind) {
            (Method::Di, PriorChoice::ClassSimilarity) => self.path(&format!("di_{label}.tset")),
            (Method::Di, PriorChoice::Uniform) => self.path(&format!("di-uniform_{label}.tset")),
            _ => self.path(&format!("ci_{label}.tset")),
        }
    }

    fn student_stem(&self, method: Method, fraction: f64) -> String {
        let label = fraction_label(fraction);
        match (method, self.cfg.prior.kind) {
            (Method::Di, PriorChoice::ClassSimilarity) => format!("student_di_{label}"),
            (Method::Di, PriorChoice::Uniform) => format!("student_di-uniform_{label}"),
            (Method::Ci, _) => format!("student_ci_{label}"),
            (Method::RealData, _) => format!("student_real_{label}"),
        }
    }

    fn transfer_spec(&self, fraction: f64) -> CliResult<TransferSpec> {
        let size = self
            .cfg
            .di_size(fraction)
            .ok_or_else(|| config_error(format!("no di.sizes entry for fraction {fraction}")))?;
        let n = self.cfg.count_for(fraction);
        Ok(TransferSpec {
            n,
            betas: self.cfg.prior.betas.clone(),
            synthesis: self.cfg.synthesis(size),
            seed: self.seed(&[DI_SEED, n as u64]),
        })
    }

    /// `(class, beta, count, lr, batch, iterations)` per class and beta, as
    /// printed by `gen-di --dry-run`.
    pub fn di_plan(&self, fraction: f64) -> CliResult<String> {
        let spec = self.transfer_spec(fraction)?;
        let s = &spec.synthesis;
        let jobs = di_schedule(spec.n, zskd_core::data::NUM_CLASSES, &spec.betas, s.batch_size, spec.seed)?;
        let mut per_pair: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for j in &jobs {
            per_pair.entry((j.class_index, j.beta_index)).or_insert((j.beta, 0)).1 += j.count;
        }
        let mut out = String::from("class,beta,count,lr,batch,iterations\n");
        for ((class, _), (beta, count)) in per_pair {
            let _ = writeln!(out, "{class},{beta},{count},{},{},{}", s.lr, s.batch_size, s.iterations);
        }
        let total: usize = jobs.iter().map(|j| j.count).sum();
        let _ = writeln!(out, "# {total} impressions in {} batches", jobs.len());
        Ok(out)
    }

    pub fn gen_di(&self, fraction: f64) -> CliResult<Status> {
        let spec = self.transfer_spec(fraction)?;
        let s = &spec.synthesis;
        let stage = Stage {
            command: "gen-di",
            artifact: self.set_path(Method::Di, fraction),
            settings: json!({
                "n": spec.n,
                "betas": spec.betas,
                "prior": self.cfg.prior.kind,
                "tau": s.tau,
                "lr": s.lr,
                "iterations": s.iterations,
                "batch_size": s.batch_size,
                "seed": spec.seed,
            }),
            upstream: vec![self.teacher_path()],
            resumable: true,
        };
        stage.run(self.force, || {
            let teacher = self.load_network(&self.teacher_path())?;
            let prior = match self.cfg.prior.kind {
                PriorChoice::ClassSimilarity => class_similarity(&teacher)?,
                PriorChoice::Uniform => uniform_prior(teacher.num_classes())?,
            };
            generate_transfer_set(&teacher, &prior, &spec, Some(&stage.artifact))?;
            Ok(())
        })
    }

    pub fn gen_ci(&self, fraction: f64) -> CliResult<Status> {
        let size = self
            .cfg
            .ci_size(fraction)
            .ok_or_else(|| config_error(format!("no ci.sizes entry for fraction {fraction}")))?;
        let ci = self.cfg.class_impression(size);
        let n = self.cfg.count_for(fraction);
        let seed = self.seed(&[CI_SEED, n as u64]);
        let stage = Stage {
            command: "gen-ci",
            artifact: self.set_path(Method::Ci, fraction),
            settings: json!({
                "n": n,
                "lr": ci.lr,
                "max_iterations": ci.max_iterations,
                "confidence": [ci.confidence.0, ci.confidence.1],
                "seed": seed,
            }),
            upstream: vec![self.teacher_path()],
            resumable: true,
        };
        stage.run(self.force, || {
            let teacher = self.load_network(&self.teacher_path())?;
            generate_class_impressions(&teacher, n, &ci, seed, Some(&stage.artifact))?;
            Ok(())
        })
    }

    fn load_set(&self, path: &Path) -> CliResult<TransferSet> {
        if !path.exists() || !sidecar_path(path).exists() {
            return Err(CliError::Missing(path.display().to_string()));
        }
        Ok(load_transfer_set(path)?)
    }

    /// Writes a manifest of the augmentation applied to a DI set and PGM
    /// previews of all variants of its first impression. Fine-tuning computes
    /// the augmented images on the fly, so the full set is never stored.
    pub fn augment(&self, fraction: f64) -> CliResult<Status> {
        let base = self.set_path(Method::Di, fraction);
        let label = fraction_label(fraction);
        let stage = Stage {
            command: "augment",
            artifact: self.path(&format!("augment_{label}.json")),
            settings: json!({ "outputs_per_impression": OUTPUTS_PER_IMPRESSION }),
            upstream: vec![base.clone()],
            resumable: false,
        };
        stage.run(self.force, || {
            let set = self.load_set(&base)?;
            let view = AugmentedView::new(&set);
            let ops: Vec<String> = all_ops().iter().map(|op| format!("{op:?}")).collect();
            let preview = self.path(&format!("augment_{label}_preview"));
            let [h, w, _] = set.provenance.image_shape;
            for (i, op) in ops.iter().enumerate() {
                let img = view.image(i)?;
                let name: String = op.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '-').collect();
                write_pgm(&preview.join(format!("{i:03}_{name}.pgm")), w, h, img.data())?;
            }
            let manifest = json!({
                "base": base.file_name().map(|n| n.to_string_lossy().into_owned()),
                "base_impressions": set.len(),
                "outputs_per_impression": OUTPUTS_PER_IMPRESSION,
                "augmented_images": view.len(),
                "ops": ops,
            });
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
            write_atomically(&stage.artifact, text.as_bytes())?;
            Ok(())
        })
    }

    /// Zero-shot distillation of a fresh student on a DI or CI transfer set.
    pub fn zskd(&self, fraction: f64, method: Method) -> CliResult<Status> {
        let student_lr = match method {
            Method::Di => self.cfg.di_size(fraction).map(|s| s.student_lr),
            Method::Ci => self.cfg.ci_size(fraction).map(|s| s.student_lr),
            Method::RealData => return self.train_student_kd(Some(fraction)),
        }
        .ok_or_else(|| config_error(format!("no {} settings for fraction {fraction}", method.as_str())))?;
        let n = self.cfg.count_for(fraction);
        let mut dc = self.cfg.zskd_distill(student_lr);
        dc.seed = self.seed(&[ZSKD_ORDER, method as u64, n as u64]);
        let init = self.seed(&[STUDENT_INIT]);
        let set_path = self.set_path(method, fraction);
        let stem = self.student_stem(method, fraction);
        let stage = Stage {
            command: "zskd",
            artifact: self.path(&format!("{stem}.ckpt")),
            settings: json!({ "data": self.data_settings(false)?, "train": dc, "init": init }),
            upstream: vec![self.teacher_path(), set_path.clone()],
            resumable: false,
        };
        stage.run(self.force, || {
            let teacher = self.load_network(&self.teacher_path())?;
            let set = self.load_set(&set_path)?;
            let ctx = TrainContext::with_test(self.test_data()?);
            let out = zskd_distill(build_lenet5_half(init), &teacher, &set, &dc, ctx)?;
            self.finish(&out, &stage.artifact, &stem)
        })
    }

    /// Continues the DI student of `finetune.fraction` on its transfer set
    /// plus every augmentation of it.
    pub fn finetune(&self) -> CliResult<Status> {
        let fraction = self.cfg.finetune.fraction;
        let mut dc = self.cfg.finetune_distill();
        dc.seed = self.seed(&[FINETUNE_ORDER]);
        let set_path = self.set_path(Method::Di, fraction);
        let student_path = self.path(&format!("{}.ckpt", self.student_stem(Method::Di, fraction)));
        let stage = Stage {
            command: "finetune",
            artifact: self.path("student_finetune.ckpt"),
            settings: json!({ "data": self.data_settings(false)?, "train": dc }),
            upstream: vec![self.teacher_path(), set_path.clone(), student_path.clone()],
            resumable: false,
        };
        stage.run(self.force, || {
            let teacher = self.load_network(&self.teacher_path())?;
            let student = self.load_network(&student_path)?;
            let set = self.load_set(&set_path)?;
            let view = AugmentedView::new(&set);
            let ctx = TrainContext::with_test(self.test_data()?);
            let out = finetune_augmented(student, &teacher, &set, &view, &dc, ctx)?;
            self.finish(&out, &stage.artifact, "student_finetune")
        })
    }

    /// Test accuracy of any checkpoint, in percent.
    pub fn eval(&self, checkpoint: &Path) -> CliResult<f64> {
        let net = self.load_network(checkpoint)?;
        Ok(evaluate(&net, self.test_data()?)?)
    }

    /// Runs every `(fraction, method)` of the sweep, producing missing
    /// upstream stages on the way, and writes `sweep.csv`.
    pub fn sweep(&self) -> CliResult<Vec<SweepRow>> {
        self.train_teacher()?;
        let mut rows = Vec::new();
        for &fraction in &self.cfg.sweep.fractions {
            for &method in &self.cfg.sweep.methods {
                match method {
                    Method::Di => self.gen_di(fraction)?,
                    Method::Ci => self.gen_ci(fraction)?,
                    Method::RealData => Status::Run,
                };
                self.zskd(fraction, method)?;
                let stem = self.student_stem(method, fraction);
                let report = self
                    .report_of(&stem)?
                    .ok_or_else(|| CliError::Missing(format!("{stem}.json")))?;
                rows.push(SweepRow {
                    fraction,
                    method,
                    count: self.cfg.count_for(fraction),
                    accuracy: report.final_accuracy.unwrap_or(f64::NAN),
                    best_accuracy: report.best_accuracy.unwrap_or(f64::NAN),
                });
            }
        }
        let mut csv = String::from("fraction,method,count,accuracy,best_accuracy\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{:.2},{:.2}",
                r.fraction,
                r.method.as_str(),
                r.count,
                r.accuracy,
                r.best_accuracy
            );
        }
        write_atomically(&self.path("sweep.csv"), csv.as_bytes())?;
        Ok(rows)
    }

    /// Collects the results table from the stored reports. Rows whose stage
    /// has not run have no accuracy.
    pub fn report_rows(&self) -> CliResult<Vec<ReportRow>> {
        let train = format!("{} real", self.cfg.train_size());
        let mut rows = Vec::new();
        let mut push = |name, model, transfer_set: String, stem: &str| -> CliResult<()> {
            let r = self.report_of(stem)?;
            rows.push(ReportRow {
                name,
                model,
                transfer_set,
                accuracy: r.as_ref().and_then(|r| r.final_accuracy),
                best_accuracy: r.as_ref().and_then(|r| r.best_accuracy),
            });
            Ok(())
        };
        push("Teacher-CE", "LeNet-5", train.clone(), "teacher")?;
        push("Student-CE", "LeNet-5-Half", train.clone(), "student_ce")?;
        push("Student-KD", "LeNet-5-Half", train, "student_kd")?;
        let largest = self
            .cfg
            .di
            .sizes
            .iter()
            .rev()
            .map(|s| s.fraction)
            .find(|&f| self.path(&format!("{}.json", self.student_stem(Method::Di, f))).exists())
            .unwrap_or(self.cfg.finetune.fraction);
        let di_count = format!("{} DI", self.cfg.count_for(largest));
        push("ZSKD", "LeNet-5-Half", di_count, &self.student_stem(Method::Di, largest))?;
        if self.path("student_finetune.json").exists() {
            let f = self.cfg.finetune.fraction;
            let set = format!("{} DI + augmented", self.cfg.count_for(f));
            push("ZSKD + augmentation", "LeNet-5-Half", set, "student_finetune")?;
        }
        Ok(rows)
    }

    /// Writes `report.md` and `report.csv`.
    pub fn report(&self) -> CliResult<Vec<ReportRow>> {
        let rows = self.report_rows()?;
        let fmt = |a: Option<f64>| a.map(|a| format!("{a:.2}")).unwrap_or_else(|| "n/a".into());
        let mut md = format!(
            "# Results: {}\n\n| Model | Network | Transfer set | Test accuracy (%) | Best (%) |\n|---|---|---|---|---|\n",
            self.cfg.dataset.as_str()
        );
        let mut csv = String::from("row,model,transfer_set,accuracy,best_accuracy\n");
        for r in &rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                r.name,
                r.model,
                r.transfer_set,
                fmt(r.accuracy),
                fmt(r.best_accuracy)
            );
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.name,
                r.model,
                r.transfer_set,
                fmt(r.accuracy),
                fmt(r.best_accuracy)
            );
        }
        md.push_str("\n## Artifacts\n\n| File | SHA-256 | Config hash |\n|---|---|---|\n");
        for (name, side) in self.sidecars()? {
            let _ = writeln!(md, "| {name} | {} | {} |", side.artifact_sha256, side.config_hash);
        }
        write_atomically(&self.path("report.md"), md.as_bytes())?;
        write_atomically(&self.path("report.csv"), csv.as_bytes())?;
        Ok(rows)
    }

    fn sidecars(&self) -> CliResult<BTreeMap<String, Sidecar>> {
        let mut out = BTreeMap::new();
        let entries = fs::read_dir(&self.cfg.out_dir).map_err(|e| zskd_core::Error::Io {
            path: self.cfg.out_dir.clone(),
            source: e,
        })?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(artifact) = name.strip_suffix(".prov.json") {
                if let Ok(side) = serde_json::from_str::<Sidecar>(&fs::read_to_string(entry.path()).unwrap_or_default()) {
                    out.insert(artifact.to_string(), side);
                }
            }
        }
        Ok(out)
    }

    /// Hash of a stage artifact, for tests and reports.
    pub fn artifact_hash(&self, name: &str) -> CliResult<String> {
        sha256_file(&self.path(name))
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::utf::{train, transcribe, validate, Teacher, TrainData};
use super::{EpochRecord, StageSpec, TrainConfig, MAX_STAGE};
use crate::data::{derive_seed, normalize_image, resize_pad, stream, toy_corpus, Charset, SampleRecord, TOY_ALPHABET};
use crate::error::{Error, Result};
use crate::eval::metrics;
use crate::model::{save, Model, ModelConfig, TOY_HEIGHT, TOY_WIDTH};
use crate::numerics::Scalar;

/// Desk-scale teacher/student comparison on the rendered toy corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyExperiment {
    pub lines: usize,
    pub val_lines: usize,
    pub test_lines: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub student_seeds: Vec<u64>,
    /// Seeds the corpus, split, augmentation and teacher.
    pub seed: u64,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        let classes = TOY_ALPHABET.chars().count() + 1;
        ToyExperiment {
            lines: 2000,
            val_lines: 200,
            test_lines: 200,
            teacher_epochs: 30,
            student_epochs: super::TOY_STUDENT_EPOCHS,
            student_seeds: vec![1, 2, 3],
            seed: 0,
            teacher: ModelConfig::toy_teacher(classes),
            student: ModelConfig::toy_student(classes),
            train: TrainConfig::default(),
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyStudentResult {
    pub seed: u64,
    pub kd_test_cer: f64,
    pub baseline_test_cer: f64,
    pub kd_log: Vec<EpochRecord>,
    pub baseline_log: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyReport {
    pub teacher_val_cer: f64,
    pub teacher_test_cer: f64,
    pub teacher_params: usize,
    pub student_params: usize,
    pub teacher_log: Vec<EpochRecord>,
    pub students: Vec<ToyStudentResult>,
    pub median_kd_test_cer: f64,
    pub median_baseline_test_cer: f64,
    pub seconds: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn write_log(dir: Option<&Path>, name: &str) -> Result<Option<BufWriter<File>>> {
    dir.map(|d| {
        let p = d.join(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
    })
    .transpose()
}

fn test_cer<F: Scalar>(model: &Model<F>, test: &[SampleRecord], charset: &Charset, batch: usize) -> Result<f64> {
    let images = test
        .iter()
        .map(|r| {
            let sized = resize_pad(&r.image, model.config.height, model.config.width, r.image.min_max().1)?;
            Ok(normalize_image(&sized))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&_> = images.iter().collect();
    let hyps = transcribe(model, &refs, charset, batch, None)?;
    let texts: Vec<&str> = test.iter().map(|r| r.text.as_str()).collect();
    Ok(metrics(&texts, &hyps)?.cer)
}

/// Generates the corpus, trains the teacher without distillation, then for
/// every student seed trains one student with and one without the
/// distillation term from the same initialization, and reports test CERs.
pub fn run_toy_experiment<F: Scalar>(exp: &ToyExperiment) -> Result<ToyReport> {
    let start = Instant::now();
    if exp.val_lines + exp.test_lines >= exp.lines {
        return Err(Error::Config("validation and test splits leave no training lines".into()));
    }
    if exp.student_seeds.is_empty() {
        return Err(Error::Config("need at least one student seed".into()));
    }
    let out = exp.out_dir.as_deref();
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (h, w) = (TOY_HEIGHT, TOY_WIDTH);
    let mut corpus = toy_corpus(exp.lines, h, w, exp.seed)?;
    corpus.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, &[stream::SPLIT])));
    let test = corpus.split_off(exp.lines - exp.test_lines);
    let val = corpus.split_off(corpus.len() - exp.val_lines);
    let charset = Charset::from_chars(TOY_ALPHABET.chars())?;
    let data = TrainData::build(
        &corpus,
        &val,
        &charset,
        &exp.train.augment,
        exp.train.synthetic_rmax,
        (h, w),
        exp.seed,
    )?;

    let mut teacher = Model::<F>::new(exp.teacher.clone(), derive_seed(exp.seed, &[stream::INIT]))?;
    let tcfg = TrainConfig {
        epochs: exp.teacher_epochs,
        distill: false,
        seed: exp.seed,
        ..exp.train.clone()
    };
    let mut log = write_log(out, "teacher.jsonl")?;
    let teacher_report = train(&mut teacher, None, &data, &tcfg, log.as_mut().map(|l| l as &mut dyn Write))?;
    drop(log);
    let batch = exp.train.batch_size;
    let teacher_val_cer = validate(&teacher, &data, StageSpec::of(MAX_STAGE), batch)?.report.cer;
    let teacher_test_cer = test_cer(&teacher, &test, &charset, batch)?;
    log::info!("teacher: val cer {teacher_val_cer:.4}, test cer {teacher_test_cer:.4}");
    if let Some(d) = out {
        save(&teacher, &d.join("teacher.htrj"))?;
    }

    let mut cache = Teacher::new(&teacher, batch);
    let mut students = Vec::new();
    for &seed in &exp.student_seeds {
        let init = Model::<F>::new(exp.student.clone(), derive_seed(seed, &[stream::INIT]))?;
        let run = |distill: bool, cache: &mut Teacher<F>| -> Result<(f64, Vec<EpochRecord>)> {
            let name = if distill { "kd" } else { "baseline" };
            let mut model = init.clone();
            let cfg = TrainConfig {
                epochs: exp.student_epochs,
                distill,
                seed,
                ..exp.train.clone()
            };
            let mut log = write_log(out, &format!("student-{name}-{seed}.jsonl"))?;
            let report = train(
                &mut model,
                distill.then_some(cache),
                &data,
                &cfg,
                log.as_mut().map(|l| l as &mut dyn Write),
            )?;
            let cer = test_cer(&model, &test, &charset, batch)?;
            log::info!("student {name} seed {seed}: test cer {cer:.4}");
            if let Some(d) = out {
                save(&model, &d.join(format!("student-{name}-{seed}.htrj")))?;
            }
            Ok((cer, report.log))
        };
        let (kd_test_cer, kd_log) = run(true, &mut cache)?;
        let (baseline_test_cer, baseline_log) = run(false, &mut cache)?;
        students.push(ToyStudentResult {
            seed,
            kd_test_cer,
            baseline_test_cer,
            kd_log,
            baseline_log,
        });
    }
    let kd: Vec<f64> = students.iter().map(|s| s.kd_test_cer).collect();
    let base: Vec<f64> = students.iter().map(|s| s.baseline_test_cer).collect();
    let report = ToyReport {
        teacher_val_cer,
        teacher_test_cer,
        teacher_params: teacher.param_count(),
        student_params: crate::model::param_count(&exp.student),
        teacher_log: teacher_report.log,
        students,
        median_kd_test_cer: median(&kd),
        median_baseline_test_cer: median(&base),
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = out {
        let p = d.join("report.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Training(e.to_string()))?;
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}

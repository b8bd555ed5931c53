use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use htr_core::ctc::oracle;
use htr_core::distill::{kd_loss, weight_schedule};
use htr_core::eval::{char_distance, lexicon_correct, metrics, Lexicon};
use htr_core::model::{param_count, ModelConfig, FULL_CLASSES, FULL_HEIGHT, FULL_WIDTH};
use htr_core::oracle::gradient_suite;
use htr_core::train::{
    acp_step, median, run_toy_experiment, synthetic_ratio, Curriculum, EpochRecord, ToyExperiment, ToyReport,
    MAX_STAGE,
};

/// Serializes the long-running criteria so their timings are not inflated by
/// each other on small machines.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line outside the test harness's capture, then fails
/// the test if the criterion did not hold.
fn verdict(n: usize, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    assert!(pass, "{line}");
}

#[test]
fn criterion_01_ctc_matches_enumeration() {
    let start = Instant::now();
    let r = oracle::ctc_suite(200, 2024, 1e-9).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        r.passed() && r.cases == 200 && secs < 10.0,
        format!("{} cases, {} failures, max |fb - brute| {:.2e}, {secs:.2}s", r.cases, r.failures, r.max_error),
    );
}

#[test]
fn criterion_02_gradient_suite() {
    let _g = heavy();
    let start = Instant::now();
    let cases = gradient_suite(7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}={:.2e}", c.name, c.error))
        .collect();
    let worst = cases.iter().map(|c| c.error / c.tolerance).fold(0.0, f64::max);
    verdict(
        2,
        failed.is_empty() && cases.len() == 14 && secs < 120.0,
        format!(
            "{} operations, worst error/tolerance {worst:.3}, {secs:.1}s{}",
            cases.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(" ")) }
        ),
    );
}

#[test]
fn criterion_03_loss_schedule() {
    let e_total = 100;
    let w0 = weight_schedule(0, e_total);
    let we = weight_schedule(e_total, e_total);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let mut ok = close(w0.alpha, 0.7) && close(w0.gamma, 0.2) && close(w0.delta, 0.1);
    ok &= close(we.alpha, 0.4) && close(we.gamma, 0.5) && close(we.delta, 0.1);
    for e in 0..=e_total {
        let w = weight_schedule(e, e_total);
        ok &= w.sum() == 1.0;
        ok &= w.delta == 0.1;
        ok &= [w.alpha, w.beta, w.gamma].iter().all(|&x| x >= 0.0);
    }
    let ratios: Vec<f64> = (0..=e_total).map(|e| synthetic_ratio(e, e_total, 0.1, 0.4).unwrap()).collect();
    ok &= close(ratios[0], 0.1) && close(ratios[e_total], 0.4);
    ok &= ratios.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        3,
        ok,
        format!(
            "epoch 0 ({:.2},{:.2},{:.2},{:.2}), epoch E ({:.2},{:.2},{:.2},{:.2}), r_s {:.2}..{:.2}",
            w0.alpha, w0.beta, w0.gamma, w0.delta, we.alpha, we.beta, we.gamma, we.delta, ratios[0], ratios[e_total]
        ),
    );
}

#[test]
fn criterion_04_distillation_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = 5;
    let mut max_equal: f64 = 0.0;
    let mut min_random = f64::INFINITY;
    for _ in 0..10_000 {
        let frames = rng.random_range(1..=4);
        let student_frames = rng.random_range(1..=4);
        let tau = rng.random_range(0.5..4.0);
        let zt: Vec<f64> = (0..frames * v).map(|_| rng.random_range(-5.0..5.0)).collect();
        let zs: Vec<f64> = (0..student_frames * v).map(|_| rng.random_range(-5.0..5.0)).collect();
        min_random = min_random.min(kd_loss(&zt, &zs, v, tau).unwrap());
        max_equal = max_equal.max(kd_loss(&zt, &zt, v, tau).unwrap().abs());
    }
    let two_class = kd_loss(&[1.0, 0.0], &[0.0, 1.0], 2, 1.0).unwrap();
    verdict(
        4,
        max_equal < 1e-10 && min_random >= 0.0 && (two_class - 0.462).abs() <= 1e-3,
        format!("max at equal logits {max_equal:.1e}, min over 1e4 pairs {min_random:.3e}, two-class {two_class:.4}"),
    );
}

#[test]
fn criterion_05_decoder_equivalence() {
    let r = oracle::decoder_suite(100, 5).unwrap();
    verdict(
        5,
        r.passed(),
        format!("{} cases (greedy vs width 1, exhaustive vs wide beam), {} failures", r.cases, r.failures),
    );
}

fn toy_report() -> &'static ToyReport {
    static REPORT: OnceLock<ToyReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let _g = heavy();
        let dir = tempfile::tempdir().unwrap();
        let exp = ToyExperiment {
            out_dir: Some(dir.path().to_path_buf()),
            ..ToyExperiment::default()
        };
        run_toy_experiment::<f32>(&exp).unwrap()
    })
}

#[test]
fn criterion_06_toy_distillation() {
    let r = toy_report();
    let per_seed: Vec<String> = r
        .students
        .iter()
        .map(|s| format!("seed {} kd {:.4} base {:.4}", s.seed, s.kd_test_cer, s.baseline_test_cer))
        .collect();
    verdict(
        6,
        r.teacher_val_cer < 0.15 && r.median_kd_test_cer < r.median_baseline_test_cer && r.seconds <= 1800.0,
        format!(
            "teacher val CER {:.4}; median test CER kd {:.4} vs baseline {:.4} ({}); {:.0}s",
            r.teacher_val_cer,
            r.median_kd_test_cer,
            r.median_baseline_test_cer,
            per_seed.join(", "),
            r.seconds
        ),
    );
}

#[test]
fn toy_student_validation_cer_falls_over_first_five_epochs() {
    let r = toy_report();
    let med: Vec<f64> = (0..5)
        .map(|e| median(&r.students.iter().map(|s| s.kd_log[e].val_cer).collect::<Vec<_>>()))
        .collect();
    assert!(med.windows(2).all(|w| w[1] < w[0]), "median kd student val CER, epochs 1-5: {med:?}");
}

#[test]
fn criterion_07_compression_ratio() {
    let t = param_count(&ModelConfig::teacher(FULL_CLASSES, FULL_HEIGHT, FULL_WIDTH));
    let s = param_count(&ModelConfig::student(FULL_CLASSES, FULL_HEIGHT, FULL_WIDTH));
    let ratio = s as f64 / t as f64;
    verdict(
        7,
        (0.45..=0.55).contains(&ratio),
        format!("student {s} / teacher {t} = {ratio:.4}, required [0.45, 0.55]"),
    );
}

#[test]
fn criterion_08_metrics_and_lexicon() {
    let cer = metrics(&["abc"], &["abd"]).unwrap().cer;
    let kitten = char_distance("kitten", "sitting");
    let snap = lexicon_correct("rleeing", &Lexicon::new(["fleeing"], 2, 0.9).unwrap(), None);

    let vocab = [
        "ancient", "bridge", "candle", "diamond", "eleven", "forest", "garden", "harbor", "island", "jungle", "kettle",
        "lantern", "meadow", "needle", "orchard", "pepper", "quarry", "river", "saddle", "timber",
    ];
    let lexicon = Lexicon::new(vocab, 1, 0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for _ in 0..60 {
        let words: Vec<&str> = (0..5).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
        let corrupted: Vec<String> = words
            .iter()
            .map(|w| {
                if !rng.random_bool(0.4) {
                    return w.to_string();
                }
                let mut chars: Vec<char> = w.chars().collect();
                let i = rng.random_range(0..chars.len());
                let c = chars[i];
                chars[i] = loop {
                    let r = (b'a' + rng.random_range(0..26u8)) as char;
                    if r != c {
                        break r;
                    }
                };
                chars.into_iter().collect()
            })
            .collect();
        refs.push(words.join(" "));
        hyps.push(corrupted.join(" "));
    }
    let before = metrics(&refs, &hyps).unwrap().wer;
    let fixed: Vec<String> = hyps.iter().map(|h| lexicon_correct(h, &lexicon, None)).collect();
    let after = metrics(&refs, &fixed).unwrap().wer;
    verdict(
        8,
        (cer - 1.0 / 3.0).abs() < 1e-12 && kitten == 3 && snap == "fleeing" && after < before,
        format!("CER(abc,abd) {cer:.4}, d(kitten,sitting) {kitten}, rleeing -> {snap}, WER {before:.4} -> {after:.4}"),
    );
}

fn file_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "htrj"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn fingerprints(r: &ToyReport) -> Vec<String> {
    let logs = std::iter::once(&r.teacher_log)
        .chain(r.students.iter().flat_map(|s| [&s.kd_log, &s.baseline_log]));
    logs.flat_map(|l| l.iter().map(EpochRecord::fingerprint)).collect()
}

#[test]
fn criterion_09_determinism() {
    let _g = heavy();
    let run = |dir: &Path| {
        let exp = ToyExperiment {
            lines: 300,
            val_lines: 40,
            test_lines: 40,
            teacher_epochs: 3,
            student_epochs: 2,
            out_dir: Some(dir.to_path_buf()),
            ..ToyExperiment::default()
        };
        run_toy_experiment::<f64>(&exp).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    let (fa, fb) = (fingerprints(&ra), fingerprints(&rb));
    let (ca, cb) = (file_bytes(a.path()), file_bytes(b.path()));
    let tests_equal = ra.students.iter().zip(&rb.students).all(|(x, y)| {
        x.kd_test_cer.to_bits() == y.kd_test_cer.to_bits() && x.baseline_test_cer.to_bits() == y.baseline_test_cer.to_bits()
    });
    verdict(
        9,
        fa == fb && !fa.is_empty() && ca == cb && ca.len() == 7 && tests_equal,
        format!(
            "{} log records identical: {}; {} checkpoints bit-identical: {}",
            fa.len(),
            fa == fb,
            ca.len(),
            ca == cb
        ),
    );
}

#[test]
fn criterion_10_curriculum_trace() {
    let perf = [0.6, 0.8, 0.85, 0.9, 0.95, 0.99];
    let mut c = Curriculum::default();
    let mut advanced = Vec::new();
    let mut monotone = true;
    for (i, &p) in perf.iter().enumerate() {
        let next = acp_step(c, p);
        monotone &= next.stage >= c.stage;
        if next.stage > c.stage {
            advanced.push(i + 1);
        }
        c = next;
    }
    let mut absorbing = c.stage == MAX_STAGE;
    for p in [1.0, 0.0, 0.99] {
        let next = acp_step(c, p);
        absorbing &= next == c;
        c = next;
    }
    verdict(
        10,
        advanced == [2, 3, 4, 5] && monotone && absorbing,
        format!("advances at epochs {advanced:?}, final stage {}, absorbing {absorbing}", c.stage),
    );
}

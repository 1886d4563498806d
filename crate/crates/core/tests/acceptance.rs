//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; extra arguments that are
//! numbers select criteria, e.g. `cargo test --test acceptance -- 7 8`.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sru_ner::codec::{decode_actions, encode_mentions, Mention, Sentence};
use sru_ner::commands::{cmd_train, read_metrics, TrainOptions};
use sru_ner::corpus::{synthetic_split, DatasetSpec, Example};
use sru_ner::eval::{evaluate_disjoint, evaluate_merged, Counts, EvalReport, Scenario};
use sru_ner::synthetic::{chemical_disease_corpus, toy_nested_corpus};
use sru_ner::trainer::{train, Config, DatasetSampler};
use sru_ner::SruNer;

use common::*;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn golden_sequence() -> Check {
    let (s, m, v) = genia();
    let seq = encode_mentions(&s, &m, &v).map_err(|e| e.to_string())?;
    let rendered = seq.render(&v);
    if rendered != GENIA_ACTIONS {
        return Err(format!("got `{rendered}`"));
    }
    let back = decode_actions(&seq, &s, &v).mention_list();
    ensure(mention_set(&back) == mention_set(&m), format!("{} actions, decode inverts", seq.len()))
}

fn round_trip() -> Check {
    let mut total = 0;
    for labels in [vec!["X"], vec!["X", "Y"]] {
        let vocab = sru_ner::codec::ActionVocabulary::new(labels.clone()).unwrap();
        for n in 1..=4 {
            let s = Sentence::new((0..n).map(|i| format!("w{i}")));
            for set in all_nested_sets(n, &labels) {
                let seq = encode_mentions(&s, &set, &vocab).map_err(|e| format!("{set:?}: {e}"))?;
                if mention_set(&decode_actions(&seq, &s, &vocab).mention_list()) != mention_set(&set) {
                    return Err(format!("mismatch on {set:?}"));
                }
                total += 1;
            }
        }
    }
    Ok(format!("{total}/{total} mention sets"))
}

fn figure_four() -> Check {
    let (registry, gold, pred) = four_corpus_fixture();
    let d = evaluate_disjoint(&pred, &gold, "BC5", &registry).map_err(|e| e.to_string())?.overall;
    let m = evaluate_merged(&pred, &gold, "BC5", &registry).map_err(|e| e.to_string())?.overall;
    let show = |c: Counts| format!("({} TP, {} FP, {} FN)", c.tp, c.fp, c.fn_);
    ensure(
        d == Counts { tp: 1, fp: 1, fn_: 2 } && m == Counts { tp: 2, fp: 2, fn_: 1 },
        format!("disjoint {} merged {}", show(d), show(m)),
    )
}

fn masking() -> Check {
    let c = masking_check(11, 64);
    ensure(
        c.max_out_of_task <= 1e-8 && c.max_in_task > 0.0,
        format!("{} samples: max |out-of-task grad| {:.1e}, max |in-task grad| {:.1e}", c.samples, c.max_out_of_task, c.max_in_task),
    )
}

fn gradient_check() -> Check {
    let mut worst = ("", 0.0f64);
    for seed in 0..20 {
        for (name, err) in sru_gradient_errors(seed) {
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    ensure(worst.1 <= 1e-4, format!("20 instances, worst relative error {:.1e} ({})", worst.1, worst.0))
}

fn sru_algebra_check() -> Check {
    let (mut local, mut wsum, mut dual) = (true, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let c = sru_algebra(seed);
        local &= c.locality;
        wsum = wsum.max(c.weight_sum_err);
        dual = dual.max(c.dual_err);
    }
    ensure(local && wsum < 1e-6 && dual < 1e-6, format!("locality {local}, |Σw-1| {wsum:.1e}, dual-impl diff {dual:.1e}"))
}

fn overfit() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = cmd_train(&toy_config_path(), &TrainOptions { run_dir: Some(dir.path().to_path_buf()), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let model = &run.outcome.model;
    let (gene, cell) = toy_nested_corpus();
    let train_set: Vec<Example> = gene.train.iter().chain(&cell.train).cloned().collect();
    let mut f1 = Vec::new();
    for scenario in [Scenario::Disjoint, Scenario::Merged] {
        f1.push(model.evaluate(&train_set, scenario).map_err(|e| e.to_string())?.f1());
    }
    let (s, _, _) = genia();
    let got: BTreeSet<Mention> = model.predict(&s).map_err(|e| e.to_string())?.decoded.mention_list().into_iter().collect();
    let want: BTreeSet<Mention> =
        [(2, 6, "gene_DNA"), (2, 5, "gene_Protein"), (4, 5, "gene_DNA")].map(|(a, b, l)| Mention::new(a, b, l)).into();
    ensure(
        f1.iter().all(|&f| f == 1.0) && got == want && run.manifest.epochs_run <= 300,
        format!(
            "train F1 disjoint {:.3} merged {:.3} at epoch {}; nested example decodes to {} of 3 mentions",
            f1[0],
            f1[1],
            run.manifest.best_epoch,
            got.intersection(&want).count()
        ),
    )
}

fn per_type_on_joint_test(model: &SruNer, test: &[Example]) -> Result<EvalReport, String> {
    let sentences: Vec<Sentence> = test.iter().map(|e| e.sentence.clone()).collect();
    let preds = model.predict_all(&sentences).map_err(|e| e.to_string())?;
    let mut report = EvalReport::new(Scenario::Merged);
    for (ex, p) in test.iter().zip(preds) {
        let pred: BTreeSet<Mention> = p
            .decoded
            .mention_list()
            .into_iter()
            .map(|m| {
                let bare = model.registry().merge(&m.label).unwrap_or(&m.label).to_string();
                Mention::new(m.start, m.end, bare)
            })
            .collect();
        report.add_sentence(&pred, &ex.mentions.iter().cloned().collect());
    }
    Ok(report)
}

fn emitted(model: &SruNer, examples: &[Example], label: &str) -> Result<usize, String> {
    let sentences: Vec<Sentence> = examples.iter().map(|e| e.sentence.clone()).collect();
    let preds = model.predict_all(&sentences).map_err(|e| e.to_string())?;
    Ok(preds.iter().flat_map(|p| p.decoded.mention_list()).filter(|m| m.label == label).count())
}

/// The 200 sentences of train and dev are split into a Chemical-only and a
/// Disease-only half; the fully annotated test split stays whole. Scores are
/// means over three seeds, shared by all three models.
fn global_prediction() -> Check {
    let corpus = chemical_disease_corpus("CD", (160, 40, 100), 7);
    let (chem, dis) =
        synthetic_split(&corpus, &["Chemical".into()], &["Disease".into()], ("CHEM", "DIS"), 13).map_err(|e| e.to_string())?;
    let mut config = Config::load(&toy_config_path()).map_err(|e| e.to_string())?;
    config.datasets.clear();
    config.train.epochs = 100;
    config.train.patience = 15;
    config.train.target_f1 = None;
    let seeds = [13u64, 14, 15];
    let f = |r: &EvalReport, t: &str| 100.0 * r.per_type.get(t).copied().unwrap_or_default().f1();
    let (mut mc, mut md, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
    let (mut dis_on_chem_half, mut chem_on_dis_half) = (0, 0);
    for &seed in &seeds {
        let config = Config { seed, ..config.clone() };
        let fit = |sets: &[DatasetSpec]| train(&config, sets, |_| {}).map(|o| o.model).map_err(|e| e.to_string());
        let multi = fit(&[chem.clone(), dis.clone()])?;
        let m = per_type_on_joint_test(&multi, &corpus.test)?;
        mc += f(&m, "Chemical");
        md += f(&m, "Disease");
        sc += f(&per_type_on_joint_test(&fit(&[chem.clone()])?, &corpus.test)?, "Chemical");
        sd += f(&per_type_on_joint_test(&fit(&[dis.clone()])?, &corpus.test)?, "Disease");
        dis_on_chem_half += emitted(&multi, &chem.train, "DIS_Disease")?;
        chem_on_dis_half += emitted(&multi, &dis.train, "CHEM_Chemical")?;
    }
    let k = seeds.len() as f64;
    let (mc, md, sc, sd) = (mc / k, md / k, sc / k, sd / k);
    ensure(
        mc >= sc - 2.0 && md >= sd - 2.0 && dis_on_chem_half > 0 && chem_on_dis_half > 0,
        format!(
            "mean over {} seeds: Chemical {mc:.2} vs single {sc:.2}, Disease {md:.2} vs single {sd:.2}; \
             unannotated halves get {dis_on_chem_half} Disease / {chem_on_dis_half} Chemical predictions",
            seeds.len()
        ),
    )
}

fn sampler() -> Check {
    let sizes = [12usize, 48, 300];
    let s = DatasetSampler::new(&sizes).map_err(|e| e.to_string())?;
    let inv: Vec<f64> = sizes.iter().map(|&n| 1.0 / n as f64).collect();
    let z: f64 = inv.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 3];
    let draws = 100_000;
    for _ in 0..draws {
        counts[s.draw(&mut rng).0] += 1;
    }
    let dev = (0..3).map(|k| (counts[k] as f64 / draws as f64 - inv[k] / z).abs()).fold(0.0, f64::max);
    let epoch = s.epoch(&mut rng).len();
    ensure(dev < 0.01 && epoch == 120, format!("max |freq - p| {dev:.4}, epoch length {epoch} (mean size 120)"))
}

fn determinism() -> Check {
    let run = |dir: &std::path::Path| -> Result<u64, String> {
        let opts = TrainOptions { epochs: Some(1), run_dir: Some(dir.to_path_buf()), ..Default::default() };
        cmd_train(&toy_config_path(), &opts).map_err(|e| e.to_string())?;
        let logs = read_metrics(&dir.join("metrics.csv")).map_err(|e| e.to_string())?;
        logs.iter().find(|l| l.split == "train").and_then(|l| l.loss).map(f64::to_bits).ok_or("no epoch-1 loss".into())
    };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (la, lb) = (run(a.path())?, run(b.path())?);
    ensure(la == lb, format!("epoch-1 loss {} / {}", f64::from_bits(la), f64::from_bits(lb)))
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "golden action sequence", budget: Duration::from_secs(1), run: golden_sequence },
        Criterion { id: 2, name: "exhaustive round trip", budget: Duration::from_secs(10), run: round_trip },
        Criterion { id: 3, name: "two-scenario fixture", budget: Duration::from_secs(1), run: figure_four },
        Criterion { id: 4, name: "loss masking", budget: Duration::from_secs(30), run: masking },
        Criterion { id: 5, name: "SRU gradient check", budget: Duration::from_secs(30), run: gradient_check },
        Criterion { id: 6, name: "SRU algebra", budget: Duration::from_secs(10), run: sru_algebra_check },
        Criterion { id: 7, name: "toy overfit", budget: Duration::from_secs(300), run: overfit },
        Criterion { id: 8, name: "global prediction", budget: Duration::from_secs(900), run: global_prediction },
        Criterion { id: 9, name: "sampler statistics", budget: Duration::from_secs(10), run: sampler },
        Criterion { id: 10, name: "determinism", budget: Duration::from_secs(120), run: determinism },
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {}: {detail} [{:.2}s]",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

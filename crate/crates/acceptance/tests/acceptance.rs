//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulechat_acceptance::*;
use rulechat_core::bertqa::extract_answer;
use rulechat_core::editor::{EditExample, Editor};
use rulechat_core::entailment::{entail_scores, overlap_f1};
use rulechat_core::eval::{bleu, combined};
use rulechat_core::extraction::{pair_spans, BoundaryScores};
use rulechat_core::gradcheck::all_cases;
use rulechat_core::model::RuleReader;
use rulechat_core::sharc::{build_all_supervision, match_span, parse_dataset, reconstruct_trees, RawExample};
use rulechat_core::text::tokenize;
use rulechat_core::train::{fit_reader, train_editor, training_examples, Fitted, RunConfig};
use rulechat_service::{parse_transcript, replay, Answer, Engine, Sessions, Status};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, name: &str, result: Result<String, String>) {
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Result<String, String> {
    const SEEDS: u64 = 10;
    let start = Instant::now();
    let (mut worst, mut worst_name, mut cases) = (0.0f64, String::new(), 0);
    let mut names = std::collections::BTreeSet::new();
    for seed in 0..SEEDS {
        for mut case in all_cases(seed) {
            let report = case.run(2, seed).map_err(|e| format!("{}: {e}", case.name))?;
            names.insert(case.name);
            cases += 1;
            if report.max_rel_error > worst {
                worst = report.max_rel_error;
                worst_name = format!("{} seed {seed}", case.name);
            }
        }
    }
    let elapsed = start.elapsed();
    let heads = ["extraction_head", "decision_head", "editor_head"].iter().all(|h| names.contains(h));
    ensure(
        worst < 1e-3 && elapsed < Duration::from_secs(120) && heads,
        format!(
            "{} checks ({} ops/heads x {SEEDS} seeds), max rel error {worst:.2e} ({worst_name}), {:.1}s",
            cases,
            names.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(0..24);
        let (alpha, beta) = boundary_scores(&mut rng, n);
        let tau = [0.5, 0.25, 0.1, 0.9][rng.random_range(0..4)];
        let fast = pair_spans(&BoundaryScores { alpha: alpha.clone(), beta: beta.clone() }, tau);
        if fast != brute_pairs(&alpha, &beta, tau) {
            mismatches.push("pair_spans");
        }
    }
    for case in 0..100 {
        let (snippet, clause) = match_case(&mut rng, case % 3 == 0);
        let m = match_span(&snippet, &clause).ok_or("match_span found no span")?;
        if (m.start, m.end, m.distance) != brute_match(&snippet, &clause) {
            mismatches.push("match_span");
        }
    }
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let s = probabilities(&mut rng, n);
        let e = probabilities(&mut rng, n);
        if extract_answer(&s, &e) != Some(brute_answer(&s, &e)) {
            mismatches.push("extract_answer");
        }
    }
    ensure(
        mismatches.is_empty(),
        format!("1000/100/1000 cases, {} mismatches {:?}", mismatches.len(), mismatches),
    )
}

fn entailment() -> Result<String, String> {
    const POOL: [&str; 8] = ["uk", "resident", "are", "you", "a", "over", "60", "carer"];
    let same = overlap_f1(&["uk", "resident"], &["uk", "resident"]);
    let partial = overlap_f1(&["uk", "resident"], &["are", "you", "a", "uk", "resident"]);
    let mut violations = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let draw = |rng: &mut ChaCha8Rng, max: usize| -> Vec<&str> {
        (0..rng.random_range(0..=max)).map(|_| POOL[rng.random_range(0..POOL.len())]).collect()
    };
    for _ in 0..1000 {
        let rule = draw(&mut rng, 5);
        let scenario = draw(&mut rng, 7);
        let f = overlap_f1(&rule, &scenario);
        let bounded = (0.0..=1.0).contains(&f);
        let agrees = (f - set_f1(&rule, &scenario)).abs() < 1e-12 && f == overlap_f1(&scenario, &rule);
        let history: Vec<Vec<&str>> = (0..3).map(|_| draw(&mut rng, 4)).collect();
        let mut last = 0.0;
        let mut monotone = true;
        for k in 0..=history.len() {
            let qs: Vec<&[&str]> = history[..k].iter().map(Vec::as_slice).collect();
            let (g, h) = entail_scores(&rule, &scenario, &qs);
            monotone &= g == f && h >= last && h <= 1.0;
            last = h;
        }
        violations += usize::from(!(bounded && agrees && monotone));
    }
    ensure(
        same == 1.0 && (partial - 0.5714).abs() < 1e-4 && violations == 0,
        format!("identical {same}, partial {partial:.4}, {violations} property violations in 1000 cases"),
    )
}

fn metrics() -> Result<String, String> {
    let a = combined(73.4, 53.7);
    let b = combined(73.3, 38.7);
    let b1 = bleu(&["are you a resident"], &["are you a uk resident"], 1);
    ensure(
        (a - 39.4).abs() <= 0.05 && (b - 28.4).abs() <= 0.05 && (b1 - 77.88).abs() <= 0.01,
        format!("combined {a:.2} and {b:.2}, BLEU1 {b1:.2}"),
    )
}

fn overfit(run: &RunConfig, data: &[RawExample]) -> Result<(Fitted, String), String> {
    let start = Instant::now();
    let fitted = fit_reader(data, data, run, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let b = &fitted.outcome.best;
    let detail = format!(
        "micro {:.1}%, span F1 {:.1}% at step {} of {}, {:.1}s",
        b.report.micro_acc,
        b.spans.f1,
        b.step,
        run.train.max_steps,
        elapsed.as_secs_f64()
    );
    let ok = b.report.micro_acc >= 95.0
        && b.spans.f1 >= 90.0
        && b.step <= 500
        && run.train.max_steps <= 500
        && elapsed < Duration::from_secs(600);
    if ok {
        Ok((fitted, detail))
    } else {
        Err(detail)
    }
}

fn editor_memorizes(run: &RunConfig, fitted: &Fitted, data: &[RawExample]) -> Result<String, String> {
    let ex = data
        .iter()
        .find(|e| e.answer.ends_with('?'))
        .ok_or("no follow-up question in the corpus")?;
    let doc = tokenize(&ex.snippet).tokens;
    let question = tokenize(&ex.answer).tokens;
    let sup = build_all_supervision(&reconstruct_trees(data));
    let span = sup[&ex.tree_id]
        .iter()
        .map(|s| doc[s.start..=s.end].to_vec())
        .find_map(|span| EditExample::derive(&span, &doc, &question, run.editor.max_decode))
        .ok_or("question does not align with any rule")?;
    let vocab = &fitted.reader.vocab;
    let mut config = run.editor;
    config.dropout = 0.0;
    config.encoder.dropout = 0.0;
    let mut editor = Editor::new(vocab.len(), config).map_err(|e| e.to_string())?;
    let mut train = run.editor_train;
    train.max_steps = 200;
    train.batch_size = 1;
    let losses = train_editor(&mut editor, vocab, std::slice::from_ref(&span), &train).map_err(|e| e.to_string())?;
    let out = editor.edit(&span.span, &span.document, vocab).map_err(|e| e.to_string())?;
    ensure(
        out.pre == span.pre && out.post == span.post,
        format!(
            "pre {:?} post {:?} after {} steps, final loss {:.4}",
            out.pre.join(" "),
            out.post.join(" "),
            losses.len(),
            losses.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn determinism(run: &RunConfig, data: &[RawExample], fitted: &Fitted) -> Result<String, String> {
    let mut short = run.clone();
    short.train.max_steps = 30;
    short.train.eval_interval = 15;
    let a = fit_reader(data, data, &short, None).map_err(|e| e.to_string())?;
    let b = fit_reader(data, data, &short, None).map_err(|e| e.to_string())?;
    let same_losses = a.outcome.losses == b.outcome.losses && a.reader.store == b.reader.store;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fitted.reader.save_dir(dir.path(), fitted.outcome.steps_run).map_err(|e| e.to_string())?;
    let loaded = RuleReader::load_dir(dir.path()).map_err(|e| e.to_string())?;
    let sup = build_all_supervision(&reconstruct_trees(data));
    let examples = training_examples(&fitted.reader, data, &sup).map_err(|e| e.to_string())?;
    let (ra, sa, pa) = fitted.reader.evaluate(&examples, None).map_err(|e| e.to_string())?;
    let (rb, sb, pb) = loaded.evaluate(&examples, None).map_err(|e| e.to_string())?;
    let bitwise = ra.micro_acc.to_bits() == rb.micro_acc.to_bits()
        && ra.combined.to_bits() == rb.combined.to_bits()
        && json(&ra) == json(&rb)
        && json(&sa) == json(&sb)
        && json(&pa) == json(&pb);
    ensure(
        same_losses && bitwise,
        format!(
            "{} identical step losses across two runs: {same_losses}; reloaded metrics bitwise equal: {bitwise}",
            a.outcome.losses.len()
        ),
    )
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl std::io::Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().expect("buffer").extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn dialogue(fitted: &Fitted, data: &[RawExample]) -> Result<String, String> {
    let engine = Arc::new(Engine::new(fitted.reader.clone(), None));
    let buf = SharedBuf::default();
    let sessions = Sessions::new(engine.clone()).with_log(Box::new(buf.clone()));
    let (mut inquiries, mut h_checks, mut h_failures) = (0, 0, 0);
    for (k, ex) in data.iter().filter(|e| e.history.is_empty()).enumerate() {
        let mut s = sessions.create(&ex.snippet, &ex.question, &ex.scenario).map_err(|e| e.to_string())?;
        let mut n = 0;
        while s.status == Status::AwaitingUser && n < 4 {
            inquiries += 1;
            let asked = s.last_move.rule_index.map(|i| s.explain.spans[i].text.clone());
            let answer = if (k + n) % 3 == 2 { Answer::No } else { Answer::Yes };
            s = sessions.answer(&s.id, answer).map_err(|e| e.to_string())?;
            n += 1;
            if let Some(text) = asked {
                h_checks += 1;
                let h = s.explain.spans.iter().find(|r| r.text == text).map(|r| r.h);
                h_failures += usize::from(h != Some(1.0));
            }
        }
    }
    let text = String::from_utf8(buf.0.lock().expect("buffer").clone()).map_err(|e| e.to_string())?;
    let records = parse_transcript(&text).map_err(|e| e.to_string())?;
    let report = replay(engine, &records).map_err(|e| e.to_string())?;
    ensure(
        report.reproduced() && inquiries > 0 && h_checks > 0 && h_failures == 0,
        format!(
            "replayed {} records with {} mismatches; h = 1.0 for {}/{} just-inquired rules",
            report.records,
            report.mismatches.len(),
            h_checks - h_failures,
            h_checks
        ),
    )
}

/// The suite links only primary crates, and none of them depends on the browser client.
fn primary_only() -> Result<String, String> {
    let primary = ["rulechat-core", "rulechat-service", "rulechat-acceptance"];
    let mut linked = Vec::new();
    for dir in ["core", "service", "acceptance"] {
        let path = root().join("crates").join(dir).join("Cargo.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let manifest: toml::Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
        for section in ["dependencies", "dev-dependencies"] {
            if let Some(deps) = manifest.get(section).and_then(|d| d.as_table()) {
                linked.extend(deps.iter().filter(|(_, v)| v.get("path").is_some()).map(|(k, _)| k.clone()));
            }
        }
    }
    linked.sort();
    linked.dedup();
    let foreign: Vec<_> = linked.iter().filter(|d| !primary.contains(&d.as_str())).collect();
    ensure(foreign.is_empty(), format!("workspace crates linked: {linked:?}"))
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };
    let started = Instant::now();
    suite.report("gradient correctness", gradients());
    suite.report("oracle equivalence", oracles());
    suite.report("entailment values", entailment());
    suite.report("metric arithmetic", metrics());

    let run = RunConfig::load(&root().join("configs/synthetic.toml")).expect("config");
    let data = parse_dataset(&root().join("data/synthetic.json")).expect("bundled corpus");
    assert_eq!(data, rulechat_core::synthetic::bundled(), "data/synthetic.json is out of date");
    match overfit(&run, &data) {
        Ok((fitted, detail)) => {
            suite.report("overfit training", Ok(detail));
            suite.report("editor memorization", editor_memorizes(&run, &fitted, &data));
            suite.report("determinism and persistence", determinism(&run, &data, &fitted));
            suite.report("dialogue protocol", dialogue(&fitted, &data));
        }
        Err(detail) => {
            suite.report("overfit training", Err(detail));
            for name in ["editor memorization", "determinism and persistence", "dialogue protocol"] {
                suite.report(name, Err("needs the overfit model".into()));
            }
        }
    }
    suite.report("primary suite without secondary components", primary_only());
    println!("{} failed, {:.1}s", suite.failed, started.elapsed().as_secs_f64());
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

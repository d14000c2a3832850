//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines always appear in `cargo test` output.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use lexprep_core::endpoint::{ChatRequest, CompletionClient, FnEndpoint};
use lexprep_core::evalharness::{
    constrain_select, evaluate, option_keys, score_run, BenchOption, BenchmarkId, BenchmarkItem, EvalConfig,
    EvalTemplate, GoldEntry, Resolution,
};
use lexprep_core::ingest::{RawDocument, WordCount};
use lexprep_core::mixer::{plan_mix, sample_mix, MixItem, MixSpec, SourceAvailability};
use lexprep_core::mock::MockEndpoint;
use lexprep_core::packer::{compression_stats, pack_exact, pack_greedy_sorted, PackItem, PackerConfig, Packing};
use lexprep_core::pipeline::{run_stage, PipelineConfig, RunOptions, Stage};
use lexprep_core::transform::{
    validate_example, PromptDb, TaskPolicy, TaskType, TransformInput, TransformSettings, Transformer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn within(limit: Duration, start: Instant) -> Result<String, String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(format!("{took:.2?}"))
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i:04}")).collect()
}

fn check_packing(items: &[PackItem], cfg: &PackerConfig, p: &Packing) -> Result<(), String> {
    let len: HashMap<&str, u64> = items.iter().map(|i| (i.id.as_str(), i.token_length)).collect();
    let mut seen = HashSet::new();
    for s in &p.sequences {
        let body: u64 = s.example_ids.iter().map(|id| len[id.as_str()]).sum();
        let total = body + cfg.separator_cost * (s.example_ids.len() as u64 - 1);
        if total != s.total_tokens || total > cfg.context_length || s.slack != cfg.context_length - total {
            return Err(format!("bad sequence accounting: {total} vs {}", s.total_tokens));
        }
        for id in &s.example_ids {
            if !seen.insert(id.as_str()) {
                return Err(format!("{id} split or duplicated"));
            }
        }
    }
    for id in &p.oversize {
        if !seen.insert(id.as_str()) {
            return Err(format!("{id} both packed and oversize"));
        }
    }
    if seen.len() != items.len() {
        return Err(format!("{} of {} ids accounted for", seen.len(), items.len()));
    }
    Ok(())
}

fn packing_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for inst in 0..1000 {
        let ctx = if inst % 2 == 0 { 2048 } else { 4096 };
        let cfg = PackerConfig::new(ctx, 1, Default::default()).unwrap();
        let n = rng.random_range(1..=500);
        let items: Vec<PackItem> = ids(n)
            .into_iter()
            .map(|id| PackItem::new(id, rng.random_range(1..=ctx)))
            .collect();
        let p = pack_greedy_sorted(&items, &cfg).map_err(|e| e.to_string())?;
        if !p.oversize.is_empty() {
            return Err(format!("instance {inst}: in-range items quarantined"));
        }
        check_packing(&items, &cfg, &p).map_err(|e| format!("instance {inst}: {e}"))?;
    }
    within(Duration::from_secs(10), start).map(|t| format!("1000 instances sound in {t}"))
}

fn packing_optimality_bound() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 1.0f64;
    for inst in 0..200 {
        let ctx = if inst % 2 == 0 { 2048 } else { 4096 };
        let cfg = PackerConfig::new(ctx, 1, Default::default()).unwrap();
        let n = rng.random_range(1..=12);
        let items: Vec<PackItem> = ids(n)
            .into_iter()
            .map(|id| PackItem::new(id, rng.random_range(1..=ctx)))
            .collect();
        let g = pack_greedy_sorted(&items, &cfg).unwrap().sequences.len();
        let e = pack_exact(&items, &cfg).unwrap();
        if e > g || g as f64 > 11.0 / 9.0 * e as f64 + 1.0 {
            return Err(format!("instance {inst}: exact {e}, greedy {g}"));
        }
        worst = worst.max(g as f64 / e as f64);
    }
    within(Duration::from_secs(60), start).map(|t| format!("200 instances within bound, worst ratio {worst:.3}, {t}"))
}

fn lognormal_lengths(n: usize, cap: u64, seed: u64) -> Vec<u64> {
    let d = LogNormal::new(350f64.ln(), 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (d.sample(&mut rng).round() as u64).clamp(1, cap)).collect()
}

fn compression() -> Outcome {
    let start = Instant::now();
    let cfg = PackerConfig::ctx_2k();
    let items: Vec<PackItem> = ids(10_000)
        .into_iter()
        .zip(lognormal_lengths(10_000, 2048, 3))
        .map(|(id, l)| PackItem::new(id, l))
        .collect();
    let p = pack_greedy_sorted(&items, &cfg).unwrap();
    check_packing(&items, &cfg, &p)?;
    let s = compression_stats(items.len(), &p.sequences, &cfg).unwrap();
    let t = within(Duration::from_secs(30), start)?;
    let msg = format!(
        "sequence_reduction {:.4} (reported figure 0.70), mean_utilization {:.4}, {} sequences, {t}",
        s.sequence_reduction, s.mean_utilization, s.sequences
    );
    if s.sequence_reduction >= 0.60 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

#[derive(Clone)]
struct Ex {
    id: String,
    len: u64,
}

impl MixItem for Ex {
    fn item_id(&self) -> &str {
        &self.id
    }
    fn token_count(&self) -> u64 {
        self.len
    }
}

fn mix_fidelity() -> Outcome {
    let start = Instant::now();
    let spec = MixSpec::reference_blend().scaled_to(1_000_000);
    let mut streams = BTreeMap::new();
    let mut avail = BTreeMap::new();
    for (k, e) in spec.entries().iter().enumerate() {
        let mut lens = Vec::new();
        let mut total = 0;
        let mut rng_seed = 100 + k as u64;
        while total < 2 * e.target_tokens {
            let chunk = lognormal_lengths(256, 2048, rng_seed);
            rng_seed += 1000;
            for l in chunk {
                total += l;
                lens.push(l);
            }
        }
        let exs: Vec<Ex> = lens
            .iter()
            .enumerate()
            .map(|(i, &len)| Ex {
                id: format!("{}:{i}", e.source),
                len,
            })
            .collect();
        avail.insert(
            e.source.clone(),
            SourceAvailability {
                tokens: total,
                examples: exs.len() as u64,
            },
        );
        streams.insert(e.source.clone(), exs);
    }
    let plan = plan_mix(&spec, &avail).map_err(|e| e.to_string())?;
    let out = sample_mix(&streams, &plan, 7).map_err(|e| e.to_string())?;
    let mut counted: BTreeMap<&str, u64> = BTreeMap::new();
    let mut seen = HashSet::new();
    for d in &out.items {
        if !seen.insert(d.item.id.as_str()) {
            return Err(format!("{} drawn twice", d.item.id));
        }
        *counted.entry(d.mix_source.as_str()).or_default() += d.item.len;
    }
    let total: u64 = counted.values().sum();
    let mut worst = 0.0f64;
    let mut legal = 0.0;
    for e in spec.entries() {
        let planned = e.target_tokens as f64 / spec.total_tokens() as f64;
        let realized = counted.get(e.source.as_str()).copied().unwrap_or(0) as f64 / total as f64;
        worst = worst.max((realized - planned).abs());
        if e.domain.is_legal() {
            legal += realized;
        }
    }
    let t = within(Duration::from_secs(30), start)?;
    let msg = format!("{total} tokens, max share deviation {worst:.5}, legal share {legal:.4}, {t}");
    if worst <= 0.02 && (legal - 500.0 / 1012.0).abs() <= 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Row {
    task: TaskType,
    passage: &'static str,
    prompt: &'static str,
    response: &'static str,
}

const ROWS: [Row; 4] = [
    Row {
        task: TaskType::CommonsenseReasoning,
        passage: "We review the trial court's denial of a bond-reduction request under an abuse of discretion standard. A trial court abuses its discretion only when its decision is arbitrary or unreasonable, and an appellate court will not disturb the ruling merely because it would have weighed the factors differently. The accused bears the burden of showing that the bail set is excessive.",
        prompt: "What is an explanation to this paragraph from the text, starting with: \"We review the trial court's denial of a bond-reduction request under an abuse of discretion standard...\"?",
        response: "This paragraph explains the standard of review used by the court when assessing the trial court's decision to deny a bond-reduction request, which is an abuse of discretion standard, and clarifies that the trial court's decision must be arbitrary or unreasonable to be considered an abuse of discretion.",
    },
    Row {
        task: TaskType::WordToText,
        passage: "The petitioner filed an application for a writ of habeas corpus after the state courts denied relief. The federal court examined the trial judge's evidentiary rulings for an abuse of discretion and found none, so the application was denied.",
        prompt: "Provide a definition to these two legal terms from the text: \"habeas corpus\", \"abuse of discretion\".",
        response: "\"habeas corpus\" - a writ requiring a person under arrest to be brought before a judge or into court, especially to secure the person's release unless lawful grounds are shown for their detention. \"abuse of discretion\" - a legal standard used to review a decision made by a lower court or administrative body, which occurs when the decision is arbitrary, capricious, or unreasonable.",
    },
    Row {
        task: TaskType::NaturalLanguageInference,
        passage: "The chapter 13 case was converted to a case under chapter 7 in July of 1993. The record does not show the present value of the vehicle, but it is worth more than the $300 remaining due under the chapter 13, and much less than the $6,000 remaining due under the original contract. The debtor continued to make payments after the conversion.",
        prompt: "Does the sentence \"The chapter 13 case was converted to a case under chapter 7 in July of 1993\" entail the sentence \"The record does not show the present value of the vehicle, but it is worth more than the $300 remaining due under the chapter 13, and much less than the $6,000 remaining due under the original contract\"?",
        response: "The two sentences are neutral with regard to each other. The first sentence discusses the conversion of the case from Chapter 13 to Chapter 7, while the second sentence talks about the value of the vehicle in question.",
    },
    Row {
        task: TaskType::Summarization,
        passage: "District courts have jurisdiction to hear appeals from final judgments, orders, and decrees issued by bankruptcy judges. On appeal the district court reviews the bankruptcy court's legal conclusions de novo and its findings of fact for clear error, giving due regard to the bankruptcy court's opportunity to judge the credibility of the witnesses who testified.",
        prompt: "Write a summary for this paragraph from the text, starting with: \"District courts have jurisdiction to hear appeals from final judgments, orders, and decrees issued by bankruptcy judges...\".",
        response: "This paragraph explains the jurisdiction of district courts in hearing appeals from bankruptcy courts and the standards of review for legal conclusions and findings of fact.",
    },
];

fn transform_round_trip() -> Outcome {
    let mut mock = MockEndpoint::new();
    for r in &ROWS {
        mock = mock.with_canned(r.prompt, r.response);
    }
    let client = CompletionClient::immediate(Arc::new(mock));
    let db = PromptDb::builtin();
    let mut valid = 0;
    for (i, r) in ROWS.iter().enumerate() {
        let settings = TransformSettings {
            policy: TaskPolicy::new([(r.task, 1.0)].into_iter().collect(), 1).unwrap(),
            ..TransformSettings::default()
        };
        let t = Transformer {
            db: &db,
            primary: &client,
            secondary: None,
            counter: &WordCount,
            settings: &settings,
        };
        let doc = RawDocument {
            id: format!("t3:{i}"),
            text: r.passage.to_string(),
            source: "freelaw".into(),
            token_estimate: r.passage.split_whitespace().count(),
            token_method: "word-count".into(),
            meta: Default::default(),
        };
        let (out, c) = t.transform_batch(&[TransformInput { doc, general: false }]);
        let ex = out.first().ok_or_else(|| format!("{:?}: dropped ({c:?})", r.task))?;
        let answers: Vec<&str> = ex.tasks.iter().map(|q| q.answer.as_str()).collect();
        if answers.join(" ") != r.response {
            return Err(format!("{:?}: answer differs: {answers:?}", r.task));
        }
        if r.task == TaskType::WordToText {
            let terms: Vec<&str> = ex.tasks.iter().map(|q| q.question.as_str()).collect();
            if terms.len() != 2 || !terms[0].contains("\"habeas corpus\"") || !terms[1].contains("\"abuse of discretion\"") {
                return Err(format!("word-to-text split wrong: {terms:?}"));
            }
        } else if ex.tasks.len() != 1 || ex.tasks[0].question != r.prompt {
            return Err(format!("{:?}: prompt differs: {:?}", r.task, ex.tasks[0].question));
        }
        if validate_example(ex, &settings.rules).is_ok() {
            valid += 1;
        }
    }
    if valid == ROWS.len() {
        Ok(format!("4/4 tasks reproduced verbatim, {valid}/4 examples valid"))
    } else {
        Err(format!("{valid}/4 examples valid"))
    }
}

fn adversarial(rng: &mut ChaCha8Rng, keys: &[String], labels: &[String]) -> String {
    const JUNK: &[&str] = &["", " ", "\n\n", "???", "None of these", "I cannot answer that.", "```", "null", "ÄÖÜ ∑ 🙂", "0", "-1"];
    let k = || keys[0].clone();
    let pick = |rng: &mut ChaCha8Rng| keys[rng.random_range(0..keys.len())].clone();
    match rng.random_range(0..9) {
        0 => JUNK[rng.random_range(0..JUNK.len())].to_string(),
        1 => (0..rng.random_range(1..40)).map(|_| char::from(rng.random_range(32u8..127))).collect(),
        2 => format!("{} and {}", pick(rng), pick(rng)),
        3 => format!("({}) because {}", pick(rng), labels[rng.random_range(0..labels.len())]),
        4 => labels[rng.random_range(0..labels.len())].to_lowercase(),
        5 => format!("The answer is {}.", pick(rng)),
        6 => format!("{}{}", pick(rng), pick(rng)),
        7 => format!("Option {} or maybe {}", k(), pick(rng)),
        _ => pick(rng).to_lowercase(),
    }
}

fn closed_list_guarantee() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = Vec::with_capacity(10_000);
    for i in 0..10_000 {
        let n = if i % 10 == 0 { 100 } else { rng.random_range(2..=12) };
        let keys = option_keys(n);
        let labels: Vec<String> = (0..n).map(|j| format!("Category {} {}", j, ["alpha", "beta", "gamma"][j % 3])).collect();
        let reply = adversarial(&mut rng, &keys, &labels);
        let options: Vec<BenchOption> = keys
            .into_iter()
            .zip(labels)
            .map(|(key, label)| BenchOption { key, label })
            .collect();
        cases.push((format!("case {i}"), options, reply));
    }
    let replies: HashMap<String, String> = cases.iter().map(|(p, _, r)| (p.clone(), r.clone())).collect();
    let ep = FnEndpoint::new("fuzz", move |req: &ChatRequest| Ok(replies[req.user_content()].clone()));
    let client = CompletionClient::immediate(Arc::new(ep));
    let mut fallbacks = 0u64;
    let mut preds = Vec::new();
    let mut gold = BTreeMap::new();
    for (prompt, options, _) in &cases {
        let s = constrain_select(&client, prompt, options, 8).map_err(|e| e.to_string())?;
        if !options.iter().any(|o| o.key == s.key) {
            return Err(format!("{prompt}: {} is not an option", s.key));
        }
        if s.resolution == Resolution::Fallback {
            fallbacks += 1;
            if s.key != options[0].key {
                return Err(format!("{prompt}: fallback did not take the first option"));
            }
        }
        gold.insert(
            prompt.clone(),
            GoldEntry {
                benchmark: BenchmarkId::LexglueLedgar,
                key: options[0].key.clone(),
            },
        );
        preds.push(lexprep_core::evalharness::Prediction {
            item_id: prompt.clone(),
            outcome: lexprep_core::evalharness::Outcome::Answered {
                key: s.key,
                resolution: s.resolution,
            },
        });
    }
    let report = score_run(&preds, &gold, "fuzz", "t", 0).map_err(|e| e.to_string())?;
    if report.unresolved() != fallbacks {
        return Err(format!("unresolved {} vs fallbacks {fallbacks}", report.unresolved()));
    }
    Ok(format!("10000/10000 in options, {fallbacks} fallbacks = unresolved counter"))
}

fn items_for(b: BenchmarkId, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<BenchmarkItem> {
    (0..n)
        .map(|i| {
            let labels = (0..k).map(|j| format!("choice {j} for item {i}")).collect();
            BenchmarkItem::from_labels(
                format!("{b}:{i}"),
                b,
                format!("Item {i} of {b}: pick the most suitable option."),
                labels,
                rng.random_range(0..k),
            )
            .unwrap()
        })
        .collect()
}

fn harness_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let width = |b: BenchmarkId| match b {
        BenchmarkId::LexglueLedgar => 100,
        BenchmarkId::LexglueCasehold => 5,
        BenchmarkId::LexglueUnfairTos => 9,
        _ => 4,
    };
    let items: Vec<BenchmarkItem> = BenchmarkId::ALL
        .iter()
        .flat_map(|&b| items_for(b, 50, width(b), &mut rng))
        .collect();
    let by_context: HashMap<String, String> = items.iter().map(|i| (i.context.clone(), i.gold.clone())).collect();
    let echo = FnEndpoint::new("echo", move |req: &ChatRequest| {
        let ctx = req.user_content().split("\n\n").nth(1).unwrap_or_default();
        Ok(by_context.get(ctx).cloned().unwrap_or_default())
    });
    let client = CompletionClient::immediate(Arc::new(echo));
    let t = EvalTemplate::builtin();
    let preds = evaluate(&items, &t, &client, &EvalConfig::default(), &WordCount);
    let r = score_run(&preds, &GoldEntry::map(&items), "echo", &t.id, 0).map_err(|e| e.to_string())?;
    if r.subsets.len() != 6 || r.subsets.iter().any(|s| s.accuracy != Some(1.0)) {
        return Err(format!("echo accuracies {:?}", r.subsets.iter().map(|s| s.accuracy).collect::<Vec<_>>()));
    }
    let mut parts = vec!["echo-gold 1.000 on all six subsets".to_string()];
    for k in [4usize, 5] {
        let b = if k == 4 { BenchmarkId::MmluProfessionalLaw } else { BenchmarkId::LexglueCasehold };
        let items = items_for(b, 1000, k, &mut rng);
        let client = CompletionClient::immediate(Arc::new(MockEndpoint::new()));
        let preds = evaluate(&items, &t, &client, &EvalConfig::default(), &WordCount);
        let r = score_run(&preds, &GoldEntry::map(&items), "mock", &t.id, 0).map_err(|e| e.to_string())?;
        let acc = r.subsets[0].accuracy.unwrap_or(-1.0);
        let p = 1.0 / k as f64;
        let bound = 3.0 * (p * (1.0 - p) / 1000.0).sqrt();
        parts.push(format!("k={k} accuracy {acc:.3} (|d| <= {bound:.4})"));
        if (acc - p).abs() > bound {
            return Err(parts.join("; "));
        }
    }
    Ok(parts.join("; "))
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for d in ["datasets", "reports", "manifests"] {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root.join(d)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let mut bytes = std::fs::read(&p).unwrap();
            if d == "manifests" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("timestamp_unix");
                bytes = serde_json::to_vec_pretty(&v).unwrap();
            }
            out.insert(format!("{d}/{}", p.file_name().unwrap().to_string_lossy()), bytes);
        }
    }
    out
}

fn end_to_end_determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/pipeline.toml");
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = PipelineConfig::load(&config).map_err(|e| e.to_string())?;
        cfg.run_dir = dir.path().to_path_buf();
        let manifests = run_stage(Stage::All, &cfg, &RunOptions::mock()).map_err(|e| e.to_string())?;
        if manifests.len() != 5 {
            return Err(format!("{} manifests", manifests.len()));
        }
        snaps.push(snapshot(dir.path()));
    }
    if snaps[0] != snaps[1] {
        let diff: Vec<&String> = snaps[0].keys().filter(|k| snaps[0].get(*k) != snaps[1].get(*k)).collect();
        return Err(format!("differing files: {diff:?}"));
    }
    Ok(format!("{} files byte-identical across two runs", snaps[0].len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("packing soundness", packing_soundness),
        ("packing optimality bound", packing_optimality_bound),
        ("compression on log-normal corpus", compression),
        ("mix fidelity at 1M tokens", mix_fidelity),
        ("transformation round-trip", transform_round_trip),
        ("closed-list guarantee", closed_list_guarantee),
        ("harness calibration", harness_calibration),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

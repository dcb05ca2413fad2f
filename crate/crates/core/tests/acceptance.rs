//! Acceptance gate: one PASS/FAIL line per primary criterion.
//!
//! Runs without the libtest harness so every line is printed. A criterion
//! whose inputs are not available locally prints `FAIL ... UNVERIFIED` and
//! does not change the exit status; everything else does.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use neon_core::cgmh::{self, Action, ActionDistribution, CgmhConfig};
use neon_core::corpus::{self, KnowledgeCorpus, Split, StatementPair, Task};
use neon_core::evalsvc::{
    self, fleiss_kappa, CreateSession, EvalStore, RatingMatrix, SessionInput, ASPECTS,
};
use neon_core::explain::{self, ExplanationRecord, Method, Mode, TemplateId, TemplateName};
use neon_core::gateway::mock::{ConstantLm, MockBackend, TableMlm, TargetLm, UniformMlm};
use neon_core::gateway::{server, Gateway};
use neon_core::icl::{self, Exemplar};
use neon_core::jsonl::read_jsonl;
use neon_core::metrics::{self, bleu, rouge, RougeScores};
use neon_core::pipeline::{self, RunConfig, RunOptions};
use neon_core::retrieve::{Bm25Index, Bm25Params};
use neon_core::text;

enum Outcome {
    Pass(String),
    Fail(String),
    Unverified(String),
}

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

// ---- dataset ingestion -------------------------------------------------

fn ingestion() -> Outcome {
    let Some(root) = std::env::var_os("NEON_DATA_DIR").map(PathBuf::from) else {
        return Outcome::Unverified(
            "official ComVE / e-SNLI splits not available offline; set NEON_DATA_DIR with comve/{train,dev,test}.csv and esnli/{train,dev,test}.csv".into(),
        );
    };
    let start = Instant::now();
    let mut got = Vec::new();
    for (split, name) in [
        (Split::Train, "train"),
        (Split::Dev, "dev"),
        (Split::Test, "test"),
    ] {
        match corpus::load_comve(&root.join(format!("comve/{name}.csv")), split) {
            Ok(p) => got.push(p.len()),
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    for (split, name) in [
        (Split::Train, "train"),
        (Split::Dev, "dev"),
        (Split::Test, "test"),
    ] {
        match corpus::load_esnli(&root.join(format!("esnli/{name}.csv")), split) {
            Ok(l) => got.push(l.pairs.len()),
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    let elapsed = start.elapsed();
    let want = [10_000, 997, 1_000, 5_189, 3_280, 2_640];
    if got == want && elapsed < Duration::from_secs(60) {
        Outcome::Pass(format!("{got:?} in {elapsed:.1?}"))
    } else {
        Outcome::Fail(format!("counts {got:?} (want {want:?}) in {elapsed:.1?}"))
    }
}

// ---- golden prompts ----------------------------------------------------

fn golden_prompts() -> Check {
    let phase1 = icl::render(
        Task::Comve,
        &[Exemplar {
            premise: None,
            incorrect: "He drinks apple.".into(),
            correct: "He drinks milk.".into(),
        }],
        None,
        "John put an elephant into the fridge.",
    );
    let want1 = "Task: Based on the incorrect statement, generate the correct statement.\n\n\
                 Incorrect statement: He drinks apple.\n\
                 Correct statement: He drinks milk.\n\n\
                 Incorrect statement: John put an elephant into the fridge.\n\
                 Correct statement:";
    ensure!(
        phase1 == want1,
        "phase I prompt differs:\n{phase1:?}\n{want1:?}"
    );

    let pair = StatementPair {
        id: "elephant".into(),
        task: Task::Comve,
        split: Split::Test,
        premise: None,
        correct: "John put a turkey into the fridge.".into(),
        incorrect: "John put an elephant into the fridge.".into(),
        refs_incorrect: vec!["An elephant is much bigger than a fridge.".into()],
        refs_correct: vec![],
    };
    let hints = [
        "John put a turkey into the fridge.",
        "John put a peach into the fridge.",
        "John put a bowl into the fridge.",
    ];
    let id = TemplateId::new(Task::Comve, Mode::ExplainFalse, TemplateName::DefaultA);
    let phase2 = explain::build_explain_prompt(&pair, &hints, id)
        .map_err(|e| e.to_string())?
        .prompt;
    let want2 = "Given the facts: 1. John put a turkey into the fridge, 2. John put a peach into the fridge, 3. John put a bowl into the fridge,\n\
                 Explain the following statement based on its difference with the facts: John put an elephant into the fridge.\n\
                 The explanation is:";
    ensure!(
        phase2 == want2,
        "phase II prompt differs:\n{phase2:?}\n{want2:?}"
    );

    let id = TemplateId::new(Task::Comve, Mode::ExplainFalse, TemplateName::Original);
    let none: [&str; 0] = [];
    let orig = explain::build_explain_prompt(&pair, &none, id)
        .map_err(|e| e.to_string())?
        .prompt;
    let want3 = "John put an elephant into the fridge. This statement is wrong because:";
    ensure!(orig == want3, "original prompt differs: {orig:?}");
    Ok("phase I, phase II (3 hints) and original match byte-for-byte".into())
}

// ---- metric oracles ----------------------------------------------------

/// Clipped n-gram counting by exhaustive scanning, no hashing.
fn count_occurrences(hay: &[&str], needle: &[&str]) -> usize {
    if needle.len() > hay.len() {
        return 0;
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| &hay[i..i + needle.len()] == needle)
        .count()
}

fn oracle_bleu(cands: &[Vec<&str>], refs: &[Vec<Vec<&str>>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, rs) in cands.iter().zip(refs) {
        for n in 1..=4 {
            if c.len() < n {
                continue;
            }
            let mut counted: Vec<&[&str]> = Vec::new();
            for i in 0..=c.len() - n {
                let g = &c[i..i + n];
                totals[n - 1] += 1;
                if counted.contains(&g) {
                    continue;
                }
                counted.push(g);
                let in_cand = count_occurrences(c, g);
                let in_ref = rs
                    .iter()
                    .map(|r| count_occurrences(r, g))
                    .max()
                    .unwrap_or(0);
                matches[n - 1] += in_cand.min(in_ref);
            }
        }
        c_len += c.len();
        let mut best = rs[0].len();
        for r in rs {
            let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
    }
    let mut logs = Vec::new();
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        if matches[n] == 0 {
            return 0.0;
        }
        logs.push((matches[n] as f64 / totals[n] as f64).ln());
    }
    if logs.is_empty() {
        return 0.0;
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn metric_oracles() -> Check {
    let words = ["the", "cat", "sat", "on", "mat", "a", "dog"];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<&str> {
        let n = rng.gen_range(1..=12);
        (0..n).map(|_| *words.choose(rng).unwrap()).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n_cands = rng.gen_range(1..=3);
        let cands: Vec<Vec<&str>> = (0..n_cands).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<Vec<&str>>> = (0..n_cands)
            .map(|_| {
                (0..rng.gen_range(1..=3))
                    .map(|_| sentence(&mut rng))
                    .collect()
            })
            .collect();
        let want = oracle_bleu(&cands, &refs);
        let c: Vec<String> = cands.iter().map(|c| c.join(" ")).collect();
        let r: Vec<Vec<String>> = refs
            .iter()
            .map(|rs| rs.iter().map(|r| r.join(" ")).collect())
            .collect();
        let got: f64 = bleu(&c, &r, 4).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 1e-9, "BLEU differs from brute force by {worst:e}");

    let rl: RougeScores<f64> = rouge("a b c", &["a c"]);
    ensure!(
        (rl.rouge_l - 80.0).abs() < 1e-9,
        "ROUGE-L a b c / a c = {}",
        rl.rouge_l
    );

    let gw = Gateway::new(Arc::new(MockBackend::new(0)));
    let record = |expl: &str, refs: &[&str]| ExplanationRecord {
        source_id: "x".into(),
        method: Method::Original,
        template: TemplateId::new(Task::Comve, Mode::ExplainFalse, TemplateName::Original),
        statement: String::new(),
        hints: vec![],
        prompt: String::new(),
        prompt_sha256: String::new(),
        explanation: expl.into(),
        references: refs.iter().map(|s| s.to_string()).collect(),
        empty: false,
    };
    let same = metrics::evaluate_run(
        &[record(
            "An elephant is much bigger than a fridge.",
            &["An elephant is much bigger than a fridge."],
        )],
        &gw,
        false,
    )
    .map_err(|e| e.to_string())?;
    for (name, v) in [
        ("BLEU", same.bleu),
        ("ROUGE", same.rouge.rouge_l),
        ("BERTScore", same.bertscore_f1),
        ("S-BERT", same.sbert_cosine),
    ] {
        ensure!((v - 100.0).abs() < 1e-9, "identity {name} = {v}");
    }
    let apart = metrics::evaluate_run(
        &[record(
            "cats sleep all day",
            &["an elephant is bigger than a fridge"],
        )],
        &gw,
        false,
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        apart.bleu == 0.0 && apart.rouge.rouge_l == 0.0,
        "disjoint BLEU {} ROUGE {}",
        apart.bleu,
        apart.rouge.rouge_l
    );
    Ok(format!(
        "BLEU max |diff| {worst:.1e} over 20 fixtures; ROUGE-L 80.0; identity 100; disjoint 0"
    ))
}

// ---- BM25 --------------------------------------------------------------

fn bm25_oracle() -> Check {
    let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut texts = BTreeSet::new();
    while texts.len() < 100 {
        let n = rng.gen_range(3..=15);
        let doc: Vec<&str> = (0..n)
            .map(|_| vocab.choose(&mut rng).unwrap().as_str())
            .collect();
        texts.insert(doc.join(" "));
    }
    let mut texts: Vec<String> = texts.into_iter().collect();
    texts.shuffle(&mut rng);
    let kc = KnowledgeCorpus::from_texts(texts.clone());
    let index = Bm25Index::new(&kc, Bm25Params::default());

    // independent score-all oracle
    let docs: Vec<Vec<&str>> = texts.iter().map(|t| t.split(' ').collect()).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut df: HashMap<&str, f64> = HashMap::new();
    for d in &docs {
        let uniq: BTreeSet<&str> = d.iter().copied().collect();
        for t in uniq {
            *df.entry(t).or_default() += 1.0;
        }
    }
    let (k1, b) = (1.2, 0.75);
    for q in 0..50 {
        let qn = rng.gen_range(1..=4);
        let query: Vec<&str> = (0..qn)
            .map(|_| vocab.choose(&mut rng).unwrap().as_str())
            .collect();
        let mut scored: Vec<(usize, f64)> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let s = query
                    .iter()
                    .filter_map(|t| {
                        let f = d.iter().filter(|w| *w == t).count() as f64;
                        (f > 0.0).then(|| {
                            let idf = ((n - df[t] + 0.5) / (df[t] + 0.5) + 1.0).ln();
                            idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * d.len() as f64 / avg))
                        })
                    })
                    .sum::<f64>();
                (i, s)
            })
            .collect();
        scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let want: Vec<usize> = scored[..5].iter().map(|x| x.0).collect();
        let got: Vec<usize> = index
            .search(&query.join(" "), 5)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|h| h.doc_id)
            .collect();
        ensure!(
            got == want,
            "query {q} {query:?}: index {got:?}, oracle {want:?}"
        );
    }
    Ok("top-5 equals exhaustive scoring on 50/50 queries over 100 docs".into())
}

// ---- CGMH --------------------------------------------------------------

fn toks(s: &str) -> Vec<String> {
    text::tokenize(s)
}

fn rigged_gateway() -> Gateway {
    let causal = TargetLm {
        target: toks("He drinks milk ."),
        hit: 0.9,
        miss: 0.05,
    };
    let masked = TableMlm::new(vec![("milk", 0.5), ("tea", 0.3), ("water", 0.2)], 0.3)
        .with_override("apple", 1e-4);
    Gateway::new(Arc::new(
        MockBackend::new(0)
            .with_causal(Arc::new(causal))
            .with_masked(Arc::new(masked)),
    ))
}

fn cgmh_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dist = ActionDistribution::default();
    let mut counts = [0usize; 3];
    const DRAWS: usize = 100_000;
    for _ in 0..DRAWS {
        counts[match dist.sample(&mut rng) {
            Action::Replace => 0,
            Action::Insert => 1,
            Action::Delete => 2,
        }] += 1;
    }
    let freq = counts.map(|c| c as f64 / DRAWS as f64);
    for (f, p) in freq.iter().zip([0.7, 0.2, 0.1]) {
        ensure!((f - p).abs() <= 0.01, "action frequencies {freq:?}");
    }
    let accepted = (0..DRAWS)
        .filter(|_| cgmh::accept_ratio(0.25, &mut rng))
        .count() as f64
        / DRAWS as f64;
    ensure!(
        (accepted - 0.25).abs() <= 0.01,
        "acceptance frequency {accepted}"
    );

    let gw = rigged_gateway();
    let input = "He drinks apple.";
    let base = cgmh::fluency(&toks(input), &gw).map_err(|e| e.to_string())?;
    let cfg = CgmhConfig::default();
    let mut improved = 0;
    for chain in 0..100 {
        let t =
            cgmh::run_single_chain(input, &cfg, 25, &gw, 1000, chain).map_err(|e| e.to_string())?;
        if t.best.is_some_and(|b| b.fluency > base) {
            improved += 1;
        }
    }
    ensure!(
        improved >= 95,
        "{improved}/100 chains improved on the input"
    );

    // length cap under the default and an insert-only action mix
    let pairs = corpus::load_comve(&fixtures().join("comve_test.csv"), Split::Test)
        .map_err(|e| e.to_string())?;
    let hash = Gateway::new(Arc::new(MockBackend::new(3)));
    let insert_only = CgmhConfig {
        steps: 60,
        actions: ActionDistribution::new(Ratio::new(0, 1), Ratio::new(1, 1), Ratio::new(0, 1))
            .map_err(|e| e.to_string())?,
        ..CgmhConfig::default()
    };
    let mut longest = 0;
    let mut n_out = 0;
    for (i, p) in pairs.iter().enumerate() {
        for c in [&cfg, &insert_only] {
            for inst in cgmh::run_chain(p, c, &hash, i as u64).map_err(|e| e.to_string())? {
                longest = longest.max(toks(&inst.text).len());
                n_out += 1;
            }
        }
    }
    // flat fluency accepts every insert, so chains run into the cap
    let flat = Gateway::new(Arc::new(
        MockBackend::new(3).with_causal(Arc::new(ConstantLm(1.0))),
    ));
    let long = "the man puts a big grey elephant into the very small white fridge in the old kitchen today";
    let mut at_cap = 0;
    for chain in 0..5 {
        let t = cgmh::run_single_chain(long, &insert_only, 25, &flat, 77, chain)
            .map_err(|e| e.to_string())?;
        let len = t.final_state.tokens.len();
        longest = longest.max(len);
        at_cap += usize::from(len == 25);
        n_out += 1;
    }
    ensure!(at_cap > 0, "insert-only chains never reached the cap");
    ensure!(longest <= 25, "a ComVE output has {longest} tokens");
    Ok(format!(
        "actions {:.4}/{:.4}/{:.4}; accept {accepted:.4}; {improved}/100 improved; longest of {n_out} outputs {longest} tokens",
        freq[0], freq[1], freq[2]
    ))
}

// ---- position scoring --------------------------------------------------

fn position_scoring() -> Check {
    let vocab = neon_core::gateway::mock::vocabulary();
    let masked = TableMlm::new(vec![("milk", 1.0)], 0.5).with_override("zzzz", 1e-4);
    let gw = Gateway::new(Arc::new(MockBackend::new(0).with_masked(Arc::new(masked))));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = 0;
    for _ in 0..100 {
        let len = rng.gen_range(3..=15);
        let mut s: Vec<String> = (0..len)
            .map(|_| vocab[rng.gen_range(0..200)].clone())
            .collect();
        let odd = rng.gen_range(0..len);
        s[odd] = "zzzz".into();
        let scores = cgmh::position_scores(&s, &gw).map_err(|e| e.to_string())?;
        let argmax = (0..len)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap();
        hits += usize::from(argmax == odd);
    }
    ensure!(
        hits == 100,
        "argmax found the anomalous token in {hits}/100"
    );

    let uni = Gateway::new(Arc::new(
        MockBackend::new(0).with_masked(Arc::new(UniformMlm::new(50))),
    ));
    let s = toks("the man puts a big elephant into the small fridge .");
    let weights =
        cgmh::position_distribution(&cgmh::position_scores(&s, &uni).map_err(|e| e.to_string())?);
    let mut counts = vec![0usize; s.len()];
    const DRAWS: usize = 10_000;
    for _ in 0..DRAWS {
        counts[cgmh::sample_position(&weights, &mut rng)] += 1;
    }
    let expected = DRAWS as f64 / s.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((s.len() - 1) as f64).unwrap().cdf(chi2);
    ensure!(
        p > 0.01,
        "uniform sampling rejected: chi2 {chi2:.2}, p {p:.4}"
    );
    Ok(format!(
        "argmax 100/100; uniform chi2 {chi2:.2} over {} cells, p {p:.3}",
        s.len()
    ))
}

// ---- Fleiss kappa ------------------------------------------------------

fn kappa() -> Check {
    let perfect = RatingMatrix::new(vec![
        vec![3, 0, 0],
        vec![0, 3, 0],
        vec![0, 0, 3],
        vec![3, 0, 0],
    ])
    .unwrap();
    let k: f64 = fleiss_kappa(&perfect).map_err(|e| e.to_string())?;
    ensure!(k == 1.0, "perfect agreement gives {k}");
    let split = RatingMatrix::new(vec![vec![2, 1]; 12]).unwrap();
    let k: f64 = fleiss_kappa(&split).map_err(|e| e.to_string())?;
    ensure!((k + 0.5).abs() < 1e-12, "2-1 split gives {k}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 100 {
        let (items, cats, raters) = (
            rng.gen_range(2..30),
            rng.gen_range(2..5),
            rng.gen_range(2..6),
        );
        let rows: Vec<Vec<usize>> = (0..items)
            .map(|_| {
                let mut row = vec![0; cats];
                for _ in 0..raters {
                    row[rng.gen_range(0..cats)] += 1;
                }
                row
            })
            .collect();
        let Ok(base) = fleiss_kappa::<Ratio<i128>>(&RatingMatrix::new(rows.clone()).unwrap())
        else {
            continue;
        };
        let mut by_item = rows.clone();
        by_item.shuffle(&mut rng);
        let mut perm: Vec<usize> = (0..cats).collect();
        perm.shuffle(&mut rng);
        let by_cat: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| perm.iter().map(|&j| r[j]).collect())
            .collect();
        for m in [by_item, by_cat] {
            let k = fleiss_kappa::<Ratio<i128>>(&RatingMatrix::new(m).unwrap())
                .map_err(|e| e.to_string())?;
            ensure!(k == base, "permutation changed kappa {base} -> {k}");
        }
        checked += 1;
    }
    Ok("perfect 1.0, 2-1 split -0.5, exact permutation invariance on 100 matrices".into())
}

// ---- end-to-end determinism --------------------------------------------

fn e2e_config() -> RunConfig {
    let f = fixtures();
    let toml = format!(
        "task = \"comve\"\nseed = 2024\nmethods = [\"original\", \"random\", \"retrieval_bm25\", \"retrieval_embed\", \"ground_truth\", \"top1\", \"neon_icl\", \"neon_cgmh\"]\n\
         [data]\ntrain = \"{}\"\ntest = \"{}\"\nknowledge = \"{}\"\n",
        f.join("comve_train.csv").display(),
        f.join("comve_test.csv").display(),
        f.join("omcs.txt").display()
    );
    RunConfig::from_toml_str(&toml, &[]).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((
            entry.strip_prefix(dir).unwrap().display().to_string(),
            fs::read(&entry).unwrap(),
        ));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn end_to_end(root: &Path) -> Check {
    let cfg = e2e_config();
    let gw = cfg.gateway.build().map_err(|e| e.to_string())?;
    let pairs = corpus::load_comve(cfg.data.test.as_ref().unwrap(), Split::Test)
        .map_err(|e| e.to_string())?;
    ensure!(pairs.len() == 20, "fixture has {} pairs", pairs.len());
    let start = Instant::now();
    for name in ["run1", "run2"] {
        pipeline::run(&cfg, &root.join(name), &gw, &RunOptions::default())
            .map_err(|e| e.to_string())?;
    }
    let elapsed = start.elapsed();
    let (a, b) = (tree(&root.join("run1")), tree(&root.join("run2")));
    ensure!(a.len() == b.len(), "file sets differ");
    for (x, y) in a.iter().zip(&b) {
        ensure!(x.0 == y.0 && x.1 == y.1, "{} differs between runs", x.0);
    }
    ensure!(
        elapsed < Duration::from_secs(120),
        "two runs took {elapsed:.1?}"
    );
    Ok(format!(
        "{} files byte-identical; both runs in {elapsed:.1?}",
        a.len()
    ))
}

// ---- evaluation service ------------------------------------------------

fn forbidden_words() -> BTreeSet<String> {
    let mut w: BTreeSet<String> = Method::ALL.iter().map(|m| m.as_str().to_string()).collect();
    w.extend(
        [
            "icl",
            "cgmh",
            "neon",
            "hidden_assignment",
            "system",
            "systems",
            "method",
        ]
        .map(String::from),
    );
    w
}

fn leaked(payload: &Value, forbidden: &BTreeSet<String>) -> Option<String> {
    let s = payload.to_string();
    s.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .find(|w| forbidden.contains(&w.to_lowercase()))
        .map(String::from)
}

fn head_to_head_records(
    run: &Path,
) -> Result<(Vec<ExplanationRecord>, Vec<ExplanationRecord>), String> {
    let a: Vec<ExplanationRecord> =
        read_jsonl(&run.join("records/neon_icl.jsonl")).map_err(|e| e.to_string())?;
    let b: Vec<ExplanationRecord> =
        read_jsonl(&run.join("records/original.jsonl")).map_err(|e| e.to_string())?;
    let ids: BTreeSet<&str> = a.iter().map(|r| r.source_id.as_str()).collect();
    let b: Vec<ExplanationRecord> = b
        .into_iter()
        .filter(|r| ids.contains(r.source_id.as_str()))
        .collect();
    Ok((a, b))
}

fn eval_service(root: &Path) -> Check {
    let (a, b) = head_to_head_records(&root.join("run1"))?;
    let n = a.len();
    let store = Arc::new(EvalStore::open(root.join("eval-http")).map_err(|e| e.to_string())?);
    let handle = server::spawn(evalsvc::http::router(store), "127.0.0.1:0".parse().unwrap())
        .map_err(|e| e.to_string())?;
    let url = handle.url();
    let client = reqwest::blocking::Client::new();
    let create = json!({
        "protocol": "head_to_head",
        "records_a": a,
        "records_b": b,
        "n_items": n,
        "seed": 11,
    });
    let resp = client
        .post(format!("{url}/sessions"))
        .json(&create)
        .send()
        .map_err(|e| e.to_string())?;
    ensure!(
        resp.status().as_u16() == 201,
        "create returned {}",
        resp.status()
    );
    let id = resp.json::<Value>().map_err(|e| e.to_string())?["session_id"]
        .as_str()
        .unwrap()
        .to_string();

    let forbidden = forbidden_words();
    let mut served = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for annotator in evalsvc::default_annotators() {
        loop {
            let next: Value = client
                .get(format!("{url}/sessions/{id}/next?annotator={annotator}"))
                .send()
                .and_then(|r| r.json())
                .map_err(|e| e.to_string())?;
            if let Some(w) = leaked(&next, &forbidden) {
                return Err(format!("served payload contains `{w}`: {next}"));
            }
            if next["done"].as_bool() == Some(true) {
                break;
            }
            served += 1;
            let item = next["item"]["item_id"].as_str().unwrap();
            let pick = |rng: &mut ChaCha8Rng| *evalsvc::SIDES.choose(rng).unwrap();
            let body = json!({
                "annotator": annotator,
                "item_id": item,
                "responses": {"preferred": pick(&mut rng), "conflict_point": pick(&mut rng)},
            });
            let r = client
                .post(format!("{url}/sessions/{id}/submit"))
                .json(&body)
                .send()
                .map_err(|e| e.to_string())?;
            ensure!(r.status().is_success(), "submit returned {}", r.status());
        }
    }
    let report: Value = client
        .get(format!("{url}/sessions/{id}/report"))
        .send()
        .and_then(|r| r.json())
        .map_err(|e| e.to_string())?;
    check_percentages(&report)?;
    drop(handle);

    let crash = crash_and_restart(root, &a, &b)?;
    Ok(format!(
        "{served} served payloads clean; percentages sum to 100; {crash}"
    ))
}

fn check_percentages(report: &Value) -> Result<(), String> {
    let aspects = report["aspects"]
        .as_array()
        .ok_or("report has no aspects")?;
    ensure!(
        aspects.len() == ASPECTS.len(),
        "report has {} aspects",
        aspects.len()
    );
    for a in aspects {
        let sum: f64 = a["votes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v["percent"].as_f64().unwrap())
            .sum();
        ensure!(
            (sum - 100.0).abs() <= 0.01,
            "{} percentages sum to {sum}",
            a["aspect"]
        );
    }
    Ok(())
}

const CHILD_ENV: &str = "NEON_ACCEPTANCE_CRASH_CHILD";

/// Child side: answer assignments, print one ACK per acknowledged submit,
/// then die without unwinding.
fn crash_child(store_dir: &str, session: &str, limit: usize) -> ! {
    let store = EvalStore::open(store_dir).expect("open store");
    let mut out = std::io::stdout().lock();
    let mut done = 0;
    'outer: for annotator in evalsvc::default_annotators() {
        while let Some(item) = store.next(session, &annotator).expect("next").item {
            let ack = store
                .submit(
                    session,
                    &annotator,
                    &item.item_id,
                    &json!({"preferred": "left", "conflict_point": "tie"}),
                )
                .expect("submit");
            writeln!(out, "ACK {annotator} {} {}", item.item_id, ack.completed).unwrap();
            out.flush().unwrap();
            done += 1;
            if done == limit {
                break 'outer;
            }
        }
    }
    std::process::abort();
}

fn crash_and_restart(
    root: &Path,
    a: &[ExplanationRecord],
    b: &[ExplanationRecord],
) -> Result<String, String> {
    let dir = root.join("eval-crash");
    let store = EvalStore::open(&dir).map_err(|e| e.to_string())?;
    let req = CreateSession {
        input: SessionInput::HeadToHead {
            records_a: a.to_vec(),
            records_b: b.to_vec(),
        },
        n_items: a.len(),
        annotators: evalsvc::default_annotators(),
        seed: 5,
    };
    let id = store.create(&req).map_err(|e| e.to_string())?.session_id;
    drop(store);

    let limit = a.len() + 3;
    let child = Command::new(std::env::current_exe().unwrap())
        .env(CHILD_ENV, format!("{}\t{id}\t{limit}", dir.display()))
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut child = child;
    let acks: Vec<(String, String)> = BufReader::new(child.stdout.take().unwrap())
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| {
            let parts: Vec<&str> = l.split(' ').collect();
            (parts.len() == 4 && parts[0] == "ACK")
                .then(|| (parts[1].to_string(), parts[2].to_string()))
        })
        .collect();
    let status = child.wait().map_err(|e| e.to_string())?;
    ensure!(
        !status.success(),
        "child exited cleanly instead of crashing"
    );
    ensure!(
        acks.len() == limit,
        "child acknowledged {} of {limit}",
        acks.len()
    );

    // a write torn by the crash
    let log = dir.join(&id).join("events.jsonl");
    fs::OpenOptions::new()
        .append(true)
        .open(&log)
        .and_then(|mut f| f.write_all(br#"{"ts":1,"session":"#))
        .map_err(|e| e.to_string())?;

    let store = EvalStore::open(&dir).map_err(|e| e.to_string())?;
    let stored: BTreeSet<(String, String)> = store
        .submissions(&id)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| (e.annotator, e.item))
        .collect();
    for ack in &acks {
        ensure!(
            stored.contains(ack),
            "acknowledged {ack:?} lost after restart"
        );
    }
    for annotator in evalsvc::default_annotators() {
        while let Some(item) = store.next(&id, &annotator).map_err(|e| e.to_string())?.item {
            store
                .submit(
                    &id,
                    &annotator,
                    &item.item_id,
                    &json!({"preferred": "right", "conflict_point": "left"}),
                )
                .map_err(|e| e.to_string())?;
        }
    }
    let report = store.report(&id, false).map_err(|e| e.to_string())?;
    check_percentages(&serde_json::to_value(&report).unwrap())?;
    Ok(format!(
        "{}/{} acknowledged events survived a crash",
        acks.len(),
        limit
    ))
}

// ---- driver ------------------------------------------------------------

fn run_check(f: impl FnOnce() -> Check) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(detail)) => Outcome::Pass(detail),
        Ok(Err(e)) => Outcome::Fail(e),
        Err(p) => Outcome::Fail(
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    }
}

fn main() {
    if let Ok(spec) = std::env::var(CHILD_ENV) {
        let parts: Vec<&str> = spec.split('\t').collect();
        crash_child(parts[0], parts[1], parts[2].parse().unwrap());
    }
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let results: Vec<(&str, Outcome)> = vec![
        ("dataset-ingestion", ingestion()),
        ("golden-prompts", run_check(golden_prompts)),
        ("metric-oracles", run_check(metric_oracles)),
        ("bm25-oracle", run_check(bm25_oracle)),
        ("cgmh-statistics", run_check(cgmh_statistics)),
        ("position-scoring", run_check(position_scoring)),
        ("fleiss-kappa", run_check(kappa)),
        ("end-to-end-determinism", run_check(|| end_to_end(&root))),
        ("eval-service", run_check(|| eval_service(&root))),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Outcome::Pass(d) => println!("PASS {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
            Outcome::Unverified(d) => println!("FAIL {name}: UNVERIFIED, {d}"),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

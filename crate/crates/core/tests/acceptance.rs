//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any failure.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ctxmt::analysis::{
    context_sweep, likelihood_difference, occlusion_saliency, p_cxmi, GreedyChrfPipeline, Normalization, SegmentInput,
};
use ctxmt::backend::{
    Backend, ContextBonus, SamplingParams, ScoreTable, StubBackend, StubProgram, StubRule, StubScoring,
};
use ctxmt::corpus::{
    corpus_stats, parse_corpus, parse_corpus_str, to_canonical_jsonl, Conversation, CorpusFormat, LangCode, Speaker,
};
use ctxmt::decoder::{read_pools, CandidatePool, MbrOptions, PoolEntry, Provenance, QualityDecoder};
use ctxmt::evalharness::{
    chrf_resampled_significance, cluster_and_rank, load_config, run_experiment, ClusterOptions, Injected,
    ResamplingOptions, SegmentScores, SignificanceTest, SystemRun,
};
use ctxmt::metrics::{
    chrf_segment, ChrfMetric, ChrfParams, CountingMetric, Metric, MetricDescriptor, MetricError, MetricInput,
    MetricKind, Orientation,
};
use ctxmt::muda::{muda_f1, tag_segment, Phenomenon, RuleBook, TaggedToken};
use ctxmt::promptkit::{
    export_sft, prompt_for_turn, render_prompt, ContextPolicy, ExportMode, ExportOptions, LanguageMode, LanguageTable,
    Window,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn load(name: &str) -> Vec<Conversation> {
    let parsed = parse_corpus(fixtures().join(name), CorpusFormat::CanonicalJsonl).expect("fixture parses");
    assert!(parsed.rejected.is_empty(), "{name}: {:?}", parsed.rejected);
    parsed.conversations
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- chrF oracle

/// Occurrences of `gram` in `seq`, by direct comparison at every offset.
fn occurrences(seq: &[char], gram: &[char]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

/// Brute-force chrF2 (order 6, whitespace dropped, effective-order averaging).
fn chrf_oracle(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let (mut prec, mut rec, mut orders) = (0.0, 0.0, 0);
    for n in 1..=6 {
        if h.len() < n || r.len() < n {
            continue;
        }
        let mut matched = 0;
        for i in 0..=h.len() - n {
            let gram = &h[i..i + n];
            // count each distinct gram once, at its first position
            if (0..i).any(|j| &h[j..j + n] == gram) {
                continue;
            }
            matched += occurrences(&h, gram).min(occurrences(&r, gram));
        }
        prec += matched as f64 / (h.len() - n + 1) as f64;
        rec += matched as f64 / (r.len() - n + 1) as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let (p, r) = (prec / orders as f64, rec / orders as f64);
    if p + r == 0.0 {
        return 0.0;
    }
    100.0 * 5.0 * p * r / (4.0 * p + r)
}

fn random_text(rng: &mut ChaCha8Rng, alphabet: &[char], max_len: usize) -> String {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let params = ChrfParams::default();
    let exact_same: f64 = chrf_segment("abc", "abc", &params);
    let empty_hyp: f64 = chrf_segment("", "abc", &params);
    ensure(exact_same == 100.0, || format!("(abc, abc) gave {exact_same}"))?;
    ensure(empty_hyp == 0.0, || format!("(\"\", abc) gave {empty_hyp}"))?;

    let mut pairs: Vec<(String, String)> = vec![
        ("abc".into(), "abc".into()),
        ("".into(), "abc".into()),
        ("cat sat".into(), "the cat sat".into()),
    ];
    let alphabet: Vec<char> = "abcde ßü#".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let h = random_text(&mut rng, &alphabet, 40);
        let r = random_text(&mut rng, &alphabet, 40);
        pairs.push((h, r));
    }
    let mut worst = 0.0f64;
    for (h, r) in &pairs {
        let ours: f64 = chrf_segment(h, r, &params);
        let oracle = chrf_oracle(h, r);
        worst = worst.max((ours - oracle).abs());
        ensure((ours - oracle).abs() <= 1e-6, || format!("({h:?}, {r:?}): {ours} vs oracle {oracle}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    let cat: f64 = chrf_segment("cat sat", "the cat sat", &params);
    Ok(format!("{} pairs, max |diff| {worst:.1e}, cat sat = {cat:.4}, {elapsed:.2?}", pairs.len()))
}

// ------------------------------------------------------------ MBR brute force

/// Toy metric backed by an explicit `(hyp, ref)` table.
struct TableMetric {
    descriptor: MetricDescriptor,
    table: HashMap<(String, String), f64>,
}

impl TableMetric {
    fn new(id: &str, orientation: Orientation, symmetric: bool, table: HashMap<(String, String), f64>) -> Self {
        TableMetric {
            descriptor: MetricDescriptor {
                id: id.into(),
                kind: MetricKind::RemoteReferenceBased,
                needs_reference: true,
                declares_symmetry: symmetric,
                context_capable: false,
                orientation,
            },
            table,
        }
    }
}

impl Metric<f64> for TableMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<f64>, MetricError> {
        Ok(items
            .iter()
            .map(|i| self.table[&(i.mt.clone(), i.reference.clone().expect("reference-based"))])
            .collect())
    }
}

fn pool_of(entries: &[(&str, usize)]) -> CandidatePool {
    CandidatePool {
        source: "src".into(),
        context: ctxmt::promptkit::ContextBlock::empty(ContextPolicy::none()),
        entries: entries
            .iter()
            .map(|&(t, m)| PoolEntry { text: t.into(), multiplicity: m })
            .collect(),
        provenance: Provenance { backend_id: "toy".into(), params: SamplingParams::default() },
    }
}

/// Exhaustive double loop: utilities, then indices by utility descending,
/// earliest index first on ties.
fn mbr_oracle(texts: &[String], weights: &[usize], m: &dyn Fn(&str, &str) -> f64, exclude_self: bool) -> (Vec<f64>, Vec<usize>) {
    let mut utilities = Vec::new();
    for i in 0..texts.len() {
        let mut num = 0.0;
        let mut den = 0usize;
        for j in 0..texts.len() {
            let w = if exclude_self && i == j { weights[j] - 1 } else { weights[j] };
            num += w as f64 * m(&texts[i], &texts[j]);
            den += w;
        }
        utilities.push(if den == 0 { 0.0 } else { num / den as f64 });
    }
    let mut order: Vec<usize> = (0..texts.len()).collect();
    order.sort_by(|&a, &b| utilities[b].partial_cmp(&utilities[a]).unwrap().then(a.cmp(&b)));
    (utilities, order)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();

    // documented case: utility is minus the length gap
    let texts = ["a", "ab", "abc"];
    let mut table = HashMap::new();
    for h in texts {
        for r in texts {
            table.insert((h.to_string(), r.to_string()), -(h.len() as f64 - r.len() as f64).abs());
        }
    }
    let metric = TableMetric::new("len-gap", Orientation::Higher, true, table);
    let pool = pool_of(&[("a", 1), ("ab", 1), ("abc", 1)]);
    let sel = QualityDecoder::<f64>::new()
        .mbr_select(&pool, &metric, &MbrOptions::default())
        .map_err(|e| e.to_string())?;
    ensure(sel.winner(&pool) == "ab", || format!("length-gap winner {:?}", sel.winner(&pool)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let n = rng.gen_range(1..=6);
        let texts: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let weights: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
        let symmetric = rng.gen_bool(0.5);
        let orientation = if rng.gen_bool(0.5) { Orientation::Higher } else { Orientation::Lower };
        let exclude_self = rng.gen_bool(0.3);
        let mut table = HashMap::new();
        for i in 0..n {
            for j in 0..n {
                if symmetric && j < i {
                    let v = table[&(texts[j].clone(), texts[i].clone())];
                    table.insert((texts[i].clone(), texts[j].clone()), v);
                } else {
                    // eighths are exact in binary, so sums carry no rounding
                    let v = rng.gen_range(-16..=16) as f64 / 8.0;
                    table.insert((texts[i].clone(), texts[j].clone()), v);
                }
            }
        }
        let entries: Vec<(&str, usize)> = texts.iter().map(|t| t.as_str()).zip(weights.iter().copied()).collect();
        let pool = pool_of(&entries);
        let oriented = |h: &str, r: &str| {
            let v = table[&(h.to_string(), r.to_string())];
            if orientation == Orientation::Lower { -v } else { v }
        };
        let (expected_u, expected_rank) = mbr_oracle(&texts, &weights, &oriented, exclude_self);
        let metric = TableMetric::new("toy", orientation, symmetric, table.clone());
        let options = MbrOptions { exclude_self, ..MbrOptions::default() };
        let sel = QualityDecoder::<f64>::new()
            .mbr_select(&pool, &metric, &options)
            .map_err(|e| e.to_string())?;
        ensure(sel.ranking == expected_rank, || {
            format!("case {case}: ranking {:?} vs oracle {:?}", sel.ranking, expected_rank)
        })?;
        ensure(sel.winner_index == expected_rank[0], || format!("case {case}: winner"))?;
        for (a, b) in sel.utilities.iter().zip(&expected_u) {
            ensure((a - b).abs() < 1e-12, || format!("case {case}: utility {a} vs {b}"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("100 random pools + length-gap case (winner \"ab\"), {elapsed:.2?}"))
}

// ---------------------------------------------------------------- call budget

struct ConstQe(MetricDescriptor);

impl Metric<f64> for ConstQe {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.0
    }

    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<f64>, MetricError> {
        Ok(items.iter().map(|i| i.mt.len() as f64).collect())
    }
}

fn criterion_3() -> Outcome {
    let n = 100;
    let texts: Vec<String> = (0..n).map(|i| format!("candidate number {i}")).collect();
    let entries: Vec<(&str, usize)> = texts.iter().map(|t| (t.as_str(), 1)).collect();
    let pool = pool_of(&entries);
    let opts = MbrOptions::default();

    let chrf = CountingMetric::new(ChrfMetric::default());
    let decoder = QualityDecoder::<f64>::new();
    decoder.mbr_select(&pool, &chrf, &opts).map_err(|e| e.to_string())?;
    let full = chrf.calls();
    ensure(full <= n * n, || format!("asymmetric metric made {full} calls"))?;
    decoder.mbr_select(&pool, &chrf, &opts).map_err(|e| e.to_string())?;
    let repeat = chrf.calls() - full;
    ensure(repeat == 0, || format!("repeat selection made {repeat} new calls"))?;

    let mut table = HashMap::new();
    for a in &texts {
        for b in &texts {
            table.insert((a.clone(), b.clone()), -(a.len() as f64 - b.len() as f64).abs());
        }
    }
    let sym = CountingMetric::new(TableMetric::new("sym", Orientation::Higher, true, table));
    QualityDecoder::<f64>::new().mbr_select(&pool, &sym, &opts).map_err(|e| e.to_string())?;
    ensure(sym.calls() <= n * (n + 1) / 2, || format!("symmetric metric made {} calls", sym.calls()))?;

    let qe = CountingMetric::new(ConstQe(MetricDescriptor {
        id: "qe".into(),
        kind: MetricKind::RemoteReferenceFree,
        needs_reference: false,
        declares_symmetry: false,
        context_capable: false,
        orientation: Orientation::Higher,
    }));
    QualityDecoder::<f64>::new()
        .qe_rerank(&pool, &qe, Window::None)
        .map_err(|e| e.to_string())?;
    ensure(qe.calls() == n, || format!("qe_rerank made {} calls", qe.calls()))?;
    Ok(format!(
        "n={n}: {full} calls (≤ {}), symmetric {} (≤ {}), qe {}, repeat 0",
        n * n,
        sym.calls(),
        n * (n + 1) / 2,
        qe.calls()
    ))
}

// ------------------------------------------------------------- golden prompts

fn criterion_4() -> Outcome {
    let golden: BTreeMap<String, BTreeMap<String, String>> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("golden_prompts.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let languages = LanguageTable::default();
    let mut convs = load("toy4.jsonl");
    convs.extend(load("coins_chat.jsonl"));
    let mut checked = 0;
    for conv in &convs {
        let expected = golden.get(&conv.id).ok_or_else(|| format!("no golden entry for {}", conv.id))?;
        let t = conv.len();
        let references: HashMap<usize, String> = conv
            .turns
            .iter()
            .filter(|t| !t.source_language.is_english())
            .filter_map(|t| t.reference_translation.clone().map(|r| (t.index, r)))
            .collect();
        for (variant, policy) in [
            ("bilingual", ContextPolicy::new(Window::Full, LanguageMode::Bilingual)),
            ("english-only", ContextPolicy::new(Window::Full, LanguageMode::EnglishOnly)),
            ("none", ContextPolicy::none()),
        ] {
            let (_, prompt) = prompt_for_turn(conv, t, policy, Some(&references), &languages).map_err(|e| e.to_string())?;
            ensure(prompt.text == expected[variant], || {
                format!("{} {variant}:\n{:?}\nexpected\n{:?}", conv.id, prompt.text, expected[variant])
            })?;
            checked += 1;
        }
    }

    let export = export_sft(
        &load("coins_chat.jsonl"),
        &ExportOptions {
            policy: ContextPolicy::full(),
            mode: ExportMode::Reference,
            max_context_chars: None,
        },
        None,
        &languages,
    )
    .map_err(|e| e.to_string())?;
    let last = export
        .records
        .iter()
        .find(|r| r.meta.t == 13)
        .ok_or("no record for the final turn of the coins chat")?;
    ensure(last.completion == "Lassen Sie mich Ihnen sagen, wo es verwendet wurde.", || {
        format!("completion {:?}", last.completion)
    })?;
    ensure(last.prompt.ends_with("English: Let me tell you where it was used.\nGerman:"), || {
        "coins chat prompt tail".into()
    })?;
    Ok(format!("{checked} prompts byte-identical; coins chat completion exact"))
}

// ---------------------------------------------------------- P-CXMI and LD

fn diagnostic_segments() -> Vec<(SegmentInput, String)> {
    let mut out = Vec::new();
    for conv in load("diag20.jsonl") {
        for t in 2..=conv.len() {
            let seg = SegmentInput::from_turn(&conv, t, ContextPolicy::full(), None).expect("segment");
            let reference = conv.turn(t).unwrap().reference_translation.clone().unwrap();
            out.push((seg, reference));
        }
    }
    out
}

fn prompt_pair(seg: &SegmentInput, languages: &LanguageTable) -> (String, String) {
    let with = render_prompt(&seg.source, &seg.context, &seg.src_lang, &seg.tgt_lang, true, languages).unwrap();
    let without = render_prompt(&seg.source, &seg.context, &seg.src_lang, &seg.tgt_lang, false, languages).unwrap();
    (with.text, without.text)
}

/// Per-character log-probability of the stub, restated independently.
fn hand_logprob(text: &str) -> f64 {
    text.chars().map(|c| -((1 + (c as u32) % 7) as f64) / 8.0).sum()
}

fn criterion_5() -> Outcome {
    let languages = LanguageTable::default();
    let segments = diagnostic_segments();
    ensure(segments.len() == 20, || format!("{} segments", segments.len()))?;

    let blind = StubBackend::new(StubProgram::default());
    let mut worst = 0.0f64;
    for (seg, reference) in &segments {
        let v = p_cxmi(&blind, seg, reference, &languages, Normalization::Sum).map_err(|e| e.to_string())?;
        worst = worst.max(v.abs());
    }
    ensure(worst <= 1e-9, || format!("context-blind P-CXMI reached {worst}"))?;

    // programmed preferences: alternate which prompt favours the reference
    let mut tables = Vec::new();
    let mut signs = Vec::new();
    for (i, (seg, reference)) in segments.iter().enumerate() {
        let (with, without) = prompt_pair(seg, &languages);
        let sign = if i % 3 == 0 { -1.0 } else { 1.0 };
        let target = format!(" {reference}");
        tables.push(ScoreTable { prompt: with, target: target.clone(), token_logprobs: vec![-2.0 + 0.5 * sign, -1.0] });
        tables.push(ScoreTable { prompt: without, target, token_logprobs: vec![-2.0, -1.0] });
        signs.push(sign);
    }
    let table_stub = StubBackend::new(StubProgram {
        scoring: StubScoring { tables, ..Default::default() },
        ..Default::default()
    });
    let mut agree = 0;
    for ((seg, reference), sign) in segments.iter().zip(&signs) {
        let v = p_cxmi(&table_stub, seg, reference, &languages, Normalization::Sum).map_err(|e| e.to_string())?;
        if v.signum() == *sign {
            agree += 1;
        }
    }
    ensure(agree == 20, || format!("sign agreement {agree}/20"))?;

    let mut ld_worst = 0.0f64;
    for (seg, reference) in &segments {
        let hyp_noctx = format!("{reference} (plain)");
        let ld = likelihood_difference(&blind, seg, reference, &hyp_noctx, &languages, Normalization::Sum)
            .map_err(|e| e.to_string())?;
        let hand = hand_logprob(&format!(" {reference}")) - hand_logprob(&format!(" {hyp_noctx}"));
        ld_worst = ld_worst.max((ld - hand).abs());
    }
    ensure(ld_worst <= 1e-9, || format!("LD deviates from hand sums by {ld_worst}"))?;
    Ok(format!("20 segments: |P-CXMI| ≤ {worst:.1e}, signs {agree}/20, LD max |diff| {ld_worst:.1e}"))
}

// ---------------------------------------------------------- occlusion saliency

const CONTRIBUTIONS: [f64; 4] = [0.1, 0.0, 0.5, 0.0];

/// Ten conversations of five turns; in conversation `c` the contributions are
/// rotated by `c`, so the disambiguating turn moves around.
fn saliency_fixture() -> (Vec<Conversation>, Vec<ContextBonus>, Vec<[f64; 4]>) {
    let de = LangCode::new("de");
    let en = LangCode::new("en");
    let mut convs = Vec::new();
    let mut bonuses = Vec::new();
    let mut expected = Vec::new();
    for c in 0..10 {
        let mut turns = Vec::new();
        let mut contributions = [0.0; 4];
        for j in 0..4 {
            let lang = if j % 2 == 0 { de.clone() } else { en.clone() };
            let speaker = if j % 2 == 0 { Speaker::Customer } else { Speaker::Agent };
            turns.push((speaker, lang, format!("conversation {c} line {j} marker-{c}-{j}"), None));
            let v = CONTRIBUTIONS[(j + c) % 4];
            contributions[j] = v;
            if v != 0.0 {
                bonuses.push(ContextBonus {
                    target_contains: "FORMAL".into(),
                    context_contains: Some(format!("marker-{c}-{j}")),
                    per_line: v,
                });
            }
        }
        turns.push((Speaker::Agent, en.clone(), format!("Please confirm request {c}."), None));
        convs.push(Conversation::new(format!("sal-{c}"), (en.clone(), de.clone()), turns).unwrap());
        expected.push(contributions);
    }
    (convs, bonuses, expected)
}

fn criterion_6() -> Outcome {
    let languages = LanguageTable::default();
    let (convs, bonuses, expected) = saliency_fixture();
    let hyp_ctx = "Bitte bestätigen Sie die Anfrage FORMAL.";
    let hyp_noctx = "Bitte bestätige die Anfrage.";

    let exact = StubBackend::new(StubProgram {
        scoring: StubScoring { bonuses: bonuses.clone(), ..Default::default() },
        ..Default::default()
    });
    let mut worst = 0.0f64;
    for (conv, contributions) in convs.iter().zip(&expected) {
        let seg = SegmentInput::from_turn(conv, 5, ContextPolicy::full(), None).map_err(|e| e.to_string())?;
        let map = occlusion_saliency(&exact, &seg, hyp_ctx, hyp_noctx, &languages, Normalization::Sum)
            .map_err(|e| e.to_string())?;
        for (s, want) in map.segments.iter().zip(contributions) {
            worst = worst.max((s.saliency - want).abs());
        }
        worst = worst.max(map.interaction().abs());
    }
    ensure(worst <= 1e-9, || format!("saliency error {worst}"))?;

    let noisy = StubBackend::new(StubProgram {
        scoring: StubScoring { bonuses, noise: 0.05, ..Default::default() },
        ..Default::default()
    });
    let mut hits = 0;
    for (conv, contributions) in convs.iter().zip(&expected) {
        let seg = SegmentInput::from_turn(conv, 5, ContextPolicy::full(), None).map_err(|e| e.to_string())?;
        let map = occlusion_saliency(&noisy, &seg, hyp_ctx, hyp_noctx, &languages, Normalization::Sum)
            .map_err(|e| e.to_string())?;
        let want = contributions.iter().position(|&v| v == 0.5).unwrap() + 1;
        if map.most_salient().map(|s| s.turn_index) == Some(want) {
            hits += 1;
        }
    }
    ensure(hits == 10, || format!("disambiguator found in {hits}/10"))?;
    Ok(format!("saliencies within {worst:.1e}; disambiguator top in {hits}/10 under noise"))
}

// ------------------------------------------------------------------ MuDA F1

fn tag(i: usize, surface: &str, phenomenon: Phenomenon) -> TaggedToken {
    TaggedToken { token_index: i, surface: surface.into(), phenomenon }
}

fn criterion_7() -> Outcome {
    let reference = vec![vec![
        tag(0, "Sie", Phenomenon::Formality),
        tag(3, "ihr", Phenomenon::Pronouns),
        tag(5, "Konto", Phenomenon::LexicalCohesion),
    ]];
    let same = muda_f1(&reference, &reference).map_err(|e| e.to_string())?;
    for p in Phenomenon::ALL {
        let s = same.get(p);
        ensure(s.support == 0 || s.f1 == 1.0, || format!("identical: {p} f1 {}", s.f1))?;
    }

    let disjoint_hyp = vec![vec![tag(0, "du", Phenomenon::Formality), tag(2, "er", Phenomenon::Pronouns)]];
    let disjoint = muda_f1(&reference, &disjoint_hyp).map_err(|e| e.to_string())?;
    for p in [Phenomenon::Formality, Phenomenon::Pronouns] {
        ensure(disjoint.get(p).f1 == 0.0, || format!("disjoint: {p} f1 {}", disjoint.get(p).f1))?;
    }

    let three = vec![vec![
        tag(0, "sie", Phenomenon::Pronouns),
        tag(1, "ihm", Phenomenon::Pronouns),
        tag(2, "es", Phenomenon::Pronouns),
    ]];
    let two = vec![vec![tag(0, "sie", Phenomenon::Pronouns), tag(1, "ihr", Phenomenon::Pronouns)]];
    let partial = muda_f1(&three, &two).map_err(|e| e.to_string())?;
    let s = partial.get(Phenomenon::Pronouns);
    ensure(s.precision == 0.5 && (s.recall - 1.0 / 3.0).abs() < 1e-15 && s.f1 == 0.4, || {
        format!("3/2/1 fixture gave p {} r {} f1 {}", s.precision, s.recall, s.f1)
    })?;

    let book = RuleBook::starter();
    let tags = tag_segment("okay okay cat", &["cat okay"], "en", &book).map_err(|e| e.to_string())?;
    let cohesion: Vec<&str> = tags
        .iter()
        .filter(|t| t.phenomenon == Phenomenon::LexicalCohesion)
        .map(|t| t.surface.as_str())
        .collect();
    ensure(cohesion == ["cat"], || format!("cohesion tags {cohesion:?}"))?;
    Ok("identical 1.0, disjoint 0.0, 3/2/1 fixture 0.4, \"okay\" untagged".into())
}

// ----------------------------------------------------- significance, clusters

fn corrupt(text: &str, every: usize) -> String {
    text.chars()
        .enumerate()
        .map(|(i, c)| if i % every == 0 && !c.is_whitespace() { '#' } else { c })
        .collect()
}

fn run(system: &str, language: &str, refs: &[String], hyps: &[String]) -> SystemRun {
    SystemRun {
        system_id: system.into(),
        language: language.into(),
        segments: refs
            .iter()
            .zip(hyps)
            .enumerate()
            .map(|(i, (r, h))| SegmentScores {
                key: format!("s{i}"),
                hypothesis: h.clone(),
                reference: Some(r.clone()),
                scores: BTreeMap::from([("chrf".to_string(), chrf_segment::<f64>(h, r, &ChrfParams::default()))]),
            })
            .collect(),
        config: serde_json::Value::Null,
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alphabet: Vec<char> = "abcdefghij klmnop".chars().collect();
    let refs: Vec<String> = (0..50)
        .map(|_| format!("seg {}", random_text(&mut rng, &alphabet, 40)))
        .collect();
    let options = ClusterOptions {
        metric: "chrf".into(),
        orientation: Orientation::Higher,
        test: SignificanceTest::ChrfResampling(ResamplingOptions::default()),
    };

    let identical: Vec<SystemRun> = ["en-de", "de-en"]
        .iter()
        .flat_map(|l| ["a", "b", "c"].map(|s| run(s, l, &refs, &refs)))
        .collect();
    let table = cluster_and_rank(&identical, &options).map_err(|e| e.to_string())?;
    for (lang, lc) in &table.languages {
        ensure(lc.clusters.len() == 1, || format!("{lang}: {} clusters for identical systems", lc.clusters.len()))?;
    }

    let worse: Vec<String> = refs.iter().map(|r| corrupt(r, 30)).collect();
    let params = ChrfParams::default();
    let pairs_a: Vec<(&str, &str)> = refs.iter().map(|r| (r.as_str(), r.as_str())).collect();
    let pairs_b: Vec<(&str, &str)> = worse.iter().zip(&refs).map(|(h, r)| (h.as_str(), r.as_str())).collect();
    let gap = ctxmt::metrics::chrf_corpus::<f64, _, _>(&pairs_a, &params).unwrap()
        - ctxmt::metrics::chrf_corpus::<f64, _, _>(&pairs_b, &params).unwrap();
    ensure(gap >= 10.0, || format!("fixture separation only {gap:.2} chrF"))?;
    let res = chrf_resampled_significance(&pairs_a, &pairs_b, &ResamplingOptions::default()).map_err(|e| e.to_string())?;
    ensure(res.win_rate == 1.0 && res.significant, || format!("win rate {} significant {}", res.win_rate, res.significant))?;
    let again = chrf_resampled_significance(&pairs_a, &pairs_b, &ResamplingOptions::default()).map_err(|e| e.to_string())?;
    ensure(res == again, || "resampling not deterministic".into())?;

    // each system is alone on top in exactly one of three languages
    let garbage: Vec<String> = refs.iter().map(|r| corrupt(r, 2)).collect();
    let systems = ["x", "y", "z"];
    let mut no_majority = Vec::new();
    for (li, lang) in ["en-de", "en-fr", "en-nl"].iter().enumerate() {
        for (si, sys) in systems.iter().enumerate() {
            let hyps = if si == li { &refs } else { &garbage };
            no_majority.push(run(sys, lang, &refs, hyps));
        }
    }
    let first = cluster_and_rank(&no_majority, &options).map_err(|e| e.to_string())?;
    let second = cluster_and_rank(&no_majority, &options).map_err(|e| e.to_string())?;
    ensure(first == second, || "clustering not deterministic".into())?;
    ensure(!first.first_cluster_emitted, || "cluster 1 emitted without a majority".into())?;
    let min_label = first.languages.values().flat_map(|l| l.index.values()).min().copied();
    ensure(min_label == Some(2), || format!("smallest emitted label {min_label:?}"))?;
    Ok(format!("identical → 1 cluster; gap {gap:.1} chrF → win rate {}; no-majority labels start at 2; deterministic", res.win_rate))
}

// ---------------------------------------------------------------- end to end

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let (config, base) = load_config(fixtures().join("e2e/experiment.toml")).map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome = run_experiment(&config, &base, out.path(), &Injected::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(outcome.failed_legs == 0, || format!("{} failed legs", outcome.failed_legs))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let hyps = |system: &str| -> HashMap<String, String> {
        report["systems"]
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["id"] == system)
            .unwrap()["segments"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| (s["key"].as_str().unwrap().to_string(), s["hypothesis"].as_str().unwrap().to_string()))
            .collect()
    };
    let greedy = hyps("greedy");
    let mbr = hyps("mbr-ctx");

    let pools = read_pools(out.path().join("pools.jsonl")).map_err(|e| e.to_string())?;
    ensure(!pools.is_empty(), || "no pools recorded".into())?;
    let metric = ChrfMetric::default();
    let decoder = QualityDecoder::<f64>::new();
    let options = MbrOptions::with_context(Window::Full);
    let mut margin = f64::INFINITY;
    for record in &pools {
        let eu = |h: &str| decoder.expected_utility(&record.pool, h, &metric, &options);
        let m = eu(&mbr[&record.key]).map_err(|e| e.to_string())?;
        let g = eu(&greedy[&record.key]).map_err(|e| e.to_string())?;
        ensure(m >= g - 1e-9, || format!("{}: MBR {m} < greedy {g}", record.key))?;
        margin = margin.min(m - g);
    }
    Ok(format!("{} pools, MBR ≥ greedy on every pool (min margin {margin:.3}), {elapsed:.2?}", pools.len()))
}

// -------------------------------------------------------------- context sweep

/// Reference with its first `quarters` quarters of characters replaced by '#'.
fn masked(reference: &str, quarters: usize) -> String {
    let n = reference.chars().count();
    let cut = n * quarters / 4;
    reference.chars().enumerate().map(|(i, c)| if i < cut { '#' } else { c }).collect()
}

fn criterion_10() -> Outcome {
    let convs = load("diag20.jsonl");
    let l_max = convs.iter().map(|c| c.len() - 1).max().unwrap();
    // rung k is masked by (l_max - k) quarters: more context, fewer masks
    let rules: Vec<StubRule> = convs
        .iter()
        .flat_map(|c| c.turns.iter())
        .map(|t| {
            let reference = t.reference_translation.clone().unwrap();
            StubRule {
                needle: t.source_text.clone(),
                ladder: (0..=l_max).map(|k| masked(&reference, l_max - k)).collect(),
                samples: Vec::new(),
            }
        })
        .collect();
    let stub = StubBackend::new(StubProgram { rules, ..Default::default() });
    let languages = LanguageTable::default();
    let pipeline = GreedyChrfPipeline {
        backend: &stub as &dyn Backend,
        conversations: &convs,
        languages: &languages,
        language_mode: LanguageMode::Bilingual,
        chrf: ChrfParams::default(),
    };
    let ks: Vec<usize> = (1..=l_max).collect();
    let table = context_sweep(&pipeline, &ks);
    let scores: Vec<f64> = table
        .rows
        .iter()
        .map(|r| r.score.ok_or_else(|| format!("{} failed: {:?}", r.window, r.error)))
        .collect::<Result<_, _>>()?;
    ensure(scores.windows(2).all(|w| w[0] <= w[1]), || format!("not non-decreasing: {scores:?}"))?;
    let full = table.row(Window::Full).unwrap().score;
    let k_max = table.row(Window::LastK(l_max)).unwrap().score;
    ensure(full == k_max, || format!("full {full:?} vs k={l_max} {k_max:?}"))?;
    let shown: Vec<String> = scores.iter().map(|s| format!("{s:.1}")).collect();
    Ok(format!("none..k={l_max}..full = [{}]", shown.join(", ")))
}

// ---------------------------------------------------------------- corpus stats

fn criterion_11() -> Outcome {
    // en-de shape: 17805 referenced segments in 493 conversations, 843957
    // source characters
    let (n_conv, n_seg, n_chars) = (493usize, 17805usize, 843957usize);
    let de = LangCode::new("de");
    let en = LangCode::new("en");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyzäöü".chars().collect();
    let (base_len, long_turns) = (n_chars / n_seg, n_chars % n_seg);
    let (base_turns, long_convs) = (n_seg / n_conv, n_seg % n_conv);
    let mut turn_no = 0;
    let mut convs = Vec::with_capacity(n_conv);
    for c in 0..n_conv {
        let len = base_turns + usize::from(c < long_convs);
        let turns = (0..len)
            .map(|j| {
                let chars = base_len + usize::from(turn_no < long_turns);
                turn_no += 1;
                let text: String = (0..chars).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
                let (speaker, lang) = if j % 2 == 0 { (Speaker::Customer, de.clone()) } else { (Speaker::Agent, en.clone()) };
                (speaker, lang, text, Some("ref".to_string()))
            })
            .collect();
        convs.push(Conversation::new(format!("syn-{c}"), (en.clone(), de.clone()), turns).map_err(|e| e.to_string())?);
    }
    let reparsed = parse_corpus_str(&to_canonical_jsonl(&convs), CorpusFormat::CanonicalJsonl)
        .map_err(|e| e.to_string())?
        .conversations;
    let stats = corpus_stats(&reparsed);
    ensure(stats.n_instances == n_seg as u64, || format!("instances {}", stats.n_instances))?;
    ensure(stats.avg_source_length == Some(num_rational::Ratio::new(n_chars as u64, n_seg as u64)), || {
        format!("avg length {:?}", stats.avg_source_length)
    })?;
    ensure(
        stats.avg_segments_per_conversation == Some(num_rational::Ratio::new(n_seg as u64, n_conv as u64)),
        || format!("avg segments {:?}", stats.avg_segments_per_conversation),
    )?;
    let row = stats.rounded(2);
    ensure(row["avg_source_length"] == "47.40" && row["avg_segments_per_conversation"] == "36.12", || {
        format!("rounded row {row}")
    })?;

    let real = match std::env::var_os("CTXMT_WMT24_EN_DE") {
        None => "real WMT24 data not available, skipped".to_string(),
        Some(path) => {
            let parsed = parse_corpus(&path, CorpusFormat::CanonicalJsonl).map_err(|e| e.to_string())?;
            let real = corpus_stats(&parsed.conversations).rounded(2);
            ensure(
                real["n_instances"] == 17805
                    && real["avg_source_length"] == "47.40"
                    && real["avg_segments_per_conversation"] == "36.12",
                || format!("real data row {real}"),
            )?;
            "real WMT24 en-de row matches".to_string()
        }
    };
    Ok(format!("synthetic 17805 / 47.40 / 36.12 exact; {real}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("chrF oracle equivalence", criterion_1),
        ("MBR brute-force equivalence", criterion_2),
        ("MBR call budget", criterion_3),
        ("prompt golden fixtures", criterion_4),
        ("P-CXMI and likelihood difference", criterion_5),
        ("occlusion saliency", criterion_6),
        ("MuDA F1 fixtures", criterion_7),
        ("significance and clustering", criterion_8),
        ("end-to-end desk run", criterion_9),
        ("context-sweep saturation", criterion_10),
        ("corpus stats", criterion_11),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

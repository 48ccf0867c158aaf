//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr so it shows even when output is captured.
//!
//! Tests share one lock so the timed criteria are not measured while
//! another criterion is training on the same core.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use extsumm::corpus::{
    build_dataset, synth_corpus, BuildOptions, CategorySchema, Instance, ProductRecord, Split,
    SynthOptions,
};
use extsumm::decoder::{beam_search, generate_all, greedy_decode, AspectMode, DecodeConfig, GenerationRecord};
use extsumm::labeling::{label_sentences, lcs_length_of, DEFAULT_THRESHOLD};
use extsumm::metrics::{distinct_n, evaluate, export_heatmap, rouge_l_f1, rouge_n_f1, DiversityMode};
use extsumm::model::{fuse_attention, EncoderKind, ExtractorHead, Model, ModelConfig, Vocab};
use extsumm::trainer::{gradient_check, train, vocab_from_instances, GradCheckOptions, TrainConfig};
use extsumm::Execution;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} ({detail})");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_fusion() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    for _ in 0..1000 {
        let n_sent = rng.gen_range(1..6);
        let n_words = rng.gen_range(n_sent..40);
        // every sentence owns at least one word
        let mut map: Vec<usize> = (0..n_sent).collect();
        map.extend((n_sent..n_words).map(|_| rng.gen_range(0..n_sent)));
        map.sort_unstable();
        let raw: Vec<f64> = (0..n_words).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let z: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let beta: Vec<f64> = (0..n_sent).map(|_| rng.gen_range(1e-3..1.0)).collect();

        let fused = fuse_attention(&alpha, &beta, &map);
        worst_sum = worst_sum.max((fused.iter().sum::<f64>() - 1.0).abs());

        let b = rng.gen_range(1e-3..1.0);
        let uniform = fuse_attention(&alpha, &vec![b; n_sent], &map);
        for (u, a) in uniform.iter().zip(&alpha) {
            worst_uniform = worst_uniform.max((u - a).abs());
        }
    }
    let example = fuse_attention(&[0.5, 0.5], &[0.8, 0.2], &[0, 1]);
    let elapsed = start.elapsed();
    let pass = worst_sum < 1e-6
        && worst_uniform < 1e-9
        && example == vec![0.8, 0.2]
        && elapsed < Duration::from_secs(5);
    report(
        "1",
        pass,
        &format!("sum err {worst_sum:.1e}, uniform err {worst_uniform:.1e}, example {example:?}, {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// Every string over {0,1,2} of length 0..=8, shortest first.
fn all_strings(max_len: usize) -> (Vec<Vec<u8>>, Vec<usize>) {
    let mut strings = Vec::new();
    let mut offsets = Vec::new();
    for len in 0..=max_len {
        offsets.push(strings.len());
        for code in 0..3usize.pow(len as u32) {
            let mut c = code;
            let s: Vec<u8> = (0..len)
                .map(|_| {
                    let d = (c % 3) as u8;
                    c /= 3;
                    d
                })
                .collect();
            strings.push(s);
        }
    }
    (strings, offsets)
}

fn index_of(s: &[u8], offsets: &[usize]) -> usize {
    offsets[s.len()] + s.iter().rev().fold(0, |acc, &d| acc * 3 + d as usize)
}

#[test]
fn criterion_2_lcs_oracle() {
    let _g = serial();
    let start = Instant::now();
    let (strings, offsets) = all_strings(8);
    let n = strings.len();
    let words = n.div_ceil(64);

    // All distinct subsequences of each string, as a bitset and as a list
    // sorted longest first.
    let mut bits = vec![0u64; n * words];
    let mut lists: Vec<Vec<(u32, u8)>> = Vec::with_capacity(n);
    for (i, s) in strings.iter().enumerate() {
        let mut seen = HashSet::new();
        for mask in 0u32..(1 << s.len()) {
            let sub: Vec<u8> = (0..s.len()).filter(|k| mask >> k & 1 == 1).map(|k| s[k]).collect();
            let j = index_of(&sub, &offsets);
            if seen.insert(j) {
                bits[i * words + j / 64] |= 1 << (j % 64);
            }
        }
        let mut list: Vec<(u32, u8)> = seen.into_iter().map(|j| (j as u32, strings[j].len() as u8)).collect();
        list.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        lists.push(list);
    }

    let mut pairs = 0u64;
    let mut mismatches = 0u64;
    for b in 0..n {
        let row = &bits[b * words..(b + 1) * words];
        for a in 0..n {
            let brute = lists[a]
                .iter()
                .find(|(j, _)| row[*j as usize / 64] >> (j % 64) & 1 == 1)
                .map_or(0, |&(_, len)| len as usize);
            if brute != lcs_length_of(&strings[a], &strings[b]) {
                mismatches += 1;
            }
            pairs += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(60);
    report("2", pass, &format!("{pairs} pairs, {mismatches} mismatches, {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_metric_oracles() {
    let _g = serial();
    let toks = |s: &str| -> Vec<String> { s.split_whitespace().map(String::from).collect() };
    let checks = [
        ("rouge1 identical", rouge_n_f1("abc", "abc", 1), 1.0),
        ("rouge2 identical", rouge_n_f1("abc", "abc", 2), 1.0),
        ("rouge1 disjoint", rouge_n_f1("abc", "xyz", 1), 0.0),
        ("rouge2 disjoint", rouge_n_f1("abc", "xyz", 2), 0.0),
        ("rouge1 abc/abd", rouge_n_f1("abc", "abd", 1), 2.0 / 3.0),
        ("rougeL identical", rouge_l_f1("abcd", "abcd"), 1.0),
        ("rougeL abcd/acbd", rouge_l_f1("abcd", "acbd"), 0.75),
        ("rougeL empty", rouge_l_f1("", "abc"), 0.0),
        ("dist2 all distinct", distinct_n(&[toks("a b c d")], 2), 1.0),
        ("dist2 a b a b", distinct_n(&[toks("a b a b")], 2), 2.0 / 3.0),
        ("dist2 a a a", distinct_n(&[toks("a a a")], 2), 0.5),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| c.1 != c.2).map(|c| c.0).collect();
    let pass = failed.is_empty();
    report("3", pass, &format!("{} exact checks, failed: {failed:?}", checks.len()));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let schema = CategorySchema::computer();
    let inst = Instance {
        product_id: "g".into(),
        category: schema.category.clone(),
        // 9 characters and 3 separators: 12 input tokens
        sentences: vec!["abc".into(), "dxe".into(), "fgh".into()],
        aspect: schema.aspects[1].clone(),
        summary: "xeg".into(),
        split: Split::Train,
    };
    let labels = label_sentences(&inst.sentences, &inst.summary, DEFAULT_THRESHOLD).unwrap();
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for head in [ExtractorHead::Bilinear, ExtractorHead::Ffn] {
        for kind in [EncoderKind::Recurrent, EncoderKind::Transformer] {
            let cfg = ModelConfig {
                embed_dim: 8,
                hidden_dim: 8,
                extractor_head: head,
                encoder_kind: kind,
                init_scale: 0.5,
                seed: 3,
                ..Default::default()
            };
            let mut m = Model::new(cfg, Vocab::build(["abcdefgh"], '.'), schema.clone(), '.').unwrap();
            let ex = m.prepare(&inst, Some(&labels.labels)).unwrap();
            assert_eq!(ex.layout.token_ids.len(), 12);
            let r = gradient_check(&mut m, &ex, GradCheckOptions::default()).unwrap();
            worst = worst.max(r.max_rel_error);
            details.push(format!("{head:?}/{kind:?} {:.1e}", r.max_rel_error));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(120);
    report("4", pass, &format!("{}, {elapsed:.2?}", details.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_labeling_contract() {
    let _g = serial();
    let c = synth_corpus(1, 200, &CategorySchema::computer(), &SynthOptions::default());
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (inst, gold) in c.instances.iter().zip(&c.gold_labels) {
        let got = label_sentences(&inst.sentences, &inst.summary, DEFAULT_THRESHOLD).unwrap();
        for (&p, &g) in got.labels.iter().zip(gold) {
            match (p, g) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fneg += 1,
                _ => {}
            }
        }
    }
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    let pass = f1 >= 0.95;
    report("5", pass, &format!("F1 {f1:.4} (tp {tp}, fp {fp}, fn {fneg})"));
    assert!(pass);
}

// ---------------------------------------------------------------- 6, 7, 8

const SEEDS: [u64; 4] = [1, 2, 3, 4];
const PRODUCTS: usize = 200;

struct SeedRun {
    seed: u64,
    test: Vec<Instance>,
    gold: Vec<Vec<u8>>,
    ext: Model,
    ext_rouge_l: f64,
    ext_dist2: f64,
    plain_rouge_l: f64,
    generations: Vec<GenerationRecord>,
}

struct EndToEnd {
    runs: Vec<SeedRun>,
    baseline_dist2: f64,
    elapsed: Duration,
}

fn train_config(seed: u64, null_aspect_rate: f64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        learning_rate: 5e-3,
        batch_size: 20,
        eval_every: 50,
        seed,
        null_aspect_rate,
        ..Default::default()
    }
}

fn fit(
    train_set: &[Instance],
    dev: &[Instance],
    schema: &CategorySchema,
    seed: u64,
    use_extractor: bool,
    null_aspect_rate: f64,
) -> Model {
    let sep = '.';
    let vocab = vocab_from_instances(train_set, sep);
    let cfg = ModelConfig {
        embed_dim: 32,
        hidden_dim: 32,
        vocab_size: vocab.len(),
        num_aspects: schema.len(),
        use_extractor,
        seed,
        ..Default::default()
    };
    let mut model = Model::new(cfg, vocab, schema.clone(), sep).unwrap();
    let labels: Vec<_> = train_set
        .iter()
        .map(|i| label_sentences(&i.sentences, &i.summary, DEFAULT_THRESHOLD).unwrap())
        .collect();
    train(&mut model, train_set, &labels, dev, &train_config(seed, null_aspect_rate), None).unwrap();
    model
}

fn end_to_end() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let schema = CategorySchema::computer();
        let decode = DecodeConfig::default();
        let exec = Execution::default();
        let mut runs = Vec::new();
        let mut baseline_dist2 = f64::NAN;
        for seed in SEEDS {
            let corpus = synth_corpus(seed, PRODUCTS, &schema, &SynthOptions::default());
            let pick = |s: Split| -> Vec<Instance> { corpus.split(s).into_iter().map(|x| x.0).collect() };
            let (train_set, dev) = (pick(Split::Train), pick(Split::Dev));
            let (test, gold): (Vec<Instance>, Vec<Vec<u8>>) = corpus.split(Split::Test).into_iter().unzip();

            let ext = fit(&train_set, &dev, &schema, seed, true, 0.0);
            let plain = fit(&train_set, &dev, &schema, seed, false, 0.0);

            let gen_ext = generate_all(&ext, &test, &decode, AspectMode::Conditioned, exec).unwrap();
            let gen_plain = generate_all(&plain, &test, &decode, AspectMode::Conditioned, exec).unwrap();
            let r_ext = evaluate(&gen_ext, &test, DiversityMode::Top1, exec).unwrap();
            let r_plain = evaluate(&gen_plain, &test, DiversityMode::Top1, exec).unwrap();

            let mut generations = gen_ext;
            generations.extend(gen_plain);
            if seed == SEEDS[0] {
                // aspect-free model decoded with the null aspect (Top-1)
                let free = fit(&train_set, &dev, &schema, seed, false, 1.0);
                let gen_free = generate_all(&free, &test, &decode, AspectMode::Null, exec).unwrap();
                baseline_dist2 = evaluate(&gen_free, &test, DiversityMode::Top1, exec).unwrap().overall.dist2;
                generations.extend(gen_free);
            }
            let _ = writeln!(
                std::io::stderr(),
                "  seed {seed}: ROUGE-L ext {:.4} / no-ext {:.4}, Dist-2 conditioned {:.4}",
                r_ext.overall.rouge.rouge_l,
                r_plain.overall.rouge.rouge_l,
                r_ext.overall.dist2
            );
            runs.push(SeedRun {
                seed,
                test,
                gold,
                ext,
                ext_rouge_l: r_ext.overall.rouge.rouge_l,
                ext_dist2: r_ext.overall.dist2,
                plain_rouge_l: r_plain.overall.rouge.rouge_l,
                generations,
            });
        }
        EndToEnd {
            runs,
            baseline_dist2,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_6_end_to_end_directions() {
    let _g = serial();
    let e = end_to_end();
    let first = &e.runs[0];
    let diversity = first.ext_dist2 > e.baseline_dist2;
    let wins: Vec<u64> = e
        .runs
        .iter()
        .filter(|r| r.ext_rouge_l >= r.plain_rouge_l)
        .map(|r| r.seed)
        .collect();
    let quality = wins.len() >= 3;
    let in_time = e.elapsed <= Duration::from_secs(600);
    let pass = diversity && quality && in_time;
    report(
        "6",
        pass,
        &format!(
            "(a) Dist-2 conditioned {:.4} vs null Top-1 {:.4}: {}; (b) EXT >= no-EXT on seeds {wins:?} ({}/4): {}; {:.1?}",
            first.ext_dist2,
            e.baseline_dist2,
            if diversity { "ok" } else { "violated" },
            wins.len(),
            if quality { "ok" } else { "violated" },
            e.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_extractor_argmax() {
    let _g = serial();
    let e = end_to_end();
    let (mut hits, mut total) = (0usize, 0usize);
    let mut differing_aspects = 0usize;
    let mut products = 0usize;
    for r in &e.runs {
        let mut by_product: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
        for (inst, gold) in r.test.iter().zip(&r.gold) {
            let h = export_heatmap(&r.ext, inst, &inst.aspect).unwrap();
            assert_eq!(h.rows.len(), inst.sentences.len());
            total += 1;
            if gold[h.argmax().unwrap()] == 1 {
                hits += 1;
            }
            by_product
                .entry(&inst.product_id)
                .or_default()
                .push(h.rows.iter().map(|x| x.1).collect());
        }
        for betas in by_product.values().filter(|b| b.len() > 1) {
            products += 1;
            if betas.windows(2).all(|w| w[0] != w[1]) {
                differing_aspects += 1;
            }
        }
    }
    let acc = hits as f64 / total as f64;
    let pass = acc >= 0.8;
    report(
        "7",
        pass,
        &format!("argmax-beta on a gold sentence for {hits}/{total} = {acc:.3}; aspects give distinct beta on {differing_aspects}/{products} products"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_decoding_constraints() {
    let _g = serial();
    let e = end_to_end();
    let max_len = DecodeConfig::default().max_decode_len;
    let mut longest = 0;
    for r in &e.runs {
        for g in &r.generations {
            for c in &g.candidates {
                longest = longest.max(c.tokens.len());
            }
        }
    }
    let run = &e.runs[0];
    let corpus = synth_corpus(run.seed, PRODUCTS, &CategorySchema::computer(), &SynthOptions::default());
    let greedy_cfg = DecodeConfig {
        beam_size: 1,
        ..Default::default()
    };
    let mut mismatches = 0;
    let instances: Vec<&Instance> = corpus.instances.iter().take(100).collect();
    for inst in &instances {
        let beam = beam_search(
            &run.ext,
            &inst.product_id,
            &inst.sentences,
            Some(&inst.aspect),
            &inst.aspect.name,
            &greedy_cfg,
        )
        .unwrap();
        let greedy = greedy_decode(&run.ext, &inst.sentences, Some(&inst.aspect), max_len).unwrap();
        if beam.chosen().tokens != greedy {
            mismatches += 1;
        }
    }
    let pass = longest <= max_len && mismatches == 0 && instances.len() == 100;
    report(
        "8",
        pass,
        &format!("longest sequence {longest} tokens; beam 1 vs greedy: {mismatches} mismatches on {} instances", instances.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn scripted_products() -> Vec<ProductRecord> {
    let themes = [
        "屏幕显示清晰色彩鲜艳亮度均匀观看舒适",
        "电池续航持久充电快速一天无需再充电",
        "键盘手感舒适按键回弹有力打字安静",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..120)
        .map(|p| {
            let mut frags = Vec::new();
            for (t, theme) in themes.iter().enumerate() {
                // lengths on both sides of the [15, 55] window
                let len = [8, 15, 30, 55, 56, 70][(p + t) % 6];
                let chars: Vec<char> = theme.chars().collect();
                let start = rng.gen_range(0..chars.len());
                frags.push((0..len).map(|k| chars[(start + k) % chars.len()]).collect::<String>());
                if p % 4 == 0 {
                    // a second fragment of the same theme
                    frags.push(chars.iter().cycle().skip(start + 1).take(20).collect());
                }
            }
            ProductRecord {
                product_id: format!("prod-{p:03}"),
                category: "computer".into(),
                title: format!("型号{p}"),
                detail_sentences: vec!["轻薄机身".into(), "高清屏幕".into(), "长效电池".into()],
                raw_summary: Some(frags.join(".") + "."),
            }
        })
        .collect()
}

#[test]
fn criterion_9_dataset_builder() {
    let _g = serial();
    let products = scripted_products();
    let opts = BuildOptions {
        skip_empty: true,
        ..Default::default()
    };
    let ds = build_dataset(&products, &CategorySchema::computer(), 5, &opts).unwrap();

    let all: Vec<&Instance> = ds.train.iter().chain(&ds.dev).chain(&ds.test).collect();
    let bad_len = all
        .iter()
        .filter(|i| !(15..=55).contains(&i.summary.chars().count()))
        .count();

    let mut duplicate_pairs = 0;
    for split in [&ds.dev, &ds.test] {
        let mut seen = HashSet::new();
        for i in split {
            if !seen.insert((i.product_id.as_str(), i.aspect.name.as_str())) {
                duplicate_pairs += 1;
            }
        }
    }

    let ids = |s: &[Instance]| -> HashSet<String> { s.iter().map(|i| i.product_id.clone()).collect() };
    let (tr, dv, te) = (ids(&ds.train), ids(&ds.dev), ids(&ds.test));
    let overlap = tr.intersection(&dv).count() + tr.intersection(&te).count() + dv.intersection(&te).count();
    let non_empty = !ds.train.is_empty() && !ds.dev.is_empty() && !ds.test.is_empty();

    let pass = bad_len == 0 && duplicate_pairs == 0 && overlap == 0 && non_empty;
    report(
        "9",
        pass,
        &format!(
            "{} instances ({}/{}/{}), {bad_len} out-of-range fragments, {duplicate_pairs} duplicate held-out pairs, {overlap} shared products",
            all.len(),
            ds.train.len(),
            ds.dev.len(),
            ds.test.len()
        ),
    );
    assert!(pass);
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use motion_signature::evaluation::{dtw_distance, topn_accuracy_with};
use motion_signature::features::{
    frame_motion_field, motion_distance_profile, trajectory_similarity, trajectory_summary, PairLabel, SimilarityWeights,
};
use motion_signature::index::{
    benchmark_query_latency, build_index_with, load_index, query, query_excluding, save_index, EmbeddingIndex, IndexEntry,
};
use motion_signature::model::{
    classification_loss, contrastive_loss, encode, encoder_input_for, load_params, save_params, CellKind, EncoderConfig,
    EncoderParams, MotionSignature, Readout,
};
use motion_signature::motion_data::{drop_joints, speed_double, speed_half, synth_generate, SkeletonSequence, SynthSpec};
use motion_signature::par::Parallelism;
use motion_signature::submotion::{query_submotion, sample_subsequences, train_submotion_with, SubmotionConfig};
use motion_signature::training::{train_with, Regime, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
const MODE: Parallelism = Parallelism::Parallel;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn c1_features() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for s in 0..100 {
        let j = rng.random_range(1..=31);
        let n = rng.random_range(2..=50);
        let seq = common::random_sequence(&mut rng, &format!("s{s}"), j, n, false);
        for _ in 0..5 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            let mf = frame_motion_field(&seq, a, b).unwrap();
            // frame_motion_field(seq, i, j) = F[i] - F[j]; the oracle takes (from, to).
            let oracle = common::brute_motion_field(&seq, b, a);
            for (x, y) in mf.displacements.iter().zip(&oracle) {
                for k in 0..3 {
                    worst = worst.max((x[k] - y[k]).abs());
                }
            }
            let back = frame_motion_field(&seq, b, a).unwrap();
            for (x, y) in mf.displacements.iter().zip(&back.displacements) {
                exact &= (0..3).all(|k| x[k] == -y[k]);
            }
        }
        let md = motion_distance_profile(&seq);
        for (x, y) in md.distances.iter().zip(common::brute_motion_distance(&seq)) {
            worst = worst.max((x - y).abs());
        }
        let chord = common::brute_motion_field(&seq, 0, n - 1);
        for (d, c) in md.distances.iter().zip(&chord) {
            exact &= *d >= (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        }
        let cut = rng.random_range(0..n);
        if cut >= 1 && cut + 1 < n {
            let first = seq.window("a", 0, cut + 1).unwrap();
            let second = seq.window("b", cut, n).unwrap();
            let joined = motion_distance_profile(&first).concatenate(&motion_distance_profile(&second)).unwrap();
            exact &= joined == md;
        }
    }
    verdict(worst <= 1e-9 && exact, format!("max oracle error {worst:.3e}, exact identities hold: {exact}"))
}

fn c2_losses() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m: f64 = rng.random_range(0.1..5.0);
        let dim = 8;
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d = m * rng.random_range(1.0..3.0);
        let far: Vec<f64> = a.iter().zip(&dir).map(|(x, u)| x + d * u / norm).collect();
        let similar_zero = contrastive_loss(&a, &a, PairLabel::Similar, m).unwrap();
        let dissimilar_far = contrastive_loss(&a, &far, PairLabel::Dissimilar, m).unwrap();
        let dissimilar_zero = contrastive_loss(&a, &a, PairLabel::Dissimilar, m).unwrap();
        worst = worst.max(similar_zero.abs()).max(dissimilar_far.abs()).max((dissimilar_zero - 0.5 * m * m).abs());
    }
    for classes in 2..=10usize {
        let logits = vec![0.37; classes];
        for t in 0..classes {
            let l = classification_loss(&logits, t).unwrap();
            worst = worst.max((l - (classes as f64).ln()).abs());
        }
    }
    verdict(worst <= 1e-9, format!("max deviation from closed forms {worst:.3e}"))
}

fn c3_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..10 {
        let g = common::gradient_check(seed, CellKind::Gru, Readout::Final, 1);
        worst = worst.max(g.max_rel_error);
        checked += g.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("10 seeds, {checked} parameters, max relative error {worst:.3e}, {secs:.1} s"),
    )
}

fn c4_augmentation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut md_equal = 0;
    let mut sim_zero = 0;
    let mut recovered = 0;
    for s in 0..100 {
        let j = rng.random_range(1..=25);
        let n = 2 * rng.random_range(1..=40);
        let seq = common::random_sequence(&mut rng, &format!("s{s}"), j, n, true);
        let half = speed_half(&seq).unwrap();
        md_equal += (motion_distance_profile(&half) == motion_distance_profile(&seq)) as usize;
        let w = SimilarityWeights::default();
        sim_zero += (trajectory_similarity(&trajectory_summary(&seq), &trajectory_summary(&half), w).unwrap() == 0.0) as usize;
        recovered += (speed_double(&half).unwrap().frames() == seq.frames()) as usize;
    }
    verdict(
        md_equal == 100 && sim_zero == 100 && recovered == 100,
        format!("MD preserved {md_equal}/100, similarity zero {sim_zero}/100, double after half {recovered}/100"),
    )
}

fn c5_dtw() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut matches = 0;
    for p in 0..50 {
        let j = rng.random_range(1..=6);
        let (na, nb) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let a = common::random_sequence(&mut rng, &format!("a{p}"), j, na, false);
        let b = common::random_sequence(&mut rng, &format!("b{p}"), j, nb, false);
        matches += (dtw_distance(&a, &b).unwrap() == common::brute_dtw_mm(a.frames(), b.frames())) as usize;
    }
    let mut worst: f64 = 0.0;
    for seq in synth_generate(&SynthSpec::toy((15, 120)), 3, 5).unwrap().iter().take(20) {
        worst = worst.max(dtw_distance(seq, &speed_half(seq).unwrap()).unwrap());
    }
    verdict(
        matches == 50 && worst <= 1e-6,
        format!("oracle matches {matches}/50; max dtw(s, speed_half(s)) = {worst:.3} mm (bound 1e-6)"),
    )
}

fn random_signature(rng: &mut ChaCha8Rng, dim: usize) -> MotionSignature {
    MotionSignature((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

fn c6_knn() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut entries: Vec<IndexEntry> = (0..1000)
        .map(|i| IndexEntry {
            id: format!("e{i:04}"),
            signature: random_signature(&mut rng, 512),
            label: Some(i % 8),
        })
        .collect();
    // Exact duplicates force distance ties.
    for i in 0..50 {
        entries[900 + i].signature = entries[i].signature.clone();
    }
    let index = EmbeddingIndex::new(512, entries).unwrap();
    let mut identical = 0;
    for q in 0..100 {
        let sig = if q % 4 == 0 {
            index.entries()[q].signature.clone()
        } else {
            random_signature(&mut rng, 512)
        };
        let got = query(&index, &sig, 1000).unwrap();
        let want = common::brute_knn(&index, &sig, 1000);
        let same = got.neighbors.len() == want.len()
            && got.neighbors.iter().zip(&want).all(|(n, (id, d))| n.id == *id && n.distance == *d);
        identical += same as usize;
    }
    verdict(identical == 100, format!("{identical}/100 full rankings identical to exhaustive scan"))
}

struct Toy {
    all: Vec<SkeletonSequence>,
    train: Vec<SkeletonSequence>,
    test: Vec<SkeletonSequence>,
}

fn toy() -> Toy {
    let all = synth_generate(&SynthSpec::toy((15, 120)), 40, SEED).unwrap();
    let (train, test) = all.iter().cloned().partition(|s| {
        let p = s.performer_id.as_deref().unwrap_or("");
        p != "p8" && p != "p9"
    });
    Toy { all, train, test }
}

fn toy_encoder(regime: Regime, with_mask: bool) -> EncoderConfig {
    let mut enc = EncoderConfig::for_joints(15, with_mask);
    enc.hidden_size = 32;
    enc.num_recurrent_layers = 1;
    enc.embedding_dim = 64;
    enc.readout = Readout::Mean;
    if regime == Regime::Supervised {
        enc.class_count = Some(8);
    }
    enc
}

fn toy_train(train: &[SkeletonSequence], regime: Regime, with_mask: bool) -> TrainOutcome {
    let mut cfg = TrainConfig::new(regime);
    cfg.seed = SEED;
    cfg.max_epochs = 12;
    cfg.batch_size = 64;
    train_with(train, &toy_encoder(regime, with_mask), &cfg, MODE, &mut |_| {}).unwrap()
}

struct Scores {
    top1: f64,
    top10: f64,
}

fn scores(params: &EncoderParams, all: &[SkeletonSequence], test: &[SkeletonSequence]) -> Scores {
    let index = build_index_with(params, all, MODE).unwrap();
    Scores {
        top1: topn_accuracy_with(&index, params, test, 1, MODE).unwrap(),
        top10: topn_accuracy_with(&index, params, test, 10, MODE).unwrap(),
    }
}

struct Trained {
    supervised: TrainOutcome,
    self_supervised: TrainOutcome,
    supervised_scores: Scores,
}

fn c7_toy(toy: &Toy) -> (Verdict, Trained) {
    let start = Instant::now();
    let supervised = toy_train(&toy.train, Regime::Supervised, false);
    let sup = scores(&supervised.params, &toy.all, &toy.test);
    let self_supervised = toy_train(&toy.train, Regime::SelfSupervised, false);
    let own = scores(&self_supervised.params, &toy.all, &toy.test);
    let secs = start.elapsed().as_secs_f64();
    let v = verdict(
        sup.top1 >= 0.90 && sup.top10 >= 0.85 && own.top1 >= 0.75 && secs <= 600.0,
        format!(
            "supervised top-1 {:.3} top-10 {:.3}; self-supervised top-1 {:.3} top-10 {:.3}; {} queries over {} indexed; {secs:.0} s",
            sup.top1,
            sup.top10,
            own.top1,
            own.top10,
            toy.test.len(),
            toy.all.len()
        ),
    );
    (v, Trained { supervised, self_supervised, supervised_scores: sup })
}

fn c8_noise(toy: &Toy, clean: &Scores) -> Verdict {
    let drop = |seqs: &[SkeletonSequence], salt: u64| -> Vec<SkeletonSequence> {
        seqs.iter()
            .enumerate()
            .map(|(i, s)| drop_joints(s, 0.2, SEED ^ (salt << 32) ^ i as u64).unwrap())
            .collect()
    };
    let noisy_all = drop(&toy.all, 1);
    let noisy_train: Vec<SkeletonSequence> = noisy_all.iter().filter(|s| toy.train.iter().any(|t| t.id == s.id)).cloned().collect();
    let noisy_test: Vec<SkeletonSequence> = noisy_all.iter().filter(|s| toy.test.iter().any(|t| t.id == s.id)).cloned().collect();
    let out = toy_train(&noisy_train, Regime::Supervised, true);
    let noisy = scores(&out.params, &noisy_all, &noisy_test);
    let drop = clean.top1 - noisy.top1;
    verdict(
        drop <= 0.15,
        format!("supervised top-1 clean {:.3}, with 20% joints dropped {:.3}, drop {drop:.3}", clean.top1, noisy.top1),
    )
}

fn distance(a: &MotionSignature, b: &MotionSignature) -> f64 {
    a.0.iter().zip(&b.0).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Rank of the speed variant is taken among other-class items, the
/// comparison set the criterion names; the rank among every indexed item is
/// reported alongside.
fn c9_speed(toy: &Toy, params: &EncoderParams) -> Verdict {
    let index = build_index_with(params, &toy.all, MODE).unwrap();
    let mut ranks = Vec::new();
    let mut ranks_all = Vec::new();
    let mut beats = Vec::new();
    for s in &toy.test {
        let sig = &index.get(&s.id).unwrap().signature;
        let variant = encode(params, &encoder_input_for(params.config(), &speed_half(s).unwrap()).unwrap()).unwrap();
        let d = distance(sig, &variant);
        let others: Vec<(bool, f64)> = index
            .entries()
            .iter()
            .filter(|e| e.id != s.id)
            .map(|e| (e.label != s.class_label, distance(sig, &e.signature)))
            .collect();
        let other_class: Vec<f64> = others.iter().filter(|o| o.0).map(|o| o.1).collect();
        beats.push(other_class.iter().filter(|&&x| x > d).count() as f64 / other_class.len() as f64);
        ranks.push(other_class.iter().filter(|&&x| x < d).count() + 1);
        ranks_all.push(others.iter().filter(|o| o.1 < d).count() + 1);
    }
    let median = |v: &mut Vec<usize>| {
        v.sort_unstable();
        v[v.len() / 2]
    };
    let (median, median_all) = (median(&mut ranks), median(&mut ranks_all));
    let meeting = beats.iter().filter(|&&b| b >= 0.95).count();
    let worst = beats.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        meeting == beats.len() && median == 1,
        format!(
            "variant closer than >=95% of other-class items for {meeting}/{} queries (worst {worst:.3}); median rank among other-class items {median} (among all items {median_all})",
            beats.len()
        ),
    )
}

fn c10_submotion(toy: &Toy, full: &EncoderParams) -> Verdict {
    let mut cfg = TrainConfig::new(Regime::SelfSupervised);
    cfg.seed = SEED;
    cfg.max_epochs = 20;
    cfg.batch_size = 32;
    cfg.learning_rate = 3e-3;
    let sub = train_submotion_with(full, &toy.train, &cfg, &SubmotionConfig::default(), MODE, &mut |_| {}).unwrap();
    let rate = |index: &EmbeddingIndex| {
        let (mut hits, mut total) = (0, 0);
        for s in &toy.test {
            for w in sample_subsequences(s, &[0.5], 0.5).unwrap() {
                total += 1;
                hits += query_submotion(&sub.params, &w.frames, index, 5).unwrap().rank_of(&s.id).is_some() as usize;
            }
        }
        (hits, total)
    };
    let test_index = build_index_with(full, &toy.test, MODE).unwrap();
    let (hits, total) = rate(&test_index);
    let all_index = build_index_with(full, &toy.all, MODE).unwrap();
    let (all_hits, all_total) = rate(&all_index);
    let share = hits as f64 / total as f64;
    verdict(
        share >= 0.80,
        format!(
            "parent in top-5 for {hits}/{total} = {share:.3} of windows over the {}-sequence test index (over all {} sequences: {all_hits}/{all_total} = {:.3})",
            toy.test.len(),
            toy.all.len(),
            all_hits as f64 / all_total as f64
        ),
    )
}

fn c11_latency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let entries = (0..10_000)
        .map(|i| IndexEntry {
            id: format!("e{i:05}"),
            signature: random_signature(&mut rng, 512),
            label: None,
        })
        .collect();
    let index = EmbeddingIndex::new(512, entries).unwrap();
    let queries: Vec<MotionSignature> = (0..100).map(|_| random_signature(&mut rng, 512)).collect();
    let stats = benchmark_query_latency(&index, &queries, 10).unwrap();
    verdict(
        stats.mean_ms < 50.0,
        format!("10000 x 512 entries: mean {:.2} ms, p95 {:.2} ms per query", stats.mean_ms, stats.p95_ms),
    )
}

fn c12_round_trips(toy: &Toy, params: &EncoderParams) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ppath = dir.path().join("model.params");
    save_params(&ppath, params).unwrap();
    let loaded = load_params(&ppath).unwrap();
    let mut same_sigs = 0;
    for s in &toy.test {
        let input = encoder_input_for(params.config(), s).unwrap();
        same_sigs += (encode(params, &input).unwrap() == encode(&loaded, &input).unwrap()) as usize;
    }
    let index = build_index_with(params, &toy.all, MODE).unwrap();
    let ipath = dir.path().join("toy.index");
    save_index(&ipath, &index).unwrap();
    let reloaded = load_index(&ipath).unwrap();
    let mut same_answers = 0;
    for s in &toy.test {
        let sig = &index.get(&s.id).unwrap().signature;
        same_answers += (query_excluding(&index, sig, 10, &s.id).unwrap() == query_excluding(&reloaded, sig, 10, &s.id).unwrap()) as usize;
    }
    let n = toy.test.len();
    verdict(
        same_sigs == n && same_answers == n && loaded.values() == params.values(),
        format!("identical signatures {same_sigs}/{n}, identical query answers {same_answers}/{n}"),
    )
}

/// Criteria that cannot pass as stated. They still run and print FAIL; the
/// process fails if one of them starts passing or any other criterion fails.
/// 5: every inserted midpoint of speed_half costs half an inter-frame step
/// under any monotone alignment, so the DTW bound holds only for static input.
const KNOWN_BLOCKED: &[&str] = &["5"];

fn main() {
    let mut passed = 0;
    let mut unexpected = Vec::new();
    let mut report = |n: &str, name: &str, run: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = run();
        let blocked = KNOWN_BLOCKED.contains(&n);
        let tag = if v.pass { "PASS" } else { "FAIL" };
        passed += v.pass as usize;
        if v.pass == blocked {
            unexpected.push(n.to_string());
        }
        let note = if blocked { " (known blocked)" } else { "" };
        println!("{tag} {n:>2} {name}: {} [{:.1} s]{note}", v.detail, start.elapsed().as_secs_f64());
    };
    report("1", "feature oracles", &mut c1_features);
    report("2", "loss closed forms", &mut c2_losses);
    report("3", "gradient check", &mut c3_gradients);
    report("4", "augmentation algebra", &mut c4_augmentation);
    report("5", "DTW oracle", &mut c5_dtw);
    report("6", "kNN oracle", &mut c6_knn);
    let toy = toy();
    let mut trained = None;
    report("7", "toy retrieval", &mut || {
        let (v, t) = c7_toy(&toy);
        trained = Some(t);
        v
    });
    let trained = trained.unwrap();
    report("8", "noise robustness", &mut || c8_noise(&toy, &trained.supervised_scores));
    report("9", "speed invariance", &mut || c9_speed(&toy, &trained.self_supervised.params));
    report("10", "sub-motion retrieval", &mut || c10_submotion(&toy, &trained.self_supervised.params));
    report("11", "query latency", &mut c11_latency);
    report("12", "round trips", &mut || c12_round_trips(&toy, &trained.supervised.params));
    println!("acceptance: {passed} of 12 criteria passed; known blocked: {}", KNOWN_BLOCKED.join(", "));
    if !unexpected.is_empty() {
        println!("acceptance: unexpected outcome for criteria {}", unexpected.join(", "));
        std::process::exit(1);
    }
}

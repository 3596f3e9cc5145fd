//! End-to-end acceptance checks. Each test prints one `PASS` or `FAIL` line.

use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng as _;
use relctr::ctr::{CtrConfig, ModelVariant, RankModel, TextEncoder};
use relctr::data::{generate_logs, generate_world, request_spans, LogConfig, SearchSample, WorldConfig};
use relctr::debias::{pairwise_loss, sample_fake_rsl, DebiasConfig, PairwiseMode};
use relctr::encoder::{
    distill_loss, format_pair, overall_loss, sample_relevance_pairs, sft_logits, sft_loss, Encoder, EncoderConfig,
    load_checkpoint, save_checkpoint, EncoderParams, PretrainConfig, SftHead, TeacherOracle, Vocab,
};
use relctr::gradcheck;
use relctr::metrics::{auc, gauc, relaimpr};
use relctr::preference::{build_merged_sequence, BehaviorPool, MergedSequence, MiningConfig};
use relctr::train::{
    ablate, assess, build_requests, fit, generate_data, init_params, median, prepare_encoder, score_samples,
    AblationReport, ExperimentConfig,
};
use relctr::{rng, ParamStore, Tape, Tensor};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Written to stderr directly so the line survives the harness's output capture.
fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {id:>2} {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn desk() -> ExperimentConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf");
    ExperimentConfig::load(Path::new(path)).unwrap()
}

// ---------------------------------------------------------------- 1

/// Reference comparison table: (model, auc, auc RI, gauc, gauc RI) with the
/// RI strings exactly as printed.
const TABLE: &[(&str, f64, &str, f64, &str)] = &[
    ("LR", 0.6795, "-29.10", 0.6347, "-26.6"),
    ("DNN", 0.7541, "0.35", 0.6863, "1.47"),
    ("Wide&Deep", 0.7532, "0.00", 0.6836, "0.00"),
    ("DeepFM", 0.7519, "-0.51", 0.6839, "0.16"),
    ("XDeepFM", 0.7521, "-0.43", 0.6843, "-0.29"),
    ("DIN", 0.7561, "1.15", 0.6875, "2.21"),
    ("SuKD", 0.7524, "-0.31", 0.6851, "0.81"),
    ("unified v1", 0.7581, "1.93", 0.6892, "3.05"),
    ("unified v2", 0.7674, "5.61", 0.6933, "5.28"),
];

#[test]
fn c01_relaimpr_reproduces_reference_table() {
    let (base_auc, base_gauc) = (0.7532, 0.6836);
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for &(name, a, ri_a, g, ri_g) in TABLE {
        for (metric, value, base, printed) in [("auc", a, base_auc, ri_a), ("gauc", g, base_gauc, ri_g)] {
            let ri = relaimpr(value, base).unwrap();
            let got = format!("{ri:.2}");
            let want: f64 = printed.parse().unwrap();
            checked += 1;
            if got.parse::<f64>().unwrap() != want {
                mismatches.push(format!("{name} {metric}: computed {ri:.4}, printed {printed}"));
            }
        }
    }
    for m in &mismatches {
        println!("  mismatch {m}");
    }
    let ok = mismatches.is_empty();
    report(1, "relaimpr table", ok, &format!("{} of {checked} values differ", mismatches.len()));
    assert!(ok, "{mismatches:#?}");
}

// ---------------------------------------------------------------- 2

fn scores_check(cfg: &DebiasConfig) -> f64 {
    // gaps straddle the margin without touching it; mean positive below the threshold
    let mut ps = ParamStore::new();
    ps.insert("pos", Tensor::column(vec![0.02, 0.06, 0.01, 0.04, 0.07, 0.03]));
    ps.insert("neg", Tensor::column(vec![0.03, -0.05, 0.0, 0.01, 0.02, -0.2]));
    let tape = Tape::new();
    let g = tape.backward(pairwise_loss(ps.var(&tape, "pos"), ps.var(&tape, "neg"), cfg)).unwrap();
    gradcheck::check(&ps, &g, |_| true, 1, |p| {
        let t = Tape::new();
        pairwise_loss(p.var(&t, "pos"), p.var(&t, "neg"), cfg).item()
    })
    .max_rel_err
}

struct EncoderSetup {
    encoder: Encoder,
    params: ParamStore,
    seqs: Vec<Vec<u32>>,
    labels: Vec<u8>,
    targets: Tensor,
}

fn encoder_setup() -> EncoderSetup {
    let wc = WorldConfig {
        n_categories: 2,
        words_per_category: 4,
        generic_words: 2,
        n_queries: 6,
        n_items: 60,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc, 3).unwrap();
    let pairs = sample_relevance_pairs(&world, 8, 0.0, true, 3).unwrap();
    let vocab = Vocab::synthetic(wc.word_count());
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 10,
    };
    let student = EncoderParams::init(cfg.clone(), "encoder.", &mut rng::stream(3, "student")).unwrap();
    let teacher_params =
        EncoderParams::init(EncoderConfig { d_model: 12, ..cfg }, "teacher.", &mut rng::stream(3, "teacher")).unwrap();
    let teacher = TeacherOracle::new(teacher_params, 8, 4);
    let mut params = student.params.clone();
    params.extend(SftHead::init(8, &mut rng::stream(3, "head")));
    let seqs: Vec<Vec<u32>> = pairs
        .iter()
        .map(|p| format_pair(&vocab.ids(&p.query), &vocab.ids(&p.item), 10).unwrap())
        .collect();
    let labels = pairs.iter().map(|p| p.rsl).collect();
    let targets = teacher.targets(&seqs).unwrap();
    EncoderSetup {
        encoder: student.encoder,
        params,
        seqs,
        labels,
        targets,
    }
}

fn encoder_check(s: &EncoderSetup, which: &str) -> f64 {
    let pc = PretrainConfig::default();
    let loss = |tape: &Tape, p: &ParamStore| {
        let emb = s.encoder.forward(tape, p, &s.seqs).unwrap();
        match which {
            "sft" => sft_loss(sft_logits(tape, p, emb), &s.labels).unwrap().item(),
            "distill" => distill_loss(emb, &s.targets).unwrap().item(),
            _ => overall_loss(tape, &s.encoder, p, &s.seqs, &s.labels, Some(&s.targets), &pc).unwrap().0.item(),
        }
    };
    let tape = Tape::new();
    let emb = s.encoder.forward(&tape, &s.params, &s.seqs).unwrap();
    let value = match which {
        "sft" => sft_loss(sft_logits(&tape, &s.params, emb), &s.labels).unwrap(),
        "distill" => distill_loss(emb, &s.targets).unwrap(),
        _ => overall_loss(&tape, &s.encoder, &s.params, &s.seqs, &s.labels, Some(&s.targets), &pc).unwrap().0,
    };
    let grads = tape.backward(value).unwrap();
    let filter = |n: &str| which != "distill" || n.starts_with("encoder.");
    gradcheck::check(&s.params, &grads, filter, 1, |p| loss(&Tape::new(), p)).max_rel_err
}

fn ranking_check(variant: ModelVariant, mode: PairwiseMode) -> f64 {
    let wc = WorldConfig {
        n_users: 8,
        n_items: 40,
        n_queries: 6,
        n_categories: 2,
        words_per_category: 4,
        generic_words: 2,
        candidates_per_request: 4,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc, 21).unwrap();
    let logs = generate_logs(
        &world,
        &LogConfig {
            history_requests: 6,
            train_requests: 2,
            test_requests: 1,
            strictness: Some(0.0),
            ..LogConfig::default()
        },
        21,
    )
    .unwrap();
    let vocab = Vocab::synthetic(wc.word_count());
    let ec = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 4,
        max_seq_len: 12,
    };
    let encoder = Encoder::new(ec, "encoder.").unwrap();
    let mut r = rng::stream(21, "ranking-check");
    let mut params = encoder.init(&mut r);
    let mut model = RankModel::new(
        CtrConfig {
            variant,
            emb_dim: 2,
            hidden: 3,
            pref_hidden: 3,
            rank_sharpness: 3.0,
            n_users: wc.n_users,
            n_items: wc.n_items,
            n_categories: wc.n_categories,
            ..CtrConfig::default()
        },
        TextEncoder { encoder, vocab },
    )
    .unwrap();
    params.extend(model.init(&mut r));
    let pool = BehaviorPool::new(&logs.history);
    // two requests of four rows, relabelled so every loss term is active
    let reqs: Vec<(Vec<SearchSample>, MergedSequence)> = request_spans(&logs.test)
        .into_iter()
        .take(2)
        .map(|span| {
            let mut s = logs.test[span].to_vec();
            let seq =
                build_merged_sequence(&pool, s[0].user_id, &s[0].query_text, s[0].category, &MiningConfig::default(), 21)
                    .unwrap();
            for (k, x) in s.iter_mut().enumerate() {
                x.exposed = k != 3;
                x.click = k == 0 || k == 2;
                x.rsl = [4, 2, 4, 1][k];
            }
            (s, seq)
        })
        .collect();
    let refs: Vec<(&[SearchSample], &MergedSequence)> = reqs.iter().map(|(s, q)| (&s[..], q)).collect();
    let cfg = DebiasConfig {
        mode,
        threshold: 0.9,
        noise_std: 0.5,
        ..DebiasConfig::default()
    };
    let (fb, t) = model.training_batch(&refs, Some(&cfg), &mut rng::stream(21, "batch")).unwrap();
    // the listwise term holds the click estimate constant, so it is checked
    // only on the weights that feed τ alone
    let mut worst: f64 = 0.0;
    for lambda_rank in [0.0, 1.0] {
        model.config.lambda_rank = lambda_rank;
        let tape = Tape::new();
        let fwd = model.forward(&tape, &params, &fb, None).unwrap();
        let grads = tape.backward(model.main_loss(&fwd, &t, Some(&cfg)).unwrap().total).unwrap();
        let r = gradcheck::check(&params, &grads, |n| lambda_rank == 0.0 || n.starts_with("pref."), 1, |p| {
            let tape = Tape::new();
            let fwd = model.forward(&tape, p, &fb, None).unwrap();
            model.main_loss(&fwd, &t, Some(&cfg)).unwrap().total.item()
        });
        worst = worst.max(r.max_rel_err);
    }
    worst
}

#[test]
fn c02_gradients_match_finite_differences() {
    let s = encoder_setup();
    let naive = DebiasConfig {
        mode: PairwiseMode::Naive,
        ..DebiasConfig::default()
    };
    let results = [
        ("naive pairwise", scores_check(&naive)),
        ("margin pairwise", scores_check(&DebiasConfig::default())),
        ("relevance cross entropy", encoder_check(&s, "sft")),
        ("distillation", encoder_check(&s, "distill")),
        ("pretraining objective", encoder_check(&s, "overall")),
        ("main loss, refined", ranking_check(ModelVariant::Full, PairwiseMode::Refined)),
        ("main loss, naive", ranking_check(ModelVariant::Full, PairwiseMode::Naive)),
        ("main loss, plain model", ranking_check(ModelVariant::Plain, PairwiseMode::Refined)),
    ];
    for (name, e) in &results {
        println!("  {name}: max relative error {e:.2e}");
    }
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let ok = worst <= 1e-4;
    report(2, "gradient suite", ok, &format!("worst {worst:.2e}"));
    assert!(ok);
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_fake_level_frequencies() {
    let mut r = rng::stream(7, "fake-levels");
    let n = 1_000_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_fake_rsl(0.2, 0.6, &mut r).unwrap() as usize - 1] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let ok = freq.iter().zip([0.2, 0.4, 0.4]).all(|(f, w)| (f - w).abs() <= 0.005);
    report(3, "fake level sampling", ok, &format!("{:.4} {:.4} {:.4}", freq[0], freq[1], freq[2]));
    assert!(ok);
}

// ---------------------------------------------------------------- 4

fn pair_grads(pos: &[f64], neg: &[f64], cfg: &DebiasConfig) -> (f64, Vec<f64>, Vec<f64>) {
    let mut ps = ParamStore::new();
    ps.insert("pos", Tensor::column(pos.to_vec()));
    ps.insert("neg", Tensor::column(neg.to_vec()));
    let tape = Tape::new();
    let l = pairwise_loss(ps.var(&tape, "pos"), ps.var(&tape, "neg"), cfg);
    let g = tape.backward(l).unwrap();
    (
        l.item(),
        g.get_or_zeros("pos", ps.get("pos")).into_data(),
        g.get_or_zeros("neg", ps.get("neg")).into_data(),
    )
}

#[test]
fn c04_truncation_and_saturation() {
    let cfg = DebiasConfig::default();
    assert_eq!((cfg.threshold, cfg.margin), (0.08, 0.075));
    // mean positive score 0.09
    let (l, gp, gn) = pair_grads(&[0.05, 0.13, 0.09], &[0.5, 0.0, 0.2], &cfg);
    let truncated = l == 0.0 && gp.iter().chain(&gn).all(|&g| g == 0.0);
    // the first pair sits exactly at the margin, the second beyond it
    let (_, gp, gn) = pair_grads(&[0.075, 0.04, 0.01], &[0.0, -0.2, 0.03], &cfg);
    let saturated = gp[0] == 0.0 && gn[0] == 0.0 && gp[1] == 0.0 && gn[1] == 0.0 && gp[2] < 0.0 && gn[2] > 0.0;
    let ok = truncated && saturated;
    report(4, "truncation and margin", ok, &format!("truncated {truncated}, saturated {saturated}"));
    assert!(ok);
}

// ---------------------------------------------------------------- 5

fn brute_auc(s: &[f64], y: &[bool]) -> Option<f64> {
    let (mut num, mut pos, mut neg) = (0u128, 0u128, 0u128);
    for i in 0..s.len() {
        if y[i] {
            pos += 1;
        } else {
            neg += 1;
        }
        for j in 0..s.len() {
            if y[i] && !y[j] {
                num += if s[i] > s[j] { 2 } else if s[i] == s[j] { 1 } else { 0 };
            }
        }
    }
    (pos > 0 && neg > 0).then(|| num as f64 / (2 * pos * neg) as f64)
}

fn brute_gauc(s: &[f64], y: &[bool], u: &[u32]) -> Option<f64> {
    let mut users: Vec<u32> = u.to_vec();
    users.sort_unstable();
    users.dedup();
    let (mut num, mut den) = (0.0, 0.0);
    for user in users {
        let idx: Vec<usize> = (0..s.len()).filter(|&i| u[i] == user).collect();
        let ss: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let yy: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
        if let Some(a) = brute_auc(&ss, &yy) {
            num += a * idx.len() as f64;
            den += idx.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

#[test]
fn c05_auc_and_gauc_equal_pair_counting() {
    let mut r = rng::stream(5, "oracle-sets");
    let mut equal = 0;
    for k in 0..100 {
        let n = r.random_range(2..=1000);
        // half the sets use coarse scores so ties are frequent
        let levels = if k % 2 == 0 { r.random_range(2..20) } else { 1 << 30 };
        let rate = r.random_range(0.02..0.98);
        let users_n = r.random_range(1..60u32);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let y: Vec<bool> = (0..n).map(|_| r.random::<f64>() < rate).collect();
        let u: Vec<u32> = (0..n).map(|_| r.random_range(0..users_n)).collect();
        let a_ok = auc(&s, &y).ok() == brute_auc(&s, &y);
        let g_ok = gauc(&s, &y, &u).ok() == brute_gauc(&s, &y, &u);
        if a_ok && g_ok {
            equal += 1;
        }
    }
    let ok = equal == 100;
    report(5, "metric oracle", ok, &format!("{equal} of 100 datasets identical"));
    assert!(ok);
}

// ---------------------------------------------------------------- 6, 7, 8

fn ablation() -> &'static AblationReport {
    static CELL: OnceLock<AblationReport> = OnceLock::new();
    CELL.get_or_init(|| ablate(&desk(), &SEEDS, &["no_mining", "no_debias", "naive_debias"]).unwrap())
}

fn paired(r: &AblationReport, a: &str, b: &str, metric: &str) -> Vec<f64> {
    r.values(a, metric)
        .into_iter()
        .zip(r.values(b, metric))
        .map(|(x, y)| x.unwrap() - y.unwrap())
        .collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:+.4}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn c06_debias_lifts_full_candidate_auc() {
    let cfg = desk();
    let mut shares = Vec::new();
    for seed in SEEDS {
        let (_, logs) = generate_data(&ExperimentConfig { seed, ..cfg.clone() }).unwrap();
        let exposed: Vec<&SearchSample> = logs.train.iter().filter(|s| s.exposed).collect();
        shares.push(exposed.iter().filter(|s| s.rsl >= 3).count() as f64 / exposed.len() as f64);
    }
    let biased = shares.iter().all(|&s| s >= 0.8);
    let d = paired(ablation(), "full", "no_debias", "full.auc");
    let m = median(&d).unwrap();
    let ok = biased && m >= 0.005;
    report(
        6,
        "debias efficacy",
        ok,
        &format!("median {m:+.4}, per seed {}, min high-relevance share {:.3}", fmt(&d), shares.iter().cloned().fold(1.0, f64::min)),
    );
    assert!(ok);
}

#[test]
fn c07_margin_and_truncation_preserve_calibration() {
    let r = ablation();
    let full: Vec<f64> = r.values("full", "pcoc_deviation").into_iter().flatten().collect();
    let naive: Vec<f64> = r.values("naive_debias", "pcoc_deviation").into_iter().flatten().collect();
    let (a, b) = (median(&full).unwrap(), median(&naive).unwrap());
    let ok = a < b;
    report(7, "calibration", ok, &format!("median |pcoc-1| {a:.4} vs naive {b:.4}"));
    assert!(ok);
}

#[test]
fn c08_mining_helps_cold_users() {
    let d = paired(ablation(), "full", "no_mining", "cold.rank_gauc");
    let m = median(&d).unwrap();
    let ok = m > 0.0;
    report(8, "cold-start mining", ok, &format!("median {m:+.4}, per seed {}", fmt(&d)));
    assert!(ok);
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_relevance_mixture_is_normalised_and_bounded() {
    let mut checked = 0usize;
    let (mut worst_sum, mut hull_ok) = (0.0f64, true);
    let mut seed = 0;
    while checked < 10_000 {
        seed += 1;
        let mut cfg = ExperimentConfig {
            seed,
            world: WorldConfig {
                n_users: 40,
                n_items: 120,
                n_queries: 20,
                n_categories: 3,
                ..WorldConfig::default()
            },
            logs: LogConfig {
                history_requests: 20,
                train_requests: 1,
                test_requests: 2,
                ..LogConfig::default()
            },
            encoder: EncoderConfig {
                vocab_size: 0,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 8,
                max_seq_len: 16,
            },
            ..ExperimentConfig::default()
        };
        cfg.pretrain.enabled = false;
        let (world, logs) = generate_data(&cfg).unwrap();
        let (encoder, _) = prepare_encoder(&cfg, &world).unwrap();
        let model = cfg.rank_model().unwrap();
        let mut params = init_params(&cfg, &model, &encoder);
        // widen the weights so the heads reach saturated regions
        let scale = 1.0 + (seed % 6) as f64;
        let names: Vec<String> = params.names().filter(|n| !n.starts_with("encoder.")).cloned().collect();
        for n in names {
            params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let pool = BehaviorPool::new(&logs.history);
        let requests = build_requests(&logs.test, &pool, &cfg.mining, seed).unwrap();
        let preds = score_samples(&model, &params, &logs.test, &requests, None).unwrap();
        for p in preds.iter().take(10_000 - checked) {
            let sum: f64 = p.p_rsl.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            let lo = p.p_click_given_rsl.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = p.p_click_given_rsl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hull_ok &= p.p_rsl.iter().all(|&q| q >= 0.0) && p.p_click >= lo - 1e-12 && p.p_click <= hi + 1e-12;
            checked += 1;
        }
    }
    let ok = worst_sum <= 1e-6 && hull_ok;
    report(9, "mixture bounds", ok, &format!("{checked} inputs, worst |sum-1| {worst_sum:.1e}, hull {hull_ok}"));
    assert!(ok);
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_encoder_pretraining_sanity() {
    let cfg = desk();
    assert_eq!(cfg.pretrain.pairs, 5000);
    let (world, _) = generate_data(&cfg).unwrap();
    let (_, rep) = prepare_encoder(&cfg, &world).unwrap();
    let epochs = rep.unwrap().epochs;
    let acc = epochs.last().unwrap().heldout_accuracy;
    let medians: Vec<f64> = epochs[1..].iter().map(|e| e.train_distill_median).collect();
    let monotone = medians.windows(2).all(|w| w[1] < w[0]);
    let params = EncoderConfig::full_scale().parameter_count();
    let ok = acc > 0.40 && monotone && (1_500_000..=2_500_000).contains(&params);
    report(
        10,
        "encoder pretraining",
        ok,
        &format!("held-out accuracy {acc:.3}, distill medians {}, {params} weights at full size", fmt(&medians)),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 11

fn train_and_eval(cfg: &ExperimentConfig, dir: &Path) -> (Vec<u8>, String) {
    let (world, logs) = generate_data(cfg).unwrap();
    let (enc, _) = prepare_encoder(cfg, &world).unwrap();
    let trained = fit(cfg, &logs.history, &logs.train, &enc).unwrap();
    let path = dir.join("model.ckpt");
    save_checkpoint(&trained.params, &path).unwrap();
    let params = load_checkpoint(&path).unwrap();
    let report = assess(cfg, &trained.model, &params, &logs.history, &logs.test).unwrap();
    (std::fs::read(&path).unwrap(), report.to_canonical_json())
}

#[test]
fn c11_train_and_eval_are_byte_identical() {
    let cfg = desk();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, ra) = train_and_eval(&cfg, a.path());
    let (cb, rb) = train_and_eval(&cfg, b.path());
    let ok = ca == cb && ra == rb;
    report(11, "determinism", ok, &format!("checkpoint {} bytes, report {} bytes", ca.len(), ra.len()));
    assert!(ok);
}

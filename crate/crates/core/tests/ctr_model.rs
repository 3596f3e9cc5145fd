use proptest::prelude::*;
use relctr::ctr::{
    rank_candidates, score_candidates, BatchTargets, CtrConfig, EmbeddingCache, Forward, ModelVariant,
    Prediction, RankModel, TauMode, TextEncoder,
};
use relctr::data::{generate_logs, generate_world, request_spans, LogConfig, SearchSample, WorldConfig};
use relctr::debias::{DebiasConfig, PairwiseMode};
use relctr::encoder::{Encoder, EncoderConfig, Vocab};
use relctr::gradcheck;
use relctr::ops;
use relctr::preference::{build_merged_sequence, BehaviorPool, MergedSequence, MiningConfig};
use relctr::{rng, ParamStore, Tape, Tensor};

struct Fixture {
    model: RankModel,
    params: ParamStore,
    requests: Vec<(Vec<SearchSample>, MergedSequence)>,
}

fn fixture(variant: ModelVariant, seed: u64) -> Fixture {
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
    let world = generate_world(&wc, seed).unwrap();
    let logs = generate_logs(
        &world,
        &LogConfig {
            history_requests: 6,
            train_requests: 2,
            test_requests: 1,
            strictness: Some(0.0),
            ..LogConfig::default()
        },
        seed,
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
    let mut r = rng::stream(seed, "ctr-fixture");
    let mut params = encoder.init(&mut r);
    let model = RankModel::new(
        CtrConfig {
            variant,
            emb_dim: 2,
            hidden: 3,
            pref_hidden: 3,
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
    let requests = request_spans(&logs.test)
        .into_iter()
        .map(|span| {
            let s = &logs.test[span];
            let seq = build_merged_sequence(&pool, s[0].user_id, &s[0].query_text, s[0].category, &MiningConfig::default(), seed)
                .unwrap();
            (s.to_vec(), seq)
        })
        .collect();
    Fixture { model, params, requests }
}

/// Two requests with labels overwritten so that both requests have clicks,
/// non-clicks and a qualifying rsl-4 positive.
fn labelled(f: &Fixture) -> Vec<(Vec<SearchSample>, MergedSequence)> {
    let mut out: Vec<_> = f.requests.iter().take(2).cloned().collect();
    for (samples, _) in out.iter_mut() {
        for (k, s) in samples.iter_mut().enumerate() {
            s.exposed = k != 3;
            s.click = k == 0 || k == 2;
            s.rsl = [4, 2, 4, 1][k];
        }
    }
    out
}

fn refs(v: &[(Vec<SearchSample>, MergedSequence)]) -> Vec<(&[SearchSample], &MergedSequence)> {
    v.iter().map(|(s, q)| (&s[..], q)).collect()
}

fn col(v: &Tensor) -> Vec<f64> {
    (0..v.rows()).map(|r| v.get(r, 0)).collect()
}

#[test]
fn equal_conditionals_give_that_click_rate() {
    let mut f = fixture(ModelVariant::Full, 1);
    let c = 0.37f64;
    f.params.insert("ctr.click.w2", Tensor::zeros(3, 4));
    f.params.insert("ctr.click.b2", Tensor::filled(1, 4, (c / (1.0 - c)).ln()));
    let (s, seq) = &f.requests[0];
    let p = f.model.predict(&f.params, &s[0], seq, None).unwrap();
    assert!((p.p_click - c).abs() < 1e-12);
    assert!((p.p_rsl.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_relevance_averages_the_conditionals() {
    let mut f = fixture(ModelVariant::Full, 2);
    let cond = [0.1f64, 0.2, 0.3, 0.4];
    f.params.insert("ctr.rel.w2", Tensor::zeros(3, 4));
    f.params.insert("ctr.rel.b2", Tensor::zeros(1, 4));
    f.params.insert("ctr.click.w2", Tensor::zeros(3, 4));
    f.params
        .insert("ctr.click.b2", Tensor::row_vector(cond.iter().map(|c| (c / (1.0 - c)).ln()).collect()));
    let (s, seq) = &f.requests[0];
    let p = f.model.predict(&f.params, &s[1], seq, None).unwrap();
    assert_eq!(p.p_rsl, [0.25; 4]);
    assert!((p.p_click - 0.25).abs() < 1e-12);
}

#[test]
fn mixture_matches_dot_product_oracle() {
    let f = fixture(ModelVariant::Full, 3);
    for (samples, seq) in &f.requests {
        for s in samples {
            let p = f.model.predict(&f.params, s, seq, None).unwrap();
            let dot: f64 = p.p_rsl.iter().zip(&p.p_click_given_rsl).map(|(a, b)| a * b).sum();
            assert!((p.p_click - dot).abs() < 1e-15);
            assert!((p.rank_score - p.tau * p.p_click).abs() < 1e-15);
        }
    }
}

#[test]
fn cached_and_differentiable_text_paths_agree() {
    let f = fixture(ModelVariant::Full, 4);
    let mut cache = EmbeddingCache::new();
    let (s, seq) = &f.requests[1];
    for x in s {
        let a = f.model.predict(&f.params, x, seq, None).unwrap();
        let b = f.model.predict(&f.params, x, seq, Some(&mut cache)).unwrap();
        assert!((a.rank_score - b.rank_score).abs() < 1e-12);
    }
    assert!(!cache.is_empty());
}

#[test]
fn one_plus_mode_clips_at_zero() {
    let mut f = fixture(ModelVariant::Full, 5);
    f.model.config.tau_mode = TauMode::OnePlus;
    let (s, seq) = &f.requests[0];
    let p = f.model.predict(&f.params, &s[0], seq, None).unwrap();
    assert!((p.rank_score - (1.0 + p.tau).max(0.0) * p.p_click).abs() < 1e-15);
}

#[test]
fn plain_variant_ranks_by_click_probability() {
    let f = fixture(ModelVariant::Plain, 6);
    let (s, seq) = &f.requests[0];
    let p = f.model.predict(&f.params, &s[0], seq, None).unwrap();
    assert_eq!(p.rank_score, p.p_click);
    assert!(p.tau.is_nan() && p.p_rsl[0].is_nan());
}

#[test]
fn out_of_vocabulary_ids_share_the_reserved_row() {
    let f = fixture(ModelVariant::Full, 7);
    let (s, seq) = &f.requests[0];
    let mut a = s[0].clone();
    a.item_id = 10_000;
    let mut b = a.clone();
    b.item_id = 20_000;
    let pa = f.model.predict(&f.params, &a, seq, None).unwrap();
    let pb = f.model.predict(&f.params, &b, seq, None).unwrap();
    assert_eq!(pa, pb);
}

fn const_forward<'t>(tape: &'t Tape, logits: Tensor, p_click: Vec<f64>) -> Forward<'t> {
    let p = tape.constant(Tensor::column(p_click));
    Forward {
        rsl_logits: Some(tape.constant(logits)),
        p_rsl: None,
        p_cond: None,
        p_click: p,
        tau: None,
        rank: p,
    }
}

fn targets(clicks: &[f64], rsl: &[u8]) -> BatchTargets {
    BatchTargets {
        n_real: clicks.len(),
        clicks: clicks.to_vec(),
        rsl: rsl.to_vec(),
        exposed: vec![true; clicks.len()],
        pairs: Vec::new(),
        request_rows: vec![(0, clicks.len())],
    }
}

#[test]
fn perfect_predictions_have_vanishing_loss() {
    let f = fixture(ModelVariant::Full, 8);
    let tape = Tape::new();
    let y = [0.0, 1.0, 1.0, 0.0];
    let rsl = [1u8, 4, 3, 2];
    let mut logits = Tensor::zeros(4, 4);
    for (r, &l) in rsl.iter().enumerate() {
        logits.set(r, l as usize - 1, 60.0);
    }
    let p: Vec<f64> = y.iter().map(|v| if *v > 0.0 { 1.0 - 1e-13 } else { 1e-13 }).collect();
    let fwd = const_forward(&tape, logits, p);
    let parts = f.model.main_loss(&fwd, &targets(&y, &rsl), None).unwrap();
    assert!(parts.total.item() < 1e-11, "{}", parts.total.item());
}

#[test]
fn coin_flip_predictions_cost_ln2() {
    let f = fixture(ModelVariant::Full, 9);
    let tape = Tape::new();
    let fwd = const_forward(&tape, Tensor::zeros(2, 4), vec![0.5, 0.5]);
    let parts = f.model.main_loss(&fwd, &targets(&[0.0, 1.0], &[2, 4]), None).unwrap();
    assert!((parts.bce.item() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((parts.rsl_ce.unwrap().item() - 4f64.ln()).abs() < 1e-15);
}

fn debias_cfg() -> DebiasConfig {
    // threshold above any initial score so the term is active
    DebiasConfig {
        threshold: 0.9,
        noise_std: 0.5,
        ..DebiasConfig::default()
    }
}

#[test]
fn composite_loss_equals_independent_components() {
    let f = fixture(ModelVariant::Full, 10);
    let reqs = labelled(&f);
    let cfg = debias_cfg();
    let (fb, t) = f
        .model
        .training_batch(&refs(&reqs), Some(&cfg), &mut rng::stream(1, "batch"))
        .unwrap();
    assert_eq!(t.n_real, 8);
    assert_eq!(t.pairs.len(), 4);
    assert_eq!(fb.n_rows, 12);
    let tape = Tape::new();
    let fwd = f.model.forward(&tape, &f.params, &fb, None).unwrap();
    let parts = f.model.main_loss(&fwd, &t, Some(&cfg)).unwrap();

    let p = col(&fwd.p_click.value());
    let rank = col(&fwd.rank.value());
    let logits = fwd.rsl_logits.unwrap().value();
    let bce = -(0..8)
        .map(|i| if t.clicks[i] > 0.0 { p[i].ln() } else { (1.0 - p[i]).ln() })
        .sum::<f64>()
        / 8.0;
    let exposed: Vec<usize> = (0..8).filter(|&i| t.exposed[i]).collect();
    let ce = exposed
        .iter()
        .map(|&i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t.rsl[i] as usize - 1]
        })
        .sum::<f64>()
        / exposed.len() as f64;
    let debias: f64 = t
        .pairs
        .iter()
        .map(|&(a, b)| ops::softplus((cfg.margin - (p[a] - p[b])).max(0.0)))
        .sum::<f64>()
        * cfg.weight;
    let sharp = f.model.config.rank_sharpness;
    let listwise = t
        .request_rows
        .iter()
        .map(|&(s, l)| {
            let z: Vec<f64> = (s..s + l).map(|i| sharp * rank[i]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            let clicked: Vec<usize> = (0..l).filter(|&k| t.clicks[s + k] > 0.0).collect();
            -clicked.iter().map(|&k| z[k] - lse).sum::<f64>() / clicked.len() as f64
        })
        .sum::<f64>()
        / t.request_rows.len() as f64;
    let c = &f.model.config;
    let want = bce + c.lambda_rsl * ce + debias + c.lambda_rank * listwise;
    assert!((parts.bce.item() - bce).abs() < 1e-12);
    assert!((parts.rsl_ce.unwrap().item() - ce).abs() < 1e-12);
    assert!((parts.debias.unwrap().item() - debias).abs() < 1e-12);
    assert!((parts.rank.unwrap().item() - listwise).abs() < 1e-12);
    assert!((parts.total.item() - want).abs() < 1e-12);
}

#[test]
fn negatives_keep_every_feature_but_relevance_and_noise() {
    let f = fixture(ModelVariant::Full, 11);
    let reqs = labelled(&f);
    let (fb, t) = f
        .model
        .training_batch(&refs(&reqs), Some(&debias_cfg()), &mut rng::stream(2, "batch"))
        .unwrap();
    for &(a, b) in &t.pairs {
        assert_eq!(fb.user[a], fb.user[b]);
        assert_eq!(fb.item[a], fb.item[b]);
        assert_eq!(fb.pair_text[a], fb.pair_text[b]);
        assert_eq!(fb.dense.row(a), fb.dense.row(b));
        assert_eq!(fb.rsl_feature[a], 4);
        assert!((1..=3).contains(&fb.rsl_feature[b]));
        let noise = fb.query_noise.as_ref().unwrap();
        assert!(noise.row(a).iter().all(|&v| v == 0.0));
        assert!(noise.row(b).iter().any(|&v| v != 0.0));
    }
    // debias disabled: no extra rows
    let off = DebiasConfig {
        enabled: false,
        ..debias_cfg()
    };
    let (fb, t) = f.model.training_batch(&refs(&reqs), Some(&off), &mut rng::stream(2, "b")).unwrap();
    assert_eq!((fb.n_rows, t.pairs.len()), (8, 0));
}

/// The listwise term sees the click estimate as a constant, which finite
/// differences cannot reproduce. Every weight is checked with that term
/// off, and the weights that only feed τ are checked with it on.
fn gradient_check(variant: ModelVariant, mode: PairwiseMode, seed: u64) {
    for lambda_rank in [0.0, 1.0] {
        let mut f = fixture(variant, seed);
        f.model.config.rank_sharpness = 3.0;
        f.model.config.lambda_rank = lambda_rank;
        let reqs = labelled(&f);
        let cfg = DebiasConfig {
            mode,
            ..debias_cfg()
        };
        let (fb, t) = f
            .model
            .training_batch(&refs(&reqs), Some(&cfg), &mut rng::stream(3, "batch"))
            .unwrap();
        let loss = |p: &ParamStore| {
            let tape = Tape::new();
            let fwd = f.model.forward(&tape, p, &fb, None).unwrap();
            f.model.main_loss(&fwd, &t, Some(&cfg)).unwrap().total.item()
        };
        let tape = Tape::new();
        let fwd = f.model.forward(&tape, &f.params, &fb, None).unwrap();
        let total = f.model.main_loss(&fwd, &t, Some(&cfg)).unwrap().total;
        let grads = tape.backward(total).unwrap();
        let r = gradcheck::check(&f.params, &grads, |n| lambda_rank == 0.0 || n.starts_with("pref."), 1, loss);
        let min_checked = if lambda_rank == 0.0 { 300 } else { 0 };
        assert!(r.checked >= min_checked, "checked {}", r.checked);
        assert!(r.max_rel_err <= 1e-4, "lambda_rank {lambda_rank}: {:?}", r.worst);
    }
}

#[test]
fn composite_loss_gradient_check_refined() {
    gradient_check(ModelVariant::Full, PairwiseMode::Refined, 12);
}

#[test]
fn composite_loss_gradient_check_naive() {
    gradient_check(ModelVariant::Full, PairwiseMode::Naive, 13);
}

#[test]
fn plain_loss_gradient_check() {
    gradient_check(ModelVariant::Plain, PairwiseMode::Refined, 14);
}

fn pred(score: f64) -> Prediction {
    Prediction {
        p_rsl: [0.25; 4],
        p_click_given_rsl: [0.5; 4],
        p_click: 0.5,
        tau: 1.0,
        rank_score: score,
    }
}

#[test]
fn ranking_ties_and_single_candidate() {
    let one = rank_candidates(vec![(7, pred(-3.0))]);
    assert_eq!((one[0].item_id, one[0].rank), (7, 1));
    let two = rank_candidates(vec![(9, pred(0.2)), (4, pred(0.2))]);
    assert_eq!(two.iter().map(|c| c.item_id).collect::<Vec<_>>(), vec![4, 9]);
    assert!(rank_candidates(Vec::new()).is_empty());
}

#[test]
fn scoring_a_request_sorts_its_candidates() {
    let f = fixture(ModelVariant::Full, 15);
    let (s, seq) = &f.requests[0];
    let mut cands = Vec::new();
    for k in 0..5 {
        for x in s {
            let mut c = x.clone();
            c.item_id += 100 * k;
            cands.push(c);
        }
    }
    assert_eq!(cands.len(), 20);
    let ranked = score_candidates(&f.model, &f.params, &s[0].query_text, seq, &cands, None).unwrap();
    let mut oracle: Vec<(f64, u32)> = cands
        .iter()
        .map(|c| (f.model.predict(&f.params, c, seq, None).unwrap().rank_score, c.item_id))
        .collect();
    oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    assert_eq!(ranked.iter().map(|c| c.item_id).collect::<Vec<_>>(), oracle.iter().map(|o| o.1).collect::<Vec<_>>());
    assert_eq!(ranked.iter().map(|c| c.rank).collect::<Vec<_>>(), (1..=20).collect::<Vec<_>>());
    assert!(score_candidates(&f.model, &f.params, &s[0].query_text, seq, &[], None).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn positive_tau_preserves_click_order(p in prop::collection::vec(0.0f64..1.0, 1..30), tau in 0.01f64..5.0) {
        let preds: Vec<(u32, Prediction)> = p
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as u32, Prediction { p_click: v, tau, rank_score: tau * v, ..pred(0.0) }))
            .collect();
        let by_rank: Vec<u32> = rank_candidates(preds.clone()).iter().map(|c| c.item_id).collect();
        let mut by_click = preds;
        by_click.sort_by(|a, b| b.1.p_click.total_cmp(&a.1.p_click).then(a.0.cmp(&b.0)));
        prop_assert_eq!(by_rank, by_click.iter().map(|c| c.0).collect::<Vec<_>>());
    }

    #[test]
    fn predictions_are_proper(seed in 0u64..1000) {
        let f = fixture(ModelVariant::Full, seed);
        let (s, seq) = &f.requests[(seed as usize) % f.requests.len()];
        for x in s {
            let p = f.model.predict(&f.params, x, seq, None).unwrap();
            prop_assert!((p.p_rsl.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(p.p_rsl.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(p.p_click_given_rsl.iter().all(|v| *v > 0.0 && *v < 1.0));
            let lo = p.p_click_given_rsl.iter().cloned().fold(1.0, f64::min);
            let hi = p.p_click_given_rsl.iter().cloned().fold(0.0, f64::max);
            prop_assert!(p.p_click >= lo - 1e-15 && p.p_click <= hi + 1e-15);
        }
    }
}

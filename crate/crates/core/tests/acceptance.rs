//! Acceptance criteria 1 to 10. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values, then asserts.
//!
//! Heavy criteria hold a shared lock so timings are not distorted by training
//! running alongside them.

mod common;

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitr_core::eval::{random_baseline, recall_at_k, recalls, relevance, timed_eval, Relevance};
use vitr_core::features::Corpus;
use vitr_core::fusion::{FuseVariant, SummaryState};
use vitr_core::loss::{lseh_loss, lseh_outcome, TrainConfig};
use vitr_core::model::{Mode, ModelConfig, VitrParams};
use vitr_core::pipeline;
use vitr_core::reasoning::attend;
use vitr_core::retrieval::{queries, retrieve, retrieve_all, Direction, GlobalIndex, RankedResult};
use vitr_core::semantic::TruncatedSvd;
use vitr_core::synth::{synth_corpus, synth_split, SynthConfig};
use vitr_core::tensor::{softmax_scaled, Graph, ParamStore, Tensor};
use vitr_core::train::{train, EpochRecord};

fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let s = ParamStore::default();
    let mut worst = (0.0f64, String::new());
    let mut note = |name: &str, r: common::Report| {
        if r.max_rel >= worst.0 {
            worst = (r.max_rel, format!("{name} {}", r.worst));
        }
    };
    let (a, b, w) = (common::random(3, 4, 1), common::random(3, 4, 2), common::random(5, 4, 3));
    type Op = fn(&mut Graph<'_>, &[vitr_core::tensor::Var]) -> vitr_core::Result<vitr_core::tensor::Var>;
    let ops: [(&str, Op, Vec<Tensor>); 8] = [
        ("mul", |g, v| g.mul(v[0], v[1]), vec![a.clone(), b.clone()]),
        ("linear", |g, v| g.linear(v[0], v[1], None), vec![a.clone(), w.clone()]),
        ("tanh", |g, v| Ok(g.tanh(v[0])), vec![a.clone()]),
        ("sigmoid", |g, v| Ok(g.sigmoid(v[0])), vec![a.clone()]),
        ("normalize_rows", |g, v| Ok(g.normalize_rows(v[0])), vec![a.clone()]),
        ("softmax_cols", |g, v| Ok(g.softmax_cols(v[0])), vec![a.clone()]),
        ("attend", |g, v| Ok(attend(g, v[0], v[1], 12.0)?.0), vec![a.clone(), b.clone()]),
        ("concat_cols", |g, v| g.concat_cols(v[0], v[1]), vec![a.clone(), b.clone()]),
    ];
    for (name, f, inputs) in ops {
        note(name, common::check(&s, &inputs, f));
    }
    let corpus = synth_corpus(&SynthConfig {
        num_images: 1,
        descriptions_per_image: 1,
        d1: 5,
        d2: 6,
        k: 4,
        n: 3,
        seed: 11,
    })
    .unwrap();
    let mut checked = 0;
    for mode in Mode::ALL {
        for variant in [FuseVariant::Literal, FuseVariant::MessagePassing] {
            for summary in [SummaryState::First, SummaryState::Last] {
                let model = VitrParams::new(ModelConfig {
                    d3: 8,
                    d4: 8,
                    mode,
                    fuse_variant: variant,
                    summary,
                    seed: 4,
                    ..ModelConfig::for_corpus(corpus.dims())
                })
                .unwrap();
                let (img, desc) = (&corpus.images()[0], &corpus.descriptions()[0]);
                let r = common::check(&model.store, &[], |g, _| {
                    let i = model.encode_image_on(g, img)?;
                    let d = model.encode_description_on(g, desc)?;
                    model.pair_score_on(g, &i, &d)
                });
                checked += r.checked;
                note(&format!("score {mode} {variant:?} {summary:?}"), r);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst.0 < common::TOLERANCE && secs < 60.0,
        format!(
            "max rel err {:.2e} (at {}) over {checked} score entries, {secs:.1}s",
            worst.0, worst.1
        ),
    );
}

// ---------------------------------------------------------------- 2

/// Thresholded, row-normalized cosines recomputed without the graph.
fn oracle_alignment(v: &Tensor, u: &Tensor) -> Vec<Vec<f64>> {
    let unit = |r: &[f64]| {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect::<Vec<_>>()
    };
    (0..v.rows())
        .map(|i| {
            let vi = unit(v.row(i));
            let row: Vec<f64> = (0..u.rows())
                .map(|j| vi.iter().zip(unit(u.row(j))).map(|(a, b)| a * b).sum::<f64>().max(0.0))
                .collect();
            unit(&row)
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

#[test]
fn criterion_2_attention_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut argmax_breaks, mut columns) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let (k, n, d) = (rng.random_range(1..10), rng.random_range(1..8), rng.random_range(2..12));
        let gamma = rng.random_range(0.5..20.0);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (v, u) = (rand_t(k, d), rand_t(n, d));
        let mut g = Graph::new();
        let (vv, uu) = (g.input(&v), g.input(&u));
        let (_, a) = attend(&mut g, vv, uu, gamma).unwrap();
        let a = g.to_tensor(a);
        let s = oracle_alignment(&v, &u);
        let shift = rng.random_range(-100.0..100.0);
        for j in 0..n {
            columns += 1;
            let col: Vec<f64> = (0..k).map(|i| a.get(i, j)).collect();
            worst_sum = worst_sum.max((col.iter().sum::<f64>() - 1.0).abs());
            let scores: Vec<f64> = (0..k).map(|i| s[i][j]).collect();
            let shifted: Vec<f64> = scores.iter().map(|x| x + shift).collect();
            let moved = softmax_scaled(&shifted, gamma).unwrap();
            if argmax(&col) != argmax(&scores) || argmax(&moved) != argmax(&col) {
                argmax_breaks += 1;
            }
        }
    }
    report(
        2,
        worst_sum <= 1e-6 && argmax_breaks == 0,
        format!("{columns} columns, max |Σa − 1| = {worst_sum:.1e}, argmax changes under shift: {argmax_breaks}"),
    );
}

// ---------------------------------------------------------------- 3, 4

/// 1000 images × 2 descriptions and a small untrained model.
fn big_setup() -> &'static (Corpus, VitrParams) {
    static BIG: OnceLock<(Corpus, VitrParams)> = OnceLock::new();
    BIG.get_or_init(|| {
        let corpus = synth_corpus(&SynthConfig {
            num_images: 1000,
            ..SynthConfig::default()
        })
        .unwrap();
        let model = VitrParams::new(ModelConfig {
            d3: 32,
            d4: 32,
            ..ModelConfig::for_corpus(corpus.dims())
        })
        .unwrap();
        (corpus, model)
    })
}

#[test]
fn criterion_3_turbo_equivalence_and_work_law() {
    let _guard = heavy();
    let start = Instant::now();
    let (corpus, model) = big_setup();
    assert_eq!(corpus.pair_count(), 2000);
    let (mut identical, mut compared, mut law_ok, mut law_checked) = (true, 0, true, 0);
    for dir in Direction::ALL {
        let index = GlobalIndex::candidates(corpus, dir).unwrap();
        let qs = queries(corpus, dir);
        for &q in qs.iter().step_by(qs.len() / 8) {
            let exhaustive = retrieve(q, corpus, model, &index, dir, None).unwrap();
            let turbo = retrieve(q, corpus, model, &index, dir, Some(index.len())).unwrap();
            identical &= exhaustive.ranking == turbo.ranking && turbo.reranked == index.len();
            compared += 1;
            for n in [100, 200, 500] {
                let r = retrieve(q, corpus, model, &index, dir, Some(n)).unwrap();
                law_ok &= r.reranked == n.min(index.len()) && r.shortlisted == n.min(index.len());
                law_checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        identical && law_ok && secs < 300.0,
        format!("{compared} queries bit-identical: {identical}; rerank law on {law_checked} runs: {law_ok}; {secs:.1}s"),
    );
}

#[test]
fn criterion_4_turbo_timing() {
    let _guard = heavy();
    let (corpus, model) = big_setup();
    let (table, _) = timed_eval(corpus, model, &[200], Direction::ImageToText, Some(12)).unwrap();
    let (turbo, exhaustive) = (table.rows[0].median_seconds, table.rows[1].median_seconds);
    let ratio = exhaustive / turbo;
    report(
        4,
        ratio >= 2.0,
        format!(
            "median s/query N=200 {turbo:.5}, exhaustive {exhaustive:.5} over {} candidates, ratio {ratio:.1}×",
            table.candidates
        ),
    );
}

// ---------------------------------------------------------------- 5, 6

fn acceptance_model(corpus: &Corpus, mode: Mode) -> VitrParams {
    VitrParams::new(ModelConfig {
        d3: 32,
        d4: 32,
        mode,
        ..ModelConfig::for_corpus(corpus.dims())
    })
    .unwrap()
}

fn acceptance_training() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 2e-3,
        decay_epoch: 15,
        d5: 16,
        epochs: 20,
        ..TrainConfig::default()
    }
}

fn planted() -> &'static (Corpus, Corpus) {
    static SPLIT: OnceLock<(Corpus, Corpus)> = OnceLock::new();
    SPLIT.get_or_init(|| synth_split(&SynthConfig::default(), 200).unwrap())
}

struct Trained {
    model: VitrParams,
    history: Vec<EpochRecord>,
    seconds: f64,
}

fn trained(mode: Mode) -> &'static Trained {
    static FULL: OnceLock<Trained> = OnceLock::new();
    static NO_REL: OnceLock<Trained> = OnceLock::new();
    let cell = match mode {
        Mode::Full => &FULL,
        Mode::NoRel => &NO_REL,
        Mode::NoVit => unreachable!("not trained here"),
    };
    cell.get_or_init(|| {
        let (train_corpus, _) = planted();
        let start = Instant::now();
        let (model, history) =
            train(train_corpus, acceptance_model(train_corpus, mode), &acceptance_training()).unwrap();
        Trained {
            model,
            history,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn held_out_recalls(model: &VitrParams) -> ([f64; 3], [f64; 3]) {
    let (_, test) = planted();
    let r = |dir| recalls(&retrieve_all(test, model, dir, None).unwrap(), &relevance(test, dir)).unwrap();
    (r(Direction::ImageToText), r(Direction::TextToImage))
}

#[test]
fn criterion_5_training_efficacy() {
    let _guard = heavy();
    let (train_corpus, test) = planted();
    assert_eq!((train_corpus.images().len(), train_corpus.pair_count()), (200, 400));
    let run = trained(Mode::Full);
    let (_, t2i) = held_out_recalls(&run.model);
    let baseline = random_baseline(test, Direction::TextToImage, 10, &[1, 2, 3, 4, 5]).unwrap();
    let tail: Vec<f64> = run.history[run.history.len() - 5..].iter().map(|r| r.mean_loss).collect();
    let steady = tail.windows(2).all(|w| w[1] <= w[0] * 1.05);
    let losses: Vec<String> = tail.iter().map(|l| format!("{l:.4}")).collect();
    report(
        5,
        t2i[2] >= 25.0 && steady && run.seconds < 900.0,
        format!(
            "held-out t2i R@10 {:.2}% (random {baseline:.2}%, threshold 25%); last-5 epoch loss [{}]; trained in {:.0}s",
            t2i[2],
            losses.join(", "),
            run.seconds
        ),
    );
}

#[test]
fn criterion_6_ablation_ordering() {
    let _guard = heavy();
    let (full_i2t, full_t2i) = held_out_recalls(&trained(Mode::Full).model);
    let (rel_i2t, rel_t2i) = held_out_recalls(&trained(Mode::NoRel).model);
    let full_r1 = 0.5 * (full_i2t[0] + full_t2i[0]);
    let rel_r1 = 0.5 * (rel_i2t[0] + rel_t2i[0]);

    // no_vit must ignore the global vectors entirely
    let (_, test) = planted();
    let no_vit = trained(Mode::Full).model.with_mode(Mode::NoVit);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut invariant = true;
    for p in 0..20 {
        let mut img = test.images()[p].clone();
        let mut desc = test.descriptions()[2 * p + 1].clone();
        let before = no_vit
            .pair_score(&no_vit.encode_image(&img).unwrap(), &no_vit.encode_description(&desc).unwrap())
            .unwrap();
        img.global.iter_mut().for_each(|x| *x += rng.random_range(-5.0..5.0));
        desc.global.iter_mut().for_each(|x| *x *= rng.random_range(-5.0..5.0));
        let after = no_vit
            .pair_score(&no_vit.encode_image(&img).unwrap(), &no_vit.encode_description(&desc).unwrap())
            .unwrap();
        invariant &= before.to_bits() == after.to_bits();
    }
    report(
        6,
        full_r1 >= rel_r1 && invariant,
        format!(
            "held-out mean R@1 full {full_r1:.2} (i2t {:.2}, t2i {:.2}) vs no_rel {rel_r1:.2} (i2t {:.2}, t2i {:.2}); no_vit bit-exact under global perturbation: {invariant}",
            full_i2t[0], full_t2i[0], rel_i2t[0], rel_t2i[0]
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (m, w) = (10, 15);
    let counts: Vec<f64> = (0..m * w)
        .map(|_| if rng.random_bool(0.4) { rng.random_range(1..5) as f64 } else { 0.0 })
        .collect();
    let a = Tensor::matrix(m, w, counts.clone()).unwrap();
    let na = DMatrix::from_row_slice(m, w, &counts);
    // oracle: eigenvectors of AᵀA by descending eigenvalue; A Y Yᵀ is the rank-d5 reconstruction
    let eig = (na.transpose() * &na).symmetric_eigen();
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let rank = na.rank(1e-9);
    let (mut monotone, mut worst, mut last) = (true, 0.0f64, f64::INFINITY);
    for d5 in 1..=rank {
        let svd = TruncatedSvd::compute(&a, d5).unwrap();
        let err = svd.reconstruction_error(&a);
        let y = DMatrix::from_fn(w, d5, |r, c| eig.eigenvectors[(r, order[c])]);
        let projected = &na * &y * y.transpose();
        let oracle_err = (&na - &projected).norm();
        let mine = svd.reconstruct();
        let diff = (0..m * w)
            .map(|i| (mine.data()[i] - projected[(i / w, i % w)]).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max((err - oracle_err).abs()).max(diff);
        monotone &= err <= last + 1e-12;
        last = err;
    }
    report(
        7,
        monotone && worst <= 1e-9,
        format!("rank {rank}; error non-increasing over d5 = 1..={rank}: {monotone}; max deviation from oracle {worst:.1e}"),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_loss_contract() {
    let cfg = TrainConfig::default();
    let separated = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let zero = lseh_loss(&separated, &Tensor::zeros(&[3, 3]), &cfg).unwrap();
    let scores = Tensor::from_rows(&[[0.5, 0.6], [-10.0, 10.0]]).unwrap();
    let cos = Tensor::from_rows(&[[1.0, 0.4], [0.4, 1.0]]).unwrap();
    let out = lseh_outcome(&scores, &cos, &cfg, |p, q| p != q).unwrap();
    let term = out.active.first().map_or(f64::NAN, |h| h.value);
    report(
        8,
        zero == 0.0 && out.active.len() == 1 && (term - 0.295).abs() <= 1e-12,
        format!("separated batch loss {zero}; hand example term {term:.15}"),
    );
}

// ---------------------------------------------------------------- 9

/// First 1-based rank of a relevant item, by linear scan.
fn brute_recall(results: &[RankedResult], rel: &Relevance, k: usize) -> f64 {
    let hits = results
        .iter()
        .filter(|r| {
            let relevant = &rel[&r.query];
            r.ranking.iter().position(|(id, _)| relevant.contains(id)).is_some_and(|p| p < k)
        })
        .count();
    100.0 * hits as f64 / results.len() as f64
}

fn ranked(query: u64, ids: Vec<u64>) -> RankedResult {
    let n = ids.len();
    RankedResult {
        query,
        direction: Direction::TextToImage,
        turbo_n: None,
        shortlisted: n,
        reranked: n,
        ranking: ids.into_iter().enumerate().map(|(i, id)| (id, (n - i) as f64)).collect(),
    }
}

#[test]
fn criterion_9_recall_correctness() {
    use rand::seq::SliceRandom;
    // fixture: first relevant ranks {1, 3, 7, 2}
    let fixture: Vec<RankedResult> = [1usize, 3, 7, 2]
        .iter()
        .enumerate()
        .map(|(q, &rank)| {
            let ids: Vec<u64> = (0..10).map(|i| if i + 1 == rank { 100 } else { i as u64 }).collect();
            ranked(q as u64, ids)
        })
        .collect();
    let fixture_rel: Relevance = (0..4).map(|q| (q, [100].into())).collect();
    let got: Vec<f64> = [1, 5, 10].iter().map(|&k| recall_at_k(&fixture, &fixture_rel, k).unwrap()).collect();
    let mut ok = got == [25.0, 75.0, 100.0];

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (queries, candidates) = (rng.random_range(1..20), rng.random_range(1..30u64));
        let mut results = Vec::new();
        let mut rel = Relevance::new();
        for q in 0..queries {
            let mut ids: Vec<u64> = (0..candidates).collect();
            ids.shuffle(&mut rng);
            let count = rng.random_range(1..=candidates.min(3));
            rel.insert(q, (0..count).map(|_| rng.random_range(0..candidates)).collect());
            results.push(ranked(q, ids));
        }
        for k in 1..=12 {
            if (recall_at_k(&results, &rel, k).unwrap() - brute_recall(&results, &rel, k)).abs() > 1e-9 {
                mismatches += 1;
            }
        }
    }
    ok &= mismatches == 0;
    report(9, ok, format!("fixture R@1/5/10 = {got:?}; 100 random cases × 12 K, mismatches {mismatches}"));
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_reproducibility() {
    let _guard = heavy();
    let synth = SynthConfig {
        num_images: 24,
        k: 4,
        ..SynthConfig::default()
    };
    let model = ModelConfig {
        d3: 12,
        d4: 8,
        seed: 10,
        ..ModelConfig::default()
    };
    let training = TrainConfig {
        batch_size: 8,
        epochs: 3,
        d5: 8,
        seed: 10,
        ..TrainConfig::default()
    };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let mut files = pipeline::cmd_synth(&synth, 0, out).unwrap();
        let corpus = out.join(pipeline::CORPUS_FILE);
        let ckpt = out.join(pipeline::CHECKPOINT_FILE);
        files.extend(pipeline::cmd_train(&corpus, &model, &training, out).unwrap());
        files.extend(pipeline::cmd_retrieve(&corpus, &ckpt, None, &[10], out).unwrap());
        files.extend(pipeline::cmd_retrieve(&corpus, &ckpt, None, &[], out).unwrap());
        files.extend(pipeline::cmd_heatmap(&corpus, &ckpt, Some(3), None, out).unwrap());
        let contents: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        contents
    };
    let (a, b) = (run(), run());
    let same = a == b;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    report(10, same, format!("{} artifacts byte-identical across runs: {same} ({})", a.len(), names.join(", ")));
}

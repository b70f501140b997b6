//! Acceptance suite. Each test prints one `criterion N (...): PASS|FAIL`
//! line to stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use lightcap::checkpoint::Checkpoint;
use lightcap::concepts::{contrastive_loss, retrieve_concepts, AlignmentMLP, ConceptVocabulary};
use lightcap::config::RunConfig;
use lightcap::decoder::{
    beam_search, decode_step, encode_context, generate, greedy_decode, BeamConfig, Decoder,
    StepModel,
};
use lightcap::distill::{attention_kd, hidden_kd, prediction_kd, teacher_outputs, Stage};
use lightcap::fusion::{self, Layout};
use lightcap::head::{fused_log_probs, predict};
use lightcap::metrics::{evaluate, modified_precision, tokenize, EvalItem};
use lightcap::model::{groups, CaptionModel, ModelConfig};
use lightcap::objectives::{
    forward_item, item_loss, item_rng, mask_caption_with, pollute_concepts, prepare_finetune,
    prepare_pretrain, pretrain_loss, PretrainSampling, Sample,
};
use lightcap::profiler::decode_step_times;
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::tensor::gradcheck::check_gradients;
use lightcap::tensor::loss::{bce_with_logits, cross_entropy_soft, nll};
use lightcap::tensor::{kernels, AdamW, Binder, Graph, Tensor};
use lightcap::tokenizer::Specials;
use lightcap::train::{caption_nll, train, LogLine, Teachers};
use lightcap::vision::{GridFeature, Region};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tests share one core; timing criteria must not overlap.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} ({name}): {verdict} {detail}"
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

const SP: Specials = Specials {
    pad: 0,
    unk: 1,
    cls: 2,
    sep: 3,
    mask: 4,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_config(vocab: usize, hidden: usize, layers: usize, branches: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden,
        layers,
        heads: 2,
        ffn: 2 * hidden,
        max_positions: 40,
        grid_channels: 5,
        modulator_hidden: 3,
        branches,
        ln_eps: 1e-12,
        init_std: 0.4,
    }
}

fn grid(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform([rows, cols], -1.0, 1.0, &mut rng(seed))
}

#[test]
fn criterion_01_parameter_accounting() {
    let _g = serial();
    let start = Instant::now();
    let m = CaptionModel::new(ModelConfig::full_student(), 0).unwrap();
    let modulator = m.count_params(groups::MODULATOR);
    let fusion = m.count_params(groups::FUSION);
    let word = m.params.get(m.ids.word).len();
    let rel = (fusion as f64 - 14.5e6).abs() / 14.5e6;
    let secs = start.elapsed().as_secs_f64();
    let ok = modulator == 94_127
        && rel <= 0.03
        && word == 30_522 * 312
        && word == 9_522_864
        && secs < 5.0;
    report(
        1,
        "parameter accounting",
        ok,
        format!(
            "modulator={modulator} fusion={fusion} ({:.2}% off 14.5M) word={word} in {secs:.2}s",
            rel * 100.0
        ),
    );
}

#[test]
fn criterion_02_gradient_integrity() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let h = 1e-5;

    // Elementwise, matrix and reduction ops.
    let inputs = vec![
        Tensor::uniform([4, 5], -2.0, 2.0, &mut r),
        Tensor::uniform([5, 3], -2.0, 2.0, &mut r),
        Tensor::uniform([3], -2.0, 2.0, &mut r),
        Tensor::uniform([4, 3], -2.0, 2.0, &mut r),
    ];
    let rep = check_gradients(&inputs, h, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let m = g.add_row(m, v[2])?;
        let m = g.mul_row(m, v[2])?;
        let m = g.sub(m, v[3])?;
        let a = g.gelu(m);
        let b = g.sigmoid(m);
        let c = g.mul(a, b)?;
        let c = g.add(c, m)?;
        let s = g.softplus(c);
        let t = g.transpose(s)?;
        let t = g.relu(t);
        let t = g.scale(t, 0.7);
        let tt = g.matmul_nt(t, t)?;
        let rows = g.gather_rows(tt, &[0, 2, 2])?;
        let cat = g.concat_rows(&[rows, tt])?;
        let flat = g.reshape(cat, [18])?;
        let s1 = g.mean(flat);
        let mr = g.mean_rows(m)?;
        let s2 = g.sum(mr);
        g.add(s1, s2)
    })
    .unwrap();
    worst.push(("elementwise/matrix", rep.max_rel_err));

    // Normalizers and softmax family.
    let w = Tensor::uniform([3, 6], -1.0, 1.0, &mut r);
    let inputs = vec![
        Tensor::uniform([3, 6], -2.0, 2.0, &mut r),
        Tensor::uniform([6], 0.5, 2.0, &mut r),
        Tensor::uniform([6], -1.0, 1.0, &mut r),
        Tensor::uniform([1], 0.5, 2.0, &mut r),
    ];
    let rep = check_gradients(&inputs, h, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
        let n = g.l2_normalize_rows(y);
        let d = g.div_scalar(n, v[3])?;
        let ls = g.log_softmax(d)?;
        let sm = g.softmax(d)?;
        let wv = g.constant(w.clone());
        let p = g.mul(sm, wv)?;
        let a = g.sum(p);
        let picked = g.pick(ls, &[0, 7, 17])?;
        let b = g.sum(picked);
        let target = g.constant(w.clone());
        let c = g.mse(y, target)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    })
    .unwrap();
    worst.push(("normalizers", rep.max_rel_err));

    // Masked multi-head attention.
    let (t, s, d, heads) = (3, 4, 6, 2);
    let inputs = vec![
        Tensor::uniform([t, d], -2.0, 2.0, &mut r),
        Tensor::uniform([s, d], -2.0, 2.0, &mut r),
        Tensor::uniform([s, d], -2.0, 2.0, &mut r),
    ];
    let mask: Arc<[bool]> = (0..t * s).map(|i| (i % s) <= i / s + 1).collect();
    let rep = check_gradients(&inputs, h, |g, v| {
        let sc = g.attn_scores(v[0], v[1], heads, mask.clone())?;
        let p = g.masked_softmax(sc, &mask)?;
        let c = g.attn_context(p, v[2], heads)?;
        let tgt = g.constant(Tensor::ones([t, d]));
        let l1 = g.mse(c, tgt)?;
        let z = g.constant(Tensor::zeros([heads, t, s]));
        let l2 = g.mse(sc, z)?;
        g.add(l1, l2)
    })
    .unwrap();
    worst.push(("attention", rep.max_rel_err));

    // Losses, including the distillation and contrastive terms.
    let teacher = Tensor::uniform([3, 5], -2.0, 2.0, &mut r);
    let bce_y = Tensor::new([3, 1], vec![1.0, 0.0, 0.3]).unwrap();
    let t_att = vec![Tensor::uniform([2, 3, 3], 0.0, 1.0, &mut r)];
    let t_hid = vec![Tensor::uniform([3, 4], -1.0, 1.0, &mut r)];
    let inputs = vec![
        Tensor::uniform([3, 5], -2.0, 2.0, &mut r),
        Tensor::uniform([3, 1], -2.0, 2.0, &mut r),
        Tensor::uniform([2, 3, 3], 0.0, 1.0, &mut r),
        Tensor::uniform([3, 5], -1.0, 1.0, &mut r),
        Tensor::uniform([5, 4], -1.0, 1.0, &mut r),
        Tensor::uniform([3, 5], -1.0, 1.0, &mut r),
        Tensor::uniform([1], 0.5, 1.5, &mut r),
    ];
    let rep = check_gradients(&inputs, h, |g, v| {
        let ce = cross_entropy_soft(g, v[0], &teacher, 2.0)?;
        let ls = g.log_softmax(v[0])?;
        let n = nll(g, ls, &[1, 4, 0])?;
        let b = bce_with_logits(g, v[1], &bce_y)?;
        let pk = prediction_kd(g, v[0], &teacher, Some((v[1], 0.4)), 1.5, Stage::Pretrain)?;
        let ak = attention_kd(g, &[v[2]], &t_att, &[1])?;
        let hk = hidden_kd(g, &[v[3]], &t_hid, v[4], &[1])?;
        let cl = contrastive_loss(g, v[3], v[5], v[6])?;
        let mut acc = ce;
        for x in [n, b, pk, ak, hk, cl] {
            acc = g.add(acc, x)?;
        }
        Ok(acc)
    })
    .unwrap();
    worst.push(("losses", rep.max_rel_err));

    // Full pre-training loss with respect to every model parameter.
    let cfg = ModelConfig {
        vocab_size: 16,
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        max_positions: 12,
        grid_channels: 3,
        modulator_hidden: 3,
        branches: 3,
        ln_eps: 1e-12,
        init_std: 0.3,
    };
    let model = CaptionModel::new(cfg, 5).unwrap();
    let sample = Sample {
        id: 0,
        grid: grid(1, 3, 6),
        concepts: vec![5, 6],
        words: vec![7, 8, 9, 10],
    };
    let pool = vec![vec![5, 6], vec![11, 12]];
    let mut worst_model = 0.0f64;
    let mut max_gap = 0.0f64;
    for step in 0..4 {
        let item = prepare_pretrain(
            &sample,
            &pool,
            &PretrainSampling::default(),
            SP,
            &mut item_rng(1, 0, step),
        )
        .unwrap();
        let params: Vec<Tensor> = model.params.iter().map(|(_, _, t)| t.clone()).collect();
        let items = [item];
        let rep = check_gradients(&params, h, |g, v| {
            let mut b = Binder::preset(&model.params, v)?;
            let l = item_loss(&model, g, &mut b, &items[0], items[0].targets.len(), 1)?;
            match (l.caption, l.concept) {
                (Some(c), Some(p)) => g.add(c, p),
                (Some(c), None) => Ok(c),
                (None, Some(p)) => Ok(p),
                (None, None) => unreachable!("pre-training item has a concept term"),
            }
        })
        .unwrap();
        worst_model = worst_model.max(rep.max_rel_err);
        // The graph loss is the library's pretrain_loss.
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.params);
        let l = item_loss(&model, &mut g, &mut b, &items[0], items[0].targets.len(), 1).unwrap();
        let total = l.caption.map_or(0.0, |v| g.value(v).data()[0])
            + l.concept.map_or(0.0, |v| g.value(v).data()[0]);
        max_gap = max_gap.max((total - pretrain_loss(&model, &items).unwrap().total).abs());
    }
    worst.push(("pretrain_loss", worst_model));

    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    report(
        2,
        "gradient integrity",
        max <= 1e-4 && max_gap < 1e-12 && secs < 60.0,
        format!("max rel err {max:.2e} {worst:?}, loss gap {max_gap:.1e}, {secs:.1}s"),
    );
}

fn seq2seq_rows(
    model: &CaptionModel,
    grid: &Tensor,
    concepts: &[u32],
    caption: &[u32],
) -> Vec<Tensor> {
    let layout = Layout::seq2seq(grid.rows(), concepts, caption);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.params);
    let v = fusion::visual_tokens(model, &mut g, &mut b, grid, concepts).unwrap();
    let t = fusion::forward(model, &mut g, &mut b, v, &layout).unwrap();
    t.values(&g).hiddens
}

#[test]
fn criterion_03_seq2seq_causality() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(3);
    let model = CaptionModel::new(toy_config(14, 8, 2, 3), 3).unwrap();
    let mut max_delta = 0.0f64;
    let mut changed_future = 0;
    for _ in 0..100 {
        let nv = r.random_range(1..5);
        let gr = grid(nv, 5, r.random());
        let concepts: Vec<u32> = (0..r.random_range(0..3))
            .map(|_| r.random_range(5..14))
            .collect();
        let len = r.random_range(2..8);
        let mut caption: Vec<u32> = (0..len).map(|_| r.random_range(5..14)).collect();
        caption[0] = SP.cls;
        let t = r.random_range(0..len - 1);
        let base = seq2seq_rows(&model, &gr, &concepts, &caption);
        let mut perturbed = caption.clone();
        for x in perturbed.iter_mut().skip(t + 1) {
            *x = 5 + (*x - 5 + 1 + r.random_range(0..8)) % 9;
        }
        let after = seq2seq_rows(&model, &gr, &concepts, &perturbed);
        let visible = nv + concepts.len() + t + 1;
        for (a, b) in base.iter().zip(&after) {
            for row in 0..visible {
                for (x, y) in a.row(row).iter().zip(b.row(row)) {
                    max_delta = max_delta.max((x - y).abs());
                }
            }
        }
        let last = base.len() - 1;
        for row in nv + concepts.len()..visible {
            let (p, q) = (
                predict(&model, base[last].row(row)).unwrap(),
                predict(&model, after[last].row(row)).unwrap(),
            );
            for (x, y) in p.iter().zip(&q) {
                max_delta = max_delta.max((x - y).abs());
            }
        }
        if base[last].row(base[last].rows() - 1) != after[last].row(after[last].rows() - 1) {
            changed_future += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "seq2seq causality",
        max_delta <= 1e-12 && changed_future > 0 && secs < 30.0,
        format!("max |delta| {max_delta:.1e} over 100 trials ({changed_future} changed later rows), {secs:.2}s"),
    );
}

#[test]
fn criterion_04_kd_fixed_point() {
    let _g = serial();
    let teacher = CaptionModel::new(toy_config(14, 8, 2, 3), 4).unwrap();
    let student = teacher.clone();
    let sample = Sample {
        id: 0,
        grid: grid(3, 5, 4),
        concepts: vec![9, 10],
        words: vec![5, 6, 7, 8],
    };
    let pool = vec![vec![9, 10], vec![11]];
    let mut att_max = 0.0f64;
    let mut hid_max = 0.0f64;
    let mut grad_max = 0.0f64;
    for step in 0..5 {
        let item = prepare_pretrain(
            &sample,
            &pool,
            &PretrainSampling::default(),
            SP,
            &mut item_rng(4, 0, step),
        )
        .unwrap();
        let tout = teacher_outputs(&teacher, &item).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&student.params);
        let f = forward_item(&student, &mut g, &mut b, &item).unwrap();
        let map = [1, 2];
        let att = attention_kd(&mut g, &f.trace.scores, &tout.trace.scores, &map).unwrap();
        let w = g.leaf(Tensor::identity(8));
        let hid = hidden_kd(&mut g, &f.trace.hiddens, &tout.trace.hiddens, w, &map).unwrap();
        att_max = att_max.max(g.value(att).item().unwrap().abs());
        hid_max = hid_max.max(g.value(hid).item().unwrap().abs());

        let branches: Vec<usize> = (0..3).collect();
        let z = fused_log_probs(&student, &mut g, &mut b, f.slots.unwrap(), &branches).unwrap();
        let ys = fusion::pollution_logit(&student, &mut g, &mut b, f.cls).unwrap();
        let pk = prediction_kd(
            &mut g,
            z,
            tout.slot_scores.as_ref().unwrap(),
            Some((ys, tout.pollution_logit)),
            1.0,
            Stage::Pretrain,
        )
        .unwrap();
        let grads = g.backward(pk).unwrap();
        for v in [z, ys] {
            let gz = grads.get(v).expect("student logits receive a gradient");
            grad_max = grad_max.max(gz.data().iter().fold(0.0, |m, x| m.max(x.abs())));
        }
    }
    report(
        4,
        "KD fixed point",
        att_max == 0.0 && hid_max == 0.0 && grad_max <= 1e-12,
        format!("attention_kd {att_max:e}, hidden_kd {hid_max:e}, |d pred_kd / d z_S|_inf {grad_max:.1e}"),
    );
}

#[test]
fn criterion_05_overfit_and_decode() {
    let _g = serial();
    let start = Instant::now();
    let corpus = SynthCorpus::generate(&SynthConfig::default()).unwrap();
    let samples = corpus.samples();
    let sp = corpus.vocab.specials();
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::desk(corpus.vocab.len());
    cfg.steps = 500;
    cfg.batch_size = 8;
    let model = CaptionModel::new(cfg.model.clone(), cfg.seed).unwrap();
    let out = train(model, &samples, &cfg, Stage::Finetune, sp, None, |_| Ok(())).unwrap();
    let loss = caption_nll(&out.model, &samples, sp).unwrap();
    let greedy = BeamConfig {
        beam_size: 1,
        ..BeamConfig::default()
    };
    let exact = samples
        .iter()
        .filter(|s| generate(&out.model, &s.grid, &s.concepts, sp, &greedy).unwrap() == s.words)
        .count();
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        "overfit and decode",
        loss < 0.1 && exact >= 7 && secs < 120.0,
        format!(
            "vocab {} final loss {loss:.4}, {exact}/8 captions exact, {secs:.1}s",
            corpus.vocab.len()
        ),
    );
}

/// Validation caption loss of (teacher, no-KD student, KD student) for one seed.
fn distillation_round(seed: u64) -> (f64, f64, f64) {
    let corpus = SynthCorpus::generate(&SynthConfig {
        items: 512 + 256,
        noise: 1.0,
        word_noise: 0.2,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train_set, val_set) = corpus.split(512);
    let (train_s, val_s) = (train_set.samples(), val_set.samples());
    let sp = corpus.vocab.specials();

    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.batch_size = 16;
    cfg.steps = 600;
    cfg.log_every = 1_000_000;
    cfg.model = ModelConfig::desk(corpus.vocab.len());

    let mut tcfg = cfg.clone();
    tcfg.model.layers = 6;
    tcfg.optimizer.lr = 2e-3;
    let teacher = train(
        CaptionModel::new(tcfg.model.clone(), seed + 100).unwrap(),
        &train_s,
        &tcfg,
        Stage::Finetune,
        sp,
        None,
        |_| Ok(()),
    )
    .unwrap()
    .model;

    let init = CaptionModel::new(cfg.model.clone(), seed + 200).unwrap();
    let plain = train(
        init.clone(),
        &train_s,
        &cfg,
        Stage::Finetune,
        sp,
        None,
        |_| Ok(()),
    )
    .unwrap()
    .model;
    let teachers = [teacher];
    let plan = Teachers::from_config(&init, &teachers, &cfg, Stage::Finetune).unwrap();
    let kd = train(
        init,
        &train_s,
        &cfg,
        Stage::Finetune,
        sp,
        Some(plan),
        |_| Ok(()),
    )
    .unwrap()
    .model;
    (
        caption_nll(&teachers[0], &val_s, sp).unwrap(),
        caption_nll(&plain, &val_s, sp).unwrap(),
        caption_nll(&kd, &val_s, sp).unwrap(),
    )
}

#[test]
fn criterion_06_distillation_efficacy() {
    let _g = serial();
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let (t, plain, kd) = distillation_round(seed);
        wins += (kd < plain) as usize;
        rows.push(format!(
            "seed {seed}: teacher {t:.3} no-kd {plain:.3} kd {kd:.3}"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        "distillation efficacy",
        wins >= 2 && secs < 600.0,
        format!("{wins}/3 seeds improved [{}], {secs:.0}s", rows.join("; ")),
    );
}

#[test]
fn criterion_07_retrieval_oracle() {
    let _g = serial();
    let mut r = rng(7);
    let (c, d) = (16, 12);
    let gf = GridFeature::new(Tensor::uniform([7, 7, c], -1.0, 1.0, &mut r)).unwrap();
    let mlp = AlignmentMLP::new(c, 24, d, 8).unwrap();
    // Half the vocabulary duplicates the other half, so every label is a tie
    // that must resolve to the lower index.
    let half = Tensor::randn([500, d], 1.0, &mut r);
    let mut raw = half.data().to_vec();
    raw.extend_from_slice(half.data());
    let names: Vec<String> = (0..1000).map(|i| format!("c{i}")).collect();
    let vocab =
        ConceptVocabulary::from_raw(names.clone(), Tensor::new([1000, d], raw).unwrap()).unwrap();
    let regions: Vec<Region> = (0..50)
        .map(|_| {
            let (x1, y1) = (r.random_range(0.0..0.7), r.random_range(0.0..0.7));
            Region::new(
                x1,
                y1,
                x1 + r.random_range(0.1..0.3),
                y1 + r.random_range(0.1..0.3),
            )
            .unwrap()
        })
        .collect();

    // Brute force: cosine of each region embedding against every row.
    let e = vocab.embeddings();
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best: Vec<Option<f64>> = vec![None; 1000];
    for reg in &regions {
        let emb = mlp
            .embed_region(&lightcap::vision::pool_region_vector(&gf, reg).unwrap())
            .unwrap();
        let q = emb.data();
        let mut top = (0usize, f64::NEG_INFINITY);
        for i in 0..1000 {
            let row = &e.data()[i * d..(i + 1) * d];
            let cos = q.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (norm(q) * norm(row));
            if cos > top.1 {
                top = (i, cos);
            }
        }
        if best[top.0].is_none_or(|s| top.1 > s) {
            best[top.0] = Some(top.1);
        }
    }
    let mut ranked: Vec<(usize, f64)> = best
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut ok = ranked.iter().all(|(i, _)| *i < 500);
    let mut checked = Vec::new();
    for k in [1, 5, 20, 1000] {
        let got = retrieve_concepts(&gf, &regions, &mlp, &vocab, k).unwrap();
        let want: Vec<&str> = ranked
            .iter()
            .take(k)
            .map(|(i, _)| names[*i].as_str())
            .collect();
        ok &= got.names() == want;
        ok &= got
            .entries
            .iter()
            .zip(&ranked)
            .all(|(g, (_, s))| (g.score - s).abs() < 1e-9);
        checked.push(got.len());
    }
    report(
        7,
        "retrieval oracle",
        ok,
        format!(
            "1000 entries x 50 regions, {} distinct concepts, sizes {checked:?}",
            ranked.len()
        ),
    );
}

struct Table {
    seed: u64,
    v: usize,
    end: u32,
}

impl Table {
    fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h
                .wrapping_mul(6364136223846793005)
                .wrapping_add(t as u64 + 1);
        }
        let mut x = Tensor::uniform([self.v], -2.0, 2.0, &mut rng(h)).into_data();
        kernels::log_softmax_inplace(&mut x);
        x
    }
}

impl StepModel for Table {
    type State = Vec<u32>;
    fn step(&self, s: &mut Vec<u32>, last: Option<u32>) -> lightcap::Result<Vec<f64>> {
        s.extend(last);
        Ok(self.log_probs(s))
    }
    fn end_token(&self) -> u32 {
        self.end
    }
}

/// Best finished sequence by exhaustive enumeration: highest summed
/// log-probability, then fewer steps, then lexicographically smallest.
fn exhaustive_best(t: &Table, max_len: usize) -> (Vec<u32>, f64) {
    let mut all: Vec<(Vec<u32>, f64, usize)> = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((p, s)) = stack.pop() {
        let lp = t.log_probs(&p);
        for tok in 0..t.v as u32 {
            let score = s + lp[tok as usize];
            if tok == t.end {
                all.push((p.clone(), score, p.len() + 1));
            } else {
                let mut q = p.clone();
                q.push(tok);
                if q.len() == max_len {
                    all.push((q, score, max_len));
                } else {
                    stack.push((q, score));
                }
            }
        }
    }
    let best = all
        .into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)))
        .unwrap();
    (best.0, best.1)
}

#[test]
fn criterion_08_beam_search_oracle() {
    let _g = serial();
    let mut exhaustive_ok = 0;
    for seed in 0..50 {
        let t = Table { seed, v: 4, end: 3 };
        let (ids, lp) = exhaustive_best(&t, 3);
        let cfg = BeamConfig {
            beam_size: 64,
            max_len: 3,
            length_penalty: None,
        };
        let h = beam_search(&t, vec![], &cfg).unwrap();
        exhaustive_ok += (h.ids == ids && (h.log_prob - lp).abs() < 1e-12) as usize;
    }
    let mut greedy_ok = 0;
    for seed in 0..50 {
        let m = CaptionModel::new(toy_config(14, 8, 2, 3), 1000 + seed).unwrap();
        let gr = grid(4, 5, seed);
        let dec = Decoder {
            model: &m,
            specials: SP,
        };
        let ctx = encode_context(&m, &gr, &[9 + (seed % 4) as u32], SP).unwrap();
        let greedy = greedy_decode(&dec, ctx.clone(), 10).unwrap();
        let cfg = BeamConfig {
            beam_size: 1,
            max_len: 10,
            length_penalty: None,
        };
        greedy_ok += (beam_search(&dec, ctx, &cfg).unwrap().ids == greedy) as usize;
    }
    report(
        8,
        "beam-search oracle",
        exhaustive_ok == 50 && greedy_ok == 50,
        format!("beam 64 = exhaustive on {exhaustive_ok}/50 tables, beam 1 = greedy on {greedy_ok}/50 models"),
    );
}

fn uncached(m: &CaptionModel, grid: &Tensor, concepts: &[u32], generated: &[u32]) -> Vec<f64> {
    let mut cap = vec![SP.cls];
    cap.extend_from_slice(generated);
    cap.push(SP.mask);
    let hid = seq2seq_rows(m, grid, concepts, &cap);
    let last = hid.last().unwrap();
    predict(m, last.row(last.rows() - 1)).unwrap()
}

#[test]
fn criterion_09_decode_cache() {
    let _g = serial();
    let mut r = rng(9);
    let mut max_diff = 0.0f64;
    for seed in 0..3 {
        let m = CaptionModel::new(toy_config(14, 8, 2, 3), 90 + seed).unwrap();
        let gr = grid(4, 5, seed);
        let concepts = [9u32, 12];
        let mut cache = encode_context(&m, &gr, &concepts, SP).unwrap();
        let mut gen = Vec::new();
        for _ in 0..20 {
            let lp = decode_step(&m, &mut cache, &gen, SP).unwrap();
            let want = uncached(&m, &gr, &concepts, &gen);
            for (a, b) in lp.iter().zip(&want) {
                max_diff = max_diff.max((a - b).abs());
            }
            gen.push(r.random_range(5..14));
        }
    }

    let corpus = SynthCorpus::generate(&SynthConfig::default()).unwrap();
    let sp = corpus.vocab.specials();
    let model = CaptionModel::new(ModelConfig::desk(corpus.vocab.len()), 9).unwrap();
    let s = &corpus.samples()[0];
    let times = decode_step_times(&model, &s.grid, &s.concepts, sp, 33, s.words[0], 3, 25).unwrap();
    let ratio = times[32] / times[4];
    report(
        9,
        "decode cache",
        max_diff <= 1e-5 && ratio < 12.0,
        format!(
            "max |cached - uncached| {max_diff:.1e} over 20 steps; step 32 {:.3}ms / step 4 {:.3}ms = {ratio:.2}",
            times[32], times[4]
        ),
    );
}

#[test]
fn criterion_10_metrics() {
    let _g = serial();
    let corpus = vec![
        EvalItem::from_text("1", "a man riding a horse", &["a man riding a horse"]),
        EvalItem::from_text("2", "two dogs play in snow", &["two dogs play in snow"]),
    ];
    let scores = evaluate(&corpus).unwrap();
    let clipped = modified_precision(
        &tokenize("the the the cat"),
        &[tokenize("the cat sat down")],
        1,
    );
    report(
        10,
        "metrics",
        scores.bleu4 == 1.0 && (scores.cider - 10.0).abs() <= 1e-6 && clipped == (2, 4),
        format!(
            "bleu4 {} cider {:.9} clipped unigram {}/{}",
            scores.bleu4, scores.cider, clipped.0, clipped.1
        ),
    );
}

#[test]
fn criterion_11_ensemble_sharing() {
    let _g = serial();
    let mut model = CaptionModel::new(toy_config(14, 8, 2, 3), 11).unwrap();
    let sample = Sample {
        id: 0,
        grid: grid(3, 5, 11),
        concepts: vec![9],
        words: vec![5, 6, 7],
    };
    let item = prepare_finetune(&sample, SP);
    let grads_for = |m: &CaptionModel, branches: &[usize]| {
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params);
        let f = forward_item(m, &mut g, &mut b, &item).unwrap();
        let scores = fused_log_probs(m, &mut g, &mut b, f.slots.unwrap(), branches).unwrap();
        let targets: Vec<usize> = item.targets.iter().map(|&t| t as usize).collect();
        let loss = nll(&mut g, scores, &targets).unwrap();
        let mut grads = g.backward(loss).unwrap();
        b.collect(&mut grads)
    };
    let grads = grads_for(&model, &[0, 1]);
    let only0 = grads_for(&model, &[0]);
    let word = model.ids.word.index();
    let excluded = &model.ids.branches[2];
    let both_flow = grads[word]
        .as_ref()
        .unwrap()
        .max_abs_diff(only0[word].as_ref().unwrap())
        > 0.0;
    let no_grad_2 = grads[excluded.proj_w.index()].is_none();

    let word_before = model.params.get(model.ids.word).clone();
    let proj_before = model.params.get(excluded.proj_w).clone();
    let mut opt = AdamW::new(RunConfig::desk().optimizer);
    opt.step(&mut model.params, &grads).unwrap();
    let word_moved = model.params.get(model.ids.word).max_abs_diff(&word_before);
    let proj_after = model.params.get(model.ids.branches[2].proj_w);
    let bitwise = proj_after
        .data()
        .iter()
        .zip(proj_before.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let moved_1 = model.params.get(model.ids.branches[1].proj_w).max_abs_diff(
        CaptionModel::new(toy_config(14, 8, 2, 3), 11)
            .unwrap()
            .params
            .get(model.ids.branches[1].proj_w),
    );
    report(
        11,
        "ensemble sharing",
        word_moved > 0.0 && both_flow && no_grad_2 && bitwise && moved_1 > 0.0,
        format!(
            "shared embedding moved {word_moved:.2e}, branch-1 term reaches it: {both_flow}, included branch proj moved {moved_1:.2e}, excluded branch proj bitwise unchanged: {bitwise}"
        ),
    );
}

#[test]
fn criterion_12_determinism() {
    let _g = serial();
    let corpus = SynthCorpus::generate(&SynthConfig {
        items: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let samples = corpus.samples();
    let sp = corpus.vocab.specials();
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::desk(corpus.vocab.len());
    cfg.steps = 4;
    cfg.batch_size = 4;
    cfg.log_every = 1;
    cfg.seed = 12;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let teacher = CaptionModel::new(
        ModelConfig {
            layers: 4,
            ..cfg.model.clone()
        },
        99,
    )
    .unwrap();
    let teachers = [teacher];

    let run = |stage: Stage, distill: bool| {
        pool.install(|| {
            let m = CaptionModel::new(cfg.model.clone(), cfg.seed).unwrap();
            let t = distill.then(|| Teachers::from_config(&m, &teachers, &cfg, stage).unwrap());
            let out = train(m, &samples, &cfg, stage, sp, t, |_| Ok(())).unwrap();
            let log: Vec<String> = out.log.iter().map(LogLine::to_json).collect();
            let bytes = Checkpoint::new(out.model, cfg.steps as u64)
                .to_bytes()
                .unwrap();
            (log, bytes)
        })
    };
    let mut same = Vec::new();
    for (name, stage, distill) in [
        ("pretrain", Stage::Pretrain, false),
        ("finetune", Stage::Finetune, false),
        ("distill", Stage::Pretrain, true),
    ] {
        let (a, b) = (run(stage, distill), run(stage, distill));
        same.push((name, a.0 == b.0 && a.0.len() == 4, a.1 == b.1));
    }
    report(
        12,
        "determinism",
        same.iter().all(|s| s.1 && s.2),
        format!("(command, logs identical, checkpoint bytes identical): {same:?}"),
    );
}

#[test]
fn criterion_13_sampling_rates() {
    let _g = serial();
    let defaults = PretrainSampling::default();
    let mut r = rng(13);
    let caption: Vec<u32> = (5..14).collect();
    let (mut masked, mut total) = (0usize, 0usize);
    for _ in 0..10_000 {
        let m = mask_caption_with(&caption, defaults.mask_rate, SP.mask, false, &mut r).unwrap();
        masked += m.positions.len();
        total += caption.len();
    }
    let mask_rate = masked as f64 / total as f64;

    let pool: Vec<Vec<u32>> = (0..10).map(|i| vec![20 + i]).collect();
    let own = vec![20u32];
    let kept = (0..10_000)
        .filter(|_| {
            pollute_concepts(&own, &pool, defaults.pollution_rate, &mut r)
                .unwrap()
                .1
                == 1
        })
        .count();
    let y_rate = kept as f64 / 10_000.0;
    report(
        13,
        "sampling rates",
        (mask_rate - 0.15).abs() <= 0.01 && (y_rate - 0.5).abs() <= 0.02,
        format!(
            "mask rate {mask_rate:.4} over {total} tokens, y=1 rate {y_rate:.4} over 10000 draws"
        ),
    );
}

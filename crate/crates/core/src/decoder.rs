//! Caption generation by repeated `[MASK]` prediction, with a per-layer
//! key/value cache so each step only processes the newest token and the
//! fresh `[MASK]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{argmax, predict};
use crate::model::CaptionModel;
use crate::modulator::gate_from_concepts;
use crate::plain;
use crate::tensor::{kernels, Tensor};
use crate::tokenizer::{Segment, Specials};

pub const MAX_CAPTION_LEN: usize = 20;
pub const BEAM_SIZE: usize = 5;

/// Keys and values of every committed row, per layer, `[len, d]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    /// Rows up to and including `[CLS]`.
    prefix: usize,
    committed: Vec<u32>,
}

impl DecodeCache {
    /// Cached rows: context, `[CLS]` and committed caption tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Caption tokens whose keys/values are cached.
    pub fn committed(&self) -> &[u32] {
        &self.committed
    }
}

/// Embedding + layer norm of one row.
fn embed_row(
    model: &CaptionModel,
    base: &[f64],
    position: usize,
    segment: Segment,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if position >= cfg.max_positions {
        return Err(Error::dim(
            "decoder positions",
            &[position + 1],
            &[cfg.max_positions],
        ));
    }
    let p = &model.params;
    let mut x = base.to_vec();
    plain::add_assign(&mut x, p.get(model.ids.position).row(position));
    plain::add_assign(&mut x, p.get(model.ids.segment).row(segment as usize));
    Ok(plain::layer_norm(
        &x,
        cfg.hidden,
        p.get(model.ids.emb_ln_g).data(),
        p.get(model.ids.emb_ln_b).data(),
        cfg.ln_eps,
    ))
}

fn token_row(model: &CaptionModel, id: u32, position: usize, segment: Segment) -> Result<Vec<f64>> {
    let v = model.config.vocab_size;
    if id as usize >= v {
        return Err(Error::Range {
            id: id as usize,
            size: v,
        });
    }
    embed_row(
        model,
        model.params.get(model.ids.word).row(id as usize),
        position,
        segment,
    )
}

/// Runs `x` (`[r, d]`, new rows following the cached ones) through every
/// layer. `allowed(i, j)`: new row `i` may attend to global row `j`. The
/// first `commit` new rows are appended to the cache.
fn run_layers(
    model: &CaptionModel,
    mut x: Vec<f64>,
    cache: &mut DecodeCache,
    allowed: impl Fn(usize, usize) -> bool,
    commit: usize,
) -> Vec<f64> {
    let cfg = &model.config;
    let (d, heads, f) = (cfg.hidden, cfg.heads, cfg.ffn);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let r = x.len() / d;
    let n = cache.len;
    let p = &model.params;
    for (l, ids) in model.ids.layers.iter().enumerate() {
        let q = plain::linear(&x, p.get(ids.q_w).data(), p.get(ids.q_b).data(), d, d);
        let k = plain::linear(&x, p.get(ids.k_w).data(), p.get(ids.k_b).data(), d, d);
        let v = plain::linear(&x, p.get(ids.v_w).data(), p.get(ids.v_b).data(), d, d);
        let (ck, cv) = (&cache.keys[l], &cache.values[l]);
        let key = |j: usize| {
            if j < n {
                &ck[j * d..(j + 1) * d]
            } else {
                &k[(j - n) * d..(j - n + 1) * d]
            }
        };
        let val = |j: usize| {
            if j < n {
                &cv[j * d..(j + 1) * d]
            } else {
                &v[(j - n) * d..(j - n + 1) * d]
            }
        };
        let mut ctx = vec![0.0; r * d];
        let mut w = Vec::with_capacity(n + r);
        for i in 0..r {
            let keys: Vec<usize> = (0..n + r).filter(|&j| allowed(i, j)).collect();
            for h in 0..heads {
                let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                w.clear();
                w.extend(
                    keys.iter()
                        .map(|&j| scale * kernels::dot(qi, &key(j)[h * dh..(h + 1) * dh])),
                );
                kernels::softmax_inplace(&mut w);
                let out = &mut ctx[i * d + h * dh..i * d + (h + 1) * dh];
                for (&j, &pj) in keys.iter().zip(&w) {
                    for (o, &vj) in out.iter_mut().zip(&val(j)[h * dh..(h + 1) * dh]) {
                        *o += pj * vj;
                    }
                }
            }
        }
        let mut h1 = plain::linear(&ctx, p.get(ids.o_w).data(), p.get(ids.o_b).data(), d, d);
        plain::add_assign(&mut h1, &x);
        let x1 = plain::layer_norm(
            &h1,
            d,
            p.get(ids.attn_ln_g).data(),
            p.get(ids.attn_ln_b).data(),
            cfg.ln_eps,
        );
        let mut ff = plain::linear(
            &x1,
            p.get(ids.ffn_in_w).data(),
            p.get(ids.ffn_in_b).data(),
            d,
            f,
        );
        ff.iter_mut().for_each(|z| *z = kernels::gelu(*z));
        let mut h2 = plain::linear(
            &ff,
            p.get(ids.ffn_out_w).data(),
            p.get(ids.ffn_out_b).data(),
            f,
            d,
        );
        plain::add_assign(&mut h2, &x1);
        x = plain::layer_norm(
            &h2,
            d,
            p.get(ids.ffn_ln_g).data(),
            p.get(ids.ffn_ln_b).data(),
            cfg.ln_eps,
        );
        cache.keys[l].extend_from_slice(&k[..commit * d]);
        cache.values[l].extend_from_slice(&v[..commit * d]);
    }
    cache.len += commit;
    x
}

/// Encodes the context (modulated, projected grid rows `[n_visual, C]` and
/// concept tokens) plus `[CLS]` and caches their keys/values.
pub fn encode_context(
    model: &CaptionModel,
    grid: &Tensor,
    concepts: &[u32],
    sp: Specials,
) -> Result<DecodeCache> {
    let cfg = &model.config;
    let (c, d) = (cfg.grid_channels, cfg.hidden);
    if grid.rank() != 2 || grid.cols() != c {
        return Err(Error::dim(
            "encode_context",
            grid.shape(),
            &[grid.rows(), c],
        ));
    }
    let mut g = grid.clone();
    if !concepts.is_empty() {
        let gate = gate_from_concepts(model, concepts)?;
        for row in g.data_mut().chunks_mut(c) {
            row.iter_mut().zip(gate.values()).for_each(|(x, w)| *x *= w);
        }
    }
    let p = &model.params;
    let vis = plain::linear(
        g.data(),
        p.get(model.ids.visual_w).data(),
        p.get(model.ids.visual_b).data(),
        c,
        d,
    );
    let nv = grid.rows();
    let ctx = nv + concepts.len();
    let mut x = Vec::with_capacity((ctx + 1) * d);
    for i in 0..nv {
        x.extend(embed_row(
            model,
            &vis[i * d..(i + 1) * d],
            i,
            Segment::Visual,
        )?);
    }
    for (i, &t) in concepts.iter().enumerate() {
        x.extend(token_row(model, t, nv + i, Segment::Concept)?);
    }
    x.extend(token_row(model, sp.cls, ctx, Segment::Caption)?);
    let mut cache = DecodeCache {
        keys: vec![Vec::new(); cfg.layers],
        values: vec![Vec::new(); cfg.layers],
        len: 0,
        prefix: ctx + 1,
        committed: Vec::new(),
    };
    run_layers(
        model,
        x,
        &mut cache,
        |i, j| if i < ctx { j < ctx } else { j <= i },
        ctx + 1,
    );
    Ok(cache)
}

/// Fused log-probabilities for the `[MASK]` appended after `generated`.
///
/// The cache must hold every token of `generated` except possibly the last;
/// that last token is committed here. The `[MASK]` row is never cached.
pub fn decode_step(
    model: &CaptionModel,
    cache: &mut DecodeCache,
    generated: &[u32],
    sp: Specials,
) -> Result<Vec<f64>> {
    let k = cache.committed.len();
    let fresh = match generated.len() {
        n if n == k => None,
        n if n == k + 1 => Some(generated[k]),
        n => {
            return Err(Error::State(format!(
                "cache holds {k} caption tokens, caller passed {n}"
            )));
        }
    };
    if generated[..k] != cache.committed[..] {
        return Err(Error::State(
            "generated prefix differs from cached tokens".into(),
        ));
    }
    let d = model.config.hidden;
    let cls_pos = cache.prefix - 1;
    let mut x = Vec::with_capacity(2 * d);
    if let Some(t) = fresh {
        x.extend(token_row(model, t, cls_pos + k + 1, Segment::Caption)?);
    }
    x.extend(token_row(
        model,
        sp.mask,
        cls_pos + generated.len() + 1,
        Segment::Caption,
    )?);
    let n = cache.len;
    let commit = usize::from(fresh.is_some());
    let out = run_layers(model, x, cache, |i, j| j <= n + i, commit);
    if let Some(t) = fresh {
        cache.committed.push(t);
    }
    predict(model, &out[out.len() - d..])
}

/// One decoding step over a cloneable state.
pub trait StepModel: Sync {
    type State: Clone + Send + Sync;

    /// Log-probabilities for the next token; `last` is the token chosen at
    /// the previous step (`None` on the first step).
    fn step(&self, state: &mut Self::State, last: Option<u32>) -> Result<Vec<f64>>;

    fn end_token(&self) -> u32;
}

/// Cached decoder over a [`CaptionModel`].
pub struct Decoder<'m> {
    pub model: &'m CaptionModel,
    pub specials: Specials,
}

impl StepModel for Decoder<'_> {
    type State = DecodeCache;

    fn step(&self, state: &mut DecodeCache, last: Option<u32>) -> Result<Vec<f64>> {
        let mut gen = state.committed.clone();
        gen.extend(last);
        decode_step(self.model, state, &gen, self.specials)
    }

    fn end_token(&self) -> u32 {
        self.specials.sep
    }
}

/// Argmax decoding; stops at the end token (excluded) or after `max_len`
/// tokens.
pub fn greedy_decode<M: StepModel>(
    model: &M,
    mut state: M::State,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let mut last = None;
    while out.len() < max_len {
        let lp = model.step(&mut state, last)?;
        let tok = argmax(&lp) as u32;
        if tok == model.end_token() {
            break;
        }
        out.push(tok);
        last = Some(tok);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Exponent of the length penalty `((5 + n) / 6)^α`; `None` ranks by raw
    /// summed log-probability.
    pub length_penalty: Option<f64>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: BEAM_SIZE,
            max_len: MAX_CAPTION_LEN,
            length_penalty: None,
        }
    }
}

/// A decoded sequence, end token excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    /// Emitted the end token (rather than hitting the length cap).
    pub ended: bool,
    /// Step at which it stopped growing.
    pub finished_at: usize,
}

#[derive(Clone)]
struct Beam<S> {
    hyp: Hypothesis,
    done: bool,
    state: Option<S>,
}

fn rank_score(h: &Hypothesis, cfg: &BeamConfig) -> f64 {
    match cfg.length_penalty {
        Some(a) => h.log_prob / ((5.0 + h.ids.len() as f64) / 6.0).powf(a),
        None => h.log_prob,
    }
}

/// Top `k` token ids by log-probability, ties to the lower id.
fn top_k(lp: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lp.len()).collect();
    idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Beam search over summed log-probabilities. Each live beam proposes its
/// top-`B` extensions; the pool of proposals and already finished beams is
/// pruned to the best `B` (score, then finished first, then ids). A beam
/// finishes on the end token or at `max_len` tokens. The result is the best
/// finished beam by score, then earlier finish, then ids.
pub fn beam_search<M: StepModel>(
    model: &M,
    state: M::State,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    if cfg.beam_size == 0 {
        return Err(Error::Parameter("beam size must be at least 1".into()));
    }
    let end = model.end_token();
    let mut beams = vec![Beam {
        hyp: Hypothesis {
            ids: Vec::new(),
            log_prob: 0.0,
            ended: false,
            finished_at: 0,
        },
        done: cfg.max_len == 0,
        state: Some(state),
    }];
    let mut step = 0;
    while beams.iter().any(|b| !b.done) {
        step += 1;
        let expanded: Vec<Result<Vec<Beam<M::State>>>> = beams
            .par_iter()
            .map(|b| {
                if b.done {
                    return Ok(vec![b.clone()]);
                }
                let mut st = b.state.clone().expect("live beam keeps its state");
                let lp = model.step(&mut st, b.hyp.ids.last().copied())?;
                Ok(top_k(&lp, cfg.beam_size)
                    .into_iter()
                    .map(|t| {
                        let mut hyp = b.hyp.clone();
                        hyp.log_prob += lp[t];
                        let ended = t as u32 == end;
                        if !ended {
                            hyp.ids.push(t as u32);
                        }
                        let done = ended || hyp.ids.len() >= cfg.max_len;
                        hyp.ended = ended;
                        hyp.finished_at = step;
                        Beam {
                            hyp,
                            done,
                            state: (!done).then(|| st.clone()),
                        }
                    })
                    .collect())
            })
            .collect();
        let mut pool = Vec::new();
        for e in expanded {
            pool.extend(e?);
        }
        pool.sort_by(|a, b| {
            rank_score(&b.hyp, cfg)
                .total_cmp(&rank_score(&a.hyp, cfg))
                .then(b.done.cmp(&a.done))
                .then(a.hyp.ids.cmp(&b.hyp.ids))
        });
        pool.truncate(cfg.beam_size);
        beams = pool;
    }
    beams
        .into_iter()
        .map(|b| b.hyp)
        .min_by(|a, b| {
            rank_score(b, cfg)
                .total_cmp(&rank_score(a, cfg))
                .then(a.finished_at.cmp(&b.finished_at))
                .then(a.ids.cmp(&b.ids))
        })
        .ok_or_else(|| Error::State("beam search produced no hypothesis".into()))
}

/// Greedy for `beam_size == 1`, beam search otherwise.
pub fn generate(
    model: &CaptionModel,
    grid: &Tensor,
    concepts: &[u32],
    sp: Specials,
    cfg: &BeamConfig,
) -> Result<Vec<u32>> {
    let cache = encode_context(model, grid, concepts, sp)?;
    let dec = Decoder {
        model,
        specials: sp,
    };
    if cfg.beam_size == 1 && cfg.length_penalty.is_none() {
        greedy_decode(&dec, cache, cfg.max_len)
    } else {
        Ok(beam_search(&dec, cache, cfg)?.ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{self, Layout};
    use crate::model::ModelConfig;
    use crate::tensor::{Binder, Graph};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SP: Specials = Specials {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
        mask: 4,
    };

    fn model(seed: u64) -> CaptionModel {
        let cfg = ModelConfig {
            vocab_size: 14,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_positions: 40,
            grid_channels: 5,
            modulator_hidden: 3,
            branches: 3,
            ln_eps: 1e-12,
            init_std: 0.4,
        };
        CaptionModel::new(cfg, seed).unwrap()
    }

    fn grid(seed: u64) -> Tensor {
        Tensor::uniform([4, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Full graph forward over `[CLS] generated [MASK]`, no cache.
    fn uncached(m: &CaptionModel, grid: &Tensor, concepts: &[u32], generated: &[u32]) -> Vec<f64> {
        let mut cap = vec![SP.cls];
        cap.extend_from_slice(generated);
        cap.push(SP.mask);
        let layout = Layout::seq2seq(grid.rows(), concepts, &cap);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&m.params);
        let v = fusion::visual_tokens(m, &mut g, &mut b, grid, concepts).unwrap();
        let t = fusion::forward(m, &mut g, &mut b, v, &layout).unwrap();
        let out = g.value(t.output());
        predict(m, out.row(layout.len() - 1)).unwrap()
    }

    #[test]
    fn first_step_equals_full_forward() {
        let m = model(1);
        let gr = grid(1);
        let mut c = encode_context(&m, &gr, &[9, 10], SP).unwrap();
        assert_eq!(c.len(), 4 + 2 + 1);
        let lp = decode_step(&m, &mut c, &[], SP).unwrap();
        let want = uncached(&m, &gr, &[9, 10], &[]);
        let diff = lp
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn cached_matches_uncached_over_ten_steps() {
        let m = model(2);
        let gr = grid(2);
        let concepts = [11u32];
        let mut c = encode_context(&m, &gr, &concepts, SP).unwrap();
        let mut gen = Vec::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let lp = decode_step(&m, &mut c, &gen, SP).unwrap();
            let want = uncached(&m, &gr, &concepts, &gen);
            let diff = lp
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-5, "{diff}");
            gen.push(rand::Rng::random_range(&mut r, 5..14));
        }
        assert_eq!(c.committed().len(), 9);
    }

    #[test]
    fn cache_mismatch_is_state_error() {
        let m = model(3);
        let mut c = encode_context(&m, &grid(3), &[], SP).unwrap();
        decode_step(&m, &mut c, &[], SP).unwrap();
        decode_step(&m, &mut c, &[7], SP).unwrap();
        assert!(matches!(
            decode_step(&m, &mut c, &[8, 9], SP),
            Err(Error::State(_))
        ));
        assert!(matches!(
            decode_step(&m, &mut c, &[7, 9, 9], SP),
            Err(Error::State(_))
        ));
        // Repeating a step without a new token is allowed and deterministic.
        let a = decode_step(&m, &mut c, &[7], SP).unwrap();
        let b = decode_step(&m, &mut c, &[7], SP).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn position_overflow_is_reported() {
        let m = model(4);
        let mut c = encode_context(&m, &grid(4), &[], SP).unwrap();
        let long = vec![7u32; 40];
        let mut res = Ok(vec![]);
        for t in 0..=long.len() {
            res = decode_step(&m, &mut c, &long[..t], SP);
            if res.is_err() {
                break;
            }
        }
        assert!(matches!(res, Err(Error::Dimension { .. })));
    }

    /// Table-driven model: log-probs depend only on the generated prefix.
    struct Table<F: Fn(&[u32]) -> Vec<f64> + Sync> {
        f: F,
        end: u32,
    }

    impl<F: Fn(&[u32]) -> Vec<f64> + Sync> StepModel for Table<F> {
        type State = Vec<u32>;
        fn step(&self, s: &mut Vec<u32>, last: Option<u32>) -> Result<Vec<f64>> {
            s.extend(last);
            Ok((self.f)(s))
        }
        fn end_token(&self) -> u32 {
            self.end
        }
    }

    fn random_table(seed: u64, v: usize) -> impl Fn(&[u32]) -> Vec<f64> + Sync {
        move |prefix: &[u32]| {
            let mut h = seed;
            for &t in prefix {
                h = h
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(t as u64 + 1);
            }
            let mut r = ChaCha8Rng::seed_from_u64(h);
            let mut x = Tensor::uniform([v], -2.0, 2.0, &mut r).into_data();
            kernels::log_softmax_inplace(&mut x);
            x
        }
    }

    #[test]
    fn sep_always_wins_gives_empty_caption() {
        let t = Table {
            f: |_: &[u32]| vec![-5.0, -5.0, -0.01, -5.0],
            end: 2,
        };
        assert!(greedy_decode(&t, vec![], 20).unwrap().is_empty());
        let h = beam_search(&t, vec![], &BeamConfig::default()).unwrap();
        assert!(h.ids.is_empty() && h.ended);
    }

    #[test]
    fn peaked_model_same_for_any_beam() {
        let t = Table {
            f: |p: &[u32]| {
                let mut x = vec![-9.0; 6];
                x[if p.len() < 4 { 1 + p.len() % 3 } else { 0 }] = -1e-3;
                x
            },
            end: 0,
        };
        let want = greedy_decode(&t, vec![], 20).unwrap();
        assert_eq!(want, vec![1, 2, 3, 1]);
        for b in 1..8 {
            let cfg = BeamConfig {
                beam_size: b,
                ..Default::default()
            };
            assert_eq!(beam_search(&t, vec![], &cfg).unwrap().ids, want);
        }
    }

    /// All sequences of at most `max_len` tokens: ended by the end token
    /// or cut at the cap.
    fn exhaustive(
        f: &dyn Fn(&[u32]) -> Vec<f64>,
        v: u32,
        end: u32,
        max_len: usize,
    ) -> Vec<(Vec<u32>, f64, usize)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<u32>::new(), 0.0)];
        while let Some((p, s)) = stack.pop() {
            let lp = f(&p);
            for t in 0..v {
                let score = s + lp[t as usize];
                if t == end {
                    out.push((p.clone(), score, p.len() + 1));
                } else {
                    let mut q = p.clone();
                    q.push(t);
                    if q.len() == max_len {
                        out.push((q, score, max_len));
                    } else {
                        stack.push((q, score));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        for seed in 0..20 {
            let f = random_table(seed, 4);
            let all = exhaustive(&f, 4, 3, 3);
            assert_eq!(all.len(), 40);
            let best = all
                .iter()
                .min_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)))
                .unwrap();
            let t = Table { f, end: 3 };
            let cfg = BeamConfig {
                beam_size: 64,
                max_len: 3,
                length_penalty: None,
            };
            let h = beam_search(&t, vec![], &cfg).unwrap();
            assert_eq!(h.ids, best.0, "seed {seed}");
            assert!((h.log_prob - best.1).abs() < 1e-12);
        }
    }

    #[test]
    fn default_beam_size_is_five() {
        assert_eq!(BeamConfig::default().beam_size, 5);
        assert_eq!(BeamConfig::default().max_len, 20);
        let cfg: BeamConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.beam_size, 5);
    }

    #[test]
    fn model_beam_one_equals_greedy() {
        let m = model(6);
        let gr = grid(6);
        let dec = Decoder {
            model: &m,
            specials: SP,
        };
        let c = encode_context(&m, &gr, &[12], SP).unwrap();
        let g = greedy_decode(&dec, c.clone(), 8).unwrap();
        let cfg = BeamConfig {
            beam_size: 1,
            max_len: 8,
            length_penalty: None,
        };
        assert_eq!(beam_search(&dec, c, &cfg).unwrap().ids, g);
        let b5 = generate(
            &m,
            &gr,
            &[12],
            SP,
            &BeamConfig {
                max_len: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(b5.len() <= 8);
    }

    #[test]
    fn length_penalty_prefers_longer_when_enabled() {
        // Two-token path scores -1.2 total, empty caption -1.0.
        let t = Table {
            f: |p: &[u32]| match p.len() {
                0 => vec![-1.0, -0.2, -9.0],
                1 => vec![-9.0, -9.0, -1e-9],
                _ => vec![-1.0, -9.0, -9.0],
            },
            end: 0,
        };
        let plain = beam_search(
            &t,
            vec![],
            &BeamConfig {
                beam_size: 3,
                max_len: 5,
                length_penalty: None,
            },
        )
        .unwrap();
        assert!(plain.ids.is_empty());
        let pen = beam_search(
            &t,
            vec![],
            &BeamConfig {
                beam_size: 3,
                max_len: 5,
                length_penalty: Some(2.0),
            },
        )
        .unwrap();
        assert_eq!(pen.ids, vec![1, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn beam_one_is_greedy_and_bounded(seed in any::<u64>(), max_len in 0usize..8, b in 1usize..6) {
            let t = Table { f: random_table(seed, 6), end: 0 };
            let g = greedy_decode(&t, vec![], max_len).unwrap();
            let cfg = BeamConfig { beam_size: 1, max_len, length_penalty: None };
            let h = beam_search(&t, vec![], &cfg).unwrap();
            prop_assert_eq!(&h.ids, &g);
            let cfg = BeamConfig { beam_size: b, max_len, length_penalty: None };
            let h = beam_search(&t, vec![], &cfg).unwrap();
            prop_assert!(h.ids.len() <= max_len);
            prop_assert!(h.ids.iter().all(|&x| x < 6 && x != 0));
            prop_assert!(h.log_prob <= 0.0);
        }
    }
}

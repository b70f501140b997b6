//! Ensemble head: parallel branches over a shared output embedding (the word
//! embedding), fused by averaging log-probabilities.

use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::plain;
use crate::tensor::{kernels, Binder, Graph, Var};

fn check_branch(model: &CaptionModel, branch: usize) -> Result<()> {
    let n = model.ids.branches.len();
    if branch >= n {
        return Err(Error::Range {
            id: branch,
            size: n,
        });
    }
    Ok(())
}

/// Logits `[n, V]` of one branch for hidden rows `[n, d]`.
pub fn branch_logits(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    hidden: Var,
    branch: usize,
) -> Result<Var> {
    check_branch(model, branch)?;
    let ids = &model.ids.branches[branch];
    let (w, c) = (b.var(g, ids.proj_w), b.var(g, ids.proj_b));
    let h = g.matmul(hidden, w)?;
    let h = g.add_row(h, c)?;
    let h = g.gelu(h);
    let (lg, lb) = (b.var(g, ids.ln_g), b.var(g, ids.ln_b));
    let h = g.layer_norm(h, lg, lb, model.config.ln_eps)?;
    let e = b.var(g, model.ids.word);
    let logits = g.matmul_nt(h, e)?;
    let ob = b.var(g, ids.out_bias);
    g.add_row(logits, ob)
}

/// Mean over `branches` of each branch's log-softmax, `[n, V]`.
pub fn fused_log_probs(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    hidden: Var,
    branches: &[usize],
) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::Usage("fusion needs at least one branch".into()));
    }
    let mut acc: Option<Var> = None;
    for &br in branches {
        let l = branch_logits(model, g, b, hidden, br)?;
        let lp = g.log_softmax(l)?;
        acc = Some(match acc {
            Some(a) => g.add(a, lp)?,
            None => lp,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / branches.len() as f64))
}

/// Plain logits `[V]` of one branch for a single hidden row.
pub fn branch_forward(model: &CaptionModel, hidden: &[f64], branch: usize) -> Result<Vec<f64>> {
    check_branch(model, branch)?;
    let d = model.config.hidden;
    if hidden.len() != d {
        return Err(Error::dim("branch_forward", &[hidden.len()], &[d]));
    }
    let p = &model.params;
    let ids = &model.ids.branches[branch];
    let mut h = plain::linear(
        hidden,
        p.get(ids.proj_w).data(),
        p.get(ids.proj_b).data(),
        d,
        d,
    );
    h.iter_mut().for_each(|x| *x = kernels::gelu(*x));
    let h = plain::layer_norm(
        &h,
        d,
        p.get(ids.ln_g).data(),
        p.get(ids.ln_b).data(),
        model.config.ln_eps,
    );
    let v = model.config.vocab_size;
    let mut out = vec![0.0; v];
    kernels::matmul_nt(&h, p.get(model.ids.word).data(), &mut out, 1, d, v);
    plain::add_assign(&mut out, p.get(ids.out_bias).data());
    Ok(out)
}

/// Mean over branches of log-softmax(branch logits).
pub fn fuse_logits(branches: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = branches
        .first()
        .ok_or_else(|| Error::Usage("fusion needs at least one branch".into()))?;
    let mut out = vec![0.0; first.len()];
    for l in branches {
        if l.len() != out.len() {
            return Err(Error::dim("fuse_logits", &[out.len()], &[l.len()]));
        }
        let mut lp = l.clone();
        kernels::log_softmax_inplace(&mut lp);
        plain::add_assign(&mut out, &lp);
    }
    let n = branches.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// Fused log-probabilities for one hidden row over every branch.
pub fn predict(model: &CaptionModel, hidden: &[f64]) -> Result<Vec<f64>> {
    let logits = (0..model.ids.branches.len())
        .map(|b| branch_forward(model, hidden, b))
        .collect::<Result<Vec<_>>>()?;
    fuse_logits(&logits)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(branches: usize, seed: u64) -> CaptionModel {
        let cfg = ModelConfig {
            vocab_size: 10,
            hidden: 6,
            layers: 1,
            heads: 2,
            ffn: 8,
            max_positions: 16,
            grid_channels: 4,
            modulator_hidden: 3,
            branches,
            ln_eps: 1e-12,
            init_std: 0.5,
        };
        let mut m = CaptionModel::new(cfg, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        for br in m.ids.branches.clone() {
            for id in [br.proj_b, br.ln_g, br.ln_b, br.out_bias] {
                let s = m.params.get(id).shape().to_vec();
                m.params
                    .set(id, Tensor::uniform(s, -0.5, 1.0, &mut r))
                    .unwrap();
            }
        }
        m
    }

    fn log_softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        x.iter().map(|v| v - z).collect()
    }

    #[test]
    fn identical_branches_give_identical_logits() {
        let mut m = model(2, 1);
        let (a, b) = (m.ids.branches[0].clone(), m.ids.branches[1].clone());
        for (x, y) in [
            (a.proj_w, b.proj_w),
            (a.proj_b, b.proj_b),
            (a.ln_g, b.ln_g),
            (a.ln_b, b.ln_b),
            (a.out_bias, b.out_bias),
        ] {
            let t = m.params.get(x).clone();
            m.params.set(y, t).unwrap();
        }
        let h = [0.3, -0.2, 0.1, 0.9, -1.0, 0.5];
        assert_eq!(
            branch_forward(&m, &h, 0).unwrap(),
            branch_forward(&m, &h, 1).unwrap()
        );
        let fused = predict(&m, &h).unwrap();
        let single = log_softmax(&branch_forward(&m, &h, 0).unwrap());
        assert!(fused
            .iter()
            .zip(&single)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn zero_hidden_zero_biases_oracle() {
        let mut m = model(1, 2);
        let br = m.ids.branches[0].clone();
        m.params.set(br.proj_b, Tensor::zeros([6])).unwrap();
        m.params.set(br.ln_b, Tensor::zeros([6])).unwrap();
        m.params.set(br.out_bias, Tensor::zeros([10])).unwrap();
        let out = branch_forward(&m, &[0.0; 6], 0).unwrap();
        // gelu(0) = 0 on every coordinate, so the layer norm sees a constant
        // row and outputs its bias: zero logits.
        assert!(out.iter().all(|&x| x == 0.0));

        // Nonzero gain and bias: oracle over a hand-rolled layer norm.
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let pb = Tensor::uniform([6], -1.0, 1.0, &mut r);
        m.params.set(br.proj_b, pb.clone()).unwrap();
        let out = branch_forward(&m, &[0.0; 6], 0).unwrap();
        let z: Vec<f64> = pb
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt())))
            .collect();
        let mean = z.iter().sum::<f64>() / 6.0;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        let gain = m.params.get(br.ln_g).data().to_vec();
        let n: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, x)| (x - mean) / (var + 1e-12).sqrt() * gain[i])
            .collect();
        let e = m.params.get(m.ids.word);
        for v in 0..10 {
            let want: f64 = (0..6).map(|j| e.row(v)[j] * n[j]).sum();
            assert!((out[v] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_out_of_range() {
        let m = model(3, 1);
        assert!(matches!(
            branch_forward(&m, &[0.0; 6], 3),
            Err(Error::Range { id: 3, size: 3 })
        ));
        assert!(fuse_logits(&[]).is_err());
    }

    #[test]
    fn fuse_matches_scalar_average() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let branches: Vec<Vec<f64>> = (0..3)
            .map(|_| Tensor::uniform([5], -3.0, 3.0, &mut r).into_data())
            .collect();
        let fused = fuse_logits(&branches).unwrap();
        for v in 0..5 {
            let want = branches.iter().map(|b| log_softmax(b)[v]).sum::<f64>() / 3.0;
            assert!((fused[v] - want).abs() < 1e-12);
        }
        assert_eq!(fuse_logits(&branches[..1]).unwrap(), {
            let mut x = branches[0].clone();
            kernels::log_softmax_inplace(&mut x);
            x
        });
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let m = model(3, 4);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::uniform([2, 6], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&m.params);
        let hv = g.constant(h.clone());
        let fused = fused_log_probs(&m, &mut g, &mut b, hv, &[0, 1, 2]).unwrap();
        for row in 0..2 {
            let want = predict(&m, h.row(row)).unwrap();
            let got = g.value(fused).row(row);
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn single_branch_is_standard_lm_head() {
        let m = model(1, 6);
        let h = [0.5, 0.1, -0.3, 0.2, 0.0, -0.7];
        let fused = predict(&m, &h).unwrap();
        // Standard BERT LM head: transform, tie to word embedding, add bias, log-softmax.
        let br = &m.ids.branches[0];
        let p = &m.params;
        let mut t = vec![0.0; 6];
        for j in 0..6 {
            t[j] = p.get(br.proj_b).data()[j]
                + (0..6)
                    .map(|i| h[i] * p.get(br.proj_w).data()[i * 6 + j])
                    .sum::<f64>();
            t[j] = 0.5 * t[j] * (1.0 + libm::erf(t[j] / 2f64.sqrt()));
        }
        let t = plain::layer_norm(&t, 6, p.get(br.ln_g).data(), p.get(br.ln_b).data(), 1e-12);
        let logits: Vec<f64> = (0..10)
            .map(|v| {
                p.get(br.out_bias).data()[v]
                    + (0..6)
                        .map(|j| t[j] * p.get(m.ids.word).row(v)[j])
                        .sum::<f64>()
            })
            .collect();
        let want = log_softmax(&logits);
        assert!(fused.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn shared_embedding_gradient_accumulates_over_branches() {
        let m = model(3, 7);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::uniform([1, 6], -1.0, 1.0, &mut r);
        let grad_for = |branches: &[usize]| {
            let mut g = Graph::new();
            let mut b = Binder::new(&m.params);
            let hv = g.constant(h.clone());
            let mut total: Option<Var> = None;
            for &br in branches {
                let l = branch_logits(&m, &mut g, &mut b, hv, br).unwrap();
                let lp = g.log_softmax(l).unwrap();
                let pick = g.pick(lp, &[2]).unwrap();
                let s = g.sum(pick);
                total = Some(match total {
                    Some(t) => g.add(t, s).unwrap(),
                    None => s,
                });
            }
            let mut grads = g.backward(total.unwrap()).unwrap();
            b.collect(&mut grads)[m.ids.word.index()].clone().unwrap()
        };
        let all = grad_for(&[0, 1, 2]);
        let mut sum = Tensor::zeros(all.shape().to_vec());
        for br in 0..3 {
            let gbr = grad_for(&[br]);
            plain::add_assign(sum.data_mut(), gbr.data());
        }
        assert!(all.max_abs_diff(&sum) < 1e-12);
    }

    #[test]
    fn proj_mutation_is_local_embedding_mutation_is_global() {
        let mut m = model(3, 8);
        let h = [0.2, -0.4, 0.6, 0.1, 0.3, -0.2];
        let before: Vec<_> = (0..3).map(|b| branch_forward(&m, &h, b).unwrap()).collect();
        let id = m.ids.branches[1].proj_w;
        m.params.get_mut(id).data_mut()[0] += 0.5;
        let after: Vec<_> = (0..3).map(|b| branch_forward(&m, &h, b).unwrap()).collect();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
        let w = m.ids.word;
        m.params
            .get_mut(w)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x *= 1.1);
        let moved: Vec<_> = (0..3).map(|b| branch_forward(&m, &h, b).unwrap()).collect();
        assert!((0..3).all(|b| moved[b] != after[b]));
    }

    #[test]
    fn argmax_lowest_index_tie_break() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    proptest! {
        #[test]
        fn fused_is_sub_distribution(seed in 0u64..5000, n in 1usize..5) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let branches: Vec<Vec<f64>> = (0..n).map(|_| Tensor::uniform([7], -5.0, 5.0, &mut r).into_data()).collect();
            let fused = fuse_logits(&branches).unwrap();
            let mass: f64 = fused.iter().map(|x| x.exp()).sum();
            prop_assert!(mass <= 1.0 + 1e-12);
            for (v, &f) in fused.iter().enumerate() {
                let best = branches.iter().map(|b| log_softmax(b)[v]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f <= best + 1e-12);
            }
        }
    }
}

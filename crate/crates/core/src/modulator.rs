//! Cross-modal channel modulator: concept tokens become a per-channel gate
//! `w` that reweights the grid feature, `v⋄ = w ⊗ v`.

use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::tensor::{kernels, Binder, Graph, Tensor, Var};
use crate::vision::GridFeature;

/// Per-channel weights, each strictly inside (0, 1) when produced by
/// [`gate_from_concepts`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGate(pub Tensor);

impl ChannelGate {
    /// The neutral gate used when an image has no concepts.
    pub fn ones(channels: usize) -> Self {
        Self(Tensor::ones([channels]))
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_ids(model: &CaptionModel, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Usage(
            "modulator needs at least one concept token".into(),
        ));
    }
    let v = model.config.vocab_size;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
        return Err(Error::Range {
            id: bad as usize,
            size: v,
        });
    }
    Ok(())
}

/// Mean over tokens of `sigmoid(FC2(relu(FC1(E[id]))))`.
pub fn gate_from_concepts(model: &CaptionModel, ids: &[u32]) -> Result<ChannelGate> {
    check_ids(model, ids)?;
    let p = &model.params;
    let ids_ = &model.ids;
    let (d, m, c) = (
        model.config.hidden,
        model.config.modulator_hidden,
        model.config.grid_channels,
    );
    let word = p.get(ids_.word);
    let (w1, b1) = (p.get(ids_.mod_fc1_w).data(), p.get(ids_.mod_fc1_b).data());
    let (w2, b2) = (p.get(ids_.mod_fc2_w).data(), p.get(ids_.mod_fc2_b).data());
    let mut gate = vec![0.0; c];
    let mut h = vec![0.0; m];
    let mut o = vec![0.0; c];
    for &id in ids {
        kernels::matmul(word.row(id as usize), w1, &mut h, 1, d, m);
        for (x, b) in h.iter_mut().zip(b1) {
            *x = (*x + b).max(0.0);
        }
        kernels::matmul(&h, w2, &mut o, 1, m, c);
        for ((g, x), b) in gate.iter_mut().zip(&o).zip(b2) {
            *g += kernels::sigmoid(x + b);
        }
    }
    let n = ids.len() as f64;
    gate.iter_mut().for_each(|g| *g /= n);
    Ok(ChannelGate(Tensor::new([c], gate)?))
}

/// Differentiable gate as a `[1, C]` row.
pub fn gate_graph(model: &CaptionModel, g: &mut Graph, b: &mut Binder, ids: &[u32]) -> Result<Var> {
    check_ids(model, ids)?;
    let i = &model.ids;
    let word = b.var(g, i.word);
    let (w1, b1, w2, b2) = (
        b.var(g, i.mod_fc1_w),
        b.var(g, i.mod_fc1_b),
        b.var(g, i.mod_fc2_w),
        b.var(g, i.mod_fc2_b),
    );
    let idx: Vec<usize> = ids.iter().map(|&x| x as usize).collect();
    let e = g.gather_rows(word, &idx)?;
    let h = g.matmul(e, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    let o = g.add_row(o, b2)?;
    let s = g.sigmoid(o);
    g.mean_rows(s)
}

/// `out[h][w][c] = gate[c] · grid[h][w][c]`.
pub fn modulate(grid: &GridFeature, gate: &ChannelGate) -> Result<GridFeature> {
    if gate.len() != grid.channels() {
        return Err(Error::dim("modulate", &[gate.len()], grid.values().shape()));
    }
    let mut v = grid.values().clone();
    let c = gate.len();
    for cell in v.data_mut().chunks_mut(c) {
        for (x, w) in cell.iter_mut().zip(gate.values()) {
            *x *= w;
        }
    }
    GridFeature::new(v)
}

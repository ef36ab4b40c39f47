//! The shared noise predictor: a small factorized spatio-temporal
//! transformer over the packed sequence, conditioned on the task token, the
//! diffusion step and a class embedding (with a dedicated null row).
//!
//! All weights live in one flat `Vec<f64>`; [`ParamIndex`] names the slices.
//! Forward and backward passes are written out by hand and batched over
//! examples so the per-token maps run as single matrix products.

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::latent::{time_embed, ModalityLayout, TaskId, UnifiedLatent};
use crate::nn::{
    attend, attend_backward, gelu_from, gelu_grad_from, gelu_tanh, layer_norm, layer_norm_backward, linear, linear_backward,
    linear_backward_params, silu, silu_grad, LayerNormCache,
};
use crate::schedule::NoiseSchedule;
use crate::tasks::TrainingExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub cond_dim: usize,
    pub num_classes: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `model_dim`.
    pub ffn_mult: usize,
    /// Disables the temporal and spatial attention sublayers (ablation).
    pub self_attention: bool,
    /// Valid step range is `1..=diffusion_steps`.
    pub diffusion_steps: usize,
    pub layout: ModalityLayout,
}

impl DenoiserConfig {
    pub fn new(layout: ModalityLayout, num_classes: usize, diffusion_steps: usize) -> Self {
        Self {
            model_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            cond_dim: 32,
            num_classes,
            ffn_mult: 4,
            self_attention: true,
            diffusion_steps,
            layout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail("model_dim must be a positive multiple of num_heads");
        }
        if self.model_dim % 2 != 0 {
            return fail("model_dim must be even for the step embedding");
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be >= 1");
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1");
        }
        if self.cond_dim == 0 || self.ffn_mult == 0 || self.diffusion_steps == 0 {
            return fail("cond_dim, ffn_mult and diffusion_steps must be >= 1");
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.layout.packed_len() + 1
    }
}

/// Location of one parameter tensor inside the flat store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnSlots {
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
}

#[derive(Debug, Clone, Copy)]
struct NormSlots {
    gain: Slot,
    bias: Slot,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    temporal_norm: NormSlots,
    temporal: AttnSlots,
    spatial_norm: NormSlots,
    spatial: AttnSlots,
    cross_norm: NormSlots,
    cross: AttnSlots,
    ffn_norm: NormSlots,
    ffn_w1: Slot,
    ffn_b1: Slot,
    ffn_w2: Slot,
    ffn_b2: Slot,
}

/// Named slices of the flat parameter vector, in declaration order.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    patch_w: Slot,
    patch_b: Slot,
    positions: Slot,
    task_table: Slot,
    class_table: Slot,
    time_w1: Slot,
    time_b1: Slot,
    time_w2: Slot,
    time_b2: Slot,
    blocks: Vec<BlockSlots>,
    unpatch_w: Slot,
    unpatch_b: Slot,
    names: Vec<(String, Slot)>,
    total: usize,
}

struct IndexBuilder {
    offset: usize,
    names: Vec<(String, Slot)>,
}

impl IndexBuilder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let slot = Slot { offset: self.offset, rows, cols };
        self.offset += slot.len();
        self.names.push((name.into(), slot));
        slot
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormSlots {
        NormSlots {
            gain: self.add(format!("{name}.gain"), 1, dim),
            bias: self.add(format!("{name}.bias"), 1, dim),
        }
    }

    fn attn(&mut self, name: &str, dim: usize, kv_in: usize) -> AttnSlots {
        AttnSlots {
            wq: self.add(format!("{name}.wq"), dim, dim),
            bq: self.add(format!("{name}.bq"), 1, dim),
            wk: self.add(format!("{name}.wk"), kv_in, dim),
            bk: self.add(format!("{name}.bk"), 1, dim),
            wv: self.add(format!("{name}.wv"), kv_in, dim),
            bv: self.add(format!("{name}.bv"), 1, dim),
            wo: self.add(format!("{name}.wo"), dim, dim),
            bo: self.add(format!("{name}.bo"), 1, dim),
        }
    }
}

impl ParamIndex {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let d = cfg.model_dim;
        let tok = cfg.layout.token_dim();
        let hidden = d * cfg.ffn_mult;
        let mut b = IndexBuilder { offset: 0, names: Vec::new() };
        let patch_w = b.add("patch.weight", tok, d);
        let patch_b = b.add("patch.bias", 1, d);
        let positions = b.add("positions", cfg.seq_len(), d);
        let task_table = b.add("task_table", TaskId::ALL.len(), d);
        let class_table = b.add("class_table", cfg.num_classes + 1, cfg.cond_dim);
        let time_w1 = b.add("time.w1", d, d);
        let time_b1 = b.add("time.b1", 1, d);
        let time_w2 = b.add("time.w2", d, d);
        let time_b2 = b.add("time.b2", 1, d);
        let blocks = (0..cfg.num_blocks)
            .map(|i| BlockSlots {
                temporal_norm: b.norm(&format!("block{i}.temporal_norm"), d),
                temporal: b.attn(&format!("block{i}.temporal"), d, d),
                spatial_norm: b.norm(&format!("block{i}.spatial_norm"), d),
                spatial: b.attn(&format!("block{i}.spatial"), d, d),
                cross_norm: b.norm(&format!("block{i}.cross_norm"), d),
                cross: b.attn(&format!("block{i}.cross"), d, cfg.cond_dim),
                ffn_norm: b.norm(&format!("block{i}.ffn_norm"), d),
                ffn_w1: b.add(format!("block{i}.ffn.w1"), d, hidden),
                ffn_b1: b.add(format!("block{i}.ffn.b1"), 1, hidden),
                ffn_w2: b.add(format!("block{i}.ffn.w2"), hidden, d),
                ffn_b2: b.add(format!("block{i}.ffn.b2"), 1, d),
            })
            .collect();
        let unpatch_w = b.add("unpatch.weight", d, tok);
        let unpatch_b = b.add("unpatch.bias", 1, tok);
        Self {
            patch_w,
            patch_b,
            positions,
            task_table,
            class_table,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            unpatch_w,
            unpatch_b,
            total: b.offset,
            names: b.names,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `(name, slot)` for every tensor in declaration order.
    pub fn entries(&self) -> &[(String, Slot)] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<Slot> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParameters {
    config: DenoiserConfig,
    index: ParamIndex,
    values: Vec<f64>,
}

impl PartialEq for ParamIndex {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
    }
}

impl DenoiserParameters {
    /// Deterministic initialization. Matrices feeding attention, the
    /// feed-forward and the step embedding are uniform in `±1/sqrt(fan_in)`;
    /// the output map is zero so the initial prediction is identically 0.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(config);
        let mut values = vec![0.0; index.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, slot) in index.entries() {
            let dst = &mut values[slot.range()];
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if leaf == "gain" {
                dst.fill(1.0);
            } else if name.starts_with("unpatch") || leaf.starts_with('b') {
                // zero
            } else if matches!(name.as_str(), "positions" | "task_table" | "class_table") {
                for v in dst.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            } else {
                let bound = 1.0 / (slot.rows as f64).sqrt();
                for v in dst.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(Self { config: config.clone(), index, values })
    }

    pub fn from_values(config: &DenoiserConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(config);
        if values.len() != index.total() {
            return Err(Error::shape(&[index.total()], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter value".into()));
        }
        Ok(Self { config: config.clone(), index, values })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        digest::of_reals(&self.values)
    }

    pub fn tensor(&self, slot: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((slot.rows, slot.cols), &self.values[slot.range()])
            .expect("slot lies inside the store")
    }

    fn vector(&self, slot: Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[slot.range()])
    }

    fn check_input(&self, z_t: ArrayView2<'_, f64>, t: usize, class: Option<usize>) -> Result<()> {
        let layout = &self.config.layout;
        let want = [layout.packed_len(), layout.token_dim()];
        if z_t.shape() != want {
            return Err(Error::shape(&want, z_t.shape()));
        }
        if t == 0 || t > self.config.diffusion_steps {
            return Err(Error::StepOutOfRange { t, min: 1, max: self.config.diffusion_steps });
        }
        if let Some(c) = class {
            if c >= self.config.num_classes {
                return Err(Error::InvalidClass { class: c, num_classes: self.config.num_classes });
            }
        }
        Ok(())
    }

    /// Predicted noise for a single packed latent.
    pub fn forward(
        &self,
        z_t: &UnifiedLatent,
        t: usize,
        task: TaskId,
        class: Option<usize>,
        drop_text: bool,
    ) -> Result<UnifiedLatent> {
        let input = DenoiseInput { z_t: z_t.data().view(), t, task, class, drop_text };
        let out = self.forward_batch(std::slice::from_ref(&input))?;
        UnifiedLatent::from_data(out, self.config.layout)
    }

    /// Batched prediction. Returns the stacked `(batch * packed_len, token_dim)`
    /// noise estimates in input order.
    pub fn forward_batch(&self, inputs: &[DenoiseInput<'_>]) -> Result<Array2<f64>> {
        Ok(self.run(inputs)?.0)
    }

    /// Mean loss over the batch and its exact gradient.
    ///
    /// Each example contributes `gamma_t` times the sum of its masked-mean
    /// squared errors, one mean per loss mask.
    pub fn gradients(&self, schedule: &NoiseSchedule, batch: &[TrainingExample]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("gradient batch is empty".into()));
        }
        let inputs: Vec<DenoiseInput<'_>> = batch.iter().map(TrainingExample::input).collect();
        let (out, cache) = self.run(&inputs)?;
        let len = self.config.layout.packed_len();
        let scale = 1.0 / batch.len() as f64;
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (e, ex) in batch.iter().enumerate() {
            schedule.check_step(ex.t)?;
            let gamma = schedule.loss_weight(ex.t);
            let rows = s![e * len..(e + 1) * len, ..];
            let resid = &out.slice(rows) - ex.target.data();
            let mut d = d_out.slice_mut(rows);
            for mask in &ex.loss_masks {
                let count = mask.iter().filter(|m| **m != 0.0).count();
                if count == 0 {
                    return Err(Error::EmptyMask);
                }
                let masked = &resid * mask;
                loss += scale * gamma * masked.iter().map(|r| r * r).sum::<f64>() / count as f64;
                d.scaled_add(scale * gamma * 2.0 / count as f64, &masked);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        let grads = self.backward(&cache, d_out.view());
        Ok((loss, grads))
    }

    fn run(&self, inputs: &[DenoiseInput<'_>]) -> Result<(Array2<f64>, Cache)> {
        if inputs.is_empty() {
            return Err(Error::InvalidConfig("empty denoiser batch".into()));
        }
        for inp in inputs {
            self.check_input(inp.z_t, inp.t, inp.class)?;
        }
        let cfg = &self.config;
        let ix = &self.index;
        let batch = inputs.len();
        let len = cfg.layout.packed_len();
        let seq = len + 1;
        let dim = cfg.model_dim;

        let mut tokens = Array2::zeros((batch * len, cfg.layout.token_dim()));
        for (e, inp) in inputs.iter().enumerate() {
            tokens.slice_mut(s![e * len..(e + 1) * len, ..]).assign(&inp.z_t);
        }
        let lifted = linear(tokens.view(), self.tensor(ix.patch_w), self.vector(ix.patch_b));

        let mut sin = Array2::zeros((batch, dim));
        for (e, inp) in inputs.iter().enumerate() {
            sin.row_mut(e).assign(&time_embed(inp.t, dim)?);
        }
        let time_pre = linear(sin.view(), self.tensor(ix.time_w1), self.vector(ix.time_b1));
        let time_act = time_pre.mapv(silu);
        let temb = linear(time_act.view(), self.tensor(ix.time_w2), self.vector(ix.time_b2));

        let tasks: Vec<usize> = inputs.iter().map(|i| i.task.code() as usize).collect();
        let cond_rows: Vec<usize> = inputs.iter().map(|i| i.condition_row(cfg.num_classes)).collect();
        let class_table = self.tensor(ix.class_table);
        let cond = class_table.select(Axis(0), &cond_rows);

        let positions = self.tensor(ix.positions);
        let task_table = self.tensor(ix.task_table);
        let mut h = Array2::zeros((batch * seq, dim));
        for e in 0..batch {
            let mut rows = h.slice_mut(s![e * seq..(e + 1) * seq, ..]);
            rows.slice_mut(s![..len, ..]).assign(&lifted.slice(s![e * len..(e + 1) * len, ..]));
            rows.row_mut(len).assign(&task_table.row(tasks[e]));
            rows += &positions;
            rows += &temb.row(e);
        }

        let temporal = self.temporal_groups(batch);
        let spatial = spatial_groups(batch, seq);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for bs in &ix.blocks {
            let (mut temporal_cache, mut spatial_cache) = (None, None);
            if cfg.self_attention {
                let (delta, c) = self.self_attn_forward(&h, bs.temporal_norm, &bs.temporal, &temporal);
                h += &delta;
                temporal_cache = Some(c);
                let (delta, c) = self.self_attn_forward(&h, bs.spatial_norm, &bs.spatial, &spatial);
                h += &delta;
                spatial_cache = Some(c);
            }
            let (delta, cross) = self.cross_attn_forward(&h, bs, &cond, seq);
            h += &delta;
            let (delta, ffn) = self.ffn_forward(&h, bs);
            h += &delta;
            blocks.push(BlockCache { temporal: temporal_cache, spatial: spatial_cache, cross, ffn });
        }

        // The head reads the residual stream directly, keeping a linear path
        // from each input token to its prediction.
        let token_rows: Vec<usize> = (0..batch).flat_map(|e| (0..len).map(move |j| e * seq + j)).collect();
        let head_in = h.select(Axis(0), &token_rows);
        let out = linear(head_in.view(), self.tensor(ix.unpatch_w), self.vector(ix.unpatch_b));

        let cache = Cache {
            batch,
            tasks,
            cond_rows,
            tokens,
            sin,
            time_pre,
            time_act,
            cond,
            temporal,
            spatial,
            blocks,
            token_rows,
            head_in,
        };
        Ok((out, cache))
    }

    fn backward(&self, cache: &Cache, d_out: ArrayView2<'_, f64>) -> Gradients {
        let cfg = &self.config;
        let ix = &self.index;
        let mut g = Gradients::zeros(self.len());
        let batch = cache.batch;
        let len = cfg.layout.packed_len();
        let seq = len + 1;
        let dim = cfg.model_dim;

        let (dw, db) = g.pair(ix.unpatch_w, ix.unpatch_b);
        let d_head = linear_backward(cache.head_in.view(), self.tensor(ix.unpatch_w), d_out, dw, db);
        let mut dh = Array2::zeros((batch * seq, dim));
        for (r, &row) in cache.token_rows.iter().enumerate() {
            dh.row_mut(row).assign(&d_head.row(r));
        }

        let mut d_cond = Array2::zeros(cache.cond.raw_dim());
        for (bs, bc) in ix.blocks.iter().zip(&cache.blocks).rev() {
            dh += &self.ffn_backward(&bc.ffn, bs, dh.view(), &mut g);
            let (dx, dc) = self.cross_attn_backward(&bc.cross, bs, &cache.cond, dh.view(), seq, &mut g);
            dh += &dx;
            d_cond += &dc;
            if let Some(c) = &bc.spatial {
                dh += &self.self_attn_backward(c, bs.spatial_norm, &bs.spatial, &cache.spatial, dh.view(), &mut g);
            }
            if let Some(c) = &bc.temporal {
                dh += &self.self_attn_backward(c, bs.temporal_norm, &bs.temporal, &cache.temporal, dh.view(), &mut g);
            }
        }

        // Embedding stage.
        let mut d_temb = Array2::zeros((batch, dim));
        let mut d_lifted = Array2::zeros((batch * len, dim));
        {
            let mut d_pos = g.matrix(ix.positions);
            for e in 0..batch {
                let rows = dh.slice(s![e * seq..(e + 1) * seq, ..]);
                d_pos += &rows;
                d_temb.row_mut(e).assign(&rows.sum_axis(Axis(0)));
                d_lifted.slice_mut(s![e * len..(e + 1) * len, ..]).assign(&rows.slice(s![..len, ..]));
            }
        }
        {
            let mut d_task = g.matrix(ix.task_table);
            for e in 0..batch {
                let mut row = d_task.row_mut(cache.tasks[e]);
                row += &dh.row(e * seq + len);
            }
        }
        {
            let mut d_class = g.matrix(ix.class_table);
            for (e, &r) in cache.cond_rows.iter().enumerate() {
                let mut row = d_class.row_mut(r);
                row += &d_cond.row(e);
            }
        }
        let (dw, db) = g.pair(ix.patch_w, ix.patch_b);
        linear_backward_params(cache.tokens.view(), d_lifted.view(), dw, db);

        let (dw, db) = g.pair(ix.time_w2, ix.time_b2);
        let d_act = linear_backward(cache.time_act.view(), self.tensor(ix.time_w2), d_temb.view(), dw, db);
        let mut d_pre = d_act;
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.time_pre)
            .for_each(|d, &x| *d *= silu_grad(x));
        let (dw, db) = g.pair(ix.time_w1, ix.time_b1);
        linear_backward_params(cache.sin.view(), d_pre.view(), dw, db);
        g
    }

    fn temporal_groups(&self, batch: usize) -> Vec<Group> {
        let seq = self.config.seq_len();
        let per = self.config.layout.temporal_groups();
        (0..batch)
            .flat_map(|e| per.iter().map(move |g| Group::from_indices(g.iter().map(|i| e * seq + i).collect())))
            .collect()
    }

    fn self_attn_forward(
        &self,
        h: &Array2<f64>,
        norm: NormSlots,
        a: &AttnSlots,
        groups: &[Group],
    ) -> (Array2<f64>, SelfAttnCache) {
        let (xn, ln) = layer_norm(h.view(), self.vector(norm.gain), self.vector(norm.bias));
        let q = linear(xn.view(), self.tensor(a.wq), self.vector(a.bq));
        let k = linear(xn.view(), self.tensor(a.wk), self.vector(a.bk));
        let v = linear(xn.view(), self.tensor(a.wv), self.vector(a.bv));
        let heads = self.config.num_heads;
        let mut o = Array2::zeros(h.raw_dim());
        let mut probs = Vec::with_capacity(groups.len());
        for grp in groups {
            let (og, p) = match grp {
                Group::Range(r) => {
                    let rows = s![r.clone(), ..];
                    attend(q.slice(rows), k.slice(rows), v.slice(rows), heads)
                }
                Group::Rows(idx) => {
                    let (qg, kg, vg) = (q.select(Axis(0), idx), k.select(Axis(0), idx), v.select(Axis(0), idx));
                    attend(qg.view(), kg.view(), vg.view(), heads)
                }
            };
            grp.scatter(&mut o, og.view(), false);
            probs.push(p);
        }
        let delta = linear(o.view(), self.tensor(a.wo), self.vector(a.bo));
        (delta, SelfAttnCache { ln, xn, q, k, v, probs, o })
    }

    fn self_attn_backward(
        &self,
        c: &SelfAttnCache,
        norm: NormSlots,
        a: &AttnSlots,
        groups: &[Group],
        d_delta: ArrayView2<'_, f64>,
        g: &mut Gradients,
    ) -> Array2<f64> {
        let (dw, db) = g.pair(a.wo, a.bo);
        let d_o = linear_backward(c.o.view(), self.tensor(a.wo), d_delta, dw, db);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (grp, p) in groups.iter().zip(&c.probs) {
            let (gq, gk, gv) = match grp {
                Group::Range(r) => {
                    let rows = s![r.clone(), ..];
                    attend_backward(c.q.slice(rows), c.k.slice(rows), c.v.slice(rows), p, d_o.slice(rows))
                }
                Group::Rows(idx) => {
                    let (qg, kg, vg) = (c.q.select(Axis(0), idx), c.k.select(Axis(0), idx), c.v.select(Axis(0), idx));
                    let dog = d_o.select(Axis(0), idx);
                    attend_backward(qg.view(), kg.view(), vg.view(), p, dog.view())
                }
            };
            grp.scatter(&mut dq, gq.view(), true);
            grp.scatter(&mut dk, gk.view(), true);
            grp.scatter(&mut dv, gv.view(), true);
        }
        let (dw, db) = g.pair(a.wq, a.bq);
        let mut dxn = linear_backward(c.xn.view(), self.tensor(a.wq), dq.view(), dw, db);
        let (dw, db) = g.pair(a.wk, a.bk);
        dxn += &linear_backward(c.xn.view(), self.tensor(a.wk), dk.view(), dw, db);
        let (dw, db) = g.pair(a.wv, a.bv);
        dxn += &linear_backward(c.xn.view(), self.tensor(a.wv), dv.view(), dw, db);
        let (dgain, dbias) = g.pair_vec(norm.gain, norm.bias);
        layer_norm_backward(&c.ln, self.vector(norm.gain), dxn.view(), dgain, dbias)
    }

    fn cross_attn_forward(
        &self,
        h: &Array2<f64>,
        bs: &BlockSlots,
        cond: &Array2<f64>,
        seq: usize,
    ) -> (Array2<f64>, CrossAttnCache) {
        let a = &bs.cross;
        let (xn, ln) = layer_norm(h.view(), self.vector(bs.cross_norm.gain), self.vector(bs.cross_norm.bias));
        let q = linear(xn.view(), self.tensor(a.wq), self.vector(a.bq));
        let k = linear(cond.view(), self.tensor(a.wk), self.vector(a.bk));
        let v = linear(cond.view(), self.tensor(a.wv), self.vector(a.bv));
        let heads = self.config.num_heads;
        let mut o = Array2::zeros(h.raw_dim());
        let mut probs = Vec::with_capacity(cond.nrows());
        for e in 0..cond.nrows() {
            let rows = s![e * seq..(e + 1) * seq, ..];
            let kv = s![e..e + 1, ..];
            let (oe, p) = attend(q.slice(rows), k.slice(kv), v.slice(kv), heads);
            o.slice_mut(rows).assign(&oe);
            probs.push(p);
        }
        let delta = linear(o.view(), self.tensor(a.wo), self.vector(a.bo));
        (delta, CrossAttnCache { ln, xn, q, k, v, probs, o })
    }

    fn cross_attn_backward(
        &self,
        c: &CrossAttnCache,
        bs: &BlockSlots,
        cond: &Array2<f64>,
        d_delta: ArrayView2<'_, f64>,
        seq: usize,
        g: &mut Gradients,
    ) -> (Array2<f64>, Array2<f64>) {
        let a = &bs.cross;
        let (dw, db) = g.pair(a.wo, a.bo);
        let d_o = linear_backward(c.o.view(), self.tensor(a.wo), d_delta, dw, db);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (e, p) in c.probs.iter().enumerate() {
            let rows = s![e * seq..(e + 1) * seq, ..];
            let kv = s![e..e + 1, ..];
            let (gq, gk, gv) = attend_backward(c.q.slice(rows), c.k.slice(kv), c.v.slice(kv), p, d_o.slice(rows));
            dq.slice_mut(rows).assign(&gq);
            dk.slice_mut(kv).assign(&gk);
            dv.slice_mut(kv).assign(&gv);
        }
        let (dw, db) = g.pair(a.wk, a.bk);
        let mut d_cond = linear_backward(cond.view(), self.tensor(a.wk), dk.view(), dw, db);
        let (dw, db) = g.pair(a.wv, a.bv);
        d_cond += &linear_backward(cond.view(), self.tensor(a.wv), dv.view(), dw, db);
        let (dw, db) = g.pair(a.wq, a.bq);
        let dxn = linear_backward(c.xn.view(), self.tensor(a.wq), dq.view(), dw, db);
        let (dgain, dbias) = g.pair_vec(bs.cross_norm.gain, bs.cross_norm.bias);
        let dx = layer_norm_backward(&c.ln, self.vector(bs.cross_norm.gain), dxn.view(), dgain, dbias);
        (dx, d_cond)
    }

    fn ffn_forward(&self, h: &Array2<f64>, bs: &BlockSlots) -> (Array2<f64>, FfnCache) {
        let (xn, ln) = layer_norm(h.view(), self.vector(bs.ffn_norm.gain), self.vector(bs.ffn_norm.bias));
        let pre = linear(xn.view(), self.tensor(bs.ffn_w1), self.vector(bs.ffn_b1));
        let th = pre.mapv(gelu_tanh);
        let act = ndarray::Zip::from(&pre).and(&th).map_collect(|&x, &t| gelu_from(x, t));
        let delta = linear(act.view(), self.tensor(bs.ffn_w2), self.vector(bs.ffn_b2));
        (delta, FfnCache { ln, xn, pre, th, act })
    }

    fn ffn_backward(&self, c: &FfnCache, bs: &BlockSlots, d_delta: ArrayView2<'_, f64>, g: &mut Gradients) -> Array2<f64> {
        let (dw, db) = g.pair(bs.ffn_w2, bs.ffn_b2);
        let mut d_pre = linear_backward(c.act.view(), self.tensor(bs.ffn_w2), d_delta, dw, db);
        ndarray::Zip::from(&mut d_pre)
            .and(&c.pre)
            .and(&c.th)
            .for_each(|d, &x, &t| *d *= gelu_grad_from(x, t));
        let (dw, db) = g.pair(bs.ffn_w1, bs.ffn_b1);
        let dxn = linear_backward(c.xn.view(), self.tensor(bs.ffn_w1), d_pre.view(), dw, db);
        let (dgain, dbias) = g.pair_vec(bs.ffn_norm.gain, bs.ffn_norm.bias);
        layer_norm_backward(&c.ln, self.vector(bs.ffn_norm.gain), dxn.view(), dgain, dbias)
    }
}

/// One denoiser query.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    pub z_t: ArrayView2<'a, f64>,
    pub t: usize,
    pub task: TaskId,
    pub class: Option<usize>,
    /// Route the condition to the null row regardless of `class`.
    pub drop_text: bool,
}

impl DenoiseInput<'_> {
    /// Row of the class table used as the condition; `num_classes` is the
    /// null row.
    pub fn condition_row(&self, num_classes: usize) -> usize {
        match (self.drop_text, self.class) {
            (false, Some(c)) => c,
            _ => num_classes,
        }
    }
}

/// Gradient store aligned with [`DenoiserParameters::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn matrix(&mut self, slot: Slot) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((slot.rows, slot.cols), &mut self.values[slot.range()])
            .expect("slot lies inside the store")
    }

    /// Disjoint mutable views of a weight and the bias declared after it.
    fn pair(&mut self, w: Slot, b: Slot) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
        assert!(w.offset + w.len() <= b.offset, "weight must precede bias");
        let (left, right) = self.values.split_at_mut(b.offset);
        let wv = ArrayViewMut2::from_shape((w.rows, w.cols), &mut left[w.range()]).expect("weight slot");
        let bv = ArrayViewMut1::from(&mut right[..b.len()]);
        (wv, bv)
    }

    fn pair_vec(&mut self, a: Slot, b: Slot) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
        assert!(a.offset + a.len() <= b.offset, "slots must be ordered");
        let (left, right) = self.values.split_at_mut(b.offset);
        (ArrayViewMut1::from(&mut left[a.range()]), ArrayViewMut1::from(&mut right[..b.len()]))
    }
}

#[derive(Debug, Clone)]
enum Group {
    Range(std::ops::Range<usize>),
    Rows(Vec<usize>),
}

impl Group {
    fn from_indices(idx: Vec<usize>) -> Self {
        let contiguous = idx.windows(2).all(|w| w[1] == w[0] + 1);
        match (contiguous, idx.first(), idx.last()) {
            (true, Some(&a), Some(&b)) => Group::Range(a..b + 1),
            _ => Group::Rows(idx),
        }
    }

    fn scatter(&self, dst: &mut Array2<f64>, src: ArrayView2<'_, f64>, add: bool) {
        match self {
            Group::Range(r) => {
                let mut d = dst.slice_mut(s![r.clone(), ..]);
                if add {
                    d += &src;
                } else {
                    d.assign(&src);
                }
            }
            Group::Rows(idx) => {
                for (i, &row) in idx.iter().enumerate() {
                    let mut d = dst.row_mut(row);
                    if add {
                        d += &src.row(i);
                    } else {
                        d.assign(&src.row(i));
                    }
                }
            }
        }
    }
}

fn spatial_groups(batch: usize, seq: usize) -> Vec<Group> {
    (0..batch).map(|e| Group::Range(e * seq..(e + 1) * seq)).collect()
}

struct SelfAttnCache {
    ln: LayerNormCache,
    xn: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Vec<Array2<f64>>>,
    o: Array2<f64>,
}

struct CrossAttnCache {
    ln: LayerNormCache,
    xn: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Vec<Array2<f64>>>,
    o: Array2<f64>,
}

struct FfnCache {
    ln: LayerNormCache,
    xn: Array2<f64>,
    pre: Array2<f64>,
    th: Array2<f64>,
    act: Array2<f64>,
}

struct BlockCache {
    temporal: Option<SelfAttnCache>,
    spatial: Option<SelfAttnCache>,
    cross: CrossAttnCache,
    ffn: FfnCache,
}

struct Cache {
    batch: usize,
    tasks: Vec<usize>,
    cond_rows: Vec<usize>,
    tokens: Array2<f64>,
    sin: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    cond: Array2<f64>,
    temporal: Vec<Group>,
    spatial: Vec<Group>,
    blocks: Vec<BlockCache>,
    token_rows: Vec<usize>,
    head_in: Array2<f64>,
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Model, Params, Tensor};
use crate::delay_codec::{Row, TokenGrid};
use crate::error::{Error, Result};
use crate::tokenizer::NUM_FIELDS;

const LN_EPS: f64 = 1e-5;

/// Scores for every value of every field at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits {
    pub fields: Vec<Vec<f64>>,
}

impl StepLogits {
    pub fn field(&self, d: usize) -> &[f64] {
        &self.fields[d]
    }
}

/// Cross-entropy sums, cell counts and argmax hits per field.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub sum: [f64; NUM_FIELDS],
    pub count: [usize; NUM_FIELDS],
    pub correct: [usize; NUM_FIELDS],
}

impl LossStats {
    pub fn merge(&mut self, other: &LossStats) {
        for d in 0..NUM_FIELDS {
            self.sum[d] += other.sum[d];
            self.count[d] += other.count[d];
            self.correct[d] += other.correct[d];
        }
    }

    pub fn cells(&self) -> usize {
        self.count.iter().sum()
    }

    /// Mean cross-entropy over all contributing cells.
    pub fn mean(&self) -> f64 {
        self.sum.iter().sum::<f64>() / self.cells() as f64
    }

    pub fn field_mean(&self) -> [f64; NUM_FIELDS] {
        std::array::from_fn(|d| self.sum[d] / self.count[d] as f64)
    }

    pub fn field_accuracy(&self) -> [f64; NUM_FIELDS] {
        std::array::from_fn(|d| self.correct[d] as f64 / self.count[d] as f64)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = w x + bias` with `w` stored `[out, in]`.
fn linear(w: &Tensor, bias: Option<&Tensor>, x: &[f64], out: &mut [f64]) {
    for (o, y) in out.iter_mut().enumerate() {
        *y = dot(w.row(o), x) + bias.map_or(0.0, |b| b.data[o]);
    }
}

/// `dx += wᵀ dy`, `dw += dy xᵀ`.
fn linear_backward(w: &Tensor, x: &[f64], dy: &[f64], dw: &mut Tensor, dx: Option<&mut [f64]>) {
    for (o, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, x, dw.row_mut(o));
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), dx);
            }
        }
    }
}

/// Writes normalized `x` into `xhat` and returns the reciprocal std.
fn normalize(x: &[f64], xhat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for (h, v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * rstd;
    }
    rstd
}

fn affine(xhat: &[f64], gain: &Tensor, bias: &Tensor, out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = xhat[i] * gain.data[i] + bias.data[i];
    }
}

/// Layer-norm backward for one row; accumulates into `dx`.
fn layer_norm_backward(
    xhat: &[f64],
    rstd: f64,
    gain: &Tensor,
    dy: &[f64],
    dgain: &mut Tensor,
    dbias: &mut Tensor,
    dx: &mut [f64],
) {
    let n = xhat.len() as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..xhat.len() {
        dgain.data[i] += dy[i] * xhat[i];
        dbias.data[i] += dy[i];
        let dxh = dy[i] * gain.data[i];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xhat[i];
    }
    for i in 0..xhat.len() {
        let dxh = dy[i] * gain.data[i];
        dx[i] += rstd / n * (n * dxh - sum_dxhat - xhat[i] * sum_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal attention for the row at position `t` over keys/values `0..=t`
/// (flat `[t+1, d_model]`). Writes per-head probabilities into `probs`
/// (`heads * (t+1)`) and the concatenated head outputs into `ctx`.
fn attend(q: &[f64], keys: &[f64], values: &[f64], t: usize, heads: usize, probs: &mut [f64], ctx: &mut [f64]) {
    let dm = q.len();
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    ctx.iter_mut().for_each(|c| *c = 0.0);
    for h in 0..heads {
        let lo = h * dh;
        let qh = &q[lo..lo + dh];
        let p = &mut probs[h * (t + 1)..(h + 1) * (t + 1)];
        let mut max = f64::NEG_INFINITY;
        for j in 0..=t {
            let s = dot(qh, &keys[j * dm + lo..j * dm + lo + dh]) * scale;
            p[j] = s;
            max = max.max(s);
        }
        let mut z = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            z += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= z;
        }
        let out = &mut ctx[lo..lo + dh];
        for j in 0..=t {
            axpy(p[j], &values[j * dm + lo..j * dm + lo + dh], out);
        }
    }
}

fn head_logits(model: &Model, hidden: &[f64]) -> StepLogits {
    let fields = (0..NUM_FIELDS)
        .map(|d| {
            let table = model.head_table(d);
            let bias = &model.params.head_bias[d];
            (0..table.rows).map(|v| dot(table.row(v), hidden) + bias.data[v]).collect()
        })
        .collect();
    StepLogits { fields }
}

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    ffn_mask: Option<Vec<f64>>,
}

struct ForwardCache {
    steps: usize,
    embed_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_xhat: Vec<f64>,
    final_rstd: Vec<f64>,
    hidden: Vec<f64>,
}

/// Offset of position `t`'s probabilities in the triangular buffer.
fn prob_offset(t: usize, heads: usize) -> usize {
    heads * t * (t + 1) / 2
}

fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

impl Model {
    pub(crate) fn check_rows(&self, rows: &[Row]) -> Result<()> {
        if rows.len() > self.config.max_steps {
            return Err(Error::SequenceTooLong {
                len: rows.len(),
                max: self.config.max_steps,
            });
        }
        rows.iter().try_for_each(|r| self.check_row(r))
    }

    /// Summed field embeddings plus the position embedding (0-based position).
    pub fn embed_step(&self, row: &Row, position: usize) -> Result<Vec<f64>> {
        self.check_row(row)?;
        if position >= self.config.max_steps {
            return Err(Error::SequenceTooLong {
                len: position + 1,
                max: self.config.max_steps,
            });
        }
        let mut out = vec![0.0; self.config.d_model];
        self.embed_into(row, position, &mut out);
        Ok(out)
    }

    fn embed_into(&self, row: &Row, position: usize, out: &mut [f64]) {
        out.copy_from_slice(self.params.pos_embed.row(position));
        for (d, &v) in row.iter().enumerate() {
            axpy(1.0, self.params.field_embed[d].row(v as usize), out);
        }
    }

    fn forward_cached(&self, rows: &[Row], mut rng: Option<&mut ChaCha8Rng>) -> ForwardCache {
        let cfg = &self.config;
        let dm = cfg.d_model;
        let dff = cfg.d_ff;
        let heads = cfg.heads;
        let steps = rows.len();
        let p_drop = if rng.is_some() { cfg.dropout } else { 0.0 };
        let mut masks = |len: usize| -> Option<Vec<f64>> {
            match rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => Some(dropout_mask(len, p_drop, r)),
                _ => None,
            }
        };

        let mut x = vec![0.0; steps * dm];
        for (t, row) in rows.iter().enumerate() {
            self.embed_into(row, t, &mut x[t * dm..(t + 1) * dm]);
        }
        let embed_mask = masks(steps * dm);
        if let Some(m) = &embed_mask {
            x.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &self.params.layers {
            let mut ln1_xhat = vec![0.0; steps * dm];
            let mut ln1_rstd = vec![0.0; steps];
            let mut a = vec![0.0; steps * dm];
            let mut q = vec![0.0; steps * dm];
            let mut k = vec![0.0; steps * dm];
            let mut v = vec![0.0; steps * dm];
            for t in 0..steps {
                let r = t * dm..(t + 1) * dm;
                ln1_rstd[t] = normalize(&x[r.clone()], &mut ln1_xhat[r.clone()]);
                affine(&ln1_xhat[r.clone()], &lp.ln1_gain, &lp.ln1_bias, &mut a[r.clone()]);
                linear(&lp.wq, None, &a[r.clone()], &mut q[r.clone()]);
                linear(&lp.wk, None, &a[r.clone()], &mut k[r.clone()]);
                linear(&lp.wv, None, &a[r.clone()], &mut v[r.clone()]);
            }
            let mut probs = vec![0.0; prob_offset(steps, heads)];
            let mut ctx = vec![0.0; steps * dm];
            for t in 0..steps {
                let r = t * dm..(t + 1) * dm;
                let po = prob_offset(t, heads);
                attend(
                    &q[r.clone()],
                    &k[..(t + 1) * dm],
                    &v[..(t + 1) * dm],
                    t,
                    heads,
                    &mut probs[po..po + heads * (t + 1)],
                    &mut ctx[r],
                );
            }
            let attn_mask = masks(steps * dm);
            let mut o = vec![0.0; dm];
            for t in 0..steps {
                let r = t * dm..(t + 1) * dm;
                linear(&lp.wo, None, &ctx[r.clone()], &mut o);
                if let Some(m) = &attn_mask {
                    o.iter_mut().zip(&m[r.clone()]).for_each(|(a, b)| *a *= b);
                }
                axpy(1.0, &o, &mut x[r]);
            }

            let mut ln2_xhat = vec![0.0; steps * dm];
            let mut ln2_rstd = vec![0.0; steps];
            let mut b = vec![0.0; steps * dm];
            let mut u = vec![0.0; steps * dff];
            let mut g = vec![0.0; steps * dff];
            let ffn_mask = masks(steps * dm);
            let mut f = vec![0.0; dm];
            for t in 0..steps {
                let r = t * dm..(t + 1) * dm;
                let rf = t * dff..(t + 1) * dff;
                ln2_rstd[t] = normalize(&x[r.clone()], &mut ln2_xhat[r.clone()]);
                affine(&ln2_xhat[r.clone()], &lp.ln2_gain, &lp.ln2_bias, &mut b[r.clone()]);
                linear(&lp.w1, Some(&lp.b1), &b[r.clone()], &mut u[rf.clone()]);
                for (gi, ui) in g[rf.clone()].iter_mut().zip(&u[rf.clone()]) {
                    *gi = gelu(*ui);
                }
                linear(&lp.w2, Some(&lp.b2), &g[rf], &mut f);
                if let Some(m) = &ffn_mask {
                    f.iter_mut().zip(&m[r.clone()]).for_each(|(a, b)| *a *= b);
                }
                axpy(1.0, &f, &mut x[r]);
            }
            layers.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                attn_mask,
                ln2_xhat,
                ln2_rstd,
                b,
                u,
                g,
                ffn_mask,
            });
        }

        let mut final_xhat = vec![0.0; steps * dm];
        let mut final_rstd = vec![0.0; steps];
        let mut hidden = vec![0.0; steps * dm];
        for t in 0..steps {
            let r = t * dm..(t + 1) * dm;
            final_rstd[t] = normalize(&x[r.clone()], &mut final_xhat[r.clone()]);
            affine(&final_xhat[r.clone()], &self.params.final_gain, &self.params.final_bias, &mut hidden[r]);
        }
        ForwardCache {
            steps,
            embed_mask,
            layers,
            final_xhat,
            final_rstd,
            hidden,
        }
    }

    /// Logits at every step of `rows`. Step `s` sees only rows `..=s`.
    pub fn forward(&self, rows: &[Row]) -> Result<Vec<StepLogits>> {
        self.check_rows(rows)?;
        let dm = self.config.d_model;
        let cache = self.forward_cached(rows, None);
        Ok((0..cache.steps)
            .map(|t| head_logits(self, &cache.hidden[t * dm..(t + 1) * dm]))
            .collect())
    }

    /// Logits at the last step only, recomputing the whole prefix.
    pub fn forward_last(&self, rows: &[Row]) -> Result<StepLogits> {
        self.check_rows(rows)?;
        let Some(last) = rows.len().checked_sub(1) else {
            return Err(Error::EmptyGrid);
        };
        let dm = self.config.d_model;
        let cache = self.forward_cached(rows, None);
        Ok(head_logits(self, &cache.hidden[last * dm..(last + 1) * dm]))
    }

    /// Teacher-forced cross-entropy statistics: logits at step `t` score
    /// row `t + 1`; pad targets are skipped.
    pub fn loss_stats(&self, rows: &[Row]) -> Result<LossStats> {
        self.check_rows(rows)?;
        let cache = self.forward_cached(rows, None);
        Ok(self.cross_entropy(rows, &cache, None))
    }

    /// Mean teacher-forced cross-entropy over the grid's non-pad targets.
    pub fn loss(&self, grid: &TokenGrid) -> Result<f64> {
        let stats = self.loss_stats(grid.rows())?;
        if stats.cells() == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(stats.mean())
    }

    /// Loss statistics plus the gradient of the summed (not averaged)
    /// cross-entropy. Passing `dropout` enables dropout with that RNG.
    pub fn loss_and_grad(&self, rows: &[Row], dropout: Option<&mut ChaCha8Rng>) -> Result<(LossStats, Params)> {
        self.check_rows(rows)?;
        let cache = self.forward_cached(rows, dropout);
        let mut grads = self.params.zeros_like();
        let mut dhidden = vec![0.0; rows.len() * self.config.d_model];
        let stats = self.cross_entropy(rows, &cache, Some((&mut grads, &mut dhidden)));
        self.backward(rows, &cache, dhidden, &mut grads);
        Ok((stats, grads))
    }

    fn cross_entropy(
        &self,
        rows: &[Row],
        cache: &ForwardCache,
        mut grad: Option<(&mut Params, &mut Vec<f64>)>,
    ) -> LossStats {
        let dm = self.config.d_model;
        let pads = self.config.vocab.pad_row();
        let tied = self.config.tie_embeddings;
        let mut stats = LossStats::default();
        let mut logits = Vec::new();
        for t in 0..rows.len().saturating_sub(1) {
            let h = &cache.hidden[t * dm..(t + 1) * dm];
            let target_row = &rows[t + 1];
            for d in 0..NUM_FIELDS {
                let target = target_row[d];
                if target == pads[d] {
                    continue;
                }
                let table = self.head_table(d);
                let bias = &self.params.head_bias[d];
                logits.clear();
                logits.extend((0..table.rows).map(|v| dot(table.row(v), h) + bias.data[v]));
                let (mut best, mut max) = (0usize, f64::NEG_INFINITY);
                for (v, &l) in logits.iter().enumerate() {
                    if l > max {
                        max = l;
                        best = v;
                    }
                }
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                let lse = max + z.ln();
                stats.sum[d] += lse - logits[target as usize];
                stats.count[d] += 1;
                stats.correct[d] += usize::from(best == target as usize);

                if let Some((grads, dhidden)) = grad.as_mut() {
                    let dh = &mut dhidden[t * dm..(t + 1) * dm];
                    for v in 0..table.rows {
                        let mut g = (logits[v] - lse).exp();
                        if v == target as usize {
                            g -= 1.0;
                        }
                        grads.head_bias[d].data[v] += g;
                        let gw = if tied {
                            &mut grads.field_embed[d]
                        } else {
                            &mut grads.head_weight[d]
                        };
                        axpy(g, h, gw.row_mut(v));
                        axpy(g, table.row(v), dh);
                    }
                }
            }
        }
        stats
    }

    fn backward(&self, rows: &[Row], cache: &ForwardCache, dhidden: Vec<f64>, grads: &mut Params) {
        let cfg = &self.config;
        let dm = cfg.d_model;
        let dff = cfg.d_ff;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let steps = cache.steps;

        let mut dx = vec![0.0; steps * dm];
        for t in 0..steps {
            let r = t * dm..(t + 1) * dm;
            layer_norm_backward(
                &cache.final_xhat[r.clone()],
                cache.final_rstd[t],
                &self.params.final_gain,
                &dhidden[r.clone()],
                &mut grads.final_gain,
                &mut grads.final_bias,
                &mut dx[r],
            );
        }

        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &self.params.layers[li];
            let lg = &mut grads.layers[li];

            // feed-forward block
            let mut df = vec![0.0; dm];
            let mut dg = vec![0.0; dff];
            let mut db = vec![0.0; dm];
            for t in 0..steps {
                let r = t * dm..(t + 1) * dm;
                let rf = t * dff..(t + 1) * dff;
                df.copy_from_slice(&dx[r.clone()]);
                if let Some(m) = &lc.ffn_mask {
                    df.iter_mut().zip(&m[r.clone()]).for_each(|(a, b)| *a *= b);
                }
                axpy(1.0, &df, &mut lg.b2.data);
                dg.iter_mut().for_each(|x| *x = 0.0);
                linear_backward(&lp.w2, &lc.g[rf.clone()], &df, &mut lg.w2, Some(&mut dg));
                for (gi, ui) in dg.iter_mut().zip(&lc.u[rf]) {
                    *gi *= gelu_grad(*ui);
                }
                axpy(1.0, &dg, &mut lg.b1.data);
                db.iter_mut().for_each(|x| *x = 0.0);
                linear_backward(&lp.w1, &lc.b[r.clone()], &dg, &mut lg.w1, Some(&mut db));
                layer_norm_backward(
                    &lc.ln2_xhat[r.clone()],
                    lc.ln2_rstd[t],
                    &lp.ln2_gain,
                    &db,
                    &mut lg.ln2_gain,
                    &mut lg.ln2_bias,
                    &mut dx[r],
                );
            }

            // attention block
            let mut dctx = vec![0.0; steps * dm];
            let mut dout = vec![0.0; dm];
            for t in 0..steps {
                let r = t * dm..(t + 1) * dm;
                dout.copy_from_slice(&dx[r.clone()]);
                if let Some(m) = &lc.attn_mask {
                    dout.iter_mut().zip(&m[r.clone()]).for_each(|(a, b)| *a *= b);
                }
                linear_backward(&lp.wo, &lc.ctx[r.clone()], &dout, &mut lg.wo, Some(&mut dctx[r]));
            }
            let mut dq = vec![0.0; steps * dm];
            let mut dk = vec![0.0; steps * dm];
            let mut dv = vec![0.0; steps * dm];
            let mut dp = Vec::with_capacity(steps);
            for t in 0..steps {
                let po = prob_offset(t, heads);
                for h in 0..heads {
                    let lo = h * dh;
                    let p = &lc.probs[po + h * (t + 1)..po + (h + 1) * (t + 1)];
                    let dc = &dctx[t * dm + lo..t * dm + lo + dh];
                    dp.clear();
                    dp.extend((0..=t).map(|j| dot(dc, &lc.v[j * dm + lo..j * dm + lo + dh])));
                    let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=t {
                        axpy(p[j], dc, &mut dv[j * dm + lo..j * dm + lo + dh]);
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds != 0.0 {
                            let (qt, kj) = (t * dm + lo, j * dm + lo);
                            axpy(ds, &lc.k[kj..kj + dh], &mut dq[qt..qt + dh]);
                            axpy(ds, &lc.q[qt..qt + dh], &mut dk[kj..kj + dh]);
                        }
                    }
                }
            }
            let mut da = vec![0.0; dm];
            for t in 0..steps {
                let r = t * dm..(t + 1) * dm;
                da.iter_mut().for_each(|x| *x = 0.0);
                let a = &lc.a[r.clone()];
                linear_backward(&lp.wq, a, &dq[r.clone()], &mut lg.wq, Some(&mut da));
                linear_backward(&lp.wk, a, &dk[r.clone()], &mut lg.wk, Some(&mut da));
                linear_backward(&lp.wv, a, &dv[r.clone()], &mut lg.wv, Some(&mut da));
                layer_norm_backward(
                    &lc.ln1_xhat[r.clone()],
                    lc.ln1_rstd[t],
                    &lp.ln1_gain,
                    &da,
                    &mut lg.ln1_gain,
                    &mut lg.ln1_bias,
                    &mut dx[r],
                );
            }
        }

        if let Some(m) = &cache.embed_mask {
            dx.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }
        for (t, row) in rows.iter().enumerate() {
            let g = &dx[t * dm..(t + 1) * dm];
            axpy(1.0, g, grads.pos_embed.row_mut(t));
            for (d, &v) in row.iter().enumerate() {
                axpy(1.0, g, grads.field_embed[d].row_mut(v as usize));
            }
        }
    }

    pub fn incremental(&self) -> IncrementalState<'_> {
        IncrementalState {
            model: self,
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            steps: 0,
        }
    }
}

/// Step-by-step decoding with cached keys and values. Produces the same
/// logits as [`Model::forward`] on the accumulated rows.
pub struct IncrementalState<'m> {
    model: &'m Model,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    steps: usize,
}

impl IncrementalState<'_> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Appends `row` and returns the logits at its step.
    pub fn step(&mut self, row: &Row) -> Result<StepLogits> {
        let model = self.model;
        let cfg = &model.config;
        if self.steps >= cfg.max_steps {
            return Err(Error::SequenceTooLong {
                len: self.steps + 1,
                max: cfg.max_steps,
            });
        }
        model.check_row(row)?;
        let dm = cfg.d_model;
        let t = self.steps;
        let mut x = vec![0.0; dm];
        model.embed_into(row, t, &mut x);

        let mut xhat = vec![0.0; dm];
        let mut a = vec![0.0; dm];
        let mut q = vec![0.0; dm];
        let mut kv = vec![0.0; dm];
        let mut probs = vec![0.0; cfg.heads * (t + 1)];
        let mut ctx = vec![0.0; dm];
        let mut o = vec![0.0; dm];
        let mut u = vec![0.0; cfg.d_ff];
        for (li, lp) in model.params.layers.iter().enumerate() {
            normalize(&x, &mut xhat);
            affine(&xhat, &lp.ln1_gain, &lp.ln1_bias, &mut a);
            linear(&lp.wq, None, &a, &mut q);
            linear(&lp.wk, None, &a, &mut kv);
            self.keys[li].extend_from_slice(&kv);
            linear(&lp.wv, None, &a, &mut kv);
            self.values[li].extend_from_slice(&kv);
            attend(&q, &self.keys[li], &self.values[li], t, cfg.heads, &mut probs, &mut ctx);
            linear(&lp.wo, None, &ctx, &mut o);
            axpy(1.0, &o, &mut x);

            normalize(&x, &mut xhat);
            affine(&xhat, &lp.ln2_gain, &lp.ln2_bias, &mut a);
            linear(&lp.w1, Some(&lp.b1), &a, &mut u);
            u.iter_mut().for_each(|v| *v = gelu(*v));
            linear(&lp.w2, Some(&lp.b2), &u, &mut o);
            axpy(1.0, &o, &mut x);
        }
        normalize(&x, &mut xhat);
        affine(&xhat, &model.params.final_gain, &model.params.final_bias, &mut a);
        self.steps += 1;
        Ok(head_logits(model, &a))
    }
}

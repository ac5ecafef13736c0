//! Training, evaluation, and ablation drivers.
//!
//! One training step: crop a 2+2 batch, forward both branches, supervised
//! loss on labeled crops, cross-pseudo-supervision on all crops, then the
//! consistency term on confidence-selected unlabeled features against anchor
//! embeddings, with ramped weights. Gradients are assembled analytically and
//! applied with SGD; labeled crops then refresh the feature pool.
//!
//! The step is split into an explicit [`StepContext`] holding everything the
//! gradient treats as constant (ground truth, frozen pseudo-labels, selected
//! pixel positions, anchors, ramped weights) so that [`context_loss`] is a
//! pure function of the parameters and [`context_grads`] can be verified
//! against finite differences.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::coral::{self, FeatureMatrix};
use crate::data::{self, Crop, SegSample, UnlabeledImage};
use crate::losses::{self, argmax_row, LossWeights, SimilarityKind};
use crate::metrics::{self, BinaryMask};
use crate::model::{init_model, Arch, BranchId, DualModelState, ForwardOutput};
use crate::numerics::{softmax_rows, Matrix, LOG_EPS};
use crate::pool::{init_pool, sample_unlabeled, FeaturePool};
use crate::{subseed, Error, Result};

/// How the consistency term is wired for a run, derived from the ablation
/// switches: the term is active when either component is on, the similarity
/// falls back to cosine without the correlation module, and anchors come from
/// random labeled features without the pool.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyPlan {
    pub active: bool,
    pub kind: SimilarityKind,
    pub use_pool: bool,
}

impl ConsistencyPlan {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ConsistencyPlan {
            active: cfg.ccm_on || cfg.dfp_on,
            kind: if cfg.ccm_on {
                cfg.similarity
            } else {
                SimilarityKind::Cosine
            },
            use_pool: cfg.dfp_on,
        }
    }
}

/// Everything one step's gradient treats as constant.
pub struct StepContext {
    pub crops: Vec<Crop>,
    /// Ground truth per crop, present for labeled crops.
    pub truth: Vec<Option<Vec<usize>>>,
    /// Frozen argmax pseudo-labels of the main branch, per crop.
    pub pseudo_main: Vec<Vec<usize>>,
    /// Frozen argmax pseudo-labels of the auxiliary branch, per crop.
    pub pseudo_aux: Vec<Vec<usize>>,
    /// (crop index, pixel index) of each selected unlabeled feature row.
    pub selected: Vec<(usize, usize)>,
    pub anchors: Option<FeatureMatrix>,
    pub kind: SimilarityKind,
    pub lambda_c: f64,
    pub lambda_d: f64,
}

impl StepContext {
    pub fn consistency_active(&self) -> bool {
        self.anchors.is_some() && !self.selected.is_empty()
    }
}

/// Loss values for one step; `consist` is logged unweighted.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub sup: f64,
    pub cps: f64,
    pub consist: f64,
    pub total: f64,
}

/// Forwards the batch and freezes every constant of the step: pseudo-labels,
/// the confidence-ranked unlabeled selection, and the anchor draw.
pub fn build_step_context(
    state: &DualModelState,
    crops: Vec<Crop>,
    cfg: &RunConfig,
    plan: ConsistencyPlan,
    pool: Option<&mut FeaturePool>,
    anchor_rng: &mut ChaCha8Rng,
    t: usize,
) -> Result<(StepContext, Vec<ForwardOutput>)> {
    let outs: Vec<ForwardOutput> = crops
        .iter()
        .map(|c| state.forward(&c.image))
        .collect::<Result<_>>()?;

    let truth: Vec<Option<Vec<usize>>> = crops
        .iter()
        .map(|c| {
            c.mask
                .as_ref()
                .map(|m| m.iter().map(|v| *v as usize).collect())
        })
        .collect();
    let pseudo_main: Vec<Vec<usize>> = outs
        .iter()
        .map(|o| (0..o.main.p.rows()).map(|r| argmax_row(o.main.p.row(r))).collect())
        .collect();
    let pseudo_aux: Vec<Vec<usize>> = outs
        .iter()
        .map(|o| (0..o.aux.p.rows()).map(|r| argmax_row(o.aux.p.row(r))).collect())
        .collect();

    let mut selected = Vec::new();
    let mut anchors = None;
    if plan.active {
        let unl: Vec<usize> = (0..crops.len()).filter(|&c| crops[c].mask.is_none()).collect();
        if !unl.is_empty() {
            let s = crops[unl[0]].image.h * crops[unl[0]].image.w;
            let concat = |pick: &dyn Fn(&ForwardOutput) -> &Matrix| -> Matrix {
                let cols = pick(&outs[unl[0]]).cols();
                let mut m = Matrix::zeros(unl.len() * s, cols);
                for (slot, &c) in unl.iter().enumerate() {
                    let src = pick(&outs[c]);
                    for px in 0..s {
                        for col in 0..cols {
                            m.set(slot * s + px, col, src.get(px, col));
                        }
                    }
                }
                m
            };
            let p1 = concat(&|o: &ForwardOutput| &o.main.p);
            let p2 = concat(&|o: &ForwardOutput| &o.aux.p);
            let zm = concat(&|o: &ForwardOutput| &o.main.z);
            let za = concat(&|o: &ForwardOutput| &o.aux.z);
            let sel = sample_unlabeled(&p1, &p2, &zm, &za, cfg.top_per_class)?;
            selected = sel
                .positions
                .iter()
                .map(|&p| (unl[p / s], p % s))
                .collect();
        }
        if !selected.is_empty() {
            anchors = if plan.use_pool {
                match pool {
                    Some(pool) if pool.ready() => {
                        Some(pool.sample_anchors(cfg.anchors_per_class, cfg.low_conf_fraction)?.0)
                    }
                    _ => None,
                }
            } else {
                random_labeled_anchors(cfg, &crops, &outs, &truth, anchor_rng)
            };
        }
    }

    let weights = LossWeights::new(cfg.lambda_c, cfg.lambda_d, cfg.beta, t, cfg.iters)?;
    let (lambda_c, lambda_d) = losses::rampup_weight(&weights);
    Ok((
        StepContext {
            crops,
            truth,
            pseudo_main,
            pseudo_aux,
            selected,
            anchors,
            kind: plan.kind,
            lambda_c,
            lambda_d,
        },
        outs,
    ))
}

/// Anchor fallback without the pool: per class, draw `j` labeled pixels of
/// that true class uniformly (no correctness filter, no fusion) and use the
/// mean of the two branch projections. Returns `None` when some class has no
/// labeled pixel in the batch.
fn random_labeled_anchors(
    cfg: &RunConfig,
    crops: &[Crop],
    outs: &[ForwardOutput],
    truth: &[Option<Vec<usize>>],
    rng: &mut ChaCha8Rng,
) -> Option<FeatureMatrix> {
    let mut per_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cfg.classes];
    for (c, t) in truth.iter().enumerate() {
        if let Some(labels) = t {
            for (px, &y) in labels.iter().enumerate() {
                per_class[y].push((c, px));
            }
        }
    }
    if per_class.iter().any(|v| v.is_empty()) {
        return None;
    }
    let mut rows = Vec::with_capacity(cfg.anchors_per_class * cfg.classes);
    for candidates in &per_class {
        let picks: Vec<(usize, usize)> = if candidates.len() >= cfg.anchors_per_class {
            let mut pool: Vec<(usize, usize)> = candidates.clone();
            for i in 0..cfg.anchors_per_class {
                let k = rng.gen_range(i..pool.len());
                pool.swap(i, k);
            }
            pool.truncate(cfg.anchors_per_class);
            pool
        } else {
            (0..cfg.anchors_per_class)
                .map(|_| candidates[rng.gen_range(0..candidates.len())])
                .collect()
        };
        for (c, px) in picks {
            let zm = outs[c].main.z.row(px);
            let za = outs[c].aux.z.row(px);
            rows.push(zm.iter().zip(za).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<f64>>());
        }
    }
    let _ = crops;
    FeatureMatrix::from_rows(&rows).ok()
}

fn gather_rows(outs: &[ForwardOutput], selected: &[(usize, usize)], which: BranchId) -> Vec<Vec<f64>> {
    selected
        .iter()
        .map(|&(c, px)| {
            let z = match which {
                BranchId::Main => &outs[c].main.z,
                BranchId::Aux => &outs[c].aux.z,
            };
            z.row(px).to_vec()
        })
        .collect()
}

fn step_losses(ctx: &StepContext, outs: &[ForwardOutput]) -> Result<StepLosses> {
    let mut sup = 0.0;
    let mut n_lab = 0usize;
    let mut cps = 0.0;
    for (c, out) in outs.iter().enumerate() {
        if let Some(y) = &ctx.truth[c] {
            sup += losses::label_ce(&out.main.p, y) + losses::label_ce(&out.aux.p, y);
            n_lab += 1;
        }
        cps += losses::label_ce(&out.main.p, &ctx.pseudo_aux[c])
            + losses::label_ce(&out.aux.p, &ctx.pseudo_main[c]);
    }
    if n_lab > 0 {
        sup /= n_lab as f64;
    }
    cps /= outs.len() as f64;

    let consist = if ctx.consistency_active() {
        let zm = gather_rows(outs, &ctx.selected, BranchId::Main);
        let za = gather_rows(outs, &ctx.selected, BranchId::Aux);
        losses::consistency_term(
            &FeatureMatrix::from_rows(&zm)?,
            &FeatureMatrix::from_rows(&za)?,
            ctx.anchors.as_ref().unwrap(),
            ctx.kind,
        )?
    } else {
        0.0
    };
    Ok(StepLosses {
        sup,
        cps,
        consist,
        total: sup + ctx.lambda_c * cps + ctx.lambda_d * consist,
    })
}

/// Total loss of the step as a pure function of the parameters, holding the
/// context's constants fixed. This is the route finite differences check.
pub fn context_loss(state: &DualModelState, ctx: &StepContext) -> Result<StepLosses> {
    let outs: Vec<ForwardOutput> = ctx
        .crops
        .iter()
        .map(|c| state.forward(&c.image))
        .collect::<Result<_>>()?;
    step_losses(ctx, &outs)
}

/// Adds the logit gradient of `coeff * -ln(q[y] + eps)` through the softmax:
/// `coeff * r * (q_k - [k == y])` with `r = q_y / (q_y + eps)`.
fn add_ce_logit_grad(d_logits: &mut Matrix, q: &Matrix, px: usize, y: usize, coeff: f64) {
    let q_y = q.get(px, y);
    let r = q_y / (q_y + LOG_EPS);
    for k in 0..q.cols() {
        let delta = if k == y { 1.0 } else { 0.0 };
        let v = d_logits.get(px, k) + coeff * r * (q.get(px, k) - delta);
        d_logits.set(px, k, v);
    }
}

/// Analytic gradients of [`context_loss`] for both branches.
pub fn context_grads(
    state: &DualModelState,
    ctx: &StepContext,
    outs: &[ForwardOutput],
) -> Result<(StepLosses, Vec<f64>, Vec<f64>)> {
    let n_all = outs.len();
    let n_lab = ctx.truth.iter().filter(|t| t.is_some()).count();
    let classes = state.arch.classes;
    let proj = state.arch.proj_dim;

    let mut d_logits_main: Vec<Matrix> = Vec::with_capacity(n_all);
    let mut d_logits_aux: Vec<Matrix> = Vec::with_capacity(n_all);
    let mut d_z_main: Vec<Matrix> = Vec::with_capacity(n_all);
    let mut d_z_aux: Vec<Matrix> = Vec::with_capacity(n_all);
    for out in outs {
        let s = out.main.p.rows();
        d_logits_main.push(Matrix::zeros(s, classes));
        d_logits_aux.push(Matrix::zeros(s, classes));
        d_z_main.push(Matrix::zeros(s, proj));
        d_z_aux.push(Matrix::zeros(s, proj));
    }

    for (c, out) in outs.iter().enumerate() {
        let s = out.main.p.rows();
        if let Some(y) = &ctx.truth[c] {
            let w_s = 1.0 / (n_lab as f64 * s as f64);
            for px in 0..s {
                add_ce_logit_grad(&mut d_logits_main[c], &out.main.p, px, y[px], w_s);
                add_ce_logit_grad(&mut d_logits_aux[c], &out.aux.p, px, y[px], w_s);
            }
        }
        let w_c = ctx.lambda_c / (n_all as f64 * s as f64);
        for px in 0..s {
            add_ce_logit_grad(&mut d_logits_main[c], &out.main.p, px, ctx.pseudo_aux[c][px], w_c);
            add_ce_logit_grad(&mut d_logits_aux[c], &out.aux.p, px, ctx.pseudo_main[c][px], w_c);
        }
    }

    let consist = if ctx.consistency_active() {
        let zm = gather_rows(outs, &ctx.selected, BranchId::Main);
        let za = gather_rows(outs, &ctx.selected, BranchId::Aux);
        let (value, g_zm, g_za) =
            consistency_with_grad(&zm, &za, ctx.anchors.as_ref().unwrap(), ctx.kind)?;
        for (r, &(c, px)) in ctx.selected.iter().enumerate() {
            for k in 0..proj {
                let vm = d_z_main[c].get(px, k) + ctx.lambda_d * g_zm[r][k];
                d_z_main[c].set(px, k, vm);
                let va = d_z_aux[c].get(px, k) + ctx.lambda_d * g_za[r][k];
                d_z_aux[c].set(px, k, va);
            }
        }
        value
    } else {
        0.0
    };

    let n = state.arch.param_count();
    let mut g_main = vec![0.0; n];
    let mut g_aux = vec![0.0; n];
    for (c, out) in outs.iter().enumerate() {
        let gm = state.backward(BranchId::Main, out, &d_logits_main[c], &d_z_main[c])?;
        let ga = state.backward(BranchId::Aux, out, &d_logits_aux[c], &d_z_aux[c])?;
        for i in 0..n {
            g_main[i] += gm[i];
            g_aux[i] += ga[i];
        }
    }

    let mut values = step_losses(ctx, outs)?;
    values.consist = consist;
    values.total = values.sup + ctx.lambda_c * values.cps + ctx.lambda_d * consist;
    Ok((values, g_main, g_aux))
}

/// Consistency value plus its gradient with respect to both branches'
/// selected embeddings. Anchors are constants. The value is computed through
/// the same library routines the loss reports use.
pub fn consistency_with_grad(
    zm: &[Vec<f64>],
    za: &[Vec<f64>],
    anchors: &FeatureMatrix,
    kind: SimilarityKind,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let zm_mat = FeatureMatrix::from_rows(zm)?;
    let za_mat = FeatureMatrix::from_rows(za)?;
    let m = zm_mat.count();
    let n = anchors.count();
    let d = anchors.dim();

    // Row-softmaxed similarity distributions A (main) and B (aux), with the
    // per-entry gradients of CE(A, B) pushed back through the softmax.
    let (value, a, b, sign) = match kind {
        SimilarityKind::Coral => {
            let corr_mp = coral::correlation_matrix(&zm_mat, anchors)?;
            let corr_ap = coral::correlation_matrix(&za_mat, anchors)?;
            let value = coral::consistency_loss(&corr_mp, &corr_ap)?;
            let a = softmax_rows(&negate(corr_mp.values()));
            let b = softmax_rows(&negate(corr_ap.values()));
            (value, a, b, -1.0)
        }
        SimilarityKind::Cosine => {
            let sim_m = losses::cosine_similarity_matrix(&zm_mat, anchors)?;
            let sim_a = losses::cosine_similarity_matrix(&za_mat, anchors)?;
            let a = softmax_rows(&sim_m);
            let b = softmax_rows(&sim_a);
            let value = crate::numerics::cross_entropy_rows(&a, &b)?;
            (value, a, b, 1.0)
        }
    };

    // d value / d similarity-score, per matrix entry. `sign` folds in the
    // negation used for distances.
    let mut g_score_m = Matrix::zeros(m, n);
    let mut g_score_a = Matrix::zeros(m, n);
    let inv_m = 1.0 / m as f64;
    for r in 0..m {
        // dL/dA = -ln(B + eps)/m; dL/dB = -A/((B + eps) m).
        let ga_row: Vec<f64> = (0..n).map(|k| -inv_m * (b.get(r, k) + LOG_EPS).ln()).collect();
        let gb_row: Vec<f64> = (0..n)
            .map(|k| -inv_m * a.get(r, k) / (b.get(r, k) + LOG_EPS))
            .collect();
        let dot_a: f64 = (0..n).map(|k| ga_row[k] * a.get(r, k)).sum();
        let dot_b: f64 = (0..n).map(|k| gb_row[k] * b.get(r, k)).sum();
        for k in 0..n {
            g_score_m.set(r, k, sign * a.get(r, k) * (ga_row[k] - dot_a));
            g_score_a.set(r, k, sign * b.get(r, k) * (gb_row[k] - dot_b));
        }
    }

    let grad_rows = |z: &FeatureMatrix, g_score: &Matrix| -> Vec<Vec<f64>> {
        (0..m)
            .map(|r| {
                let row = z.row(r);
                let mut grad = vec![0.0; d];
                match kind {
                    SimilarityKind::Coral => {
                        // D = ||uu^T - ww^T||_F^2 / (4 c'^2 (c'-1)^2) with u, w
                        // centered; dD/du = 4 kappa (u|u|^2 - w(w.u)) / (c'-1)^2,
                        // then re-centered (analytically already zero-mean).
                        let kappa = 1.0 / (4.0 * (d * d) as f64);
                        let scale = 4.0 * kappa / ((d - 1) * (d - 1)) as f64;
                        let u = centered(row);
                        let uu: f64 = u.iter().map(|v| v * v).sum();
                        for k in 0..n {
                            let g = g_score.get(r, k);
                            if g == 0.0 {
                                continue;
                            }
                            let w = centered(anchors.row(k));
                            let wu: f64 = w.iter().zip(&u).map(|(x, y)| x * y).sum();
                            for i in 0..d {
                                grad[i] += g * scale * (u[i] * uu - w[i] * wu);
                            }
                        }
                        let mean = grad.iter().sum::<f64>() / d as f64;
                        for g in &mut grad {
                            *g -= mean;
                        }
                    }
                    SimilarityKind::Cosine => {
                        let norm_u = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm_u < 1e-12 {
                            return grad;
                        }
                        let u_hat: Vec<f64> = row.iter().map(|v| v / norm_u).collect();
                        for k in 0..n {
                            let g = g_score.get(r, k);
                            if g == 0.0 {
                                continue;
                            }
                            let w = anchors.row(k);
                            let norm_w = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if norm_w < 1e-12 {
                                continue;
                            }
                            let w_hat: Vec<f64> = w.iter().map(|v| v / norm_w).collect();
                            let cos: f64 = u_hat.iter().zip(&w_hat).map(|(x, y)| x * y).sum();
                            for i in 0..d {
                                grad[i] += g * (w_hat[i] - cos * u_hat[i]) / norm_u;
                            }
                        }
                    }
                }
                grad
            })
            .collect()
    };

    let g_zm = grad_rows(&zm_mat, &g_score_m);
    let g_za = grad_rows(&za_mat, &g_score_a);
    Ok((value, g_zm, g_za))
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn negate(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, -m.get(r, c));
        }
    }
    out
}

/// One row of the loss-curve CSV.
#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub iter: usize,
    pub l_s: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub rows: Vec<LossRow>,
    pub state: DualModelState,
    pub pool: Option<FeaturePool>,
}

/// Runs the full training loop on the train portion of a dataset. The
/// labeled/unlabeled split is drawn here from the config seed; a fraction of
/// 1.0 trains fully supervised.
pub fn train(cfg: &RunConfig, all_train: &[SegSample]) -> Result<TrainOutput> {
    let (labeled, unlabeled): (Vec<SegSample>, Vec<UnlabeledImage>) =
        if cfg.labeled_fraction >= 1.0 {
            (all_train.to_vec(), Vec::new())
        } else {
            data::split(all_train, cfg.labeled_fraction, cfg.seed)?
        };
    if labeled.is_empty() {
        return Err(Error::InvalidArg("no labeled samples".into()));
    }
    let instance_index: BTreeMap<usize, usize> = labeled
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i))
        .collect();

    let arch = Arch::new(cfg.hidden, cfg.classes, cfg.proj_dim);
    let mut state = init_model(
        arch,
        subseed(cfg.seed, "model-main"),
        subseed(cfg.seed, "model-aux"),
    )?;
    let plan = ConsistencyPlan::from_config(cfg);
    let mut pool = if plan.active && plan.use_pool {
        Some(init_pool(
            labeled.len(),
            cfg.pool_slots,
            cfg.classes,
            cfg.proj_dim,
            cfg.alpha,
            subseed(cfg.seed, "pool"),
        )?)
    } else {
        None
    };
    let mut crop_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "crops"));
    let mut anchor_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "anchors"));

    let mut rows = Vec::with_capacity(cfg.iters);
    for t in 0..cfg.iters {
        let batch = data::crop_batch(&labeled, &unlabeled, cfg.crop, &mut crop_rng)?;
        let (ctx, outs) =
            build_step_context(&state, batch, cfg, plan, pool.as_mut(), &mut anchor_rng, t)?;
        let (values, g_main, g_aux) = context_grads(&state, &ctx, &outs)?;
        if !values.total.is_finite() {
            return Err(Error::Diverged(format!("loss at iteration {t}")));
        }
        state.sgd_step(&g_main, &g_aux, cfg.lr, cfg.momentum, cfg.weight_decay)?;

        if let Some(pool) = pool.as_mut() {
            for (c, crop) in ctx.crops.iter().enumerate() {
                let Some(truth) = &ctx.truth[c] else { continue };
                let out = &outs[c];
                let s = truth.len();
                let conf: Vec<f64> = (0..s)
                    .map(|px| {
                        out.main
                            .p
                            .get(px, ctx.pseudo_main[c][px])
                            .min(out.aux.p.get(px, ctx.pseudo_aux[c][px]))
                    })
                    .collect();
                pool.update(
                    instance_index[&crop.sample_id],
                    &out.main.z,
                    &out.aux.z,
                    &ctx.pseudo_main[c],
                    &ctx.pseudo_aux[c],
                    truth,
                    &conf,
                )?;
            }
        }

        rows.push(LossRow {
            iter: t,
            l_s: values.sup,
            l_c: values.cps,
            l_d: values.consist,
            lambda_c: ctx.lambda_c,
            lambda_d: ctx.lambda_d,
            total: values.total,
        });
    }
    Ok(TrainOutput { rows, state, pool })
}

/// Per-pixel argmax of the main branch, as a label mask.
pub fn predict_mask(state: &DualModelState, image: &data::Grid) -> Result<Vec<u8>> {
    let out = state.forward(image)?;
    Ok((0..out.main.p.rows())
        .map(|px| argmax_row(out.main.p.row(px)) as u8)
        .collect())
}

/// One metrics row; `hd95`/`asd` are NaN when exactly one mask is empty.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

/// Metrics for one prediction/truth pair of label masks (foreground = any
/// nonzero label). Surface metrics are 0 when both masks are empty and NaN
/// when only one is.
pub fn eval_pair(id: &str, pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<EvalRow> {
    let to_mask = |m: &[u8]| -> Result<BinaryMask> {
        BinaryMask::new_2d(h, w, m.iter().map(|v| *v > 0).collect())
    };
    let a = to_mask(pred)?;
    let b = to_mask(gt)?;
    let dice = metrics::dice(&a, &b)?;
    let jaccard = metrics::jaccard(&a, &b)?;
    let (hd95, asd) = match (a.foreground_count() == 0, b.foreground_count() == 0) {
        (true, true) => (0.0, 0.0),
        (true, false) | (false, true) => (f64::NAN, f64::NAN),
        (false, false) => (metrics::hd95(&a, &b)?, metrics::asd(&a, &b)?),
    };
    Ok(EvalRow {
        id: id.into(),
        dice,
        jaccard,
        hd95,
        asd,
    })
}

/// Evaluates the main branch on a test set; the final row is the arithmetic
/// mean (surface metrics averaged over defined rows only).
pub fn evaluate(state: &DualModelState, test: &[SegSample]) -> Result<(Vec<EvalRow>, EvalRow)> {
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows = Vec::with_capacity(test.len());
    for sample in test {
        let pred = predict_mask(state, &sample.image)?;
        rows.push(eval_pair(
            &sample.id.to_string(),
            &pred,
            &sample.mask,
            sample.image.h,
            sample.image.w,
        )?);
    }
    Ok((rows.clone(), mean_row(&rows)))
}

pub fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len() as f64;
    let finite_mean = |extract: &dyn Fn(&EvalRow) -> f64| -> f64 {
        let vals: Vec<f64> = rows.iter().map(extract).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    EvalRow {
        id: "mean".into(),
        dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        jaccard: rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
        hd95: finite_mean(&|r: &EvalRow| r.hd95),
        asd: finite_mean(&|r: &EvalRow| r.asd),
    }
}

/// One ablation grid cell: the component switches and the resulting mean
/// metrics.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub labeled_fraction: f64,
    pub ccm: bool,
    pub dfp: bool,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

/// Trains the four-row component grid (baseline, +CCM, +DFP, both) for every
/// configured labeled fraction, sharing the dataset and seed so differences
/// are attributable to the components alone.
pub fn ablate(
    cfg: &RunConfig,
    all_train: &[SegSample],
    test: &[SegSample],
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for &fraction in &cfg.ablate_fractions {
        for (ccm, dfp) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut sub = cfg.clone();
            sub.labeled_fraction = fraction;
            sub.ccm_on = ccm;
            sub.dfp_on = dfp;
            let out = train(&sub, all_train)?;
            let (_, mean) = evaluate(&out.state, test)?;
            cells.push(AblationCell {
                labeled_fraction: fraction,
                ccm,
                dfp,
                dice: mean.dice,
                jaccard: mean.jaccard,
                hd95: mean.hd95,
                asd: mean.asd,
            });
        }
    }
    Ok(cells)
}

// --- CSV writers: ASCII, LF line endings, header row, fixed precision ---

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(b"iter,l_s,l_c,l_d,lambda_c,lambda_d,total\n")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.iter, r.l_s, r.l_c, r.l_d, r.lambda_c, r.lambda_d, r.total
        )?;
    }
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let raw = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in raw.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::BadFormat(format!("bad loss row: {line}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::BadFormat(format!("bad float: {s}")))
        };
        rows.push(LossRow {
            iter: f[0]
                .parse()
                .map_err(|_| Error::BadFormat(format!("bad iter: {}", f[0])))?,
            l_s: num(f[1])?,
            l_c: num(f[2])?,
            l_d: num(f[3])?,
            lambda_c: num(f[4])?,
            lambda_d: num(f[5])?,
            total: num(f[6])?,
        });
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[EvalRow], mean: &EvalRow) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(b"id,dice,jaccard,hd95,asd\n")?;
    for r in rows.iter().chain(std::iter::once(mean)) {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.id, r.dice, r.jaccard, r.hd95, r.asd
        )?;
    }
    Ok(())
}

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(b"labeled_fraction,baseline,ccm,dfp,dice,jaccard,hd95,asd\n")?;
    for c in cells {
        writeln!(
            out,
            "{:.2},1,{},{},{:.6},{:.6},{:.6},{:.6}",
            c.labeled_fraction,
            u8::from(c.ccm),
            u8::from(c.dfp),
            c.dice,
            c.jaccard,
            c.hd95,
            c.asd
        )?;
    }
    Ok(())
}

/// Mean of `values[t - window + 1 ..= t]`, shrinking the window at the start.
pub fn smoothed(values: &[f64], t: usize, window: usize) -> f64 {
    let lo = (t + 1).saturating_sub(window);
    let slice = &values[lo..=t];
    slice.iter().sum::<f64>() / slice.len() as f64
}

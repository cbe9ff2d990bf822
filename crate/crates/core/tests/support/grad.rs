//! Finite-difference checks of every differentiable op. Each check builds a
//! random instance from its seed, reduces the op output to a scalar with a
//! random projection and compares the analytic gradient with central
//! differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use roadattr_core::dataset::{AttributeSpec, TemporalKind};
use roadattr_core::localmodel::{FramesMode, LocalModel, LocalModelConfig};
use roadattr_core::losses::{weighted_ce, BatchPosteriors, ClassWeights, Normalization};
use roadattr_core::nncore::gradcheck::{central_difference, compare, parameter_gradients, GradCheckReport, ABS_FLOOR, REL_TOL, STEP};
use roadattr_core::nncore::{
    argmax, attention_pool, attention_pool_backward, linear, linear_backward, softmax, softmax_backward, spp_pool,
    spp_pool_backward, Array, Embedding, LstmCell, Module, DEFAULT_SPP_GRIDS,
};
use roadattr_core::seeded_rng;
use roadattr_core::seqmodel::{SeqEnhancer, SeqEnhancerConfig};
use roadattr_core::stream::SectionPredictions;

pub type Check = fn(u64) -> GradCheckReport;

/// Every differentiable op, by name.
pub const OPS: &[(&str, Check)] = &[
    ("linear", check_linear),
    ("spp_pool", check_spp),
    ("attention_pool", check_attention),
    ("embedding_lookup", check_embedding),
    ("lstm_step", check_lstm),
    ("softmax_ce", check_softmax_ce),
    ("local_head", check_local_head),
    ("enhancer", check_enhancer),
];

fn rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed, 0xC0FFEE)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cmp(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    compare(analytic, numeric, REL_TOL, ABS_FLOOR)
}

fn model_report<M: Module>(model: &mut M, loss: impl FnMut(&M) -> f64) -> GradCheckReport {
    let numeric = parameter_gradients(model, STEP, loss);
    let mut report = GradCheckReport::default();
    for (p, n) in model.parameters().iter().zip(&numeric) {
        report.merge(cmp(p.grad.data(), n));
    }
    report
}

pub fn check_linear(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (n, d_in, d_out) = (3, 4, 5);
    let x = Array::from_vec(&[n, d_in], uniform(&mut r, n * d_in, 1.0)).unwrap();
    let w = Array::from_vec(&[d_out, d_in], uniform(&mut r, d_out * d_in, 1.0)).unwrap();
    let b = Array::vector(uniform(&mut r, d_out, 1.0));
    let proj = uniform(&mut r, n * d_out, 1.0);
    let g = linear_backward(&x, &w, &Array::from_vec(&[n, d_out], proj.clone()).unwrap()).unwrap();
    let f = |x: &Array, w: &Array, b: &Array| dotp(linear(x, w, b).unwrap().data(), &proj);
    let mut report = cmp(
        g.input.data(),
        &central_difference(|v| f(&Array::from_vec(&[n, d_in], v.to_vec()).unwrap(), &w, &b), x.data(), STEP),
    );
    report.merge(cmp(
        g.weight.data(),
        &central_difference(|v| f(&x, &Array::from_vec(&[d_out, d_in], v.to_vec()).unwrap(), &b), w.data(), STEP),
    ));
    report.merge(cmp(
        g.bias.data(),
        &central_difference(|v| f(&x, &w, &Array::vector(v.to_vec())), b.data(), STEP),
    ));
    report
}

pub fn check_spp(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (h, w, c) = (6 + (seed % 3) as usize, 6 + (seed % 2) as usize, 2);
    let shape = [h, w, c];
    let grid = uniform(&mut r, h * w * c, 1.0);
    let out_len = spp_pool(&Array::from_vec(&shape, grid.clone()).unwrap(), &DEFAULT_SPP_GRIDS)
        .unwrap()
        .len();
    let proj = uniform(&mut r, out_len, 1.0);
    let analytic = spp_pool_backward(&shape, &DEFAULT_SPP_GRIDS, &Array::vector(proj.clone())).unwrap();
    let numeric = central_difference(
        |v| {
            let g = Array::from_vec(&shape, v.to_vec()).unwrap();
            dotp(spp_pool(&g, &DEFAULT_SPP_GRIDS).unwrap().data(), &proj)
        },
        &grid,
        STEP,
    );
    cmp(analytic.data(), &numeric)
}

pub fn check_attention(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (h, w, c) = (3, 4, 3);
    let shape = [h, w, c];
    let grid = Array::from_vec(&shape, uniform(&mut r, h * w * c, 2.0)).unwrap();
    let query = Array::vector(uniform(&mut r, c, 2.0));
    let proj = uniform(&mut r, c, 1.0);
    let pooled = attention_pool(&grid, &query).unwrap();
    let (gg, gq) = attention_pool_backward(&grid, &query, &pooled, &Array::vector(proj.clone())).unwrap();
    let f = |g: &Array, q: &Array| dotp(&attention_pool(g, q).unwrap().output, &proj);
    let mut report = cmp(
        gg.data(),
        &central_difference(|v| f(&Array::from_vec(&shape, v.to_vec()).unwrap(), &query), grid.data(), STEP),
    );
    report.merge(cmp(
        gq.data(),
        &central_difference(|v| f(&grid, &Array::vector(v.to_vec())), query.data(), STEP),
    ));
    report
}

pub fn check_embedding(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let rows = 2 + (seed % 5) as usize;
    let mut emb = Embedding::new("e", rows, 4, 0.5, &mut r);
    let picks: Vec<usize> = (0..5).map(|_| r.random_range(0..rows)).collect();
    let projs: Vec<Vec<f64>> = picks.iter().map(|_| uniform(&mut r, 4, 1.0)).collect();
    emb.zero_grad();
    for (&i, p) in picks.iter().zip(&projs) {
        emb.backward(i, p);
    }
    model_report(&mut emb, |e| {
        picks
            .iter()
            .zip(&projs)
            .map(|(&i, p)| dotp(e.lookup(i).unwrap(), p))
            .sum()
    })
}

pub fn check_lstm(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (input, hidden) = (3, 4);
    let mut cell = LstmCell::new("l", input, hidden, &mut r);
    for p in cell.parameters_mut() {
        let v = uniform(&mut r, p.len(), 0.8);
        p.value.data_mut().copy_from_slice(&v);
    }
    let x = uniform(&mut r, input, 1.0);
    let h0 = uniform(&mut r, hidden, 1.0);
    let c0 = uniform(&mut r, hidden, 1.0);
    let (rh, rc) = (uniform(&mut r, hidden, 1.0), uniform(&mut r, hidden, 1.0));
    let loss = |cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]| {
        let s = cell.step(x, h, c);
        dotp(&s.h, &rh) + dotp(&s.c, &rc)
    };
    cell.zero_grad();
    let cache = cell.step(&x, &h0, &c0);
    let (dx, dh, dc) = cell.step_backward(&cache, &rh, &rc);
    let mut report = cmp(&dx, &central_difference(|v| loss(&cell, v, &h0, &c0), &x, STEP));
    report.merge(cmp(&dh, &central_difference(|v| loss(&cell, &x, v, &c0), &h0, STEP)));
    report.merge(cmp(&dc, &central_difference(|v| loss(&cell, &x, &h0, v), &c0, STEP)));
    report.merge(model_report(&mut cell, |m| loss(m, &x, &h0, &c0)));
    report
}

/// Softmax followed by cross-entropy, plain and with class weights under
/// both normalisations, differentiated w.r.t. the logits.
pub fn check_softmax_ce(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (n, c) = (5, 4);
    let logits = uniform(&mut r, n * c, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let weights = [
        ClassWeights::uniform(c),
        ClassWeights {
            weights: (0..c).map(|_| Some(r.random_range(0.01..5.0))).collect(),
            ..ClassWeights::uniform(c)
        },
    ];
    let mut report = GradCheckReport::default();
    for w in &weights {
        for norm in [Normalization::BatchSize, Normalization::WeightSum] {
            let loss = |z: &[f64]| {
                let rows: Vec<Vec<f64>> = z.chunks(c).map(softmax).collect();
                let batch = BatchPosteriors::from_rows(&rows, labels.clone()).unwrap();
                weighted_ce(&batch, w, norm).unwrap()
            };
            let l = loss(&logits);
            let analytic: Vec<f64> = logits
                .chunks(c)
                .enumerate()
                .flat_map(|(i, z)| softmax_backward(&softmax(z), l.grad.row(i)))
                .collect();
            report.merge(cmp(&analytic, &central_difference(|z| loss(z).value, &logits, STEP)));
        }
    }
    report
}

/// The whole local model (adapter, pools, queries, heads) on a small grid.
pub fn check_local_head(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let attrs = vec![
        AttributeSpec::new("a", &["n", "y"], Some(0), TemporalKind::SinglePeak),
        AttributeSpec::new("b", &["p", "q", "s"], None, TemporalKind::Smooth),
    ];
    let mut cfg = LocalModelConfig::new(6, 6, 2, attrs);
    cfg.head_hidden = 3;
    cfg.frames = if seed.is_multiple_of(2) { FramesMode::Single } else { FramesMode::Multi };
    let mut model = LocalModel::new(cfg, &mut r).unwrap();
    let adapter = uniform(&mut r, 6, 0.5);
    for (p, v) in model.parameters_mut()[..2].iter_mut().zip([&adapter[..4], &adapter[4..]]) {
        for (x, d) in p.value.data_mut().iter_mut().zip(v) {
            *x += d;
        }
    }
    let frames: Vec<Vec<f64>> = (0..model.config().frames.back_offsets().len())
        .map(|_| uniform(&mut r, 72, 1.5))
        .collect();
    let views: Vec<&[f64]> = frames.iter().map(Vec::as_slice).collect();
    let projs = [uniform(&mut r, 2, 1.0), uniform(&mut r, 3, 1.0)];
    let loss = |m: &LocalModel| {
        let p = m.forward(&views).unwrap();
        p.attributes.iter().zip(&projs).map(|(a, w)| dotp(&a.logits, w)).sum::<f64>()
    };
    model.zero_grad();
    let (_, cache) = model.forward_train(&views).unwrap();
    model.backward(&views, &cache, &projs);
    model_report(&mut model, loss)
}

/// The whole enhancer, including the embedding rows selected through the
/// window, on a short window.
pub fn check_enhancer(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let c = 3;
    let cfg = SeqEnhancerConfig {
        half_window: 2,
        num_layers: 2,
        hidden: 3,
        ..SeqEnhancerConfig::new(c)
    };
    let mut model = SeqEnhancer::new("e", cfg, &mut r).unwrap();
    let len = 4;
    let logits: Vec<Vec<f64>> = (0..len).map(|_| uniform(&mut r, c, 2.0)).collect();
    let preds = SectionPredictions {
        argmax: logits.iter().map(|l| argmax(l)).collect(),
        logits,
    };
    let t = (seed % len as u64) as usize;
    let proj = uniform(&mut r, c, 1.0);
    let loss = |m: &SeqEnhancer| dotp(&m.enhance(&m.build_window(&preds, t).unwrap()).unwrap(), &proj);
    model.zero_grad();
    let window = model.build_window(&preds, t).unwrap();
    let (_, cache) = model.forward_train(&window).unwrap();
    model.backward(&window, &cache, &proj);
    model_report(&mut model, loss)
}

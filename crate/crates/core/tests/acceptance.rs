//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use agglo_core::config::RunConfig;
use agglo_core::data::generate_sample;
use agglo_core::eradio::{eradio_flops, eradio_forward, ERadioConfig};
use agglo_core::eval::{
    accuracy, feature_norm_ratio, gaussian_clusters, knn_classify, miou, probe_miou, zero_shot_classify, EmbeddingBank,
};
use agglo_core::loss::{
    balance_uncertainty, cosine_distance, smooth_l1, BalancerMode, BalancerState, Branch, LossWeights, Term, TermKey,
};
use agglo_core::nn::Scope;
use agglo_core::numerics::{grad_check, suite_cases, Graph, Tensor};
use agglo_core::partition::{
    assign_ranks, build_groups, draw_rank_batches, effective_batch_size, fused_step, group_entries, rank_terms, sample_seed,
    simulate_step, Assignment, Model, RankBatch,
};
use agglo_core::teachers::{TeacherConfig, TeacherProfile};
use agglo_core::trainer::{build_teachers, init_model, run_training, Trainer};
use agglo_core::vit::{invert_permutation, vit_flops, vit_forward, vitdet_reorder, AttnMode, Summarization, ViTConfig, FULL_WINDOW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> RunConfig {
    RunConfig::load(&configs_dir().join(name)).expect("shipped config")
}

// ------------------------------------------------------------------ 1

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checks = 0;
    for seed in 0..10 {
        for (name, op, inputs) in suite_cases(seed) {
            let err = grad_check(&op, &inputs, 1e-5).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            ensure(err < 1e-5, || format!("{name} seed {seed}: max rel err {err:e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
            checks += 1;
        }
    }
    within(t0.elapsed(), 60)?;
    Ok(format!("{checks} checks over 10 seeds, worst {:.2e} ({})", worst.0, worst.1))
}

// ------------------------------------------------------------------ 2

fn partition_anchors() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.teachers = vec![
        TeacherConfig { per_rank_batch: Some(32), ..TeacherConfig::new(TeacherProfile::ClipLike, 1) },
        TeacherConfig { per_rank_batch: Some(32), ..TeacherConfig::new(TeacherProfile::DinoLike, 2) },
        TeacherConfig { per_rank_batch: Some(4), ..TeacherConfig::new(TeacherProfile::SamLike, 3) },
    ];
    let teachers = build_teachers(&cfg).map_err(|e| e.to_string())?;
    let groups = build_groups(&teachers).map_err(|e| e.to_string())?;
    ensure(groups.len() == 2, || format!("{} groups", groups.len()))?;
    let a = assign_ranks(groups, 64, &[0.5, 0.5]).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = a.groups.iter().map(|g| g.ranks.len()).collect();
    ensure(sizes == [32, 32], || format!("rank split {sizes:?}"))?;
    let eff = effective_batch_size(&a);
    ensure(eff == 1152, || format!("effective batch {eff}"))?;
    let single = assign_ranks(group_entries(&[("clip-like", 32, 32)]).map_err(|e| e.to_string())?, 32, &[])
        .map_err(|e| e.to_string())?;
    let eff1 = effective_batch_size(&single);
    ensure(eff1 == 1024, || format!("single group effective batch {eff1}"))?;
    Ok(format!("64 ranks 50/50 -> {eff}, 32x32 -> {eff1}"))
}

// ------------------------------------------------------------------ 3

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.data().iter().map(|y| y * y).sum::<f64>().sqrt();
    // identically-zero gradients (attention key bias) hold rounding noise on both sides
    diff / norm.max(1e-9)
}

fn grads_close(a: &BTreeMap<String, Tensor<f64>>, b: &BTreeMap<String, Tensor<f64>>, what: &str) -> Result<f64, String> {
    ensure(a.keys().eq(b.keys()), || format!("{what}: gradient sets differ"))?;
    let mut worst = 0.0f64;
    for (k, g) in a {
        let e = rel_err(g, &b[k]);
        ensure(e <= 1e-6, || format!("{what}: {k} rel err {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn union_batch(batches: &[&RankBatch]) -> RankBatch {
    let cat = |f: fn(&RankBatch) -> &Tensor<f32>| {
        let s = f(batches[0]).shape().to_vec();
        let n: usize = batches.iter().map(|b| f(b).dim(0)).sum();
        let data: Vec<f32> = batches.iter().flat_map(|b| f(b).data().iter().copied()).collect();
        Tensor::new([n, s[1], s[2], s[3]], data).unwrap()
    };
    RankBatch {
        rank: 0,
        group: batches[0].group,
        teacher_images: cat(|b| &b.teacher_images),
        student_images: cat(|b| &b.student_images),
        class_ids: batches.iter().flat_map(|b| b.class_ids.clone()).collect(),
        pos_window: batches[0].pos_window,
    }
}

/// Each group's ranks fused into one batch, term means over that batch,
/// weighted by the group's share of the ranks.
fn union_oracle(model: &Model<f64>, a: &Assignment, batches: &[RankBatch]) -> Result<(BTreeMap<String, Tensor<f64>>, f64), String> {
    let mut g = Graph::<f64>::new();
    let mut total = g.constant(Tensor::scalar(0.0));
    for (gi, group) in a.groups.iter().enumerate() {
        let members: Vec<&RankBatch> = batches.iter().filter(|b| b.group == gi).collect();
        let u = union_batch(&members);
        let share = group.ranks.len() as f64 / a.world_size as f64;
        for (k, v) in rank_terms(&mut g, model, group, &u, AttnMode::Plain).map_err(|e| e.to_string())? {
            let t = g.scale(v, model.weights.term_weight(&k) * share).map_err(|e| e.to_string())?;
            total = g.add(total, t).map_err(|e| e.to_string())?;
        }
    }
    let grads = g.backward(total).map_err(|e| e.to_string())?.named();
    Ok((grads, g.value(total).item()))
}

fn aggregation_oracle() -> Outcome {
    let t0 = Instant::now();
    let tc = |p: TeacherProfile, b: usize| TeacherConfig { per_rank_batch: Some(b), ..TeacherConfig::new(p, 100 + p as u64) };
    let topologies: Vec<(&str, Vec<TeacherConfig>, usize, Vec<f64>)> = vec![
        ("1 rank", vec![tc(TeacherProfile::ClipLike, 3)], 1, vec![]),
        ("4 ranks shared", vec![tc(TeacherProfile::ClipLike, 2), tc(TeacherProfile::DinoLike, 2)], 4, vec![]),
        (
            "3 ranks heterogeneous",
            vec![tc(TeacherProfile::ClipLike, 2), tc(TeacherProfile::DinoLike, 2), tc(TeacherProfile::SamLike, 1)],
            3,
            vec![0.5, 0.5],
        ),
        ("5 ranks split", vec![tc(TeacherProfile::ClipLike, 1), tc(TeacherProfile::SamLike, 1)], 5, vec![0.6, 0.4]),
    ];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (name, teachers, world, split) in topologies {
        let mut cfg = RunConfig::default();
        cfg.teachers = teachers;
        cfg.student.vit.embed_dim = 16;
        cfg.student.vit.depth = 2;
        cfg.student.vit.heads = 2;
        cfg.student.vit.mlp_ratio = 2.0;
        cfg.student.cpe_augment = false;
        cfg.partition.world_size = world;
        cfg.partition.split = split.clone();
        let specs = build_teachers(&cfg).map_err(|e| e.to_string())?;
        let a = assign_ranks(build_groups(&specs).map_err(|e| e.to_string())?, world, &split).map_err(|e| e.to_string())?;
        let params = init_model::<f64>(&cfg, &specs).map_err(|e| e.to_string())?;
        let model = Model { student: &cfg.student, teachers: &specs, params: &params, weights: &cfg.loss.weights };
        let batches = draw_rank_batches(&cfg, &a, 3).map_err(|e| e.to_string())?;

        let (oracle, total) = union_oracle(&model, &a, &batches)?;
        let sim = simulate_step(&model, &a, &batches, AttnMode::Plain, &mut BalancerState::new(BalancerMode::Naive))
            .map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(grads_close(&sim.grads, &oracle, name)?);
        let te = (sim.total - total).abs() / total.abs().max(1e-12);
        ensure(te <= 1e-6, || format!("{name}: total rel err {te:e}"))?;
        cases += 1;

        for mode in [BalancerMode::Uncertainty, BalancerMode::Adaloss] {
            let mut cfg = cfg.clone();
            cfg.loss.balancer = mode;
            let mut params = init_model::<f64>(&cfg, &specs).map_err(|e| e.to_string())?;
            // move the log-variances off zero so their gradients are exercised
            for (i, (_, t)) in params.iter_mut().filter(|(n, _)| n.starts_with("balancer.")).enumerate() {
                t.data_mut()[0] = 0.3 - 0.2 * i as f64;
            }
            let model = Model { student: &cfg.student, teachers: &specs, params: &params, weights: &cfg.loss.weights };
            for attn in [AttnMode::Plain, AttnMode::ViTDet { window: 2 }] {
                let mut st = BalancerState::new(mode);
                st.observe(&TermKey::new("clip-like", Branch::Feature), 0.4);
                let (mut s1, mut s2) = (st.clone(), st);
                let what = format!("{name} {mode:?} {attn:?}");
                let sim = simulate_step(&model, &a, &batches, attn, &mut s1).map_err(|e| format!("{what}: {e}"))?;
                let fused = fused_step(&model, &a, &batches, attn, &mut s2).map_err(|e| format!("{what}: {e}"))?;
                worst = worst.max(grads_close(&sim.grads, &fused.grads, &what)?);
                let te = (sim.total - fused.total).abs() / fused.total.abs().max(1e-12);
                ensure(te <= 1e-6, || format!("{what}: total rel err {te:e}"))?;
                cases += 1;
            }
        }
    }
    within(t0.elapsed(), 120)?;
    Ok(format!("{cases} topology/balancer/attention cases, worst rel err {worst:.2e}"))
}

// ------------------------------------------------------------------ 4

fn vitdet_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for summarization in [Summarization::ClsToken, Summarization::Avgpool] {
        let cfg = ViTConfig { depth: 4, window_sizes: vec![2, 4], summarization, ..Default::default() };
        let store = cfg.init::<f64>(11, "s").map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
        let run = |mode| {
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let out = vit_forward(&mut g, &cfg, &Scope::new(&store, "s"), x, mode, FULL_WINDOW).unwrap();
            (g.value(out.summary).clone(), g.value(out.spatial).clone())
        };
        let (s0, v0) = run(AttnMode::Plain);
        let (s1, v1) = run(AttnMode::ViTDet { window: 4 });
        worst = worst.max(rel_err(&s1, &s0)).max(rel_err(&v1, &v0));
    }
    ensure(worst <= 1e-6, || format!("full-grid window differs from plain: {worst:e}"))?;
    let mut pairs = 0;
    for gh in 1..=8 {
        for gw in 1..=8 {
            for w in 1..=gh.min(gw) {
                if gh % w != 0 || gw % w != 0 {
                    continue;
                }
                let perm = vitdet_reorder((gh, gw), w).map_err(|e| e.to_string())?;
                let inv = invert_permutation(&perm);
                let ids: Vec<usize> = (0..gh * gw).collect();
                let reordered: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
                let back: Vec<usize> = inv.iter().map(|&i| reordered[i]).collect();
                ensure(back == ids, || format!("grid {gh}x{gw} window {w}"))?;
                pairs += 1;
            }
        }
    }
    within(t0.elapsed(), 30)?;
    Ok(format!("max rel diff {worst:.2e}; scatter inverts reorder on {pairs} (grid, window) pairs"))
}

// ------------------------------------------------------------------ 5

fn loss_anchors() -> Outcome {
    let w = LossWeights::default();
    let lam = [w.summary_weight("clip-like"), w.summary_weight("dino-like"), w.summary_weight("sam-like")];
    ensure(lam == [1.0, 1.0, 0.1], || format!("lambda {lam:?}"))?;
    for t in ["clip-like", "dino-like", "sam-like"] {
        ensure(w.feature_weight(t) == 1.0, || format!("gamma {t} {}", w.feature_weight(t)))?;
    }
    ensure(w.alpha == 0.9 && w.beta == 0.1, || format!("alpha {} beta {}", w.alpha, w.beta))?;
    let cos = |x: &[f64], y: &[f64]| {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([1, x.len()], x).unwrap());
        let b = g.constant(Tensor::from_f64([1, y.len()], y).unwrap());
        let d = cosine_distance(&mut g, a, b).unwrap();
        g.value(d).item()
    };
    let ends = [cos(&[3.0, 4.0], &[6.0, 8.0]), cos(&[1.0, 0.0], &[0.0, 2.0]), cos(&[1.0, -2.0], &[-1.0, 2.0])];
    ensure(ends == [0.0, 1.0, 2.0], || format!("cosine endpoints {ends:?}"))?;
    let sl1 = |d: f64| {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(d));
        let b = g.constant(Tensor::scalar(0.0));
        let l = smooth_l1(&mut g, a, b, 1.0).unwrap();
        g.value(l).item()
    };
    // 0.5 d^2 below the transition, |d| - 0.5 above
    let cases = [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (1.0, 0.5), (2.0, 1.5), (-3.0, 2.5)];
    for (d, want) in cases {
        ensure(sl1(d) == want, || format!("smooth_l1({d}) = {}, want {want}", sl1(d)))?;
    }
    Ok("lambda (1, 1, 0.1), gamma 1, alpha 0.9, beta 0.1; cosine {0,1,2}; 6 smooth-L1 cases".into())
}

// ------------------------------------------------------------------ 6

fn balancer_fixed_points() -> Outcome {
    let t0 = Instant::now();
    let key = TermKey::new("clip-like", Branch::Summary);
    let mut worst_ada = 0.0f64;
    for (start, l) in [(10.0, 2.0), (0.1, 0.5), (1.0, 1.0)] {
        let mut st = BalancerState::new(BalancerMode::Adaloss);
        st.observe(&key, start);
        for _ in 0..2000 {
            st.observe(&key, l);
        }
        // the EMA limit of a constant stream is l, so the weight tends to 1/l
        let rel = (st.adaloss_weight(&key) * l - 1.0).abs();
        ensure(rel < 0.01, || format!("AdaLoss weight {} vs 1/{l}", st.adaloss_weight(&key)))?;
        worst_ada = worst_ada.max(rel);
    }
    let mut worst_b = 0.0f64;
    for l in [0.5f64, 1.0, 2.0] {
        // stationarity -exp(-b) L + sigmoid(b) = 0; with u = exp(-b): L u^2 + L u - 1 = 0
        let u = (-1.0 + (1.0 + 4.0 / l).sqrt()) / 2.0;
        let root = -u.ln();
        let mut b = 0.0;
        for _ in 0..2000 {
            let mut g = Graph::<f64>::new();
            let loss = g.constant(Tensor::scalar(l));
            let bv = g.leaf(Tensor::scalar(b));
            let term = Term { key: key.clone(), loss, scale: 1.0 };
            let out = balance_uncertainty(&mut g, &[term], &[bv]).map_err(|e| e.to_string())?;
            let grads = g.backward(out.total).map_err(|e| e.to_string())?;
            b -= 0.5 * grads.get(bv).map_or(0.0, |t| t.item());
        }
        ensure((b - root).abs() < 1e-3, || format!("L={l}: trained b {b} vs root {root}"))?;
        worst_b = worst_b.max((b - root).abs());
    }
    within(t0.elapsed(), 60)?;
    Ok(format!("AdaLoss within {:.2e} of 1/L; uncertainty b within {worst_b:.1e} of the root", worst_ada))
}

// ------------------------------------------------------------------ 7, 8

struct ProbeRun {
    cfg: RunConfig,
    trainer: Trainer,
}

fn overfit_probe() -> Result<(String, ProbeRun), String> {
    let t0 = Instant::now();
    let cfg = shipped("probe.json");
    let profiles: Vec<TeacherProfile> = cfg.teachers.iter().map(|t| t.profile).collect();
    ensure(profiles == [TeacherProfile::ClipLike, TeacherProfile::DinoLike], || format!("probe teachers {profiles:?}"))?;
    ensure(cfg.data.pool_size == Some(16) && cfg.trainer.steps == 500, || "probe must use 16 images and 500 steps".into())?;
    let mut trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut first = None;
    let mut last = 0.0;
    while !trainer.is_done() {
        let m = trainer.train_step().map_err(|e| e.to_string())?;
        first.get_or_insert(m.total);
        last = m.total;
    }
    let first = first.unwrap_or(f64::NAN);
    let ratio = last / first;
    ensure(ratio < 0.1, || format!("final loss {last:.4} is {:.1}% of initial {first:.4}", 100.0 * ratio))?;
    let probe_secs = t0.elapsed().as_secs_f64();

    let three = shipped("three_teachers.json");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = run_training(three, dir.path(), None, None).map_err(|e| format!("three-teacher run: {e}"))?;
    ensure(summary.steps_done == 200, || format!("three-teacher run stopped at {}", summary.steps_done))?;
    let (header, rows) = agglo_core::trainer::read_metrics(&summary.metrics_path).map_err(|e| e.to_string())?;
    ensure(rows.len() == 200, || format!("{} metric rows", rows.len()))?;
    ensure(rows.iter().flatten().all(|v| v.is_finite()), || "non-finite metric".into())?;
    ensure(header.iter().any(|h| h == "sam-like_feature"), || "sam-like missing from metrics".into())?;
    within(t0.elapsed(), 600)?;
    Ok((
        format!(
            "loss {first:.4} -> {last:.4} ({:.1}%) in {probe_secs:.0}s; 3 teachers 200 steps finite; {:.0}s total",
            100.0 * ratio,
            t0.elapsed().as_secs_f64()
        ),
        ProbeRun { cfg, trainer },
    ))
}

fn magnitude_contract(run: &ProbeRun) -> Outcome {
    let cfg = &run.cfg;
    let res = cfg.eval.resolution;
    let samples: Vec<_> = (0..16)
        .map(|i| generate_sample(sample_seed(cfg, 1, 0, i, 16), cfg.data.num_classes, res))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for t in run.trainer.teachers() {
        let r = feature_norm_ratio(&cfg.student, &run.trainer.state().params, t, &samples, res).map_err(|e| e.to_string())?;
        ensure((0.9..=1.1).contains(&r), || format!("{} norm ratio {r:.4}", t.id))?;
        parts.push(format!("{} {r:.3}", t.id));
    }
    Ok(format!("student/teacher spatial norm ratio: {}", parts.join(", ")))
}

// ------------------------------------------------------------------ 9

fn evaluation_sanity() -> Outcome {
    let (bx, by) = gaussian_clusters(4, 30, 32, 0.02, 1);
    let (qx, qy) = gaussian_clusters(4, 25, 32, 0.02, 1);
    let bank = EmbeddingBank::new(bx, by, true).map_err(|e| e.to_string())?;
    let acc = accuracy(&knn_classify(&bank, &qx, 20, 0.07).map_err(|e| e.to_string())?, &qy);
    ensure(acc == 1.0, || format!("k-NN on separable clusters {acc}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut protos = Tensor::<f32>::randn([10, 24], 1.0, &mut rng);
    for row in protos.data_mut().chunks_mut(24) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    for i in 0..1000 {
        let q: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: f32 = 10f32.powf(rng.gen_range(-3.0..3.0));
        let scaled: Vec<f32> = q.iter().map(|v| v * s).collect();
        let (a, b) = (zero_shot_classify(&protos, &q), zero_shot_classify(&protos, &scaled));
        ensure(a.is_ok() && a.ok() == b.ok(), || format!("zero-shot query {i} changed under scale {s}"))?;
    }

    let hand: [(&[u32], &[u32], usize, f64); 4] = [
        (&[0, 1, 2, 1], &[0, 1, 2, 1], 3, 1.0),
        (&[1, 1, 1, 1], &[2, 2, 2, 2], 3, 0.0),
        (&[1, 1, 2, 2], &[1, 2, 1, 2], 3, 1.0 / 3.0),
        (&[1, 1], &[1, 1], 10, 1.0),
    ];
    for (p, g, c, want) in hand {
        let m = miou(p, g, c).map_err(|e| e.to_string())?;
        ensure(m == want, || format!("mIoU {p:?} vs {g:?} = {m}, want {want}"))?;
    }

    let mut cfg = shipped("probe.json");
    cfg.teachers = vec![TeacherConfig { per_rank_batch: Some(16), ..TeacherConfig::new(TeacherProfile::DinoLike, 101) }];
    cfg.data.pool_size = None;
    cfg.data.augment = true;
    cfg.trainer.steps = 300;
    cfg.trainer.lr = 1e-3;
    cfg.trainer.warmup_steps = 0;
    let teachers = build_teachers(&cfg).map_err(|e| e.to_string())?;
    let random = init_model::<f32>(&cfg, &teachers).map_err(|e| e.to_string())?;
    let before = probe_miou(&cfg.student, &random, &cfg).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    while !trainer.is_done() {
        trainer.train_step().map_err(|e| e.to_string())?;
    }
    let after = probe_miou(&cfg.student, &trainer.state().params, &cfg).map_err(|e| e.to_string())?;
    ensure(after >= before, || format!("distilled probe mIoU {after:.4} < random {before:.4}"))?;
    Ok(format!("k-NN 100%; zero-shot scale-invariant on 1000 queries; mIoU hand cases; probe mIoU {before:.3} -> {after:.3}"))
}

// ------------------------------------------------------------------ 10

fn architecture_anchors() -> Outcome {
    let cfg = ERadioConfig::variant("xt").map_err(|e| e.to_string())?;
    let store = cfg.init::<f32>(0, "s").map_err(|e| e.to_string())?;
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::<f32>::full([1, 3, 224, 224], 0.5));
    let (out, trace) = eradio_forward(&mut g, &cfg, &Scope::new(&store, "s"), x).map_err(|e| e.to_string())?;
    ensure(trace.stages == [56, 28, 14, 7], || format!("ladder {:?}", trace.stages))?;
    ensure(out.grid == (14, 14), || format!("fused output {:?}", out.grid))?;

    let off = [(ERadioConfig { fusion: false, ..cfg.clone() }, 224), (ERadioConfig { fusion: false, ..ERadioConfig::default() }, 64)];
    for (c, r) in off.iter().flat_map(|(c, r)| [(c, *r), (c, 2 * *r), (c, 4 * *r)]).filter(|(_, r)| *r <= 448) {
        let side = c.output_side(r).map_err(|e| e.to_string())?;
        ensure(side == r / 32, || format!("fusion off at {r}: {side}"))?;
    }
    let toy = ERadioConfig { fusion: false, ..ERadioConfig::default() };
    let store = toy.init::<f32>(0, "s").map_err(|e| e.to_string())?;
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::<f32>::full([1, 3, 64, 64], 0.5));
    let (out, _) = eradio_forward(&mut g, &toy, &Scope::new(&store, "s"), x).map_err(|e| e.to_string())?;
    ensure(out.grid == (2, 2), || format!("fusion off forward at 64: {:?}", out.grid))?;

    let er = ERadioConfig::default();
    let target = er.num_params() as f64;
    let vit = (1..64)
        .map(|depth| ViTConfig { depth, ..Default::default() })
        .min_by(|a, b| (a.num_params() as f64 - target).abs().total_cmp(&(b.num_params() as f64 - target).abs()))
        .expect("candidates");
    let pr = vit.num_params() as f64 / target;
    ensure((0.9..=1.1).contains(&pr), || format!("no ViT within 10% of {target} params"))?;
    let (fe, fv) = (eradio_flops(&er, 64).map_err(|e| e.to_string())?, vit_flops(&vit, 64).map_err(|e| e.to_string())?);
    ensure(fe < fv, || format!("E-RADIO {fe} FLOPs vs ViT {fv}"))?;
    Ok(format!(
        "ladder 56/28/14/7 -> 14x14; no fusion R/32; E-RADIO {:.1} MFLOPs < ViT depth {} {:.1} MFLOPs (params ratio {pr:.3})",
        fe as f64 / 1e6,
        vit.depth,
        fv as f64 / 1e6
    ))
}

// ------------------------------------------------------------------ 11

fn reproducibility() -> Outcome {
    let base = shipped("smoke.json");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |cfg: &RunConfig, name: &str, resume: Option<&Path>, stop: Option<u64>| -> Result<(PathBuf, PathBuf), String> {
        let dir = root.path().join(name);
        let s = run_training(cfg.clone(), &dir, resume, stop).map_err(|e| e.to_string())?;
        Ok((dir, s.checkpoint))
    };
    let read = |p: &Path| fs::read(p.join("metrics.csv")).unwrap_or_default();
    let mut resumes = 0;
    for mode in [BalancerMode::Naive, BalancerMode::Uncertainty, BalancerMode::Adaloss] {
        let mut cfg = base.clone();
        cfg.loss.balancer = mode;
        let tag = format!("{mode:?}");
        let (a, _) = run(&cfg, &format!("{tag}-a"), None, None)?;
        let (b, _) = run(&cfg, &format!("{tag}-b"), None, None)?;
        ensure(!read(&a).is_empty() && read(&a) == read(&b), || format!("{tag}: metrics CSVs differ"))?;
        for k in [1, 13, 26, 49] {
            let dir = format!("{tag}-resume-{k}");
            let (d, ck) = run(&cfg, &dir, None, Some(k))?;
            let (d2, _) = run(&cfg, &dir, Some(&ck), None)?;
            debug_assert_eq!(d, d2);
            ensure(read(&d2) == read(&a), || format!("{tag}: resume at step {k} diverged"))?;
            resumes += 1;
        }
    }
    Ok(format!("byte-identical CSVs for 3 balancers; {resumes} resumes reproduce the uninterrupted run"))
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => println!("criterion {n:>2} FAIL  {name}: {d}"),
        }
        results.push((n, name, r));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "partition anchors", partition_anchors());
    report(3, "aggregation oracle", aggregation_oracle());
    report(4, "ViTDet equivalence", vitdet_equivalence());
    report(5, "loss anchors", loss_anchors());
    report(6, "balancer fixed points", balancer_fixed_points());
    match overfit_probe() {
        Ok((detail, run)) => {
            report(7, "overfit probe", Ok(detail));
            report(8, "magnitude contract", magnitude_contract(&run));
        }
        Err(e) => {
            report(7, "overfit probe", Err(e));
            report(8, "magnitude contract", Err("overfit probe did not complete".into()));
        }
    }
    report(9, "evaluation sanity", evaluation_sanity());
    report(10, "architecture anchors", architecture_anchors());
    report(11, "reproducibility", reproducibility());
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

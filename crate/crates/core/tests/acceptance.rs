//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 9 and 10 train on the desk configs in `configs/` by default; set
//! `VAST_ACCEPTANCE_SCALE=reference` to use the full-size configs instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, Uniform};

use vast_core::eval::{cluster_report, diversity, run_inference, transfer_error, EvalReport};
use vast_core::face::{categorize_expressions, lmd, umeyama_align, BlendshapeProxy, SimilarityTransform};
use vast_core::model::{ModelConfig, VastModel};
use vast_core::synth::{gen_corpus, Corpus, CorpusConfig, SplitTag};
use vast_core::trainer::{
    fit, grad_check, probe_inputs, step_inputs, Checkpoint, Dataset, FitOutcome, TrainConfig, Trainer,
};
use vast_core::variational::{
    apply_flow, asymmetric_recon_loss, householder_step, kl_diag_standard, kl_flow_estimate, posterior_params,
    sample_latent, PosteriorParams, StyleLatent,
};

type Verdict = Result<(bool, String), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn small_model(flow_steps: usize) -> ModelConfig {
    ModelConfig {
        enc_channels: 8,
        enc_hidden: 8,
        style_dim: 8,
        flow_steps,
        ar_hidden: 12,
        nar_dim: 8,
        nar_heads: 2,
        nar_ff: 16,
        nar_blocks: 1,
        ..Default::default()
    }
}

fn default_split() -> vast_core::face::ExpressionSplit {
    categorize_expressions(&BlendshapeProxy::default_proxy(), 85).expect("default proxy splits")
}

fn flow_correctness() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut norm_err, mut inv_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let z = normal_vec(&mut r, 16);
        let v = normal_vec(&mut r, 16);
        let hz = householder_step(&z, &v).map_err(|e| e.to_string())?;
        let back = householder_step(&hz, &v).map_err(|e| e.to_string())?;
        norm_err = norm_err.max((norm(&hz) - norm(&z)).abs());
        inv_err = inv_err.max(back.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let mut log_det = 0.0f64;
    let mut chain_norm = 0.0f64;
    for k in 0..=8 {
        let cfg = small_model(k);
        let (model, store) =
            VastModel::init::<f64>(cfg.clone(), default_split(), k as u64).map_err(|e| e.to_string())?;
        let h = normal_vec(&mut r, cfg.style_dim);
        let post = posterior_params(&h, &model.enhancer, &store).map_err(|e| e.to_string())?;
        let z0 = sample_latent(&post, &normal_vec(&mut r, cfg.latent_dim)).map_err(|e| e.to_string())?;
        let lat = apply_flow(&z0, &post, &h, &model.enhancer, &store).map_err(|e| e.to_string())?;
        log_det = log_det.max(lat.log_det_sum.abs());
        chain_norm = chain_norm.max((norm(&lat.zk) - norm(&lat.z0)).abs());
    }
    let t = start.elapsed();
    let pass = norm_err < 1e-4 && inv_err < 1e-5 && log_det < 1e-9 && chain_norm < 1e-4 && within(t, 5.0);
    Ok((
        pass,
        format!(
            "norm err {norm_err:.1e}, involution err {inv_err:.1e}, |log det| {log_det:.1e} and chain norm err \
             {chain_norm:.1e} for K <= 8, {:.2}s",
            t.as_secs_f64()
        ),
    ))
}

fn kl_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(2);
    let mu_dist = Normal::new(0.0, 0.3).expect("valid normal");
    let ls_dist = Uniform::new(-0.3, 0.3).expect("valid range");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..16).map(|_| r.sample(mu_dist)).collect();
        let sigma: Vec<f64> = (0..16).map(|_| r.sample::<f64, _>(ls_dist).exp()).collect();
        let post = PosteriorParams::new(mu, sigma).map_err(|e| e.to_string())?;
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let z0 = sample_latent(&post, &normal_vec(&mut r, 16)).map_err(|e| e.to_string())?;
            let lat = StyleLatent { zk: z0.clone(), z0, log_det_sum: 0.0, posterior: post.clone() };
            sum += kl_flow_estimate(&lat).map_err(|e| e.to_string())?;
        }
        worst = worst.max((sum / draws as f64 - kl_diag_standard(&post)).abs());
    }
    let t = start.elapsed();
    Ok((
        worst < 2e-2 && within(t, 30.0),
        format!("max |MC - closed form| {worst:.2e} over 20 posteriors, {:.2}s", t.as_secs_f64()),
    ))
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let (model, mut store) =
        VastModel::init::<f64>(ModelConfig::default(), default_split(), 3).map_err(|e| e.to_string())?;
    let (batch, noise) = probe_inputs(&model, 3).map_err(|e| e.to_string())?;
    let rep = grad_check(&model, &mut store, &batch, &noise, 1.0, 0.7, 3).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    Ok((
        rep.max_rel_error < 1e-4 && within(t, 60.0),
        format!(
            "max relative error {:.2e} over {} probes, {:.2}s",
            rep.max_rel_error,
            rep.probes.len(),
            t.as_secs_f64()
        ),
    ))
}

fn categorization() -> Verdict {
    let proxy = BlendshapeProxy::default_proxy();
    let split = categorize_expressions(&proxy, 85).map_err(|e| e.to_string())?;
    let neutral = proxy.base_vertices().clone();
    let mut worst = 0.0f64;
    for i in 0..proxy.num_params() {
        let r = proxy.param_range()[i];
        let mut best = 0.0f64;
        for k in 0..101 {
            let x = -r + 2.0 * r * k as f64 / 100.0;
            let mut expr = ndarray::Array1::zeros(proxy.num_params());
            expr[i] = x;
            let mesh = proxy.decode_mesh(expr.view()).map_err(|e| e.to_string())?;
            for &v in proxy.mouth_vertex_ids() {
                let d = (&mesh.row(v) - &neutral.row(v)).mapv(|a| a * a).sum().sqrt();
                best = best.max(d);
            }
        }
        let got = proxy.max_mouth_offset(i).map_err(|e| e.to_string())?;
        worst = worst.max((got - best).abs());
    }
    let (w, s) = (split.weak_ids.len(), split.strong_ids.len());
    Ok((
        w == 148 && s == 85 && worst < 1e-9,
        format!("{w} weak / {s} strong, max |offset - grid sweep| {worst:.1e} over {} params", proxy.num_params()),
    ))
}

fn random_similarity(r: &mut ChaCha8Rng) -> SimilarityTransform {
    let axis = Vector3::new(r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal));
    let angle = r.random_range(-3.0..3.0);
    let rotation: Matrix3<f64> = Rotation3::new(axis.normalize() * angle).into_inner();
    let translation = Vector3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
    SimilarityTransform { scale: r.random_range(0.3..3.0), rotation, translation }
}

fn umeyama_lmd() -> Verdict {
    let mut r = rng(5);
    let (mut param_err, mut worst_lmd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let src = Array2::from_shape_simple_fn((20, 3), || r.sample(StandardNormal));
        let truth = random_similarity(&mut r);
        let est = umeyama_align(&src, &truth.apply(&src)).map_err(|e| e.to_string())?;
        let rot = (est.rotation - truth.rotation).abs().max();
        let tr = (est.translation - truth.translation).abs().max();
        param_err = param_err.max((est.scale - truth.scale).abs()).max(rot).max(tr);

        let frames: Vec<Array2<f64>> =
            (0..5).map(|_| Array2::from_shape_simple_fn((20, 3), || r.sample(StandardNormal))).collect();
        let moved: Vec<Array2<f64>> = frames.iter().map(|f| random_similarity(&mut r).apply(f)).collect();
        let all: Vec<usize> = (0..20).collect();
        worst_lmd = worst_lmd.max(lmd(&moved, &frames, &all).map_err(|e| e.to_string())?);
    }
    Ok((
        param_err < 1e-9 && worst_lmd < 1e-8,
        format!("max transform error {param_err:.1e}, max LMD {worst_lmd:.1e} over 100 constructions"),
    ))
}

fn asymmetric_anchor() -> Verdict {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, d) = (r.random_range(1..30), r.random_range(1..40));
        let pred = Array2::from_shape_simple_fn((n, d), || r.sample::<f64, _>(StandardNormal));
        let target = Array2::from_shape_simple_fn((n, d), || r.sample::<f64, _>(StandardNormal));
        let got = asymmetric_recon_loss(pred.view(), target.view(), 0.5).map_err(|e| e.to_string())?;
        let mse = (&pred - &target).mapv(|e| e * e).mean().expect("non-empty");
        worst = worst.max((got - 0.5 * mse).abs());
    }
    Ok((worst < 1e-12, format!("max |loss - MSE/2| {worst:.1e} over 100 tensors")))
}

fn diversity_metric() -> Verdict {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let seqs: Vec<Array2<f64>> = (0..r.random_range(1..5))
            .map(|_| {
                let n = r.random_range(2..25);
                Array2::from_shape_simple_fn((n, 6), || r.sample::<f64, _>(StandardNormal))
            })
            .collect();
        let mut total = 0.0;
        for x in &seqs {
            let (mut sum, mut pairs) = (0.0, 0usize);
            for a in x.axis_iter(Axis(0)) {
                for b in x.axis_iter(Axis(0)) {
                    sum += (&a - &b).mapv(|v| v * v).sum().sqrt();
                    pairs += 1;
                }
            }
            // ordered pairs minus the zero diagonal
            total += sum / (pairs - x.nrows()) as f64;
        }
        let oracle = total / seqs.len() as f64;
        worst = worst.max((diversity(&seqs, None).map_err(|e| e.to_string())? - oracle).abs());
    }
    let constant = vec![Array2::from_elem((17, 6), 0.37)];
    let zero = diversity(&constant, None).map_err(|e| e.to_string())?;
    Ok((worst < 1e-9 && zero == 0.0, format!("max |metric - brute force| {worst:.1e}, constant sequence gives {zero}")))
}

fn ar_causality() -> Verdict {
    let cfg = small_model(2);
    let (model, store) = VastModel::init::<f64>(cfg.clone(), default_split(), 8).map_err(|e| e.to_string())?;
    let mut r = rng(8);
    let n = 12;
    let ppg = Array2::from_shape_simple_fn((n, cfg.ppg_dim), || r.random::<f64>());
    let s = normal_vec(&mut r, cfg.latent_dim);
    let ones = vec![1.0; n];
    let base = model.ar_decode(&store, &ppg, &s, None, 0.0, &ones).map_err(|e| e.to_string())?;
    let (mut leaks, mut dead) = (0usize, 0usize);
    for t0 in 0..n {
        let mut p = ppg.clone();
        p.row_mut(t0).mapv_inplace(|v| v + 1.0);
        let out = model.ar_decode(&store, &p, &s, None, 0.0, &ones).map_err(|e| e.to_string())?;
        if (0..=t0).any(|t| out.row(t) != base.row(t)) {
            leaks += 1;
        }
        if t0 + 1 < n && (t0 + 1..n).all(|t| out.row(t) == base.row(t)) {
            dead += 1;
        }
    }
    Ok((
        leaks == 0 && dead == 0,
        format!("{leaks} of {n} perturbations changed frames <= t0, {dead} left all later frames unchanged"),
    ))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read_config(name: &str) -> Result<String, String> {
    fs::read_to_string(configs_dir().join(name)).map_err(|e| format!("{name}: {e}"))
}

struct Runs {
    main: FitOutcome,
    ablation: FitOutcome,
    init: Checkpoint,
    corpus: Corpus,
    train_secs: f64,
}

fn training_runs(dir: &Path) -> Result<Runs, String> {
    let reference = std::env::var("VAST_ACCEPTANCE_SCALE").is_ok_and(|v| v == "reference");
    let (c, t, a) = if reference {
        ("corpus.toml", "train.toml", "ablation.toml")
    } else {
        ("desk_corpus.toml", "desk_train.toml", "desk_ablation.toml")
    };
    let ccfg = CorpusConfig::from_toml(&read_config(c)?).map_err(|e| e.to_string())?;
    let corpus_dir = dir.join("corpus");
    let corpus = gen_corpus(&ccfg, &corpus_dir).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut outcomes = Vec::new();
    for (name, file) in [("main", t), ("ablation", a)] {
        let mut cfg = TrainConfig::from_toml(&read_config(file)?).map_err(|e| e.to_string())?;
        cfg.corpus = corpus_dir.clone();
        cfg.checkpoint = dir.join(format!("{name}.vten"));
        cfg.log = Some(dir.join(format!("{name}.csv")));
        cfg.checkpoint_every = 0;
        outcomes.push(fit(&cfg, None).map_err(|e| e.to_string())?);
    }
    let train_secs = start.elapsed().as_secs_f64();
    let ablation = outcomes.pop().expect("two runs");
    let main = outcomes.pop().expect("two runs");
    let init = Trainer::new(main.checkpoint.meta.train.clone(), &corpus)
        .map_err(|e| e.to_string())?
        .checkpoint(BTreeMap::new());
    Ok(Runs { main, ablation, init, corpus, train_secs })
}

fn metric(rep: &EvalReport, key: &str) -> f64 {
    rep.metric(key).unwrap_or(f64::NAN)
}

/// Mean strong-dim diversity of outputs prompted by the five highest- and five
/// lowest-amplitude test sequences over the same five target PPGs.
fn amplitude_ordering(ckpt: &Checkpoint, corpus: &Corpus) -> Result<(f64, f64), String> {
    let mut seqs = corpus
        .indices(SplitTag::Test)
        .into_iter()
        .map(|i| corpus.load(i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    seqs.sort_by(|a, b| a.style.g.total_cmp(&b.style.g));
    if seqs.len() < 15 {
        return Err("test split too small for the amplitude ordering".into());
    }
    let mid = seqs.len() / 2;
    let targets: Vec<Array2<f64>> =
        seqs[mid..mid + 5].iter().map(|s| s.aligned_ppg()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let strong = ckpt.model.split.strong_ids.clone();
    let group = |prompts: &[vast_core::synth::SequenceData]| -> Result<f64, String> {
        let mut out = Vec::new();
        for p in prompts {
            let a = p.aligned_ppg().map_err(|e| e.to_string())?;
            for t in &targets {
                out.push(
                    ckpt.model.infer(&ckpt.params, p.expression.frames(), &a, t, None).map_err(|e| e.to_string())?,
                );
            }
        }
        diversity(&out, Some(&strong)).map_err(|e| e.to_string())
    };
    let n = seqs.len();
    Ok((group(&seqs[n - 5..])?, group(&seqs[..5])?))
}

fn end_to_end(runs: &Runs) -> Verdict {
    let h = &runs.main.history;
    let v500 = h.validation_at(500).ok_or("no validation at step 500")?;
    let (last_step, v_end) = *h.validation.last().ok_or("no validation")?;
    let drop = 1.0 - v_end / v500;
    let trained = transfer_error(&runs.main.checkpoint, &runs.corpus, 0, 9).map_err(|e| e.to_string())?;
    let random = transfer_error(&runs.init, &runs.corpus, 0, 9).map_err(|e| e.to_string())?;
    let (ts, rs) = (metric(&trained, "success_rate"), metric(&random, "success_rate"));
    // reported only; not part of the pass condition
    let ordering = match amplitude_ordering(&runs.main.checkpoint, &runs.corpus) {
        Ok((hi, lo)) => format!("; strong-dim diversity {hi:.4} for high-amplitude prompts vs {lo:.4} for low"),
        Err(e) => format!("; amplitude ordering unavailable: {e}"),
    };
    Ok((
        drop >= 0.5 && ts >= 0.9 && rs <= 0.55,
        format!(
            "val recon {v500:.4} at 500 -> {v_end:.4} at {last_step} ({:.1}% drop); transfer success {:.1}% trained \
             (p = {:.1e}) vs {:.1}% random init (p = {:.2}) over {} trials; training {:.0}s{ordering}",
            100.0 * drop,
            100.0 * ts,
            metric(&trained, "permutation_p"),
            100.0 * rs,
            metric(&random, "permutation_p"),
            metric(&trained, "trials"),
            runs.train_secs
        ),
    ))
}

fn latent_structure(runs: &Runs) -> Verdict {
    let main = metric(&cluster_report(&runs.main.checkpoint, &runs.corpus).map_err(|e| e.to_string())?, "silhouette");
    let abl =
        metric(&cluster_report(&runs.ablation.checkpoint, &runs.corpus).map_err(|e| e.to_string())?, "silhouette");
    Ok((main - abl >= 0.05, format!("silhouette {main:.4} vs ablation {abl:.4} (margin {:.4})", main - abl)))
}

fn files_equal(a: &Path, b: &Path) -> Result<bool, String> {
    let mut names: Vec<_> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    names.sort();
    for name in names {
        let (pa, pb) = (a.join(&name), b.join(&name));
        if pa.is_dir() {
            if !files_equal(&pa, &pb)? {
                return Ok(false);
            }
        } else if fs::read(&pa).map_err(|e| e.to_string())? != fs::read(&pb).unwrap_or_default() {
            return Ok(false);
        }
    }
    Ok(true)
}

fn determinism(dir: &Path) -> Verdict {
    let cfg = CorpusConfig { sequences: 40, min_len: 12, max_len: 24, ..Default::default() };
    let (da, db) = (dir.join("a"), dir.join("b"));
    let corpus = gen_corpus(&cfg, &da).map_err(|e| e.to_string())?;
    gen_corpus(&cfg, &db).map_err(|e| e.to_string())?;
    let corpora = files_equal(&da, &db)? && files_equal(&db, &da)?;

    let train = Dataset::from_corpus(&corpus, SplitTag::Train, 0).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig { steps: 50, model: small_model(2), corpus: da.clone(), ..Default::default() };
    let mut trajectories = Vec::new();
    let mut trainers = Vec::new();
    for _ in 0..2 {
        let mut tr = Trainer::new(tcfg.clone(), &corpus).map_err(|e| e.to_string())?;
        let mut losses = Vec::new();
        for step in 0..50 {
            let (batch, noise) =
                step_inputs(tcfg.seed, step, &train, tcfg.batch_size, tcfg.model.latent_dim, tcfg.dropout)
                    .map_err(|e| e.to_string())?;
            let rec = tr.train_step(&batch, &noise).map_err(|e| e.to_string())?;
            losses.push((rec.recon.to_bits(), rec.kl.to_bits()));
        }
        trajectories.push(losses);
        trainers.push(tr);
    }
    let losses = trajectories[0] == trajectories[1];

    let seq = &corpus.records[corpus.indices(SplitTag::Test)[0]];
    let prompt = corpus.dir.join(&corpus.records[corpus.indices(SplitTag::Test)[1]].path);
    let ppg = corpus.dir.join(&seq.path);
    let mut outputs = Vec::new();
    for (k, tr) in trainers.iter().enumerate() {
        let out = dir.join(format!("infer{k}.vten"));
        run_inference(&tr.checkpoint(BTreeMap::new()), &ppg, &prompt, &out, None).map_err(|e| e.to_string())?;
        outputs.push(fs::read(out).map_err(|e| e.to_string())?);
    }
    let inference = outputs[0] == outputs[1];
    Ok((
        corpora && losses && inference,
        format!(
            "corpora identical: {corpora}, 50-step losses identical: {losses}, inference files identical: {inference}"
        ),
    ))
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut failures = 0;
    let mut emit = |id: usize, name: &str, v: Verdict| {
        let (pass, detail) = v.unwrap_or_else(|e| (false, format!("error: {e}")));
        failures += usize::from(!pass);
        println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    emit(1, "flow correctness", flow_correctness());
    emit(2, "KL oracle", kl_oracle());
    emit(3, "gradient check", gradient_check());
    emit(4, "categorization", categorization());
    emit(5, "Umeyama/LMD", umeyama_lmd());
    emit(6, "asymmetric loss anchor", asymmetric_anchor());
    emit(7, "diversity metric", diversity_metric());
    emit(8, "AR causality", ar_causality());
    match training_runs(scratch.path()) {
        Ok(runs) => {
            emit(9, "end-to-end training", end_to_end(&runs));
            emit(10, "latent-space structure", latent_structure(&runs));
        }
        Err(e) => {
            emit(9, "end-to-end training", Err(e.clone()));
            emit(10, "latent-space structure", Err(e));
        }
    }
    emit(11, "determinism", determinism(&scratch.path().join("det")));
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}

//! Metrics over generated sequences and learned embeddings, plus the
//! transfer oracle comparison and single-prompt inference.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Batch, VastModel};
use crate::store::{align_time, ExpressionSequence, NamedTensorArchive, PpgSequence};
use crate::synth::{Corpus, SplitTag};
use crate::trainer::Checkpoint;

fn frame_distance(x: &Array2<f64>, i: usize, j: usize, dims: &[usize]) -> f64 {
    dims.iter().map(|&d| (x[[i, d]] - x[[j, d]]).powi(2)).sum::<f64>().sqrt()
}

fn resolve_dims(width: usize, dims: Option<&[usize]>) -> Result<Vec<usize>> {
    match dims {
        None => Ok((0..width).collect()),
        Some([]) => Err(Error::InvalidArgument("empty dimension subset".into())),
        Some(d) if d.iter().any(|&i| i >= width) => {
            Err(Error::InvalidArgument(format!("dimension index out of range for width {width}")))
        }
        Some(d) => Ok(d.to_vec()),
    }
}

/// Mean over sequences of the mean pairwise Euclidean distance between frames
/// (restricted to `dims`). A single-frame sequence contributes 0.
pub fn diversity(seqs: &[Array2<f64>], dims: Option<&[usize]>) -> Result<f64> {
    let first = seqs.first().ok_or_else(|| Error::InvalidArgument("no sequences".into()))?;
    let dims = resolve_dims(first.ncols(), dims)?;
    let mut total = 0.0;
    for x in seqs {
        if x.ncols() != first.ncols() {
            return Err(Error::Shape("sequences differ in width".into()));
        }
        let n = x.nrows();
        if n < 2 {
            continue;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += frame_distance(x, i, j, &dims);
            }
        }
        total += sum / (n * (n - 1) / 2) as f64;
    }
    Ok(total / seqs.len() as f64)
}

/// Inter-sequence variant: mean pairwise distance between the time-averaged
/// frames of different sequences. Needs at least two sequences.
pub fn diversity_between(seqs: &[Array2<f64>], dims: Option<&[usize]>) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::InvalidArgument("inter-sequence diversity needs two sequences".into()));
    }
    let dims = resolve_dims(seqs[0].ncols(), dims)?;
    let mut means = Array2::zeros((seqs.len(), seqs[0].ncols()));
    for (k, x) in seqs.iter().enumerate() {
        if x.ncols() != seqs[0].ncols() || x.nrows() == 0 {
            return Err(Error::Shape("sequences must be non-empty and equally wide".into()));
        }
        means.row_mut(k).assign(&x.mean_axis(Axis(0)).expect("non-empty"));
    }
    let m = seqs.len();
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += frame_distance(&means, i, j, &dims);
        }
    }
    Ok(sum / (m * (m - 1) / 2) as f64)
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(embeddings: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} points", labels.len())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::InvalidArgument("silhouette needs two labels with two members each".into()));
    }
    let dist = |i: usize, j: usize| {
        embeddings.row(i).iter().zip(embeddings.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (j, &l) in labels.iter().enumerate() {
            if j != i {
                *sums.entry(l).or_default() += dist(i, j);
            }
        }
        let own = labels[i];
        let a = sums.get(&own).copied().unwrap_or(0.0) / (counts[&own] - 1) as f64;
        let b =
            sums.iter().filter(|(l, _)| **l != own).map(|(l, s)| s / counts[l] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Projection of the centered data onto its two leading principal axes,
/// columns in decreasing variance order.
pub fn pca_2d(embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = embeddings.dim();
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two points".into()));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("n >= 2");
    let centered = embeddings - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Array2::zeros((d, 2));
    for (k, &c) in order.iter().take(2).enumerate() {
        for i in 0..d {
            basis[[i, k]] = eig.eigenvectors[(i, c)];
        }
    }
    Ok(centered.dot(&basis))
}

/// Metric table of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Writes `metric,value` lines to `path` and the per-item table to
    /// `<stem>_items.csv` beside it.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.metrics.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("report metric".into()));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        w.write_record(["metric", "value"]).map_err(io_err)?;
        w.write_record(["fingerprint", &self.fingerprint]).map_err(io_err)?;
        for (k, v) in &self.metrics {
            w.write_record([k.as_str(), &v.to_string()]).map_err(io_err)?;
        }
        w.flush()?;
        if !self.columns.is_empty() {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let mut t = csv::Writer::from_path(path.with_file_name(format!("{stem}_items.csv"))).map_err(io_err)?;
            t.write_record(&self.columns).map_err(io_err)?;
            for row in &self.rows {
                t.write_record(row.iter().map(|v| v.to_string())).map_err(io_err)?;
            }
            t.flush()?;
        }
        Ok(())
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Two-sided sign-flip permutation p-value for `mean(diffs) != 0`.
pub fn sign_flip_p_value(diffs: &[f64], rounds: usize, seed: u64) -> f64 {
    if diffs.is_empty() || rounds == 0 {
        return 1.0;
    }
    let observed = diffs.iter().sum::<f64>().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..rounds {
        let s: f64 = diffs.iter().map(|&d| if rng.random::<bool>() { d } else { -d }).sum();
        if s.abs() >= observed - 1e-12 * observed.max(1.0) {
            extreme += 1;
        }
    }
    (extreme + 1) as f64 / (rounds + 1) as f64
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Style embedding `z_K` (posterior mean pushed through the flow) of one sequence.
pub fn embed<T: crate::autograd::Scalar>(
    model: &VastModel,
    params: &ParamStore<T>,
    expr: &Array2<f64>,
    aligned_ppg: &Array2<f64>,
) -> Result<Vec<f64>> {
    let batch = Batch::new(&[(expr, aligned_ppg)])?;
    Ok(model.style_embedding(params, &batch, None)?.row(0).to_vec())
}

/// Embeddings and family labels for the sequences of `tag`, batched.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    tag: SplitTag,
    use_mu: bool,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let ids = corpus.indices(tag);
    let mut rows = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(16) {
        let data: Vec<_> = chunk
            .iter()
            .map(|&i| {
                let s = corpus.load(i)?;
                Ok((s.expression.frames().clone(), s.aligned_ppg()?, s.style.family_id))
            })
            .collect::<Result<_>>()?;
        let items: Vec<_> = data.iter().map(|(x, a, _)| (x, a)).collect();
        let batch = Batch::new(&items)?;
        let e = if use_mu {
            ckpt.model.posterior_mean(&ckpt.params, &batch)?
        } else {
            ckpt.model.style_embedding(&ckpt.params, &batch, None)?
        };
        rows.extend(e.rows().into_iter().map(|r| r.to_owned()));
        labels.extend(data.iter().map(|d| d.2));
    }
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok((out, labels))
}

/// Silhouette of test-split embeddings by style family, plus their PCA projection.
pub fn cluster_report(ckpt: &Checkpoint, corpus: &Corpus) -> Result<EvalReport> {
    ckpt.check_fingerprint(&corpus.fingerprint)?;
    // a flow-free model's embedding is its posterior mean
    let use_mu = ckpt.model.config.flow_steps == 0;
    let (emb, labels) = export_embeddings(ckpt, corpus, SplitTag::Test, use_mu)?;
    let score = silhouette(&emb, &labels)?;
    let proj = pca_2d(&emb)?;
    let mut columns = vec!["family".to_string(), "pc1".to_string(), "pc2".to_string()];
    columns.extend((0..emb.ncols()).map(|j| format!("z{j}")));
    let rows = (0..emb.nrows())
        .map(|i| {
            let mut r = vec![labels[i] as f64, proj[[i, 0]], proj[[i, 1]]];
            r.extend(emb.row(i).iter());
            r
        })
        .collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("silhouette".into(), score);
    metrics.insert("sequences".into(), emb.nrows() as f64);
    Ok(EvalReport { metrics, columns, rows, fingerprint: corpus.fingerprint.clone() })
}

/// One style-transfer trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferTrial {
    pub prompt: usize,
    pub mismatch: usize,
    pub target: usize,
    pub matched: f64,
    pub mismatched: f64,
}

/// Zero-shot transfer against the closed-form oracle on the test split.
///
/// Test sequences are paired `(i, k)` with different style families and a
/// third sequence `j` supplies unseen PPG. Each pair yields two trials (each
/// side as the prompt, the other as the mismatch), so a model that ignores
/// the style scores about one half by construction.
pub fn transfer_error(ckpt: &Checkpoint, corpus: &Corpus, max_pairs: usize, seed: u64) -> Result<EvalReport> {
    ckpt.check_fingerprint(&corpus.fingerprint)?;
    let ids = corpus.indices(SplitTag::Test);
    if ids.len() < 3 {
        return Err(Error::InvalidArgument("transfer needs at least three test sequences".into()));
    }
    let seqs = ids.iter().map(|&i| corpus.load(i)).collect::<Result<Vec<_>>>()?;
    let aligned = seqs.iter().map(|s| s.aligned_ppg()).collect::<Result<Vec<_>>>()?;
    let emb = seqs
        .iter()
        .zip(&aligned)
        .map(|(s, a)| embed(&ckpt.model, &ckpt.params, s.expression.frames(), a))
        .collect::<Result<Vec<_>>>()?;

    let mut trials = Vec::new();
    let mut i = 0;
    while i + 1 < seqs.len() && (max_pairs == 0 || trials.len() < 2 * max_pairs) {
        let Some(k) = (i + 1..seqs.len()).find(|&k| seqs[k].style.family_id != seqs[i].style.family_id) else {
            break;
        };
        let j = (k + 1) % seqs.len();
        let j = if j == i { (j + 1) % seqs.len() } else { j };
        let target = &aligned[j];
        let oracle_i = corpus.constants.oracle(target, &seqs[i].style)?;
        let oracle_k = corpus.constants.oracle(target, &seqs[k].style)?;
        for (p, q, op, oq) in [(i, k, &oracle_i, &oracle_k), (k, i, &oracle_k, &oracle_i)] {
            let pred = ckpt.model.nar_decode(&ckpt.params, target, &emb[p])?;
            trials.push(TransferTrial {
                prompt: ids[p],
                mismatch: ids[q],
                target: ids[j],
                matched: mse(&pred, op),
                mismatched: mse(&pred, oq),
            });
        }
        i = k + 1;
    }
    if trials.is_empty() {
        return Err(Error::InvalidArgument("no cross-family pairs in the test split".into()));
    }
    Ok(transfer_summary(&trials, &corpus.fingerprint, seed))
}

pub fn transfer_summary(trials: &[TransferTrial], fingerprint: &str, seed: u64) -> EvalReport {
    let n = trials.len() as f64;
    let wins = trials.iter().filter(|t| t.matched < t.mismatched).count() as f64;
    let diffs: Vec<f64> = trials.iter().map(|t| t.mismatched - t.matched).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("trials".into(), n);
    metrics.insert("success_rate".into(), wins / n);
    metrics.insert("matched_mse".into(), trials.iter().map(|t| t.matched).sum::<f64>() / n);
    metrics.insert("mismatched_mse".into(), trials.iter().map(|t| t.mismatched).sum::<f64>() / n);
    metrics.insert("permutation_p".into(), sign_flip_p_value(&diffs, 10_000, seed));
    let columns = ["prompt", "mismatch", "target", "matched_mse", "mismatched_mse"].map(String::from).to_vec();
    let rows = trials
        .iter()
        .map(|t| vec![t.prompt as f64, t.mismatch as f64, t.target as f64, t.matched, t.mismatched])
        .collect();
    EvalReport { metrics, columns, rows, fingerprint: fingerprint.to_string() }
}

/// Generates expressions for every test sequence from its own prompt and PPG
/// and reports intra-sequence diversity over all dims and the strong subset.
pub fn diversity_report(ckpt: &Checkpoint, corpus: &Corpus, inter: bool) -> Result<EvalReport> {
    ckpt.check_fingerprint(&corpus.fingerprint)?;
    let mut generated = Vec::new();
    let mut truth = Vec::new();
    for i in corpus.indices(SplitTag::Test) {
        let s = corpus.load(i)?;
        let a = s.aligned_ppg()?;
        generated.push(ckpt.model.infer(&ckpt.params, s.expression.frames(), &a, &a, None)?);
        truth.push(s.expression.into_frames());
    }
    if generated.is_empty() {
        return Err(Error::InvalidArgument("empty test split".into()));
    }
    let strong = ckpt.model.split.strong_ids.clone();
    let metric = |x: &[Array2<f64>], d: Option<&[usize]>| if inter { diversity_between(x, d) } else { diversity(x, d) };
    let mut metrics = BTreeMap::new();
    metrics.insert("dvt_x".into(), metric(&generated, None)?);
    metrics.insert("dvt_x_strong".into(), metric(&generated, Some(&strong))?);
    metrics.insert("dvt_x_truth".into(), metric(&truth, None)?);
    metrics.insert("dvt_x_strong_truth".into(), metric(&truth, Some(&strong))?);
    let columns = ["dvt_x", "dvt_x_strong"].map(String::from).to_vec();
    let rows = generated
        .iter()
        .map(|x| {
            let one = std::slice::from_ref(x);
            Ok(vec![diversity(one, None)?, diversity(one, Some(&strong))?])
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { metrics, columns, rows, fingerprint: corpus.fingerprint.clone() })
}

/// Expression frame count for a PPG of `frames` frames at `rate_hz`.
pub fn output_frames(frames: usize, rate_hz: f64) -> usize {
    ((frames as f64 * ExpressionSequence::DEFAULT_RATE_HZ / rate_hz).round() as usize).max(1)
}

fn read_ppg(a: &NamedTensorArchive) -> Result<PpgSequence> {
    let frames = match a.f64_matrix("ppg") {
        Ok(m) => m,
        Err(_) => a.f32_matrix("ppg")?.mapv(f64::from),
    };
    let rate = match a.f64_values("ppg_rate") {
        Ok(v) if v.len() == 1 => v[0],
        Ok(_) => return Err(Error::Shape("ppg_rate must be a scalar".into())),
        Err(_) => crate::synth::PPG_RATE_HZ,
    };
    PpgSequence::new(frames, rate)
}

/// Reads a PPG and a prompt (`expression` + `ppg`) archive, generates an
/// expression sequence at 25 fps for the PPG and writes it to `out`.
/// `eps = None` uses the posterior mean.
pub fn run_inference(
    ckpt: &Checkpoint,
    ppg_file: impl AsRef<Path>,
    prompt_file: impl AsRef<Path>,
    out_file: impl AsRef<Path>,
    eps: Option<&[f64]>,
) -> Result<ExpressionSequence> {
    let ppg = read_ppg(&NamedTensorArchive::load(ppg_file)?)?;
    let prompt = NamedTensorArchive::load(prompt_file)?;
    let prompt_expr = match prompt.f64_matrix("expression") {
        Ok(m) => m,
        Err(_) => prompt.f32_matrix("expression")?.mapv(f64::from),
    };
    let prompt_expr = ExpressionSequence::new(prompt_expr, ExpressionSequence::DEFAULT_RATE_HZ)?;
    let prompt_ppg = read_ppg(&prompt)?;
    let prompt_aligned = align_time(prompt_ppg.frames(), prompt_expr.len())?;
    let n = output_frames(ppg.len(), ppg.frame_rate_hz());
    let target = align_time(ppg.frames(), n)?;
    let out = ckpt.model.infer(&ckpt.params, prompt_expr.frames(), &prompt_aligned, &target, eps)?;
    let seq = ExpressionSequence::new(out, ExpressionSequence::DEFAULT_RATE_HZ)?;
    let mut a = NamedTensorArchive::new();
    a.push_f32_matrix("expression", &seq.frames().mapv(|v| v as f32))?;
    a.push_f64_vec("expr_rate", &[seq.frame_rate_hz()])?;
    if let Some(dir) = out_file.as_ref().parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    a.save(out_file)?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diversity_basics() {
        let c = Array2::from_elem((5, 3), 0.7);
        assert_eq!(diversity(&[c], None).unwrap(), 0.0);
        let two = array![[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(diversity(std::slice::from_ref(&two), None).unwrap(), 5.0);
        assert_eq!(diversity(std::slice::from_ref(&two), Some(&[1])).unwrap(), 4.0);
        assert!(diversity(&[], None).is_err());
        assert!(diversity(&[two], Some(&[])).is_err());
    }

    #[test]
    fn silhouette_hand_value() {
        // points 0, 1 (label 0) and 4, 6 (label 1) on a line
        let x = array![[0.0], [1.0], [4.0], [6.0]];
        let s = silhouette(&x, &[0, 0, 1, 1]).unwrap();
        let s0 = (5.0 - 1.0) / 5.0;
        let s1 = (4.0 - 1.0) / 4.0;
        let s2 = (3.5 - 2.0) / 3.5;
        let s3 = (5.5 - 2.0) / 5.5;
        assert!((s - (s0 + s1 + s2 + s3) / 4.0).abs() < 1e-15);
        assert!(silhouette(&x, &[0, 0, 0, 1]).is_err());
    }

    #[test]
    fn sign_flip_extremes() {
        assert!(sign_flip_p_value(&[1.0; 30], 2000, 0) < 0.01);
        let balanced: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(sign_flip_p_value(&balanced, 2000, 0) > 0.5);
    }

    #[test]
    fn frame_count_conversion() {
        assert_eq!(output_frames(100, 50.0), 50);
        assert_eq!(output_frames(1, 50.0), 1);
    }
}

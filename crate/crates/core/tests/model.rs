use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vast_core::autograd::{Graph, ParamStore};
use vast_core::face::ExpressionSplit;
use vast_core::model::{assemble_expression, ppg_dropout, Batch, ForwardNoise, ModelConfig, VastModel};

const WEAK: usize = 7;
const STRONG: usize = 5;

fn split() -> ExpressionSplit {
    // interleaved, so assembly actually permutes columns
    let strong: Vec<usize> = vec![1, 4, 6, 9, 11];
    let weak = (0..WEAK + STRONG).filter(|i| !strong.contains(i)).collect();
    ExpressionSplit::new(weak, strong, 0.1).unwrap()
}

fn config(positional_encoding: bool) -> ModelConfig {
    ModelConfig {
        expr_dim: WEAK + STRONG,
        ppg_dim: 6,
        enc_channels: 5,
        enc_hidden: 6,
        style_dim: 6,
        latent_dim: 4,
        flow_steps: 2,
        ar_hidden: 8,
        nar_dim: 8,
        nar_heads: 2,
        nar_ff: 12,
        nar_blocks: 2,
        positional_encoding,
        ..Default::default()
    }
}

fn model(positional_encoding: bool, seed: u64) -> (VastModel, ParamStore<f64>) {
    VastModel::init::<f64>(config(positional_encoding), split(), seed).unwrap()
}

fn ppg(r: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_simple_fn((n, 6), || r.random::<f64>() + 0.01);
    for mut row in a.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    a
}

fn normals(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.sample(StandardNormal))
}

#[test]
fn dropout_keeps_the_expected_fraction() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let a = Array2::from_elem((n, 2), 0.5);
    let noise: Vec<f64> = (0..n).map(|_| r.random()).collect();
    let out = ppg_dropout(&a, 0.2, &noise).unwrap();
    let kept = out.rows().into_iter().filter(|row| row[0] != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.8).abs() < 0.01, "kept {kept}");
    // survivors are rescaled so the expectation is unchanged
    assert!(out.rows().into_iter().filter(|row| row[0] != 0.0).all(|row| (row[0] - 0.625).abs() < 1e-15));
    assert!(ppg_dropout(&a, 0.2, &noise[..10]).is_err());
}

#[test]
fn assembly_matches_index_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (weak, strong) = (normals(&mut r, 9, WEAK), normals(&mut r, 9, STRONG));
    let sp = split();
    let out = assemble_expression(&weak, &strong, &sp).unwrap();
    let mut want = Array2::zeros((9, WEAK + STRONG));
    for t in 0..9 {
        for (k, &c) in sp.weak_ids.iter().enumerate() {
            want[[t, c]] = weak[[t, k]];
        }
        for (k, &c) in sp.strong_ids.iter().enumerate() {
            want[[t, c]] = strong[[t, k]];
        }
    }
    assert_eq!(out, want);
    let (w2, s2) = sp.split(&out).unwrap();
    assert_eq!((w2, s2), (weak, strong));

    let mut one_hot = Array2::zeros((3, STRONG));
    one_hot.column_mut(2).fill(1.0);
    let out = assemble_expression(&Array2::zeros((3, WEAK)), &one_hot, &sp).unwrap();
    for c in 0..WEAK + STRONG {
        assert_eq!(out.column(c).sum() != 0.0, c == sp.strong_ids[2]);
    }
}

#[test]
fn nar_is_deterministic_and_sized() {
    let (m, store) = model(true, 3);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let a = ppg(&mut r, 10);
    let s: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
    assert_eq!(m.nar_decode(&store, &a, &s).unwrap(), m.nar_decode(&store, &a, &s).unwrap());
    assert_eq!(m.nar_decode(&store, &a.slice(s![..1, ..]).to_owned(), &s).unwrap().dim(), (1, STRONG));
    assert!(m.nar_decode(&store, &a, &s[..3]).is_err());
}

#[test]
fn nar_without_positions_is_permutation_equivariant() {
    let (m, store) = model(false, 4);
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let a = ppg(&mut r, 11);
    let s: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
    let out = m.nar_decode(&store, &a, &s).unwrap();
    let rev = m.nar_decode(&store, &a.slice(s![..;-1, ..]).to_owned(), &s).unwrap();
    let diff = (&out.slice(s![..;-1, ..]) - &rev).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff < 1e-12, "diff {diff}");

    // with positions on, order matters
    let (m, store) = model(true, 4);
    let out = m.nar_decode(&store, &a, &s).unwrap();
    let rev = m.nar_decode(&store, &a.slice(s![..;-1, ..]).to_owned(), &s).unwrap();
    assert!((&out.slice(s![..;-1, ..]) - &rev).mapv(f64::abs).sum() > 1e-6);
}

#[test]
fn ar_teacher_forcing_fixed_point() {
    let (m, store) = model(true, 5);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a = ppg(&mut r, 9);
    let s: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
    let ones = vec![1.0; 9];
    let free = m.ar_decode(&store, &a, &s, None, 0.0, &ones).unwrap();
    let forced = m.ar_decode(&store, &a, &s, Some(&free), 0.0, &ones).unwrap();
    let diff = (&free - &forced).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff < 1e-12, "diff {diff}");
    assert!(m.ar_decode(&store, &a, &s, Some(&Array2::zeros((9, WEAK + 1))), 0.0, &ones).is_err());
}

#[test]
fn ar_single_frame_ignores_its_ppg() {
    let (m, store) = model(true, 6);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let s: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
    let a = ppg(&mut r, 1);
    let b = ppg(&mut r, 1);
    let x = m.ar_decode(&store, &a, &s, None, 0.0, &[1.0]).unwrap();
    assert_eq!(x.dim(), (1, WEAK));
    assert_eq!(x, m.ar_decode(&store, &b, &s, None, 0.0, &[1.0]).unwrap());
    let other: Vec<f64> = s.iter().map(|v| v + 0.5).collect();
    assert_ne!(x, m.ar_decode(&store, &a, &other, None, 0.0, &[1.0]).unwrap());
}

#[test]
fn ar_is_causal_in_teacher_forced_mode_too() {
    let (m, store) = model(true, 7);
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let n = 12;
    let a = ppg(&mut r, n);
    let x = normals(&mut r, n, WEAK);
    let s: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
    let ones = vec![1.0; n];
    let base = m.ar_decode(&store, &a, &s, Some(&x), 0.0, &ones).unwrap();
    for t0 in 0..n {
        let mut x2 = x.clone();
        x2.row_mut(t0).mapv_inplace(|v| v + 1.0);
        let out = m.ar_decode(&store, &a, &s, Some(&x2), 0.0, &ones).unwrap();
        for t in 0..=t0 {
            assert_eq!(out.row(t), base.row(t));
        }
    }
}

fn loss_of(m: &VastModel, store: &ParamStore<f64>, batch: &Batch, noise: &ForwardNoise) -> (f64, f64) {
    let mut g = Graph::new();
    let (_, l) = m.loss(&mut g, store, batch, noise, 0.5, 0.7, true).unwrap();
    (g.scalar(l.recon), g.scalar(l.kl))
}

#[test]
fn padding_does_not_change_the_loss() {
    let (m, store) = model(true, 8);
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let (xa, aa) = (normals(&mut r, 9, WEAK + STRONG), ppg(&mut r, 9));
    let (xb, ab) = (normals(&mut r, 14, WEAK + STRONG), ppg(&mut r, 14));
    let items = [(&xa, &aa), (&xb, &ab)];
    let tight = Batch::new(&items).unwrap();
    let loose = Batch::padded(&items, 23).unwrap();
    let eps = normals(&mut r, 2, 4);
    let frame_noise: Vec<Vec<f64>> = [9, 14].iter().map(|&n| (0..n).map(|_| r.random()).collect()).collect();
    let mk = |b: &Batch| ForwardNoise {
        eps: eps.clone(),
        dropout: 0.2,
        frame_noise: b.lengths.iter().zip(&frame_noise).map(|(_, f)| f.clone()).collect(),
    };
    let (r1, k1) = loss_of(&m, &store, &tight, &mk(&tight));
    let (r2, k2) = loss_of(&m, &store, &loose, &mk(&loose));
    assert!((r1 - r2).abs() < 1e-9 && (k1 - k2).abs() < 1e-9, "{r1} {r2} {k1} {k2}");
}

#[test]
fn batch_members_do_not_interact() {
    let (m, store) = model(true, 9);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (xa, aa) = (normals(&mut r, 6, WEAK + STRONG), ppg(&mut r, 6));
    let (xb, ab) = (normals(&mut r, 17, WEAK + STRONG), ppg(&mut r, 17));
    let alone = m.style_embedding(&store, &Batch::new(&[(&xa, &aa)]).unwrap(), None).unwrap();
    let both = m.style_embedding(&store, &Batch::new(&[(&xa, &aa), (&xb, &ab)]).unwrap(), None).unwrap();
    let diff = (&alone.row(0) - &both.row(0)).mapv(f64::abs).sum();
    assert!(diff < 1e-12);
}

#[test]
fn parameters_survive_an_archive_roundtrip() {
    let (m, store) = model(true, 10);
    let mut a = vast_core::store::NamedTensorArchive::new();
    m.params_to_archive(&store, &mut a).unwrap();
    let (_, mut other) = model(true, 11);
    m.params_from_archive(&mut other, &a).unwrap();
    for (x, y) in store.values().iter().zip(other.values()) {
        // stored as f32
        assert!((x - y).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) < 1e-6);
    }
}

//! Deterministic synthetic corpus with known style parameters.
//!
//! Strong expression dims follow `g * W_p a_t + b * u + noise`, with `W_p` and
//! `u` fixed per corpus, so the noiseless target for any (PPG, style) pair is
//! known in closed form. Weak dims are independent Ornstein-Uhlenbeck
//! processes whose noise scale is the only style signal they carry.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::face::{categorize_expressions, BlendshapeProxy, ExpressionSplit, DEFAULT_STRONG};
use crate::store::{align_time, ExpressionSequence, NamedTensorArchive, PpgSequence};

pub const PPG_RATE_HZ: f64 = 50.0;
pub const OU_DECAY: f64 = 0.95;
pub const STRONG_NOISE: f64 = 0.01;
pub const MANIFEST: &str = "manifest.tsv";
pub const CONSTANTS: &str = "constants.vten";
pub const PROXY: &str = "proxy.vten";
pub const CONFIG: &str = "corpus.toml";

/// Ground-truth style of one synthetic sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub family_id: usize,
    /// Amplitude, in [0.5, 2.0].
    pub g: f64,
    /// Openness offset, in [-0.3, 0.3].
    pub b: f64,
    pub weak_noise_scale: f64,
}

impl StyleSpec {
    pub fn new(family_id: usize, g: f64, b: f64, weak_noise_scale: f64) -> Result<Self> {
        if !(0.5..=2.0).contains(&g)
            || !(-0.3..=0.3).contains(&b)
            || weak_noise_scale.is_nan()
            || weak_noise_scale <= 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "style (g = {g}, b = {b}, noise = {weak_noise_scale}) out of range"
            )));
        }
        Ok(Self { family_id, g, b, weak_noise_scale })
    }

    fn to_vec(self) -> Vec<f64> {
        vec![self.family_id as f64, self.g, self.b, self.weak_noise_scale]
    }
}

/// Family centers `(g, b, weak_noise_scale)`; sequences jitter around these.
pub const FAMILY_CENTERS: [(f64, f64, f64); 5] =
    [(0.6, -0.2, 0.02), (1.0, 0.0, 0.05), (1.45, 0.2, 0.03), (1.9, -0.1, 0.08), (0.8, 0.25, 0.12)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub ppg_dim: usize,
    pub families: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Set to zero for a noiseless strong-dim corpus.
    pub strong_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            sequences: 2000,
            min_len: 32,
            max_len: 96,
            ppg_dim: 40,
            families: 5,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            strong_noise: STRONG_NOISE,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fracs:?} must be in [0, 1] and sum to 1")));
        }
        if self.min_len < 8 || self.max_len < self.min_len {
            return Err(Error::Config(format!("length range [{}, {}] (minimum 8)", self.min_len, self.max_len)));
        }
        if self.sequences == 0 || self.ppg_dim == 0 {
            return Err(Error::Config("sequence count and PPG width must be positive".into()));
        }
        if self.families == 0 || self.families > FAMILY_CENTERS.len() {
            return Err(Error::Config(format!("families must be in 1..={}", FAMILY_CENTERS.len())));
        }
        if !(self.strong_noise >= 0.0 && self.strong_noise.is_finite()) {
            return Err(Error::Config("strong_noise must be a nonnegative number".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus config serializes")
    }

    /// `(train, val, test)` counts; the test split takes the rounding remainder.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.sequences as f64;
        let train = (self.train_fraction * n).round() as usize;
        let val = ((self.val_fraction * n).round() as usize).min(self.sequences - train);
        (train, val, self.sequences - train - val)
    }
}

/// Corpus-wide constants of the strong-dim generator.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConstants {
    /// `n_strong x P`
    pub w_p: Array2<f64>,
    pub u: Array1<f64>,
}

impl CorpusConstants {
    pub fn generate(seed: u64, n_strong: usize, ppg_dim: usize) -> Self {
        let mut rng = stream(seed, 0);
        let w_p = Array2::from_shape_simple_fn((n_strong, ppg_dim), || rng.sample(StandardNormal));
        let u = Array1::from_shape_simple_fn(n_strong, || rng.sample(StandardNormal));
        Self { w_p, u }
    }

    /// SHA-256 over the little-endian bytes of `W_p` then `u`, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.w_p.iter().chain(self.u.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Noiseless strong-dim target `g W_p a_t + b u` for an `N x P` PPG.
    pub fn oracle(&self, ppg: &Array2<f64>, style: &StyleSpec) -> Result<Array2<f64>> {
        if ppg.ncols() != self.w_p.ncols() {
            return Err(Error::Shape(format!("PPG has {} classes, W_p expects {}", ppg.ncols(), self.w_p.ncols())));
        }
        let mut x = ppg.dot(&self.w_p.t()) * style.g;
        x += &(&self.u * style.b);
        Ok(x)
    }

    pub fn to_archive(&self) -> Result<NamedTensorArchive> {
        let mut a = NamedTensorArchive::new();
        a.push_f64_matrix("w_p", &self.w_p)?;
        a.push_f64_vec("u", self.u.as_slice().expect("contiguous"))?;
        Ok(a)
    }

    pub fn from_archive(a: &NamedTensorArchive) -> Result<Self> {
        let w_p = a.f64_matrix("w_p")?;
        let u = Array1::from(a.f64_values("u")?);
        if u.len() != w_p.nrows() {
            return Err(Error::Shape(format!("u has {} entries, W_p {} rows", u.len(), w_p.nrows())));
        }
        Ok(Self { w_p, u })
    }
}

/// Independent substream per sequence; stream 0 holds the corpus constants.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Phoneme segments of 3-10 frames, one-hot, smoothed by a centered 3-frame
/// moving average (truncated at the ends) and renormalized.
pub fn gen_ppg(rng: &mut impl Rng, t: usize, p: usize) -> Result<PpgSequence> {
    if t == 0 || p == 0 {
        return Err(Error::InvalidArgument("PPG needs at least one frame and one class".into()));
    }
    let mut onehot = Array2::<f64>::zeros((t, p));
    let mut start = 0;
    while start < t {
        let len = rng.random_range(3..=10);
        let class = rng.random_range(0..p);
        for row in start..(start + len).min(t) {
            onehot[[row, class]] = 1.0;
        }
        start += len;
    }
    let mut frames = Array2::<f64>::zeros((t, p));
    for i in 0..t {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(t - 1);
        let mut row = frames.row_mut(i);
        for j in lo..=hi {
            row += &onehot.row(j);
        }
        let s = row.sum();
        row /= s;
    }
    PpgSequence::new(frames, PPG_RATE_HZ)
}

/// Expression sequence for `style` driven by `ppg` (already aligned to `N` frames).
pub fn gen_sequence(
    rng: &mut impl Rng,
    style: &StyleSpec,
    ppg: &Array2<f64>,
    constants: &CorpusConstants,
    split: &ExpressionSplit,
    strong_noise: f64,
) -> Result<ExpressionSequence> {
    if split.strong_ids.len() != constants.w_p.nrows() {
        return Err(Error::Shape(format!(
            "{} strong dims but W_p has {} rows",
            split.strong_ids.len(),
            constants.w_p.nrows()
        )));
    }
    let n = ppg.nrows();
    let mut strong = constants.oracle(ppg, style)?;
    strong.mapv_inplace(|v| v + strong_noise * rng.sample::<f64, _>(StandardNormal));

    let wd = split.weak_ids.len();
    let stationary = style.weak_noise_scale / (1.0 - OU_DECAY * OU_DECAY).sqrt();
    let mut weak = Array2::<f64>::zeros((n, wd));
    for j in 0..wd {
        weak[[0, j]] = stationary * rng.sample::<f64, _>(StandardNormal);
    }
    for t in 1..n {
        for j in 0..wd {
            let eta: f64 = rng.sample(StandardNormal);
            weak[[t, j]] = OU_DECAY * weak[[t - 1, j]] + style.weak_noise_scale * eta;
        }
    }
    let frames = crate::model::assemble_expression(&weak, &strong, split)?;
    ExpressionSequence::new(frames, ExpressionSequence::DEFAULT_RATE_HZ)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub split: SplitTag,
    pub family_id: usize,
    pub g: f64,
    pub b: f64,
    pub weak_noise_scale: f64,
    pub n: usize,
}

impl ManifestRecord {
    pub fn style(&self) -> StyleSpec {
        StyleSpec { family_id: self.family_id, g: self.g, b: self.b, weak_noise_scale: self.weak_noise_scale }
    }
}

/// A sequence as stored: PPG at its native rate plus the expression frames.
#[derive(Clone, Debug)]
pub struct SequenceData {
    pub ppg: PpgSequence,
    pub expression: ExpressionSequence,
    pub style: StyleSpec,
}

impl SequenceData {
    /// PPG resampled to the expression frame count.
    pub fn aligned_ppg(&self) -> Result<Array2<f64>> {
        align_time(self.ppg.frames(), self.expression.len())
    }

    pub fn to_archive(&self) -> Result<NamedTensorArchive> {
        let mut a = NamedTensorArchive::new();
        a.push_f32_matrix("ppg", &self.ppg.frames().mapv(|v| v as f32))?;
        a.push_f32_matrix("expression", &self.expression.frames().mapv(|v| v as f32))?;
        a.push_f64_vec("style", &self.style.to_vec())?;
        a.push_f64_vec("ppg_rate", &[self.ppg.frame_rate_hz()])?;
        a.push_f64_vec("expr_rate", &[self.expression.frame_rate_hz()])?;
        Ok(a)
    }

    pub fn from_archive(a: &NamedTensorArchive) -> Result<Self> {
        let ppg_rate = scalar(a, "ppg_rate")?;
        let expr_rate = scalar(a, "expr_rate")?;
        let ppg = PpgSequence::new(a.f32_matrix("ppg")?.mapv(f64::from), ppg_rate)?;
        let expression = ExpressionSequence::new(a.f32_matrix("expression")?.mapv(f64::from), expr_rate)?;
        let s = a.f64_values("style")?;
        if s.len() != 4 {
            return Err(Error::Shape(format!("style record of length {}", s.len())));
        }
        let style = StyleSpec { family_id: s[0] as usize, g: s[1], b: s[2], weak_noise_scale: s[3] };
        Ok(Self { ppg, expression, style })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&NamedTensorArchive::load(path)?)
    }
}

fn scalar(a: &NamedTensorArchive, name: &str) -> Result<f64> {
    match a.f64_values(name)?.as_slice() {
        [v] => Ok(*v),
        other => Err(Error::Shape(format!("{name}: expected a scalar, found {} values", other.len()))),
    }
}

fn sample_style(rng: &mut impl Rng, family: usize) -> StyleSpec {
    let (g, b, s) = FAMILY_CENTERS[family];
    let g = (g + rng.random_range(-0.1..=0.1)).clamp(0.5, 2.0);
    let b = (b + rng.random_range(-0.04..=0.04)).clamp(-0.3, 0.3);
    let s = s * rng.random_range(0.85..=1.15);
    StyleSpec { family_id: family, g, b, weak_noise_scale: s }
}

/// Generates sequence `index` of the corpus; a pure function of its inputs.
pub fn gen_indexed(
    config: &CorpusConfig,
    index: usize,
    constants: &CorpusConstants,
    split: &ExpressionSplit,
) -> Result<SequenceData> {
    let mut rng = stream(config.seed, index as u64 + 1);
    let family = index % config.families;
    let style = sample_style(&mut rng, family);
    let n = rng.random_range(config.min_len..=config.max_len);
    let ppg = gen_ppg(&mut rng, 2 * n, config.ppg_dim)?;
    let aligned = align_time(ppg.frames(), n)?;
    let expression = gen_sequence(&mut rng, &style, &aligned, constants, split, config.strong_noise)?;
    Ok(SequenceData { ppg, expression, style })
}

/// Writes the corpus to `dir`: `corpus.toml`, `constants.vten`, `proxy.vten`,
/// `manifest.tsv` and one `seqs/seq_NNNNN.vten` per sequence.
///
/// Sequences are assigned to splits in index order; every sequence draws its
/// own style jitter and PPG, so no test (style, PPG) pairing occurs in training.
pub fn gen_corpus(config: &CorpusConfig, dir: impl AsRef<Path>) -> Result<Corpus> {
    config.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("seqs"))?;
    let proxy = BlendshapeProxy::default_proxy();
    let split = categorize_expressions(&proxy, DEFAULT_STRONG)?;
    let constants = CorpusConstants::generate(config.seed, split.strong_ids.len(), config.ppg_dim);

    fs::write(dir.join(CONFIG), config.to_toml())?;
    constants.to_archive()?.save(dir.join(CONSTANTS))?;
    proxy.to_archive()?.save(dir.join(PROXY))?;

    let (train, val, _) = config.split_counts();
    let mut records = Vec::with_capacity(config.sequences);
    for i in 0..config.sequences {
        let seq = gen_indexed(config, i, &constants, &split)?;
        let path = format!("seqs/seq_{i:05}.vten");
        seq.to_archive()?.save(dir.join(&path))?;
        let tag = if i < train {
            SplitTag::Train
        } else if i < train + val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
        records.push(ManifestRecord {
            path,
            split: tag,
            family_id: seq.style.family_id,
            g: seq.style.g,
            b: seq.style.b,
            weak_noise_scale: seq.style.weak_noise_scale,
            n: seq.expression.len(),
        });
    }
    let fingerprint = constants.fingerprint();
    write_manifest(&dir.join(MANIFEST), &fingerprint, &records)?;
    Ok(Corpus { dir: dir.to_path_buf(), config: config.clone(), constants, split, fingerprint, records })
}

fn write_manifest(path: &Path, fingerprint: &str, records: &[ManifestRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "# fingerprint\t{fingerprint}")?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(file);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Config(format!("manifest: {e}"))
    }
}

/// A generated corpus opened from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub config: CorpusConfig,
    pub constants: CorpusConstants,
    pub split: ExpressionSplit,
    pub fingerprint: String,
    pub records: Vec<ManifestRecord>,
}

impl Corpus {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = CorpusConfig::from_toml(&fs::read_to_string(dir.join(CONFIG))?)?;
        let constants = CorpusConstants::from_archive(&NamedTensorArchive::load(dir.join(CONSTANTS))?)?;
        let proxy = BlendshapeProxy::from_archive(&NamedTensorArchive::load(dir.join(PROXY))?)?;
        let split = categorize_expressions(&proxy, constants.w_p.nrows())?;

        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
        let stored = first
            .strip_prefix("# fingerprint\t")
            .ok_or_else(|| Error::Config("manifest lacks a fingerprint line".into()))?
            .trim()
            .to_string();
        let fingerprint = constants.fingerprint();
        if stored != fingerprint {
            return Err(Error::CorpusMismatch(format!("manifest fingerprint {stored}, constants {fingerprint}")));
        }
        let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(body.as_bytes());
        let records = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRecord>, _>>().map_err(csv_err)?;
        Ok(Self { dir: dir.to_path_buf(), config, constants, split, fingerprint, records })
    }

    pub fn load(&self, index: usize) -> Result<SequenceData> {
        let rec = self.records.get(index).ok_or_else(|| Error::InvalidArgument(format!("no sequence {index}")))?;
        SequenceData::load(self.dir.join(&rec.path))
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.records.iter().enumerate().filter(|(_, r)| r.split == tag).map(|(i, _)| i).collect()
    }
}

//! Synthetic paired visual/audio word clips.
//!
//! A clip is `W` words drawn from a sharpened bigram chain around a
//! class-balanced center word. Every word lasts `L` frames. Visual frames are
//! the word's confusion-group prototype plus heavy noise, so words of one group
//! look the same. Audio frames are the word's own prototype plus light noise.
//! Neighbouring words and the bigram statistics carry the information needed
//! to tell confusable center words apart.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::name_seed;
use crate::tensor::Tensor;

/// Floor on the noise scale used by the exact posterior, so noiseless
/// configs stay well defined.
const LIKELIHOOD_SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskConfig {
    pub vocab_size: usize,
    /// Groups of two or more words sharing one visual prototype. Words not
    /// listed here have a visual prototype of their own.
    pub confusion_groups: Vec<Vec<usize>>,
    pub words_per_clip: usize,
    pub frames_per_word: usize,
    pub feature_dim: usize,
    pub sigma_v: f64,
    pub sigma_a: f64,
    pub bigram_sharpness: f64,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            vocab_size: 20,
            confusion_groups: (0..5).map(|g| (4 * g..4 * g + 4).collect()).collect(),
            words_per_clip: 5,
            frames_per_word: 7,
            feature_dim: 32,
            sigma_v: 0.8,
            sigma_a: 0.2,
            bigram_sharpness: 2.0,
            seed: 0,
        }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, r: String| Err(Error::config(f, r));
        if self.vocab_size < 2 {
            return field("vocab_size", format!("need at least 2 words, got {}", self.vocab_size));
        }
        if self.vocab_size < 2 * self.confusion_groups.len() {
            return field(
                "confusion_groups",
                format!(
                    "{} groups need a vocabulary of at least {}, got {}",
                    self.confusion_groups.len(),
                    2 * self.confusion_groups.len(),
                    self.vocab_size
                ),
            );
        }
        let mut seen = vec![false; self.vocab_size];
        for (i, g) in self.confusion_groups.iter().enumerate() {
            if g.len() < 2 {
                return field("confusion_groups", format!("group {i} has fewer than 2 words"));
            }
            for &w in g {
                if w >= self.vocab_size {
                    return field("confusion_groups", format!("word {w} outside the vocabulary"));
                }
                if std::mem::replace(&mut seen[w], true) {
                    return field("confusion_groups", format!("word {w} appears in two groups"));
                }
            }
        }
        if self.words_per_clip % 2 == 0 {
            return field(
                "words_per_clip",
                format!("must be odd so a center word exists, got {}", self.words_per_clip),
            );
        }
        if self.frames_per_word == 0 {
            return field("frames_per_word", "must be positive".into());
        }
        if self.feature_dim == 0 {
            return field("feature_dim", "must be positive".into());
        }
        if !(self.sigma_a >= 0.0) || !self.sigma_a.is_finite() {
            return field("sigma_a", format!("must be finite and non-negative, got {}", self.sigma_a));
        }
        if !(self.sigma_v >= self.sigma_a) || !self.sigma_v.is_finite() {
            return field(
                "sigma_v",
                format!(
                    "visual noise ({}) must not be below audio noise ({})",
                    self.sigma_v, self.sigma_a
                ),
            );
        }
        if !self.bigram_sharpness.is_finite() {
            return field("bigram_sharpness", "must be finite".into());
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.words_per_clip * self.frames_per_word
    }

    /// Frame range of the center word.
    pub fn center_frames(&self) -> std::ops::Range<usize> {
        let start = (self.words_per_clip / 2) * self.frames_per_word;
        start..start + self.frames_per_word
    }
}

/// One clip: visual and audio streams `[T, D_in]` and the center word.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub visual: Tensor,
    pub audio: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<ToySample>,
    pub val: Vec<ToySample>,
    pub test: Vec<ToySample>,
}

/// Per-split sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 80/10/10 split of `n ≥ 3` samples, each split non-empty.
    pub fn from_total(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 samples, got {n}")));
        }
        let val = (n / 10).max(1);
        let test = (n / 10).max(1);
        Ok(SplitSizes { train: n - val - test, val, test })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// The true generative parameters behind a [`ToyTaskConfig`].
#[derive(Clone, Debug)]
pub struct GenerativeModel {
    cfg: ToyTaskConfig,
    /// Visual prototype index of every word.
    group_of: Vec<usize>,
    visual_protos: Vec<Vec<f64>>,
    audio_protos: Vec<Vec<f64>>,
    /// `forward[a][b] = P(next = b | current = a)`.
    forward: Vec<Vec<f64>>,
    /// `backward[b][a] = P(previous = a | current = b) ∝ forward[a][b]`.
    backward: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn normalise(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GenerativeModel {
    pub fn new(cfg: &ToyTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.vocab_size;
        let mut group_of = vec![usize::MAX; c];
        for (i, g) in cfg.confusion_groups.iter().enumerate() {
            for &w in g {
                group_of[w] = i;
            }
        }
        let mut next = cfg.confusion_groups.len();
        for slot in group_of.iter_mut().filter(|g| **g == usize::MAX) {
            *slot = next;
            next += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "toytask.prototypes"));
        let visual_protos = (0..next).map(|_| unit_vector(&mut rng, cfg.feature_dim)).collect();
        let audio_protos = (0..c).map(|_| unit_vector(&mut rng, cfg.feature_dim)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "toytask.bigram"));
        let mut forward: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                (0..c)
                    .map(|_| {
                        let s: f64 = StandardNormal.sample(&mut rng);
                        (cfg.bigram_sharpness * s).exp()
                    })
                    .collect()
            })
            .collect();
        forward.iter_mut().for_each(|r| normalise(r));
        let mut backward: Vec<Vec<f64>> =
            (0..c).map(|b| (0..c).map(|a| forward[a][b]).collect()).collect();
        backward.iter_mut().for_each(|r| normalise(r));
        Ok(GenerativeModel {
            cfg: cfg.clone(),
            group_of,
            visual_protos,
            audio_protos,
            forward,
            backward,
        })
    }

    pub fn config(&self) -> &ToyTaskConfig {
        &self.cfg
    }

    pub fn group_of(&self, word: usize) -> usize {
        self.group_of[word]
    }

    pub fn visual_prototype(&self, word: usize) -> &[f64] {
        &self.visual_protos[self.group_of[word]]
    }

    pub fn audio_prototype(&self, word: usize) -> &[f64] {
        &self.audio_protos[word]
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.forward[from][to]
    }

    /// Words of a clip with the given center, neighbours drawn from the chain.
    pub fn sample_words(&self, center: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let w = self.cfg.words_per_clip;
        let mid = w / 2;
        let mut words = vec![center; w];
        for k in mid + 1..w {
            let dist = WeightedIndex::new(&self.forward[words[k - 1]]).expect("valid row");
            words[k] = dist.sample(rng);
        }
        for k in (0..mid).rev() {
            let dist = WeightedIndex::new(&self.backward[words[k + 1]]).expect("valid row");
            words[k] = dist.sample(rng);
        }
        words
    }

    /// Noisy visual and audio frames of a word sequence.
    pub fn render(&self, words: &[usize], rng: &mut ChaCha8Rng) -> ToySample {
        let (l, d) = (self.cfg.frames_per_word, self.cfg.feature_dim);
        let t = words.len() * l;
        let mut visual = Vec::with_capacity(t * d);
        let mut audio = Vec::with_capacity(t * d);
        for &w in words {
            for _ in 0..l {
                for &p in self.visual_prototype(w) {
                    let z: f64 = StandardNormal.sample(rng);
                    visual.push((p + self.cfg.sigma_v * z) as f32);
                }
                for &p in self.audio_prototype(w) {
                    let z: f64 = StandardNormal.sample(rng);
                    audio.push((p + self.cfg.sigma_a * z) as f32);
                }
            }
        }
        ToySample {
            visual: Tensor::new(vec![t, d], visual).expect("sized"),
            audio: Tensor::new(vec![t, d], audio).expect("sized"),
            label: words[words.len() / 2],
        }
    }

    /// Clip with a freshly sampled context around `center`.
    pub fn sample(&self, center: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, ToySample) {
        let words = self.sample_words(center, rng);
        let s = self.render(&words, rng);
        (words, s)
    }

    /// Class-balanced samples: labels cycle through the vocabulary, shuffled.
    pub fn sample_split(&self, n: usize, seed: u64) -> Vec<ToySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.cfg.vocab_size).collect();
        labels.shuffle(&mut rng);
        labels.into_iter().map(|c| self.sample(c, &mut rng).1).collect()
    }

    /// Log-likelihood of each visual prototype for every word slot,
    /// `[W][groups]`, up to a shared constant.
    fn visual_group_loglik(&self, visual: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (l, d) = (self.cfg.frames_per_word, self.cfg.feature_dim);
        if visual.shape() != [self.cfg.frames(), d] {
            return Err(Error::ShapeMismatch {
                op: "visual posterior",
                lhs: visual.shape().to_vec(),
                rhs: vec![self.cfg.frames(), d],
            });
        }
        let var = self.cfg.sigma_v.max(LIKELIHOOD_SIGMA_FLOOR).powi(2);
        Ok((0..self.cfg.words_per_clip)
            .map(|k| {
                self.visual_protos
                    .iter()
                    .map(|p| {
                        let mut sq = 0.0;
                        for f in k * l..(k + 1) * l {
                            for (x, mu) in visual.row(f).iter().zip(p) {
                                sq += (*x as f64 - mu).powi(2);
                            }
                        }
                        -sq / (2.0 * var)
                    })
                    .collect()
            })
            .collect())
    }

    /// Exact log-posterior (unnormalised) over the center word given the
    /// visual stream, using either every word slot or only the center's frames.
    pub fn visual_log_posterior(&self, visual: &Tensor, full_context: bool) -> Result<Vec<f64>> {
        let c = self.cfg.vocab_size;
        let w = self.cfg.words_per_clip;
        let mid = w / 2;
        let group_ll = self.visual_group_loglik(visual)?;
        let emit = |k: usize, word: usize| group_ll[k][self.group_of[word]];
        let mut post: Vec<f64> = (0..c).map(|word| emit(mid, word)).collect();
        if !full_context {
            return Ok(post);
        }
        // message[a] = log p(frames of slots beyond k | word at k = a)
        let pass = |slots: Vec<usize>, trans: &Vec<Vec<f64>>| -> Vec<f64> {
            let mut msg = vec![0.0f64; c];
            for k in slots {
                let incoming: Vec<f64> = (0..c).map(|b| emit(k, b) + msg[b]).collect();
                msg = (0..c)
                    .map(|a| {
                        let terms: Vec<f64> =
                            (0..c).map(|b| trans[a][b].ln() + incoming[b]).collect();
                        log_sum_exp(&terms)
                    })
                    .collect();
            }
            msg
        };
        let right = pass((mid + 1..w).rev().collect(), &self.forward);
        let left = pass((0..mid).collect(), &self.backward);
        for (word, p) in post.iter_mut().enumerate() {
            *p += right[word] + left[word];
        }
        Ok(post)
    }

    /// MAP center word; ties go to the lowest index.
    pub fn bayes_predict(&self, visual: &Tensor, full_context: bool) -> Result<usize> {
        Ok(argmax(&self.visual_log_posterior(visual, full_context)?))
    }

    /// Nearest visual prototype to the mean of the center word's frames.
    pub fn nearest_visual_prototype(&self, visual: &Tensor) -> usize {
        self.nearest(visual, |w| self.visual_prototype(w))
    }

    /// Nearest audio prototype to the mean of the center word's frames.
    pub fn nearest_audio_prototype(&self, audio: &Tensor) -> usize {
        self.nearest(audio, |w| self.audio_prototype(w))
    }

    fn nearest<'a>(&'a self, stream: &Tensor, proto: impl Fn(usize) -> &'a [f64]) -> usize {
        let d = self.cfg.feature_dim;
        let frames = self.cfg.center_frames();
        let n = frames.len() as f64;
        let mut mean = vec![0.0f64; d];
        for f in frames {
            for (m, &x) in mean.iter_mut().zip(stream.row(f)) {
                *m += x as f64 / n;
            }
        }
        let neg_dist: Vec<f64> = (0..self.cfg.vocab_size)
            .map(|w| -proto(w).iter().zip(&mean).map(|(p, m)| (p - m).powi(2)).sum::<f64>())
            .collect();
        argmax(&neg_dist)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draw the three splits. Deterministic in `(cfg, sizes, split_seed)`; every
/// split uses its own random stream.
pub fn generate_splits(cfg: &ToyTaskConfig, sizes: SplitSizes, split_seed: u64) -> Result<Splits> {
    let model = GenerativeModel::new(cfg)?;
    let stream = |s: Split| name_seed(split_seed, &format!("toytask.split.{}", s.name()));
    Ok(Splits {
        train: model.sample_split(sizes.train, stream(Split::Train)),
        val: model.sample_split(sizes.val, stream(Split::Val)),
        test: model.sample_split(sizes.test, stream(Split::Test)),
    })
}

/// [`generate_splits`] with an 80/10/10 split of `n_samples`.
pub fn generate(cfg: &ToyTaskConfig, n_samples: usize, split_seed: u64) -> Result<Splits> {
    generate_splits(cfg, SplitSizes::from_total(n_samples)?, split_seed)
}

/// Accuracy with a normal-approximation 95% interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyEstimate {
    pub accuracy: f64,
    pub n: usize,
}

impl AccuracyEstimate {
    pub fn from_hits(hits: usize, n: usize) -> Self {
        AccuracyEstimate {
            accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            n,
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (self.accuracy * (1.0 - self.accuracy) / self.n as f64).sqrt()
    }

    pub fn half_width_95(&self) -> f64 {
        1.96 * self.std_error()
    }
}

fn score(samples: &[ToySample], predict: impl Fn(&ToySample) -> Result<usize>) -> Result<AccuracyEstimate> {
    let mut hits = 0;
    for s in samples {
        if predict(s)? == s.label {
            hits += 1;
        }
    }
    Ok(AccuracyEstimate::from_hits(hits, samples.len()))
}

/// Accuracy of the exact visual posterior classifier on `split`.
pub fn bayes_oracle_accuracy(cfg: &ToyTaskConfig, split: &[ToySample]) -> Result<f64> {
    Ok(bayes_oracle(cfg, split, true)?.accuracy)
}

/// Visual Bayes oracle using all word slots (`full_context`) or only the center.
pub fn bayes_oracle(cfg: &ToyTaskConfig, split: &[ToySample], full_context: bool) -> Result<AccuracyEstimate> {
    let model = GenerativeModel::new(cfg)?;
    score(split, |s| model.bayes_predict(&s.visual, full_context))
}

/// Monte-Carlo estimate of the full-context oracle on `n` fresh samples.
pub fn bayes_oracle_monte_carlo(cfg: &ToyTaskConfig, n: usize, seed: u64) -> Result<AccuracyEstimate> {
    let model = GenerativeModel::new(cfg)?;
    let samples = model.sample_split(n, name_seed(seed, "toytask.oracle"));
    score(&samples, |s| model.bayes_predict(&s.visual, true))
}

pub fn nearest_visual_accuracy(cfg: &ToyTaskConfig, split: &[ToySample]) -> Result<AccuracyEstimate> {
    let model = GenerativeModel::new(cfg)?;
    score(split, |s| Ok(model.nearest_visual_prototype(&s.visual)))
}

pub fn nearest_audio_accuracy(cfg: &ToyTaskConfig, split: &[ToySample]) -> Result<AccuracyEstimate> {
    let model = GenerativeModel::new(cfg)?;
    score(split, |s| Ok(model.nearest_audio_prototype(&s.audio)))
}

const MAGIC: &[u8; 4] = b"MTLT";
const VERSION: u32 = 1;

/// Write samples as a little-endian record file.
pub fn write_samples<W: Write>(mut w: W, samples: &[ToySample]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        let shape = s.visual.shape();
        if s.audio.shape() != shape || shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "write_samples",
                lhs: shape.to_vec(),
                rhs: s.audio.shape().to_vec(),
            });
        }
        for v in [s.label, shape[0], shape[1]] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for x in s.visual.data().iter().chain(s.audio.data()) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("dataset", format!("truncated record: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("dataset", format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_samples<R: Read>(mut r: R) -> Result<Vec<ToySample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("dataset", "missing header"))?;
    if &magic != MAGIC {
        return Err(Error::format("dataset", "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format("dataset", format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = read_u32(&mut r)? as usize;
        let t = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let visual = Tensor::new(vec![t, d], read_f32s(&mut r, t * d)?)?;
        let audio = Tensor::new(vec![t, d], read_f32s(&mut r, t * d)?)?;
        out.push(ToySample { visual, audio, label });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("dataset", "trailing bytes after the last record"));
    }
    Ok(out)
}

pub fn split_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.mtlt", split.name()))
}

/// Write `train.mtlt`, `val.mtlt` and `test.mtlt` into `dir`.
pub fn save_splits(dir: &Path, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (split, samples) in [
        (Split::Train, &splits.train),
        (Split::Val, &splits.val),
        (Split::Test, &splits.test),
    ] {
        let f = File::create(split_path(dir, split))?;
        write_samples(BufWriter::new(f), samples)?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<ToySample>> {
    let f = File::open(split_path(dir, split))?;
    read_samples(BufReader::new(f))
}

pub fn load_splits(dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: load_split(dir, Split::Train)?,
        val: load_split(dir, Split::Val)?,
        test: load_split(dir, Split::Test)?,
    })
}

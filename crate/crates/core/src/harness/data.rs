//! Synthetic paired audio/visual token sets with a known correspondence.
//!
//! Each sample draws latent tokens `Z`. The audio view is `Z·A + noise`. The
//! visual view places `Z[i]·B + noise` at row `σ(i)`, with `σ` an optional
//! per-sample shuffle. `A` and `B` are fixed for the whole dataset. Caption
//! token `i` is the sign pattern of latent token `i` read as a binary number,
//! taken modulo the vocabulary size.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::fmat::{read_fmat, write_fmat};
use crate::numerics::{Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Random,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_samples: usize,
    pub n_latent_tokens: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub noise_sigma: f64,
    pub permute: bool,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub seed: u64,
    pub maps: MapKind,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_samples: 500,
            n_latent_tokens: 6,
            latent_dim: 8,
            audio_dim: 12,
            visual_dim: 10,
            noise_sigma: 0.1,
            permute: true,
            vocab_size: 8,
            caption_len: 6,
            seed: 0,
            maps: MapKind::Random,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_samples", self.n_samples),
            ("n_latent_tokens", self.n_latent_tokens),
            ("latent_dim", self.latent_dim),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("vocab_size", self.vocab_size),
            ("caption_len", self.caption_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dataset {name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.caption_len > self.n_latent_tokens {
            return Err(Error::Config(format!(
                "caption_len {} exceeds n_latent_tokens {}",
                self.caption_len, self.n_latent_tokens
            )));
        }
        if self.maps == MapKind::Identity
            && (self.audio_dim != self.latent_dim || self.visual_dim != self.latent_dim)
        {
            return Err(Error::Config("identity maps need audio_dim == visual_dim == latent_dim".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x_a: Matrix,
    pub x_v: Matrix,
    /// `correspondence[i]` is the visual row carrying the latent of audio row `i`.
    pub correspondence: Vec<usize>,
    pub caption: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Index where the held-out tail (last 10%, at least one sample) begins.
    pub fn split_index(&self) -> usize {
        let n = self.samples.len();
        if n < 2 {
            return n;
        }
        n - (n / 10).max(1)
    }

    pub fn train_split(&self) -> &[Sample] {
        &self.samples[..self.split_index()]
    }

    pub fn heldout_split(&self) -> &[Sample] {
        let n = self.samples.len();
        if n < 2 {
            return &self.samples;
        }
        &self.samples[self.split_index()..]
    }
}

/// Binary sign code of a latent token folded into `vocab` buckets.
pub fn caption_token(latent: &[f64], vocab: usize) -> usize {
    let mut code: u64 = 0;
    for (d, &z) in latent.iter().enumerate().take(63) {
        if z > 0.0 {
            code |= 1 << d;
        }
    }
    (code % vocab as u64) as usize
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut map_rng = root.fork(1);
    let (a, b) = match spec.maps {
        MapKind::Identity => (Matrix::identity(spec.latent_dim), Matrix::identity(spec.latent_dim)),
        MapKind::Random => {
            let scale = 1.0 / (spec.latent_dim as f64).sqrt();
            (
                map_rng.normal_matrix(spec.latent_dim, spec.audio_dim).scale(scale),
                map_rng.normal_matrix(spec.latent_dim, spec.visual_dim).scale(scale),
            )
        }
    };

    let mut rng = root.fork(2);
    let n = spec.n_latent_tokens;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let z = rng.normal_matrix(n, spec.latent_dim);
        let correspondence = if spec.permute {
            rng.permutation(n)
        } else {
            (0..n).collect()
        };
        let mut x_a = z.matmul(&a)?;
        let clean_v = z.matmul(&b)?;
        let mut x_v = Matrix::zeros(n, spec.visual_dim);
        for (i, &j) in correspondence.iter().enumerate() {
            x_v.row_mut(j).copy_from_slice(clean_v.row(i));
        }
        if spec.noise_sigma > 0.0 {
            for v in x_a.as_mut_slice().iter_mut().chain(x_v.as_mut_slice()) {
                *v += spec.noise_sigma * rng.normal();
            }
        }
        let caption = (0..spec.caption_len)
            .map(|i| caption_token(z.row(i), spec.vocab_size))
            .collect();
        samples.push(Sample {
            x_a,
            x_v,
            correspondence,
            caption,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetIndex {
    spec: SyntheticDatasetSpec,
    tokens_per_sample: usize,
    correspondence: Vec<Vec<usize>>,
    captions: Vec<Vec<usize>>,
}

pub const DATASET_INDEX: &str = "dataset.json";
pub const AUDIO_FILE: &str = "x_a.fmat";
pub const VISUAL_FILE: &str = "x_v.fmat";

/// Writes `dataset.json` plus the stacked audio and visual features as FMAT files.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = data.spec.n_latent_tokens;
    let stack = |pick: fn(&Sample) -> &Matrix, cols: usize| -> Result<Matrix> {
        let mut buf = Vec::with_capacity(data.samples.len() * n * cols);
        for s in &data.samples {
            buf.extend_from_slice(pick(s).as_slice());
        }
        Matrix::from_vec(data.samples.len() * n, cols, buf)
    };
    write_fmat(&dir.join(AUDIO_FILE), &stack(|s| &s.x_a, data.spec.audio_dim)?)?;
    write_fmat(&dir.join(VISUAL_FILE), &stack(|s| &s.x_v, data.spec.visual_dim)?)?;
    let index = DatasetIndex {
        spec: data.spec.clone(),
        tokens_per_sample: n,
        correspondence: data.samples.iter().map(|s| s.correspondence.clone()).collect(),
        captions: data.samples.iter().map(|s| s.caption.clone()).collect(),
    };
    let path = dir.join(DATASET_INDEX);
    let text = serde_json::to_string_pretty(&index).expect("dataset index serializes");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    index.spec.validate()?;
    let n = index.tokens_per_sample;
    let count = index.captions.len();
    if index.correspondence.len() != count || n != index.spec.n_latent_tokens {
        return Err(Error::Config(format!("{}: inconsistent sample counts", path.display())));
    }
    let x_a = read_fmat(&dir.join(AUDIO_FILE))?;
    let x_v = read_fmat(&dir.join(VISUAL_FILE))?;
    if x_a.shape() != (count * n, index.spec.audio_dim) || x_v.shape() != (count * n, index.spec.visual_dim) {
        return Err(Error::Config(format!(
            "feature files {:?}/{:?} do not match {count} samples of {n} tokens",
            x_a.shape(),
            x_v.shape()
        )));
    }
    let samples = index
        .correspondence
        .into_iter()
        .zip(index.captions)
        .enumerate()
        .map(|(k, (correspondence, caption))| Sample {
            x_a: x_a.slice_rows(k * n, (k + 1) * n),
            x_v: x_v.slice_rows(k * n, (k + 1) * n),
            correspondence,
            caption,
        })
        .collect();
    Ok(Dataset {
        spec: index.spec,
        samples,
    })
}

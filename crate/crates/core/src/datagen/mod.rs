//! Synthetic two-view sequence corpus.
//!
//! Every example starts from a smooth latent walk `z[T×L]`. The fbank
//! view is a noisy linear mixture of `z`; the unit view is `z` mixed
//! through a second matrix and then vector-quantized against a codebook
//! fit on the training partition, so it carries strictly less
//! information. Targets are the argmax of a fixed linear readout of `z`.

mod kmeans;
mod store;

pub use kmeans::{distortion, kmeans_fit, kmeans_fit_traced, quantize, Codebook};
pub use store::{load_corpus, read_partition, save_corpus, write_partition, CorpusMeta, FORMAT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub fbank_dim: usize,
    pub unit_dim: usize,
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub codebook_k: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Replace the unit view by a copy of the fbank view.
    pub identical_views: bool,
    /// Feed one-hot code ids instead of centroid vectors, so the unit
    /// projection acts as a learned embedding table.
    pub embed_ids: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            seq_len: 12,
            fbank_dim: 16,
            unit_dim: 8,
            vocab_size: 16,
            latent_dim: 8,
            noise_sigma: 1.0,
            codebook_k: 32,
            kmeans_iters: 50,
            seed: 0,
            identical_views: false,
            embed_ids: false,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_train", self.n_train),
            ("n_valid", self.n_valid),
            ("n_test", self.n_test),
            ("seq_len", self.seq_len),
            ("fbank_dim", self.fbank_dim),
            ("unit_dim", self.unit_dim),
            ("latent_dim", self.latent_dim),
            ("codebook_k", self.codebook_k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("data.vocab_size must be >= 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("data.noise_sigma must be >= 0".into()));
        }
        if self.identical_views && self.embed_ids {
            return Err(Error::Config(
                "data.identical_views and data.embed_ids are exclusive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the stored unit view.
    pub fn effective_unit_dim(&self) -> usize {
        if self.identical_views {
            self.fbank_dim
        } else if self.embed_ids {
            self.codebook_k
        } else {
            self.unit_dim
        }
    }
}

/// One aligned training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewExample {
    pub x_fbank: Tensor,
    pub x_unit: Tensor,
    pub targets: Vec<usize>,
}

impl MultiViewExample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Examples stacked row-wise; the backbone is position-wise so a batch
/// is just one tall matrix per view.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x_fbank: Tensor,
    pub x_unit: Tensor,
    pub targets: Vec<usize>,
    /// Row ranges of the individual examples.
    pub spans: Vec<(usize, usize)>,
}

impl Batch {
    pub fn from_examples(examples: &[&MultiViewExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let xf: Vec<&Tensor> = examples.iter().map(|e| &e.x_fbank).collect();
        let xu: Vec<&Tensor> = examples.iter().map(|e| &e.x_unit).collect();
        let mut spans = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        for e in examples {
            let lo = targets.len();
            targets.extend_from_slice(&e.targets);
            spans.push((lo, targets.len()));
        }
        Ok(Self {
            x_fbank: Tensor::vstack(&xf)?,
            x_unit: Tensor::vstack(&xu)?,
            targets,
            spans,
        })
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub codebook: Codebook,
    /// Mean squared quantization error of the training unit inputs.
    pub codebook_distortion: f64,
    /// `(min, max)` over every element of the training unit view.
    pub unit_range: (f64, f64),
    pub train: Vec<MultiViewExample>,
    pub valid: Vec<MultiViewExample>,
    pub test: Vec<MultiViewExample>,
}

impl Corpus {
    pub fn fbank_dim(&self) -> usize {
        self.spec.fbank_dim
    }

    pub fn unit_dim(&self) -> usize {
        self.spec.effective_unit_dim()
    }

    pub fn partition(&self, name: &str) -> Result<&[MultiViewExample]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown partition {other}"))),
        }
    }
}

/// Element range of the unit view over a partition.
pub fn unit_range(examples: &[MultiViewExample]) -> (f64, f64) {
    examples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.x_unit.min()), hi.max(e.x_unit.max()))
        })
}

struct Latents {
    z: Tensor,
}

fn latent_walk<R: Rng + ?Sized>(t: usize, dim: usize, rng: &mut R) -> Latents {
    let mut z = Tensor::zeros(&[t, dim]);
    let mut pos: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut vel = vec![0.0; dim];
    for i in 0..t {
        for j in 0..dim {
            let kick: f64 = StandardNormal.sample(rng);
            vel[j] = 0.9 * vel[j] + 0.3 * kick;
            pos[j] = (pos[j] + vel[j]).clamp(-3.0, 3.0);
            z.data_mut()[i * dim + j] = pos[j];
        }
    }
    Latents { z }
}

fn argmax_rows(m: &Tensor) -> Vec<usize> {
    crate::model::greedy_decode(m)
}

fn one_hot(ids: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[ids.len(), k]);
    for (i, &id) in ids.iter().enumerate() {
        t.data_mut()[i * k + id] = 1.0;
    }
    Ok(t)
}

/// Generates train, valid and test partitions from `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.latent_dim;
    let mix_fbank = Tensor::randn(&[l, spec.fbank_dim], 1.0 / (l as f64).sqrt(), &mut rng);
    let mix_unit = Tensor::randn(&[l, spec.unit_dim], 1.0 / (l as f64).sqrt(), &mut rng);
    let readout = Tensor::randn(&[l, spec.vocab_size], 1.0, &mut rng);

    struct Raw {
        x_fbank: Tensor,
        pre_unit: Tensor,
        targets: Vec<usize>,
    }
    let mut make = |n: usize| -> Result<Vec<Raw>> {
        (0..n)
            .map(|_| {
                let Latents { z } = latent_walk(spec.seq_len, l, &mut rng);
                let mut x_fbank = z.matmul(&mix_fbank)?;
                for v in x_fbank.data_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.noise_sigma * e;
                }
                Ok(Raw {
                    x_fbank,
                    pre_unit: z.matmul(&mix_unit)?,
                    targets: argmax_rows(&z.matmul(&readout)?),
                })
            })
            .collect()
    };
    let train_raw = make(spec.n_train)?;
    let valid_raw = make(spec.n_valid)?;
    let test_raw = make(spec.n_test)?;

    let train_points: Vec<&Tensor> = train_raw.iter().map(|r| &r.pre_unit).collect();
    let train_points = Tensor::vstack(&train_points)?;
    let (codebook, history) = kmeans_fit_traced(
        &train_points,
        spec.codebook_k,
        spec.kmeans_iters,
        spec.seed.wrapping_add(1),
    )?;
    let codebook_distortion = *history.last().expect("at least the initial distortion");

    let finish = |raw: Vec<Raw>| -> Result<Vec<MultiViewExample>> {
        raw.into_iter()
            .map(|r| {
                let x_unit = if spec.identical_views {
                    r.x_fbank.clone()
                } else {
                    let (ids, emb) = quantize(&r.pre_unit, &codebook)?;
                    if spec.embed_ids {
                        one_hot(&ids, codebook.k())?
                    } else {
                        emb
                    }
                };
                Ok(MultiViewExample {
                    x_fbank: r.x_fbank,
                    x_unit,
                    targets: r.targets,
                })
            })
            .collect()
    };
    let train = finish(train_raw)?;
    let valid = finish(valid_raw)?;
    let test = finish(test_raw)?;
    let unit_range = unit_range(&train);
    Ok(Corpus {
        spec: spec.clone(),
        codebook,
        codebook_distortion,
        unit_range,
        train,
        valid,
        test,
    })
}

fn check_range(range: (f64, f64)) -> Result<()> {
    if range.0.is_nan() || range.1.is_nan() || range.0 > range.1 {
        return Err(Error::Config(format!(
            "noise range min {} exceeds max {}",
            range.0, range.1
        )));
    }
    Ok(())
}

/// Adds `uniform(min, max)` noise to the fbank view (the input of a
/// single-view model). A `(0, 0)` range leaves the example unchanged.
pub fn noise_sum<R: Rng + ?Sized>(
    example: &MultiViewExample,
    range: (f64, f64),
    rng: &mut R,
) -> Result<MultiViewExample> {
    check_range(range)?;
    let mut out = example.clone();
    for v in out.x_fbank.data_mut() {
        *v += range.0 + (range.1 - range.0) * rng.random::<f64>();
    }
    Ok(out)
}

/// Replaces the unit view with `uniform(min, max)` samples.
pub fn noise_replace<R: Rng + ?Sized>(
    example: &MultiViewExample,
    range: (f64, f64),
    rng: &mut R,
) -> Result<MultiViewExample> {
    check_range(range)?;
    let mut out = example.clone();
    for v in out.x_unit.data_mut() {
        *v = range.0 + (range.1 - range.0) * rng.random::<f64>();
    }
    Ok(out)
}

/// Nearest-index resampling of `T'` rows onto `T`: row `i` takes source
/// row `floor(i·T'/T)`.
pub fn length_align(x: &Tensor, t: usize) -> Result<Tensor> {
    let (src, d) = x.dims2()?;
    if t == 0 {
        return Err(Error::Shape("cannot align to zero rows".into()));
    }
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t {
        data.extend_from_slice(x.row(i * src / t));
    }
    Tensor::new(vec![t, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusSpec {
        CorpusSpec {
            n_train: 40,
            n_valid: 10,
            n_test: 10,
            seq_len: 6,
            codebook_k: 8,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&tiny()).unwrap();
        let b = generate_corpus(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec { seed: 9, ..tiny() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn shapes_and_targets() {
        let c = generate_corpus(&tiny()).unwrap();
        assert_eq!(c.train.len(), 40);
        for e in c.train.iter().chain(&c.valid).chain(&c.test) {
            assert_eq!(e.x_fbank.shape(), &[6, 16]);
            assert_eq!(e.x_unit.shape(), &[6, 8]);
            assert_eq!(e.targets.len(), 6);
            assert!(e.targets.iter().all(|&t| t < 16));
        }
    }

    #[test]
    fn unit_view_rows_are_centroids() {
        let c = generate_corpus(&tiny()).unwrap();
        for e in &c.valid {
            let (ids, emb) = quantize(&e.x_unit, &c.codebook).unwrap();
            assert_eq!(&emb, &e.x_unit);
            let (ids2, _) = quantize(&emb, &c.codebook).unwrap();
            assert_eq!(ids, ids2);
        }
    }

    #[test]
    fn embed_ids_gives_one_hot() {
        let c = generate_corpus(&CorpusSpec {
            embed_ids: true,
            ..tiny()
        })
        .unwrap();
        let e = &c.train[0];
        assert_eq!(e.x_unit.shape(), &[6, 8]);
        for i in 0..6 {
            assert_eq!(e.x_unit.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn identical_views() {
        let c = generate_corpus(&CorpusSpec {
            identical_views: true,
            ..tiny()
        })
        .unwrap();
        assert!(c.train.iter().all(|e| e.x_fbank == e.x_unit));
    }

    #[test]
    fn too_many_clusters_is_config_error() {
        let spec = CorpusSpec {
            n_train: 1,
            seq_len: 2,
            codebook_k: 5,
            ..tiny()
        };
        let err = generate_corpus(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("k-means: k exceeds points"));
    }

    #[test]
    fn noise_transforms() {
        let c = generate_corpus(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = &c.train[0];
        assert_eq!(&noise_sum(e, (0.0, 0.0), &mut rng).unwrap(), e);
        let r = noise_replace(e, (-0.5, 2.0), &mut rng).unwrap();
        assert!(r.x_unit.data().iter().all(|&v| (-0.5..=2.0).contains(&v)));
        assert_eq!(r.x_fbank, e.x_fbank);
        assert!(noise_sum(e, (1.0, 0.0), &mut rng).is_err());
        assert!(noise_replace(e, (1.0, 0.0), &mut rng).is_err());
    }

    #[test]
    fn stored_range_matches_recomputation() {
        let c = generate_corpus(&tiny()).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for e in &c.train {
            for &v in e.x_unit.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        assert_eq!(c.unit_range, (lo, hi));
    }

    #[test]
    fn length_align_cases() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(length_align(&x, 4).unwrap(), x);
        assert_eq!(length_align(&x, 2).unwrap().data(), &[0.0, 2.0]);
        let c = Tensor::full(&[6, 2], 7.0);
        assert_eq!(length_align(&c, 3).unwrap(), Tensor::full(&[3, 2], 7.0));
    }
}

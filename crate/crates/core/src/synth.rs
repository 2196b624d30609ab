//! Synthetic VQA corpora with a controllable question→answer prior.
//!
//! Each template is a fixed question. Every template draws its answer from a
//! shared pool of `answers_per_template` answers and has one preferred
//! answer (`template mod pool size`). Training samples take the preferred
//! answer with probability `ρ`; the other answers share the rest uniformly.
//! With `invert_test` the test split gives the preferred answer only `1 − ρ`.
//!
//! The image is a feature vector `snr · p_{t,a} + n` with one orthonormal
//! prototype per (template, answer) pair and `n ~ N(0, I)`. The same answer
//! therefore looks different under different templates. The SNR is set from
//! the accuracy of the Bayes classifier that sees the image alone
//! ([`image_bayes_accuracy`]); the process is identical in both splits.

use rand::seq::IndexedRandom;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use std::sync::OnceLock;

use crate::config::KvConfig;
use crate::dataset::{QASample, Split};
use crate::encoders::ImageSource;
use crate::error::{Error, Result};
use crate::rng::{self, seeded, Rng};

const FINDINGS: [&str; 12] = [
    "lesion",
    "nodule",
    "effusion",
    "mass",
    "fracture",
    "edema",
    "opacity",
    "cyst",
    "tumor",
    "calcification",
    "pneumothorax",
    "atelectasis",
];
const ANSWERS: [&str; 8] = [
    "yes",
    "no",
    "left",
    "right",
    "upper",
    "lower",
    "central",
    "bilateral",
];
const TYPES: [&str; 7] = [
    "Abnormal", "Color", "Modality", "Organ", "Plane", "Position", "Size",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub templates: usize,
    pub answers_per_template: usize,
    pub feature_dim: usize,
    pub snr: f64,
    pub rho: f64,
    pub invert_test: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            templates: 8,
            answers_per_template: 2,
            feature_dim: 64,
            snr: default_snr(),
            rho: 0.9,
            invert_test: true,
            n_train: 2000,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Reads `seed` and `synth.*` keys. `synth.bayes` sets the SNR from a
    /// target Bayes accuracy; `synth.snr` sets it directly.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let templates = cfg.get_or("synth.templates", d.templates)?;
        let answers_per_template =
            cfg.get_or("synth.answers_per_template", d.answers_per_template)?;
        let bayes: Option<f64> = cfg.get("synth.bayes")?;
        let snr: Option<f64> = cfg.get("synth.snr")?;
        if bayes.is_some() && snr.is_some() {
            return Err(Error::Config(
                "set only one of synth.bayes and synth.snr".into(),
            ));
        }
        let snr = match (snr, bayes) {
            (Some(s), _) => s,
            (None, Some(b)) => {
                let floor = 1.0 / answers_per_template.max(1) as f64;
                if !(b > floor && b < 1.0) {
                    return Err(Error::Config(format!(
                        "synth.bayes must lie in ({floor}, 1)"
                    )));
                }
                snr_for_bayes(b, templates.max(1), answers_per_template)
            }
            (None, None)
                if (templates, answers_per_template) == (d.templates, d.answers_per_template) =>
            {
                d.snr
            }
            (None, None) => snr_for_bayes(0.9, templates.max(1), answers_per_template),
        };
        let c = Self {
            templates,
            answers_per_template,
            feature_dim: cfg.get_or("synth.feature_dim", d.feature_dim)?,
            snr,
            rho: cfg.get_or("synth.rho", d.rho)?,
            invert_test: cfg.get_or("synth.invert_test", d.invert_test)?,
            n_train: cfg.get_or("synth.n_train", d.n_train)?,
            n_test: cfg.get_or("synth.n_test", d.n_test)?,
            seed: cfg.get_or("seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Every setting in the keys [`SynthConfig::from_config`] reads, with the
    /// SNR given directly.
    pub fn to_config(&self) -> KvConfig {
        KvConfig::from_pairs([
            ("seed", self.seed.to_string()),
            ("synth.templates", self.templates.to_string()),
            (
                "synth.answers_per_template",
                self.answers_per_template.to_string(),
            ),
            ("synth.feature_dim", self.feature_dim.to_string()),
            ("synth.snr", self.snr.to_string()),
            ("synth.rho", self.rho.to_string()),
            ("synth.invert_test", self.invert_test.to_string()),
            ("synth.n_train", self.n_train.to_string()),
            ("synth.n_test", self.n_test.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0.5, 1], got {}",
                self.rho
            )));
        }
        if self.templates == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config(
                "templates and sample counts must be ≥ 1".into(),
            ));
        }
        if self.answers_per_template < 2 {
            return Err(Error::Config("answers_per_template must be ≥ 2".into()));
        }
        if self.feature_dim < self.answers_per_template {
            return Err(Error::Config(
                "feature_dim must be at least answers_per_template".into(),
            ));
        }
        if !(self.snr.is_finite() && self.snr >= 0.0) {
            return Err(Error::Config("snr must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    pub fn image_bayes_accuracy(&self) -> f64 {
        image_bayes_accuracy(self.snr, self.templates, self.answers_per_template)
    }

    pub fn question_bayes_accuracy(&self) -> f64 {
        question_bayes_accuracy(self.snr, self.answers_per_template)
    }

    pub fn answer(&self, index: usize) -> String {
        ANSWERS
            .get(index)
            .map_or_else(|| format!("answer{index}"), |a| a.to_string())
    }

    pub fn preferred_answer(&self, template: usize) -> usize {
        template % self.answers_per_template
    }

    pub fn question(&self, template: usize) -> String {
        let finding = FINDINGS
            .get(template)
            .map_or_else(|| format!("finding{template}"), |f| f.to_string());
        let article = if finding.starts_with(['a', 'e', 'i', 'o', 'u']) {
            "an"
        } else {
            "a"
        };
        format!("is there {article} {finding} in this image")
    }

    pub fn question_type(&self, template: usize) -> &'static str {
        TYPES[template % TYPES.len()]
    }

    /// Probability of the preferred answer in `split`.
    pub fn preferred_rate(&self, split: Split) -> f64 {
        if split == Split::Test && self.invert_test {
            1.0 - self.rho
        } else {
            self.rho
        }
    }
}

/// Bayes accuracy when the template is known: `k` orthonormal prototypes
/// scaled by `snr` under unit Gaussian noise and equal priors.
pub fn question_bayes_accuracy(snr: f64, k: usize) -> f64 {
    let n = Normal::standard();
    // trapezoid over ±10σ; the integrand is negligible beyond
    let steps = 4000;
    let h = 20.0 / steps as f64;
    let mut acc = 0.0;
    for i in 0..=steps {
        let z = -10.0 + i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        acc += w * n.pdf(z) * n.cdf(z + snr).powi(k as i32 - 1);
    }
    acc * h
}

const BAYES_DRAWS: usize = 20_000;

/// Fixed standard-normal draws of the prototype projections, shared by
/// every evaluation so the estimate is a smooth function of `snr`.
struct ProjectionDraws {
    cells: usize,
    noise: Vec<f64>,
}

impl ProjectionDraws {
    fn new(templates: usize, k: usize) -> Self {
        let cells = templates * k;
        let mut rng = seeded(0, rng::offset::SYNTH + 3);
        let noise = (0..BAYES_DRAWS * cells)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { cells, noise }
    }

    /// Sample `(t, a) = (0, 0)` stands in for every pair by symmetry.
    fn accuracy(&self, snr: f64, templates: usize, k: usize) -> f64 {
        let mut correct = 0usize;
        let mut scores = vec![0.0; k];
        for y in self.noise.chunks_exact(self.cells) {
            for (a, score) in scores.iter_mut().enumerate() {
                let terms = (0..templates).map(|t| {
                    let j = t * k + a;
                    let shift = if j == 0 { snr } else { 0.0 };
                    snr * (y[j] + shift)
                });
                let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
                *score = m + terms.map(|x| (x - m).exp()).sum::<f64>().ln();
            }
            correct += usize::from(scores[1..].iter().all(|&o| scores[0] > o));
        }
        correct as f64 / BAYES_DRAWS as f64
    }
}

/// Accuracy of the Bayes classifier that sees only the image, with equal
/// priors over (template, answer) pairs. Answers are shared across templates,
/// so the classifier sums each answer's likelihood over the templates.
/// Estimated from a fixed set of Gaussian draws.
pub fn image_bayes_accuracy(snr: f64, templates: usize, k: usize) -> f64 {
    ProjectionDraws::new(templates, k).accuracy(snr, templates, k)
}

/// Inverse of [`image_bayes_accuracy`] in `snr`, by bisection.
pub fn snr_for_bayes(target: f64, templates: usize, k: usize) -> f64 {
    let draws = ProjectionDraws::new(templates, k);
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if draws.accuracy(mid, templates, k) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn default_snr() -> f64 {
    static SNR: OnceLock<f64> = OnceLock::new();
    *SNR.get_or_init(|| snr_for_bayes(0.9, 8, 2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub samples: Vec<QASample>,
    pub features: Vec<(String, Vec<f32>)>,
}

impl SynthSplit {
    pub fn feature_jsonl(&self) -> String {
        crate::encoders::features_to_jsonl(
            self.features
                .iter()
                .map(|(r, v)| (r.as_str(), v.as_slice())),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: SynthSplit,
    pub test: SynthSplit,
}

impl SynthCorpus {
    /// One image source covering both splits.
    pub fn image_source(&self) -> ImageSource {
        let mut src = ImageSource::new();
        for (r, v) in self.train.features.iter().chain(&self.test.features) {
            src.insert_feature(r.clone(), v.clone())
                .expect("uniform feature length");
        }
        src
    }
}

/// Orthonormal rows via Gram–Schmidt on Gaussian draws.
fn prototypes(k: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for p in &out {
            let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn draw_split(
    cfg: &SynthConfig,
    split: Split,
    n: usize,
    protos: &[Vec<f64>],
    rng: &mut Rng,
) -> SynthSplit {
    let k = cfg.answers_per_template;
    let rate = cfg.preferred_rate(split);
    let mut samples = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0..cfg.templates);
        let pref = cfg.preferred_answer(t);
        let a = if rng.random_bool(rate) {
            pref
        } else {
            let others: Vec<usize> = (0..k).filter(|&j| j != pref).collect();
            *others.choose(rng).expect("k ≥ 2")
        };
        let image_ref = format!("synth/{split}/{i:05}");
        let vector: Vec<f32> = protos[t * k + a]
            .iter()
            .map(|p| {
                let noise: f64 = StandardNormal.sample(rng);
                (cfg.snr * p + noise) as f32
            })
            .collect();
        let s = QASample::new(
            format!("{split}-{i:05}"),
            &image_ref,
            &cfg.question(t),
            &cfg.answer(a),
            Some(cfg.question_type(t)),
        )
        .expect("synthetic sample is well formed")
        .with_split(split);
        samples.push(s);
        features.push((image_ref, vector));
    }
    SynthSplit { samples, features }
}

/// Train and test splits. Prototypes and the training split depend only on
/// the seed, so flipping `invert_test` changes the test split alone.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut proto_rng = seeded(cfg.seed, rng::offset::SYNTH);
    let protos = prototypes(
        cfg.templates * cfg.answers_per_template,
        cfg.feature_dim,
        &mut proto_rng,
    );
    let mut train_rng = seeded(cfg.seed, rng::offset::SYNTH + 1);
    let mut test_rng = seeded(cfg.seed, rng::offset::SYNTH + 2);
    Ok(SynthCorpus {
        train: draw_split(cfg, Split::Train, cfg.n_train, &protos, &mut train_rng),
        test: draw_split(cfg, Split::Test, cfg.n_test, &protos, &mut test_rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn bayes_matches_closed_form_for_two_answers() {
        let n = Normal::standard();
        for snr in [0.5, 1.0, 1.8, 3.0] {
            let want = n.cdf(snr / 2f64.sqrt());
            assert!((question_bayes_accuracy(snr, 2) - want).abs() < 1e-6);
        }
        assert!((question_bayes_accuracy(0.0, 4) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn one_template_image_bayes_is_the_closed_form() {
        // standard error of the estimate is about 0.003
        for (snr, k) in [(1.0, 2), (1.8, 2), (2.0, 3)] {
            let mc = image_bayes_accuracy(snr, 1, k);
            assert!(
                (mc - question_bayes_accuracy(snr, k)).abs() < 0.01,
                "{snr} {k}: {mc}"
            );
        }
    }

    #[test]
    fn default_image_evidence_gives_ninety_percent() {
        let cfg = SynthConfig::default();
        assert!((cfg.image_bayes_accuracy() - 0.9).abs() < 1e-3);
        // knowing the template makes the image more informative
        assert!(cfg.question_bayes_accuracy() > 0.95);
    }

    #[test]
    fn bayes_target_sets_snr() {
        let cfg = KvConfig::from_pairs([("synth.bayes", "0.8"), ("synth.templates", "4")]);
        let c = SynthConfig::from_config(&cfg).unwrap();
        assert!((c.image_bayes_accuracy() - 0.8).abs() < 1e-3);
        let both = KvConfig::from_pairs([("synth.bayes", "0.8"), ("synth.snr", "2")]);
        assert!(SynthConfig::from_config(&both).is_err());
    }

    fn preferred_share(cfg: &SynthConfig, samples: &[QASample]) -> BTreeMap<String, f64> {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for s in samples {
            let t = (0..cfg.templates)
                .find(|&t| cfg.question(t) == s.question_raw)
                .unwrap();
            let e = counts.entry(s.question_raw.clone()).or_default();
            e.0 += usize::from(s.answer == cfg.answer(cfg.preferred_answer(t)));
            e.1 += 1;
        }
        counts
            .into_iter()
            .map(|(q, (p, n))| (q, p as f64 / n as f64))
            .collect()
    }

    #[test]
    fn balanced_prior_is_measured_as_half() {
        let cfg = SynthConfig {
            templates: 2,
            rho: 0.5,
            n_train: 2000,
            n_test: 10,
            seed: 3,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        for (_, share) in preferred_share(&cfg, &c.train.samples) {
            assert!((share - 0.5).abs() <= 0.05, "{share}");
        }
    }

    #[test]
    fn inversion_flips_the_test_prior() {
        let cfg = SynthConfig {
            templates: 2,
            rho: 0.95,
            n_train: 2000,
            n_test: 2000,
            seed: 4,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        for (_, share) in preferred_share(&cfg, &c.train.samples) {
            assert!((share - 0.95).abs() <= 0.05);
        }
        for (_, share) in preferred_share(&cfg, &c.test.samples) {
            assert!((share - 0.05).abs() <= 0.05);
        }
        let plain = generate(&SynthConfig {
            invert_test: false,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(plain.train, c.train);
        assert_ne!(plain.test, c.test);
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig {
            n_train: 50,
            n_test: 20,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&SynthConfig {
            seed: 1,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(other, generate(&cfg).unwrap());
    }

    #[test]
    fn config_round_trip() {
        let c = SynthConfig {
            rho: 0.8,
            seed: 5,
            invert_test: false,
            ..SynthConfig::default()
        };
        let back = SynthConfig::from_config(&c.to_config()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_rho() {
        for rho in [0.4, 1.1] {
            assert!(SynthConfig {
                rho,
                ..SynthConfig::default()
            }
            .validate()
            .is_err());
        }
    }
}

//! Multi-branch training with a stop-gradient counterfactual term.
//!
//! Per sample the loss is
//! `λ_k·CE(TE) + λ_q·CE(Z_q) + λ_v·CE(Z_v) + λ_cf·CE(NDE)`; the NDE term
//! only moves `q*` and `v*` (see [`CausalModel::forward`]). Setting
//! `λ_q = λ_v = λ_cf = 0` trains a plain fused model.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::causal::{
    argmax, BiasSource, CausalModel, Checkpoint, EncodedSample, Fusion, ModelConfig,
};
use crate::config::KvConfig;
use crate::dataset::{build_vocabs, QASample};
use crate::encoders::{EncoderDims, ImageSource};
use crate::error::{Error, Result};
use crate::rng::{self, seeded};
use crate::tensor::{Adam, Optimizer, Sgd, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (adam|sgd)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub k: f32,
    pub q: f32,
    pub v: f32,
    pub cf: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            k: 1.0,
            q: 1.0,
            v: 1.0,
            cf: 1.0,
        }
    }
}

impl LossWeights {
    /// Only the fused term: the conventional baseline.
    pub fn fused_only() -> Self {
        Self {
            k: 1.0,
            q: 0.0,
            v: 0.0,
            cf: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub fusion: Fusion,
    pub bias: BiasSource,
    pub seed: u64,
    pub d_e: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub d_k: usize,
    pub train_data: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            optimizer: OptimizerKind::Adam,
            weights: LossWeights::default(),
            fusion: Fusion::Sum,
            bias: BiasSource::Question,
            seed: 0,
            d_e: 64,
            d_q: 128,
            d_v: 128,
            d_k: 128,
            train_data: None,
            features: None,
            image_root: None,
        }
    }
}

impl TrainConfig {
    /// Reads `seed` and the `train.*` / `model.*` keys, defaulting the rest.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            epochs: cfg.get_or("train.epochs", d.epochs)?,
            batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
            lr: cfg.get_or("train.lr", d.lr)?,
            beta1: cfg.get_or("train.beta1", d.beta1)?,
            beta2: cfg.get_or("train.beta2", d.beta2)?,
            optimizer: cfg.get_or("train.optimizer", d.optimizer)?,
            weights: LossWeights {
                k: cfg.get_or("train.lambda_k", d.weights.k)?,
                q: cfg.get_or("train.lambda_q", d.weights.q)?,
                v: cfg.get_or("train.lambda_v", d.weights.v)?,
                cf: cfg.get_or("train.lambda_cf", d.weights.cf)?,
            },
            fusion: cfg.get_or("model.fusion", d.fusion)?,
            bias: cfg.get_or("model.bias", d.bias)?,
            seed: cfg.get_or("seed", d.seed)?,
            d_e: cfg.get_or("model.d_e", d.d_e)?,
            d_q: cfg.get_or("model.d_q", d.d_q)?,
            d_v: cfg.get_or("model.d_v", d.d_v)?,
            d_k: cfg.get_or("model.d_k", d.d_k)?,
            train_data: cfg.get("train.data")?,
            features: cfg.get("train.features")?,
            image_root: cfg.get("train.image_root")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        let ws = [w.k, w.q, w.v, w.cf];
        if ws.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and ≥ 0".into()));
        }
        if ws.iter().all(|x| *x == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if [self.d_e, self.d_q, self.d_v, self.d_k].contains(&0) {
            return Err(Error::Config("model dimensions must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Every setting as `key=value` lines, in the same keys `from_config` reads.
    pub fn to_config(&self) -> KvConfig {
        let mut pairs = vec![
            ("seed", self.seed.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.optimizer", self.optimizer.to_string()),
            ("train.lambda_k", self.weights.k.to_string()),
            ("train.lambda_q", self.weights.q.to_string()),
            ("train.lambda_v", self.weights.v.to_string()),
            ("train.lambda_cf", self.weights.cf.to_string()),
            ("model.fusion", self.fusion.to_string()),
            ("model.bias", self.bias.to_string()),
            ("model.d_e", self.d_e.to_string()),
            ("model.d_q", self.d_q.to_string()),
            ("model.d_v", self.d_v.to_string()),
            ("model.d_k", self.d_k.to_string()),
        ];
        for (k, v) in [
            ("train.data", &self.train_data),
            ("train.features", &self.features),
            ("train.image_root", &self.image_root),
        ] {
            if let Some(p) = v {
                pairs.push((k, p.display().to_string()));
            }
        }
        KvConfig::from_pairs(pairs)
    }
}

/// Builds the weighted per-sample loss; also returns the TE node.
pub fn sample_loss(
    tape: &mut Tape<'_>,
    model: &CausalModel,
    s: &EncodedSample,
    w: LossWeights,
) -> Result<(Var, Var)> {
    let target = s
        .answer
        .ok_or_else(|| Error::Config("training sample has no answer index".into()))?;
    let f = model.forward(tape, s)?;
    let mut total: Option<Var> = None;
    for (weight, logits) in [
        (w.k, f.te),
        (w.q, f.branches.z_q),
        (w.v, f.branches.z_v),
        (w.cf, f.nde),
    ] {
        if weight == 0.0 {
            continue;
        }
        let ce = tape.cross_entropy(logits, target)?;
        let term = if weight == 1.0 {
            ce
        } else {
            tape.scale(ce, weight)
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let loss =
        total.ok_or_else(|| Error::Config("at least one loss weight must be positive".into()))?;
    Ok((loss, f.te))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Biased-mode accuracy on the training samples seen this epoch.
    pub acc_biased: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,acc_biased\n");
    for m in metrics {
        let _ = writeln!(out, "{},{:.6},{:.6}", m.epoch, m.loss, m.acc_biased);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Maps samples onto a model's vocabularies and image inputs.
pub fn encode_all(
    ck: &Checkpoint,
    samples: &[QASample],
    images: &ImageSource,
) -> Result<Vec<EncodedSample>> {
    samples.iter().map(|s| ck.encode(s, images)).collect()
}

/// Trains from freshly initialised parameters on `samples`, which must all be
/// training data. Vocabularies are built from them alone.
pub fn train(
    cfg: &TrainConfig,
    samples: &[QASample],
    images: &ImageSource,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset(
            cfg.train_data.clone().unwrap_or_default(),
        ));
    }
    let (qv, av) = build_vocabs(samples);
    let image_dim = images.resolve(&samples[0].image_ref)?.as_slice().len();
    let dims = EncoderDims {
        vocab: qv.len(),
        image_dim,
        d_e: cfg.d_e,
        d_q: cfg.d_q,
        d_v: cfg.d_v,
        d_k: cfg.d_k,
    };
    let model_cfg = ModelConfig {
        dims,
        n_answers: av.len(),
        fusion: cfg.fusion,
        bias: cfg.bias,
    };
    let mut ck = Checkpoint::new(CausalModel::init(model_cfg, cfg.seed), qv, av);
    let data = encode_all(&ck, samples, images)?;
    let metrics = fit(&mut ck.model, &data, cfg)?;
    for (k, v) in cfg.to_config().entries() {
        if !k.ends_with("data") && !k.ends_with("features") && !k.ends_with("image_root") {
            ck.meta.insert(k.clone(), v.clone());
        }
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        metrics,
    })
}

/// Runs the optimisation loop on already-encoded samples.
pub fn fit(
    model: &mut CausalModel,
    data: &[EncodedSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let mut opt: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(cfg.lr, cfg.beta1, cfg.beta2, 1e-8)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.lr }),
    };
    let mut rng = seeded(cfg.seed, rng::offset::SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.store.zero_grad();
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let s = &data[i];
                let mut tape = Tape::with_params(&model.store);
                let (loss, te) = sample_loss(&mut tape, model, s, cfg.weights)?;
                let l = tape.item(loss);
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                    });
                }
                batch_loss += l as f64;
                correct += usize::from(Some(argmax(tape.value(te))) == s.answer);
                tape.backward(loss)?;
                let grads: Vec<_> = tape.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
                drop(tape);
                for (id, g) in grads {
                    model.store.get_mut(id).accumulate_grad(&g);
                }
            }
            model.store.scale_grads(1.0 / batch.len() as f32);
            opt.step(&mut model.store)?;
            loss_sum += batch_loss;
        }
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            acc_biased: correct as f64 / data.len() as f64,
        });
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-2,
            d_e: 4,
            d_q: 6,
            d_v: 6,
            d_k: 6,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn fixture() -> (Vec<QASample>, ImageSource) {
        let mut images = ImageSource::new();
        let mut samples = Vec::new();
        for i in 0..10 {
            let yes = i % 3 != 0;
            let answer = if yes { "yes" } else { "no" };
            let q = if i % 2 == 0 {
                "is there a lesion"
            } else {
                "is the lung normal"
            };
            let r = format!("img{i}");
            let sign = if yes { 1.0 } else { -1.0 };
            images
                .insert_feature(&r, vec![sign, 0.3 * sign, (i as f32 * 0.37).sin(), 0.1])
                .unwrap();
            samples.push(QASample::new(format!("s{i}"), r, q, answer, None).unwrap());
        }
        (samples, images)
    }

    fn tiny_model(answers: usize) -> CausalModel {
        let dims = EncoderDims {
            vocab: 6,
            image_dim: 4,
            d_e: 3,
            d_q: 4,
            d_v: 4,
            d_k: 3,
        };
        CausalModel::init(
            ModelConfig {
                dims,
                n_answers: answers,
                fusion: Fusion::Sum,
                bias: BiasSource::Question,
            },
            9,
        )
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let mut m = tiny_model(4);
        // zero every head so all logits vanish
        for l in [m.heads.question, m.heads.vision, m.heads.knowledge] {
            for id in [l.weight, l.bias] {
                m.store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let s = EncodedSample {
            tokens: vec![1, 2],
            image: vec![0.2; 4],
            answer: Some(3),
        };
        let mut t = Tape::with_params(&m.store);
        let (loss, _) = sample_loss(&mut t, &m, &s, LossWeights::fused_only()).unwrap();
        assert!((t.item(loss) - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn counterfactual_term_leaves_factual_params_alone() {
        let m = tiny_model(3);
        let s = EncodedSample {
            tokens: vec![1, 4],
            image: vec![0.5, -0.3, 0.8, 0.1],
            answer: Some(1),
        };
        let w = LossWeights {
            k: 0.0,
            q: 0.0,
            v: 0.0,
            cf: 1.0,
        };
        let mut t = Tape::with_params(&m.store);
        let (loss, _) = sample_loss(&mut t, &m, &s, w).unwrap();
        t.backward(loss).unwrap();
        let touched: Vec<&str> = t
            .param_grads()
            .filter(|(_, g)| g.iter().any(|x| *x != 0.0))
            .map(|(id, _)| m.store.name(id))
            .collect();
        assert!(!touched.is_empty());
        assert!(
            touched.iter().all(|n| *n == "q_star" || *n == "v_star"),
            "{touched:?}"
        );
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        for fusion in [Fusion::Sum, Fusion::Hm] {
            let mut m = tiny_model(3);
            m.config.fusion = fusion;
            let s = EncodedSample {
                tokens: vec![1, 2, 5],
                image: vec![0.41, -0.23, 0.67, 0.12],
                answer: Some(2),
            };
            // the counterfactual term is checked on its own: its stop-gradients
            // make the analytic gradient differ from the total derivative
            let factual = LossWeights {
                cf: 0.0,
                ..LossWeights::default()
            };
            let r = grad_check_params(
                |t| Ok(sample_loss(t, &m, &s, factual)?.0),
                &m.store,
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(r.passed(), "{fusion}: {r:?}");

            let cf_only = LossWeights {
                k: 0.0,
                q: 0.0,
                v: 0.0,
                cf: 1.0,
            };
            let value = |m: &CausalModel| {
                let mut t = Tape::with_params(&m.store);
                let (l, _) = sample_loss(&mut t, m, &s, cf_only).unwrap();
                t.item(l)
            };
            let mut t = Tape::with_params(&m.store);
            let (l, _) = sample_loss(&mut t, &m, &s, cf_only).unwrap();
            t.backward(l).unwrap();
            let grads: Vec<_> = t.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
            drop(t);
            for id in [m.counterfactual.q_star, m.counterfactual.v_star] {
                let mut analytic = vec![0.0f32; m.store.get(id).len()];
                for (gid, g) in &grads {
                    if *gid == id {
                        analytic.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
                for (i, a) in analytic.iter().enumerate() {
                    let mut mp = m.clone();
                    mp.store.get_mut(id).data_mut()[i] += 1e-3;
                    let mut mm = m.clone();
                    mm.store.get_mut(id).data_mut()[i] -= 1e-3;
                    let n = (value(&mp) - value(&mm)) / 2e-3;
                    let rel = (a - n).abs() / 1f32.max(a.abs()).max(n.abs());
                    assert!(
                        rel <= 1e-3,
                        "{fusion} {}[{i}]: {a} vs {n}",
                        m.store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let (samples, images) = fixture();
        let cfg = tiny_cfg();
        let before = {
            let (qv, av) = build_vocabs(&samples);
            let dims = EncoderDims {
                vocab: qv.len(),
                image_dim: 4,
                d_e: cfg.d_e,
                d_q: cfg.d_q,
                d_v: cfg.d_v,
                d_k: cfg.d_k,
            };
            let mc = ModelConfig {
                dims,
                n_answers: av.len(),
                fusion: cfg.fusion,
                bias: cfg.bias,
            };
            let ck = Checkpoint::new(CausalModel::init(mc, cfg.seed), qv, av);
            mean_loss(&ck, &samples, &images, cfg.weights)
        };
        let out = train(&cfg, &samples, &images).unwrap();
        let after = mean_loss(&out.checkpoint, &samples, &images, cfg.weights);
        assert!(after < before, "{after} !< {before}");
        assert_eq!(out.metrics.len(), 1);
    }

    fn mean_loss(
        ck: &Checkpoint,
        samples: &[QASample],
        images: &ImageSource,
        w: LossWeights,
    ) -> f64 {
        let data = encode_all(ck, samples, images).unwrap();
        data.iter()
            .map(|s| {
                let mut t = Tape::with_params(&ck.model.store);
                let (l, _) = sample_loss(&mut t, &ck.model, s, w).unwrap();
                t.item(l) as f64
            })
            .sum::<f64>()
            / data.len() as f64
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (samples, images) = fixture();
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let a = train(&cfg, &samples, &images).unwrap();
        let b = train(&cfg, &samples, &images).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    }

    #[test]
    fn config_validation() {
        let bad = KvConfig::from_pairs([("train.lambda_q", "-1")]);
        assert!(matches!(
            TrainConfig::from_config(&bad),
            Err(Error::Config(_))
        ));
        let zero = KvConfig::from_pairs([("train.epochs", "0")]);
        assert!(TrainConfig::from_config(&zero).is_err());
        let c = TrainConfig::from_config(&KvConfig::from_pairs([
            ("train.lr", "0.01"),
            ("model.fusion", "hm"),
        ]))
        .unwrap();
        assert_eq!(c.fusion, Fusion::Hm);
        assert_eq!(TrainConfig::from_config(&c.to_config()).unwrap(), c);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{
    argmax, branch_logits, fuse_logits, BiasSource, BranchLogits, CausalScores,
    CounterfactualParams, Fusion, HeadParams, Mode,
};
use crate::dataset::{QASample, Vocab};
use crate::encoders::{EncoderDims, EncoderParams, ImageSource};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::rng::{self, seeded};
use crate::tensor::{read_params, write_params, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dims: EncoderDims,
    pub n_answers: usize,
    pub fusion: Fusion,
    pub bias: BiasSource,
}

/// A sample mapped to vocabulary indices and an image vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub tokens: Vec<usize>,
    pub image: Vec<f32>,
    /// `None` when the answer is outside the answer vocabulary.
    pub answer: Option<usize>,
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub branches: BranchLogits,
    pub te: Var,
    pub nde: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub heads: HeadParams,
    pub counterfactual: CounterfactualParams,
}

impl CausalModel {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = seeded(seed, rng::offset::INIT);
        let mut store = ParamStore::new();
        let d = config.dims;
        let encoders = EncoderParams::register(&mut store, d, &mut rng);
        let heads =
            HeadParams::register(&mut store, d.d_q, d.d_v, d.d_k, config.n_answers, &mut rng);
        let counterfactual = CounterfactualParams::register(&mut store, d.d_q, d.d_v, &mut rng);
        Self {
            config,
            store,
            encoders,
            heads,
            counterfactual,
        }
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let missing = || Error::Checkpoint("parameter set is incomplete".into());
        let encoders = EncoderParams::lookup(&store, config.dims).ok_or_else(missing)?;
        let heads = HeadParams::lookup(&store).ok_or_else(missing)?;
        let counterfactual = CounterfactualParams::lookup(&store).ok_or_else(missing)?;
        let d = config.dims;
        let expect: [(&str, Vec<usize>); 7] = [
            ("embed.weight", vec![d.vocab, d.d_e]),
            ("v_enc.weight", vec![d.image_dim, d.d_v]),
            ("k_fuse.weight", vec![d.d_q + d.d_v, d.d_k]),
            ("head_q.weight", vec![d.d_q, config.n_answers]),
            ("head_k.weight", vec![d.d_k, config.n_answers]),
            ("q_star", vec![d.d_q]),
            ("v_star", vec![d.d_v]),
        ];
        for (name, shape) in expect {
            let id = store.id_of(name).ok_or_else(missing)?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
        }
        Ok(Self {
            config,
            store,
            encoders,
            heads,
            counterfactual,
        })
    }

    /// Builds TE and NDE for one sample on `tape`.
    ///
    /// The NDE subgraph only lets gradient reach `q*` and `v*`: the factual
    /// branch it reuses is detached and the heads and fusion layer are read
    /// frozen. Values are unaffected.
    pub fn forward(&self, tape: &mut Tape<'_>, s: &EncodedSample) -> Result<ForwardNodes> {
        let enc = &self.encoders;
        let q = enc.encode_question(tape, &s.tokens)?;
        let x = tape.constant(Tensor::vector(s.image.clone()));
        let v = enc.encode_image_var(tape, x)?;
        let k = enc.fuse(tape, q, v, false)?;
        let branches = branch_logits(tape, &self.heads, q, v, k)?;
        let te = fuse_logits(tape, branches, self.config.fusion)?;

        let q_star = tape.param(self.counterfactual.q_star);
        let v_star = tape.param(self.counterfactual.v_star);
        let k_star = enc.fuse(tape, q_star, v_star, true)?;
        let z_k_star = self.heads.knowledge.forward(tape, k_star, true)?;
        let cf = match self.config.bias {
            BiasSource::Question => BranchLogits {
                z_q: tape.detach(branches.z_q),
                z_v: self.heads.vision.forward(tape, v_star, true)?,
                z_k: z_k_star,
            },
            BiasSource::Vision => BranchLogits {
                z_q: self.heads.question.forward(tape, q_star, true)?,
                z_v: tape.detach(branches.z_v),
                z_k: z_k_star,
            },
        };
        let nde = fuse_logits(tape, cf, self.config.fusion)?;
        Ok(ForwardNodes { branches, te, nde })
    }

    pub fn scores(&self, s: &EncodedSample) -> Result<CausalScores> {
        let mut tape = Tape::with_params(&self.store);
        let f = self.forward(&mut tape, s)?;
        Ok(CausalScores::new(
            tape.value(f.te).to_vec(),
            tape.value(f.nde).to_vec(),
        ))
    }

    pub fn predict(&self, s: &EncodedSample, mode: Mode) -> Result<usize> {
        Ok(argmax(self.scores(s)?.scores(mode)))
    }
}

/// A trained model together with its vocabularies and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CausalModel,
    pub question_vocab: Vocab,
    pub answer_vocab: Vocab,
    pub meta: BTreeMap<String, String>,
}

const QUESTION_VOCAB: &str = "question_vocab.txt";
const ANSWER_VOCAB: &str = "answer_vocab.txt";

fn write_vocab(path: &Path, v: &Vocab) -> Result<()> {
    let mut text = v.tokens().join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_ordered(text.lines().map(str::to_string).collect())
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("metadata `{key}` missing or invalid")))
}

impl Checkpoint {
    pub fn new(model: CausalModel, question_vocab: Vocab, answer_vocab: Vocab) -> Self {
        Self {
            model,
            question_vocab,
            answer_vocab,
            meta: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let c = &self.model.config;
        let mut meta = self.meta.clone();
        for (k, v) in [
            ("vocab", c.dims.vocab),
            ("image_dim", c.dims.image_dim),
            ("d_e", c.dims.d_e),
            ("d_q", c.dims.d_q),
            ("d_v", c.dims.d_v),
            ("d_k", c.dims.d_k),
            ("n_answers", c.n_answers),
        ] {
            meta.insert(k.into(), v.to_string());
        }
        meta.insert("fusion".into(), c.fusion.to_string());
        meta.insert("bias".into(), c.bias.to_string());
        write_params(dir, &self.model.store, &meta)?;
        write_vocab(&dir.join(QUESTION_VOCAB), &self.question_vocab)?;
        write_vocab(&dir.join(ANSWER_VOCAB), &self.answer_vocab)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, mut meta) = read_params(dir)?;
        let dims = EncoderDims {
            vocab: meta_usize(&meta, "vocab")?,
            image_dim: meta_usize(&meta, "image_dim")?,
            d_e: meta_usize(&meta, "d_e")?,
            d_q: meta_usize(&meta, "d_q")?,
            d_v: meta_usize(&meta, "d_v")?,
            d_k: meta_usize(&meta, "d_k")?,
        };
        let config = ModelConfig {
            dims,
            n_answers: meta_usize(&meta, "n_answers")?,
            fusion: meta
                .get("fusion")
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or_default(),
            bias: meta
                .get("bias")
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or_default(),
        };
        for k in [
            "vocab",
            "image_dim",
            "d_e",
            "d_q",
            "d_v",
            "d_k",
            "n_answers",
            "fusion",
            "bias",
        ] {
            meta.remove(k);
        }
        let question_vocab = read_vocab(&dir.join(QUESTION_VOCAB))?;
        let answer_vocab = read_vocab(&dir.join(ANSWER_VOCAB))?;
        if question_vocab.len() != dims.vocab || answer_vocab.len() != config.n_answers {
            return Err(Error::Checkpoint(
                "vocabulary sizes disagree with metadata".into(),
            ));
        }
        Ok(Self {
            model: CausalModel::from_store(config, store)?,
            question_vocab,
            answer_vocab,
            meta,
        })
    }

    pub fn encode(&self, s: &QASample, images: &ImageSource) -> Result<EncodedSample> {
        let image = images.resolve(&s.image_ref)?.into_vec();
        if image.len() != self.model.config.dims.image_dim {
            return Err(Error::Shape {
                op: "image input",
                lhs: vec![image.len()],
                rhs: vec![self.model.config.dims.image_dim],
            });
        }
        Ok(EncodedSample {
            tokens: self.question_vocab.encode(&s.question_tokens),
            image,
            answer: self.answer_vocab.get(&s.answer),
        })
    }

    pub fn answer(&self, index: usize) -> &str {
        self.answer_vocab
            .token(index)
            .unwrap_or(crate::dataset::UNKNOWN_TOKEN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;

    fn tiny(fusion: Fusion, bias: BiasSource) -> CausalModel {
        let dims = EncoderDims {
            vocab: 7,
            image_dim: 5,
            d_e: 4,
            d_q: 3,
            d_v: 3,
            d_k: 4,
        };
        CausalModel::init(
            ModelConfig {
                dims,
                n_answers: 4,
                fusion,
                bias,
            },
            11,
        )
    }

    fn sample(tokens: &[usize], image: [f32; 5]) -> EncodedSample {
        EncodedSample {
            tokens: tokens.to_vec(),
            image: image.to_vec(),
            answer: Some(1),
        }
    }

    #[test]
    fn same_question_same_nde() {
        for fusion in [Fusion::Sum, Fusion::Hm] {
            let m = tiny(fusion, BiasSource::Question);
            let a = m
                .scores(&sample(&[1, 2, 3], [0.1, 0.9, -0.3, 0.4, 0.0]))
                .unwrap();
            let b = m
                .scores(&sample(&[1, 2, 3], [-0.7, 0.2, 0.5, 0.0, 1.0]))
                .unwrap();
            assert_eq!(a.nde, b.nde);
            assert_ne!(a.te, b.te);
        }
    }

    #[test]
    fn sum_nde_minus_zq_is_constant() {
        let m = tiny(Fusion::Sum, BiasSource::Question);
        let mut offsets = Vec::new();
        for (toks, img) in [
            (&[1usize, 2][..], [0.3; 5]),
            (&[4, 5, 6][..], [-0.2; 5]),
            (&[0][..], [1.0; 5]),
        ] {
            let mut t = Tape::with_params(&m.store);
            let f = m.forward(&mut t, &sample(toks, img)).unwrap();
            let d: Vec<f32> = t
                .value(f.nde)
                .iter()
                .zip(t.value(f.branches.z_q))
                .map(|(n, q)| n - q)
                .collect();
            offsets.push(d);
        }
        for d in &offsets[1..] {
            for (a, b) in d.iter().zip(&offsets[0]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nde_moves_with_q_star() {
        let mut m = tiny(Fusion::Sum, BiasSource::Question);
        let s = sample(&[1], [0.5; 5]);
        let before = m.scores(&s).unwrap().nde;
        let id = m.counterfactual.q_star;
        m.store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += 0.5);
        assert_ne!(before, m.scores(&s).unwrap().nde);
    }

    #[test]
    fn tie_is_exact_difference() {
        let m = tiny(Fusion::Hm, BiasSource::Question);
        let s = m
            .scores(&sample(&[2, 3], [0.2, -0.1, 0.7, 0.3, 0.9]))
            .unwrap();
        for i in 0..4 {
            assert_eq!(s.tie[i], s.te[i] - s.nde[i]);
        }
    }

    #[test]
    fn heads_are_independent() {
        let mut m = tiny(Fusion::Sum, BiasSource::Question);
        let s = sample(&[1, 4], [0.2, 0.4, -0.1, 0.0, 0.3]);
        let branch = |m: &CausalModel| {
            let mut t = Tape::with_params(&m.store);
            let f = m.forward(&mut t, &s).unwrap();
            let b = f.branches;
            (
                t.value(b.z_q).to_vec(),
                t.value(b.z_v).to_vec(),
                t.value(b.z_k).to_vec(),
            )
        };
        let (q0, v0, k0) = branch(&m);
        let w = m.heads.question.weight;
        m.store.get_mut(w).data_mut()[0] += 1.0;
        let (q1, v1, k1) = branch(&m);
        assert_ne!(q0, q1);
        assert_eq!((v0, k0), (v1, k1));
    }

    #[test]
    fn vision_mode_keeps_factual_zv() {
        let m = tiny(Fusion::Sum, BiasSource::Vision);
        let s = sample(&[1, 4], [0.2, 0.4, -0.1, 0.0, 0.3]);
        let mut t = Tape::with_params(&m.store);
        let f = m.forward(&mut t, &s).unwrap();
        let other = m
            .scores(&sample(&[5, 6], [0.2, 0.4, -0.1, 0.0, 0.3]))
            .unwrap();
        assert_eq!(t.value(f.nde), other.nde.as_slice());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let m = tiny(Fusion::Sum, BiasSource::Question);
        let s = sample(&[1, 2], [0.31, -0.52, 0.77, 0.05, -0.2]);
        let r = grad_check_params(
            |t| {
                let f = m.forward(t, &s)?;
                let te = t.cross_entropy(f.te, 1)?;
                let zq = t.cross_entropy(f.branches.z_q, 1)?;
                let zv = t.cross_entropy(f.branches.z_v, 1)?;
                let a = t.add(te, zq)?;
                t.add(a, zv)
            },
            &m.store,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(Fusion::Hm, BiasSource::Vision);
        let qv = Vocab::from_tokens(["a", "b", "c", "d", "e", "f"]);
        let av = Vocab::from_tokens(["no", "x", "yes"]);
        let mut ck = Checkpoint::new(m, qv, av);
        ck.meta.insert("seed".into(), "11".into());
        let dir = std::env::temp_dir().join(format!("cfd-ckpt-{}", std::process::id()));
        ck.save(&dir).unwrap();
        let back = Checkpoint::load(&dir).unwrap();
        assert_eq!(back, ck);
        fs::remove_dir_all(&dir).ok();
    }
}

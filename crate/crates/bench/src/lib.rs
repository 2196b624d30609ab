//! Fixtures shared by the benchmarks.

use cfdebias::causal::{CausalModel, EncodedSample, ModelConfig};
use cfdebias::dataset::QASample;
use cfdebias::encoders::EncoderDims;
use cfdebias::resplit::{group_samples, QAGroup};
use cfdebias::synth::{self, SynthConfig};

/// Model at the default training dimensions with a synthetic-sized vocabulary.
pub fn default_model() -> CausalModel {
    let dims = EncoderDims {
        vocab: 20,
        image_dim: 64,
        d_e: 64,
        d_q: 128,
        d_v: 128,
        d_k: 128,
    };
    let cfg = ModelConfig {
        dims,
        n_answers: 3,
        fusion: Default::default(),
        bias: Default::default(),
    };
    CausalModel::init(cfg, 0)
}

pub fn sample(i: usize) -> EncodedSample {
    EncodedSample {
        tokens: vec![1 + i % 5, 6, 7, 8 + i % 3],
        image: (0..64)
            .map(|j| ((i * 31 + j * 7) % 17) as f32 / 8.0 - 1.0)
            .collect(),
        answer: Some(1 + i % 2),
    }
}

/// Synthetic training corpus with `n` samples, default generator otherwise.
pub fn synth_corpus(n: usize) -> synth::SynthCorpus {
    let cfg = SynthConfig {
        n_train: n,
        n_test: 10,
        ..SynthConfig::default()
    };
    synth::generate(&cfg).expect("valid synth config")
}

/// Groups with varied questions so the greedy splitter has real choices.
pub fn resplit_groups(n: usize) -> Vec<QAGroup> {
    let organs = [
        "liver", "lung", "heart", "kidney", "spleen", "brain", "colon", "bladder",
    ];
    let answers = ["yes", "no", "left", "right", "ct", "mri"];
    let samples: Vec<QASample> = (0..n)
        .map(|i| {
            let q = format!(
                "is the {} {} in slice {}",
                organs[i % organs.len()],
                ["normal", "visible", "enlarged"][i % 3],
                i % 11
            );
            QASample::new(
                format!("s{i}"),
                "img",
                &q,
                answers[(i / 3) % answers.len()],
                None,
            )
            .expect("well formed")
        })
        .collect();
    group_samples(&samples)
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mergeforge::tensor_store::write_checkpoint;
use mergeforge::{Dtype, TensorData};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub struct Rng(Xoshiro256StarStar);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.u64() % n as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in `[-1, 1)`.
    pub fn signed(&mut self) -> f32 {
        (self.unit() * 2.0 - 1.0) as f32
    }

    pub fn dtype(&mut self) -> Dtype {
        [Dtype::F32, Dtype::F16, Dtype::BF16][self.below(3)]
    }

    /// Values exactly representable in `dtype`.
    pub fn values(&mut self, dtype: Dtype, n: usize) -> Vec<f32> {
        (0..n).map(|_| dtype.quantize(self.signed() * 4.0)).collect()
    }
}

pub fn tensor(name: &str, dtype: Dtype, shape: &[usize], values: Vec<f32>) -> TensorData {
    TensorData::new(name, dtype, shape.to_vec(), values).unwrap()
}

pub fn write(dir: &Path, file: &str, tensors: &[TensorData]) -> PathBuf {
    let path = dir.join(file);
    write_checkpoint(tensors, None, &path).unwrap();
    path
}

/// A small multimodal checkpoint and the matching language model: two
/// language tensors plus one vision tensor that only the former has.
pub fn llava_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let mut rng = Rng::new(11);
    let q = rng.values(Dtype::BF16, 8);
    let head = rng.values(Dtype::F32, 6);
    let vision = rng.values(Dtype::F16, 4);
    let vlm = write(
        dir,
        "vlm.safetensors",
        &[
            tensor("language_model.model.layers.0.self_attn.q_proj.weight", Dtype::BF16, &[2, 4], q.clone()),
            tensor("vision_tower.vision_model.embeddings.patch_embedding.weight", Dtype::F16, &[4], vision),
            tensor("language_model.lm_head.weight", Dtype::F32, &[3, 2], head.clone()),
        ],
    );
    let shift = |v: &[f32], dtype: Dtype| v.iter().map(|x| dtype.quantize(x + 0.5)).collect::<Vec<_>>();
    let llm = write(
        dir,
        "llm.safetensors",
        &[
            tensor("model.layers.0.self_attn.q_proj.weight", Dtype::BF16, &[2, 4], shift(&q, Dtype::BF16)),
            tensor("lm_head.weight", Dtype::F32, &[3, 2], shift(&head, Dtype::F32)),
        ],
    );
    (vlm, llm)
}

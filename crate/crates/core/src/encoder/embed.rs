use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hash::{fnv64, mix};
use crate::numerics::Tensor;

/// Deterministic text embedder: the bag of hashed character trigrams of
/// `^label$`, each bucket mapped to a fixed Gaussian row, summed and
/// L2-normalized. The empty label maps to the zero vector.
#[derive(Debug)]
pub struct LabelEmbedder {
    dim: usize,
    buckets: u64,
    seed: u64,
    rows: RefCell<HashMap<u64, Vec<f64>>>,
}

impl Clone for LabelEmbedder {
    fn clone(&self) -> Self {
        Self::new(self.dim, self.buckets as usize, self.seed)
    }
}

impl LabelEmbedder {
    pub fn new(dim: usize, buckets: usize, seed: u64) -> Self {
        Self {
            dim,
            buckets: buckets.max(1) as u64,
            seed,
            rows: RefCell::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Trigram bucket counts, sorted by bucket.
    pub fn trigram_bag(&self, label: &str) -> Vec<(u64, u32)> {
        if label.is_empty() {
            return Vec::new();
        }
        let chars: Vec<char> = std::iter::once('^')
            .chain(label.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut bag: HashMap<u64, u32> = HashMap::new();
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            *bag.entry(fnv64(&buf[..len]) % self.buckets).or_default() += 1;
        }
        let mut out: Vec<_> = bag.into_iter().collect();
        out.sort_unstable();
        out
    }

    fn bucket_row(&self, bucket: u64) -> Vec<f64> {
        self.rows
            .borrow_mut()
            .entry(bucket)
            .or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, bucket));
                Tensor::randn(1, self.dim, 1.0, &mut rng).into_data()
            })
            .clone()
    }

    pub fn embed(&self, label: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (bucket, count) in self.trigram_bag(label) {
            let row = self.bucket_row(bucket);
            for (o, r) in v.iter_mut().zip(&row) {
                *o += f64::from(count) * r;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn embed_all<S: AsRef<str>>(&self, labels: &[S]) -> Tensor {
        let mut data = Vec::with_capacity(labels.len() * self.dim);
        for l in labels {
            data.extend(self.embed(l.as_ref()));
        }
        Tensor::matrix(labels.len(), self.dim, data)
    }
}

#![allow(dead_code)]

use hyperprompt::datagen::PretrainExample;
use hyperprompt::ingest::Table;
use hyperprompt::numerics::{GradCheckConfig, ParamStore, Stencil, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn table(h: &[&str], rows: &[&[&str]]) -> Table {
    Table::new(
        h.iter().map(|s| s.to_string()).collect(),
        rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
    )
    .unwrap()
}

/// Moves every parameter to a generic point (`init + N(0, std²)`), away
/// from the near-zero gradients of the small output-head initialisation.
pub fn jitter(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id).clone();
        let noise = Tensor::randn(t.rows(), t.cols(), std, &mut rng);
        let v = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        store.set(id, Tensor::matrix(t.rows(), t.cols(), v)).unwrap();
    }
}

/// Settings for checks through whole pipelines, where losses of order
/// `ln(vocab)` make the second-order stencil's rounding floor too coarse.
pub fn pipeline_check() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-4,
        stencil: Stencil::Central4,
        ..GradCheckConfig::default()
    }
}

/// Recovers the template arguments from the question text and answers by
/// scanning the table directly.
pub fn oracle(t: &Table, ex: &PretrainExample) -> String {
    let q = ex.question.as_str();
    let quoted: Vec<&str> = q.split('"').skip(1).step_by(2).collect();
    let col = |name: &str| t.headers().iter().position(|h| h == name).unwrap();
    match ex.template {
        1 => {
            let cell = quoted[0];
            for r in 0..t.n_rows() {
                for c in 0..t.n_cols() {
                    if t.cell(r, c) == cell {
                        return t.headers()[c].clone();
                    }
                }
            }
            panic!("cell not in table")
        }
        2 => {
            let key = quoted[0];
            let target = q.rsplit_once("value of ").unwrap().1.trim_end_matches('?');
            let j = col(target);
            for r in 0..t.n_rows() {
                if t.cell(r, 0) == key {
                    return t.cell(r, j).to_string();
                }
            }
            panic!("key not in first column")
        }
        3 => {
            let (a, b) = (quoted[0], quoted[1]);
            for r in 0..t.n_rows() {
                for i in 0..t.n_cols() {
                    for j in 0..t.n_cols() {
                        if i != j && t.cell(r, i) == a && t.cell(r, j) == b {
                            return "yes".into();
                        }
                    }
                }
            }
            "no".into()
        }
        _ => panic!("template {}", ex.template),
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::Tokenizer;

/// One sample as seen by the language model: its full input text, the
/// expected output text, and the node count of its hypergraph.
#[derive(Clone, Debug)]
pub struct TextSample {
    pub input: String,
    pub output: String,
    pub nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub split: String,
    pub count: usize,
    pub input_avg: f64,
    pub input_max: usize,
    pub output_avg: f64,
    pub output_max: usize,
    /// Samples whose tokenized input is longer than the limit.
    pub trunc_count: usize,
    pub nodes_avg: f64,
}

/// Streaming form of [`corpus_stats`] for corpora that are not held in
/// memory.
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    max_len: usize,
    count: usize,
    in_sum: usize,
    in_max: usize,
    out_sum: usize,
    out_max: usize,
    trunc: usize,
    nodes: usize,
}

impl StatsAccumulator {
    pub fn new(max_len: usize) -> Self {
        Self {
            max_len,
            count: 0,
            in_sum: 0,
            in_max: 0,
            out_sum: 0,
            out_max: 0,
            trunc: 0,
            nodes: 0,
        }
    }

    /// Adds one sample given its token counts.
    pub fn add(&mut self, input_tokens: usize, output_tokens: usize, nodes: usize) {
        self.count += 1;
        self.in_sum += input_tokens;
        self.in_max = self.in_max.max(input_tokens);
        self.out_sum += output_tokens;
        self.out_max = self.out_max.max(output_tokens);
        if input_tokens > self.max_len {
            self.trunc += 1;
        }
        self.nodes += nodes;
    }

    pub fn add_sample(&mut self, s: &TextSample, tokenizer: &Tokenizer) {
        self.add(
            tokenizer.encode(&s.input).len(),
            tokenizer.encode(&s.output).len(),
            s.nodes,
        );
    }

    pub fn finish(&self, split: &str) -> Result<CorpusStats> {
        if self.count == 0 {
            return Err(Error::EmptyCorpus);
        }
        let n = self.count as f64;
        Ok(CorpusStats {
            split: split.to_string(),
            count: self.count,
            input_avg: self.in_sum as f64 / n,
            input_max: self.in_max,
            output_avg: self.out_sum as f64 / n,
            output_max: self.out_max,
            trunc_count: self.trunc,
            nodes_avg: self.nodes as f64 / n,
        })
    }
}

pub fn corpus_stats(split: &str, samples: &[TextSample], tokenizer: &Tokenizer, max_len: usize) -> Result<CorpusStats> {
    let mut acc = StatsAccumulator::new(max_len);
    for s in samples {
        acc.add_sample(s, tokenizer);
    }
    acc.finish(split)
}

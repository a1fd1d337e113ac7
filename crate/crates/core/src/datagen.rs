//! Templated self-supervised questions over tables, and the sharded corpus
//! writer.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::mix;
use crate::hypergraph::table_to_hypergraph;
use crate::ingest::{serialize_table, CorpusStats, StatsAccumulator, Table};
use crate::toylm::Tokenizer;

/// Attempts per requested example before giving up on that slot.
pub const MAX_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    /// Column header of a given cell.
    ColumnName = 1,
    /// Cell in a given column of the row keyed by a first-column value.
    RowLookup = 2,
    /// Whether two cell texts share a row.
    SameRow = 3,
}

impl Template {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Template::ColumnName),
            2 => Some(Template::RowLookup),
            3 => Some(Template::SameRow),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub table_id: String,
    pub template: u8,
    pub question: String,
    pub answer: String,
}

pub fn column_name_question(cell: &str) -> String {
    format!("What's the column name of \"{cell}\"?")
}

pub fn row_lookup_question(first_col: &str, row_value: &str, col: &str) -> String {
    format!("In the row where the value of {first_col} is \"{row_value}\", what is the corresponding value of {col}?")
}

pub fn same_row_question(a: &str, b: &str) -> String {
    format!("Are \"{a}\" and \"{b}\" in the same row?")
}

/// Header of the column holding the first cell (row-major) equal to `cell`.
pub fn answer_column_name(t: &Table, cell: &str) -> Option<String> {
    t.rows()
        .iter()
        .find_map(|r| r.iter().position(|c| c == cell))
        .map(|j| t.headers()[j].clone())
}

/// Value in column `col` of the first row whose first cell is `key`.
pub fn answer_row_lookup(t: &Table, key: &str, col: usize) -> Option<String> {
    t.rows().iter().find(|r| r[0] == key).map(|r| r[col].clone())
}

/// "yes" when some row holds both texts in distinct cells.
pub fn answer_same_row(t: &Table, a: &str, b: &str) -> String {
    let hit = t.rows().iter().any(|r| {
        r.iter()
            .enumerate()
            .any(|(i, x)| x == a && r.iter().enumerate().any(|(j, y)| j != i && y == b))
    });
    if hit { "yes" } else { "no" }.to_string()
}

fn applicable(t: &Table) -> Vec<Template> {
    let mut v = vec![Template::ColumnName, Template::RowLookup];
    if t.n_rows() * t.n_cols() >= 2 {
        v.push(Template::SameRow);
    }
    v
}

fn draw(t: &Table, template: Template, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let (m, n) = (t.n_rows(), t.n_cols());
    match template {
        Template::ColumnName => {
            let (i, j) = (rng.random_range(0..m), rng.random_range(0..n));
            let cell = t.cell(i, j);
            if cell.is_empty() {
                return None;
            }
            Some((column_name_question(cell), answer_column_name(t, cell)?))
        }
        Template::RowLookup => {
            let i = rng.random_range(0..m);
            let j = if n >= 2 { rng.random_range(1..n) } else { 0 };
            let key = t.cell(i, 0);
            if key.is_empty() {
                return None;
            }
            let answer = answer_row_lookup(t, key, j)?;
            let q = row_lookup_question(&t.headers()[0], key, &t.headers()[j]);
            (!answer.is_empty()).then_some((q, answer))
        }
        Template::SameRow => {
            let cells = m * n;
            let a = rng.random_range(0..cells);
            let mut b = rng.random_range(0..cells - 1);
            if b >= a {
                b += 1;
            }
            let (ca, cb) = (t.cell(a / n, a % n), t.cell(b / n, b % n));
            if ca.is_empty() || cb.is_empty() || ca == cb {
                return None;
            }
            Some((same_row_question(ca, cb), answer_same_row(t, ca, cb)))
        }
    }
}

/// Up to `per_table` examples. Each slot picks a template uniformly among
/// the applicable ones and redraws (template included) up to
/// [`MAX_RETRIES`] times when the instance is invalid or has an empty
/// answer. The stream depends only on `(seed, table_index)`.
pub fn generate_questions(
    t: &Table,
    table_id: &str,
    table_index: usize,
    per_table: usize,
    seed: u64,
) -> Result<Vec<PretrainExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, table_index as u64));
    let templates = applicable(t);
    let mut out = Vec::with_capacity(per_table);
    for _ in 0..per_table {
        for _ in 0..MAX_RETRIES {
            let tpl = *templates.choose(&mut rng).expect("at least two templates apply");
            if let Some((question, answer)) = draw(t, tpl, &mut rng) {
                out.push(PretrainExample {
                    table_id: table_id.to_string(),
                    template: tpl.id(),
                    question,
                    answer,
                });
                break;
            }
        }
    }
    if out.is_empty() && per_table > 0 {
        return Err(Error::NoValidQuestions(table_index));
    }
    Ok(out)
}

/// Text the language model reads before the soft prompt: the serialized
/// structure, then the question.
pub fn lm_input_text(structure: &str, question: &str) -> String {
    if structure.is_empty() {
        format!("{question}\n")
    } else {
        format!("{structure}\n{question}\n")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub table_id: String,
    pub template: u8,
    pub question: String,
    pub answer: String,
    pub hypergraph_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub per_table: usize,
    pub seed: u64,
    pub shard_size: usize,
    /// Token limit used for the truncation count in the stats.
    pub max_len: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            per_table: 20,
            seed: 0,
            shard_size: 1000,
            max_len: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSummary {
    pub examples: usize,
    pub shards: Vec<PathBuf>,
    pub stats: CorpusStats,
}

/// Streams `tables` into `out_dir`: one hypergraph file per table under
/// `graphs/`, JSON-lines shards `shard-NNNNN.jsonl`, and `stats.json`.
/// Paths inside shards are relative to `out_dir`.
pub fn build_pretrain_corpus<I>(tables: I, opts: &CorpusOptions, out_dir: &Path) -> Result<CorpusSummary>
where
    I: IntoIterator<Item = Result<(String, Table)>>,
{
    if opts.shard_size == 0 {
        return Err(Error::Config("shard_size must be positive".into()));
    }
    let graphs = out_dir.join("graphs");
    fs::create_dir_all(&graphs).map_err(|e| Error::io(&graphs, e))?;
    let mut shards = Vec::new();
    let mut writer: Option<BufWriter<fs::File>> = None;
    let mut in_shard = 0;
    let mut stats = StatsAccumulator::new(opts.max_len);
    let mut examples = 0;
    let mut n_tables = 0;
    for (index, item) in tables.into_iter().enumerate() {
        let (table_id, table) = item?;
        n_tables += 1;
        let hg = table_to_hypergraph(&table);
        let rel = format!("graphs/{index:06}.json");
        let gpath = out_dir.join(&rel);
        fs::write(&gpath, hg.to_json()).map_err(|e| Error::io(&gpath, e))?;
        let structure = serialize_table(&table);
        for ex in generate_questions(&table, &table_id, index, opts.per_table, opts.seed)? {
            if writer.is_none() || in_shard == opts.shard_size {
                if let Some(mut w) = writer.take() {
                    w.flush().map_err(|e| Error::io(shards.last().unwrap(), e))?;
                }
                let p = out_dir.join(format!("shard-{:05}.jsonl", shards.len()));
                let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                writer = Some(BufWriter::new(f));
                shards.push(p);
                in_shard = 0;
            }
            let rec = ShardRecord {
                table_id: ex.table_id,
                template: ex.template,
                question: ex.question,
                answer: ex.answer,
                hypergraph_path: rel.clone(),
            };
            let w = writer.as_mut().expect("writer opened above");
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(shards.last().unwrap(), e))?;
            in_shard += 1;
            examples += 1;
            let input = Tokenizer.encode(&lm_input_text(&structure, &rec.question)).len();
            stats.add(input, Tokenizer.encode(&rec.answer).len(), hg.n_nodes());
        }
    }
    if n_tables == 0 {
        return Err(Error::EmptyCorpus);
    }
    if let Some(mut w) = writer.take() {
        w.flush().map_err(|e| Error::io(shards.last().unwrap(), e))?;
    }
    let stats = stats.finish("pretrain")?;
    let sp = out_dir.join("stats.json");
    fs::write(&sp, serde_json::to_string_pretty(&stats)?).map_err(|e| Error::io(&sp, e))?;
    Ok(CorpusSummary {
        examples,
        shards,
        stats,
    })
}

/// Parses one shard line.
pub fn parse_shard_line(line: &[u8]) -> Result<ShardRecord> {
    let rec: ShardRecord = serde_json::from_slice(line).map_err(|e| Error::Decode(e.to_string()))?;
    if Template::from_id(rec.template).is_none() {
        return Err(Error::Decode(format!("unknown template {}", rec.template)));
    }
    if rec.answer.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    Ok(rec)
}

pub fn read_shard(path: &Path) -> Result<Vec<ShardRecord>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    raw.split(|&b| b == b'\n')
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .map(parse_shard_line)
        .collect()
}

const COLUMNS: &[(&str, Kind)] = &[
    ("name", Kind::Word),
    ("city", Kind::Word),
    ("team", Kind::Word),
    ("year", Kind::Year),
    ("score", Kind::Small),
    ("color", Kind::Color),
    ("rank", Kind::Small),
    ("country", Kind::Word),
];

#[derive(Clone, Copy)]
enum Kind {
    Word,
    Year,
    Small,
    Color,
}

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ra", "to", "ve", "su", "ne", "pa", "di", "zo", "be"];
const COLORS: &[&str] = &["red", "blue", "green", "gold", "gray", "pink"];

fn cell(kind: Kind, rng: &mut ChaCha8Rng) -> String {
    match kind {
        Kind::Word => {
            let k = rng.random_range(2..4);
            let mut s: String = (0..k).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
            s[..1].make_ascii_uppercase();
            s
        }
        Kind::Year => rng.random_range(1950..2025).to_string(),
        Kind::Small => rng.random_range(1..100).to_string(),
        Kind::Color => COLORS.choose(rng).unwrap().to_string(),
    }
}

/// A random table with `rows × cols` non-empty cells. The first column
/// is always `name`; the rest are distinct columns drawn without
/// replacement.
pub fn synthetic_table(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Table {
    let cols = cols.clamp(1, COLUMNS.len());
    let mut picked = vec![COLUMNS[0]];
    let rest: Vec<_> = COLUMNS[1..].choose_multiple(rng, cols - 1).copied().collect();
    picked.extend(rest);
    let headers = picked.iter().map(|(h, _)| h.to_string()).collect();
    let body = (0..rows.max(1))
        .map(|_| picked.iter().map(|&(_, k)| cell(k, rng)).collect())
        .collect();
    Table::new(headers, body).expect("synthetic tables are rectangular")
}

/// `count` synthetic tables with sizes drawn from the given inclusive
/// ranges; ids are `syn-NNNNN`.
pub fn synthetic_tables(count: usize, rows: (usize, usize), cols: (usize, usize), seed: u64) -> Vec<(String, Table)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let r = rng.random_range(rows.0..=rows.1);
            let c = rng.random_range(cols.0..=cols.1);
            (format!("syn-{i:05}"), synthetic_table(r, c, &mut rng))
        })
        .collect()
}

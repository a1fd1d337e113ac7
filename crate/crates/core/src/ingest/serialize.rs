use crate::ingest::{Table, TripleSet};

/// Markdown rendering: header row, `---` separator row, one line per data
/// row. Lines are joined with `\n`; there is no trailing newline.
pub fn serialize_table(t: &Table) -> String {
    let mut lines = Vec::with_capacity(t.n_rows() + 2);
    lines.push(md_row(t.headers()));
    lines.push(md_row(&vec!["---"; t.n_cols()]));
    for row in t.rows() {
        lines.push(md_row(row));
    }
    lines.join("\n")
}

fn md_row<S: AsRef<str>>(cells: &[S]) -> String {
    let inner: Vec<&str> = cells.iter().map(AsRef::as_ref).collect();
    format!("| {} |", inner.join(" | "))
}

/// One `(head, relation, tail)` line per triple, in input order.
pub fn serialize_triples(ts: &TripleSet) -> String {
    ts.triples()
        .iter()
        .map(|t| format!("({}, {}, {})", t.head, t.relation, t.tail))
        .collect::<Vec<_>>()
        .join("\n")
}

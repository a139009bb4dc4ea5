use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::context::{context_of, ContextParams, PageLayout};
use super::rule::LabelingFunction;
use crate::document::{ClassVocab, Corpus};
use crate::error::{Error, Result};

/// Row identity: which document and which token (index into the document's
/// token list) the row describes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowKey {
    pub doc: String,
    pub token: usize,
}

/// Instances × LFs firings. Entry `(i, j)` is 0 (ABSTAIN) or the attached
/// class of LF `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub classes: ClassVocab,
    pub lf_ids: Vec<String>,
    /// Attached class of each LF, 1-based.
    pub attached: Vec<usize>,
    entries: Vec<usize>,
    pub rows: Vec<RowKey>,
}

impl LabelMatrix {
    /// Builds a matrix from explicit rows, checking the firing invariant.
    pub fn from_rows(
        classes: ClassVocab,
        lf_ids: Vec<String>,
        attached: Vec<usize>,
        rows: Vec<RowKey>,
        firings: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let m = lf_ids.len();
        if attached.len() != m {
            return Err(Error::Shape(format!("{} attached classes for {m} LFs", attached.len())));
        }
        if rows.len() != firings.len() {
            return Err(Error::Shape(format!("{} row keys for {} rows", rows.len(), firings.len())));
        }
        for &k in &attached {
            if k == 0 || k > classes.len() {
                return Err(Error::Shape(format!("attached class {k} outside 1..={}", classes.len())));
            }
        }
        let mut entries = Vec::with_capacity(rows.len() * m);
        for (i, row) in firings.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {m}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0 && v != attached[j] {
                    return Err(Error::Shape(format!(
                        "row {i}, LF `{}` emitted {v} but is attached to {}",
                        lf_ids[j], attached[j]
                    )));
                }
            }
            entries.extend_from_slice(row);
        }
        Ok(LabelMatrix {
            classes,
            lf_ids,
            attached,
            entries,
            rows,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.rows.len()
    }

    pub fn n_lfs(&self) -> usize {
        self.lf_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let m = self.n_lfs();
        &self.entries[i * m..(i + 1) * m]
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.entries[i * self.n_lfs() + j]
    }

    /// True when at least one LF fired on row `i`.
    pub fn fired(&self, i: usize) -> bool {
        self.row(i).iter().any(|&v| v != 0)
    }

    /// Copy of this matrix restricted to `rows` (in the given order).
    pub fn select(&self, rows: &[usize]) -> LabelMatrix {
        let mut entries = Vec::with_capacity(rows.len() * self.n_lfs());
        for &i in rows {
            entries.extend_from_slice(self.row(i));
        }
        LabelMatrix {
            classes: self.classes.clone(),
            lf_ids: self.lf_ids.clone(),
            attached: self.attached.clone(),
            entries,
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Header line, then one JSON line per row. Integers only.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = MatrixHeader {
            n: self.n_instances(),
            m: self.n_lfs(),
            lf_ids: self.lf_ids.clone(),
            attached: self.attached.clone(),
            classes: self.classes.names().to_vec(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (i, key) in self.rows.iter().enumerate() {
            let row = MatrixRow {
                doc: key.doc.clone(),
                token: key.token,
                l: self.row(i).to_vec(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: MatrixHeader = loop {
            match lines.next() {
                None => return Err(Error::parse(1, "<header>", "missing matrix header")),
                Some((_, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| Error::parse(1, "<header>", e.to_string()))?;
                }
            }
        };
        let classes = ClassVocab::new(header.classes)?;
        let mut rows = Vec::with_capacity(header.n);
        let mut firings = Vec::with_capacity(header.n);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: MatrixRow =
                serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, "<row>", e.to_string()))?;
            rows.push(RowKey {
                doc: row.doc,
                token: row.token,
            });
            firings.push(row.l);
        }
        if rows.len() != header.n || header.lf_ids.len() != header.m {
            return Err(Error::Shape(format!(
                "header declares {}x{} but file holds {}x{}",
                header.n,
                header.m,
                rows.len(),
                header.lf_ids.len()
            )));
        }
        LabelMatrix::from_rows(classes, header.lf_ids, header.attached, rows, firings)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    n: usize,
    m: usize,
    lf_ids: Vec<String>,
    attached: Vec<usize>,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRow {
    doc: String,
    token: usize,
    l: Vec<usize>,
}

/// Applies every LF to every token. Rows follow corpus order, then reading
/// order within each document.
pub fn build_label_matrix(lfs: &[LabelingFunction], corpus: &Corpus, params: &ContextParams) -> Result<LabelMatrix> {
    if lfs.is_empty() {
        return Err(Error::Empty("no labeling functions".into()));
    }
    let mut rows = Vec::with_capacity(corpus.n_tokens());
    let mut firings = Vec::with_capacity(corpus.n_tokens());
    for doc in &corpus.documents {
        let page = PageLayout::new(doc)?;
        for &t in &page.order {
            let ctx = context_of(&page, t, params);
            firings.push(lfs.iter().map(|lf| lf.apply(&page, t, &ctx, params)).collect());
            rows.push(RowKey {
                doc: doc.doc_id.clone(),
                token: t,
            });
        }
    }
    LabelMatrix::from_rows(
        corpus.classes.clone(),
        lfs.iter().map(|lf| lf.id.clone()).collect(),
        lfs.iter().map(|lf| lf.class).collect(),
        rows,
        firings,
    )
}

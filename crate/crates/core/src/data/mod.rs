//! Interaction data: ingestion, filtering, splitting, synthesis, and the
//! canonical on-disk formats.

mod load;
mod preprocess;
mod split;
mod synthetic;

pub use load::{load_interactions, LoadOutcome};
pub use preprocess::preprocess;
pub use split::split_strong_generalization;
pub use synthetic::{generate_synthetic, generate_synthetic_from_factors};

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One parsed interaction record.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Binary user-item matrix in compressed row form. Rows hold strictly
/// increasing item indices; presence means an observed interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    pub n_items: usize,
    pub rows: Vec<Vec<usize>>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionMatrix {
    pub fn n_users(&self) -> usize {
        self.rows.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn sparsity(&self) -> f64 {
        let cells = self.n_users() as f64 * self.n_items as f64;
        if cells == 0.0 {
            0.0
        } else {
            1.0 - self.interaction_count() as f64 / cells
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_ids.len() != self.rows.len() {
            return Err(Error::Data(format!(
                "{} user ids for {} rows",
                self.user_ids.len(),
                self.rows.len()
            )));
        }
        if self.item_ids.len() != self.n_items {
            return Err(Error::Data(format!(
                "{} item ids for {} items",
                self.item_ids.len(),
                self.n_items
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Data(format!(
                        "row {i} not strictly increasing at {}..{}",
                        w[0], w[1]
                    )));
                }
            }
            if let Some(&last) = row.last() {
                if last >= self.n_items {
                    return Err(Error::Data(format!(
                        "row {i} holds index {last} outside {} items",
                        self.n_items
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the canonical text format: a header line
    /// `cfsfl-data v1 <n_users> <n_items>` followed by one line of ascending
    /// item indices per user.
    pub fn write_canonical(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "cfsfl-data v1 {} {}", self.n_users(), self.n_items)?;
        let mut line = String::new();
        for row in &self.rows {
            line.clear();
            for (k, ix) in row.iter().enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{ix}");
            }
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the canonical format. User and item labels are positional,
    /// since the canonical file stores structure only.
    pub fn read_canonical(path: &Path) -> Result<InteractionMatrix> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "cfsfl-data" || parts[1] != "v1" {
            return Err(Error::Format(format!("bad dataset header {header:?}")));
        }
        let n_users: usize = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad user count {:?}", parts[2])))?;
        let n_items: usize = parts[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad item count {:?}", parts[3])))?;
        let mut rows = Vec::with_capacity(n_users);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if rows.len() == n_users {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(Error::Format("more rows than the header declares".into()));
            }
            let row = parse_index_line(&line, n_items, lineno + 2)?;
            rows.push(row);
        }
        if rows.len() != n_users {
            return Err(Error::Format(format!(
                "header declares {n_users} users, file holds {}",
                rows.len()
            )));
        }
        let m = InteractionMatrix {
            n_items,
            rows,
            user_ids: (0..n_users).map(|i| format!("u{i}")).collect(),
            item_ids: (0..n_items).map(|j| format!("i{j}")).collect(),
        };
        m.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(m)
    }
}

fn parse_index_line(line: &str, n_items: usize, lineno: usize) -> Result<Vec<usize>> {
    let mut row = Vec::new();
    for tok in line.split_whitespace() {
        let ix: usize = tok
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad index {tok:?}")))?;
        if ix >= n_items {
            return Err(Error::Format(format!(
                "line {lineno}: index {ix} outside {n_items} items"
            )));
        }
        row.push(ix);
    }
    Ok(row)
}

/// A held-out user: the row index it had in the source matrix, and the
/// partition of its items into the fold-in (model input) and held-out
/// (scoring target) sides.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutUser {
    pub user_index: usize,
    pub fold_in: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Strong-generalization split: train users keep full rows; validation and
/// test users are disjoint from them and from each other.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub train: InteractionMatrix,
    pub validation: Vec<HeldOutUser>,
    pub test: Vec<HeldOutUser>,
}

/// Writes a held-out user list: header `cfsfl-heldout v1 <n_users> <n_items>`
/// then three lines per user (index line, fold-in line, held-out line).
pub fn write_heldout(users: &[HeldOutUser], n_items: usize, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "cfsfl-heldout v1 {} {}", users.len(), n_items)?;
    for u in users {
        writeln!(w, "{} {} {}", u.user_index, u.fold_in.len(), u.held_out.len())?;
        writeln!(w, "{}", join_indices(&u.fold_in))?;
        writeln!(w, "{}", join_indices(&u.held_out))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_heldout(path: &Path) -> Result<(Vec<HeldOutUser>, usize)> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty held-out file".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "cfsfl-heldout" || parts[1] != "v1" {
        return Err(Error::Format(format!("bad held-out header {header:?}")));
    }
    let n_users: usize = parts[2]
        .parse()
        .map_err(|_| Error::Format(format!("bad user count {:?}", parts[2])))?;
    let n_items: usize = parts[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad item count {:?}", parts[3])))?;
    let mut users = Vec::with_capacity(n_users);
    let mut lineno = 1;
    for _ in 0..n_users {
        let meta = lines
            .next()
            .ok_or_else(|| Error::Format("truncated held-out file".into()))??;
        lineno += 1;
        let m: Vec<&str> = meta.split_whitespace().collect();
        if m.len() != 3 {
            return Err(Error::Format(format!("line {lineno}: bad user record")));
        }
        let user_index: usize = m[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad user index")))?;
        let nf: usize = m[1].parse().map_err(|_| Error::Format(format!("line {lineno}: bad count")))?;
        let nh: usize = m[2].parse().map_err(|_| Error::Format(format!("line {lineno}: bad count")))?;
        let fi_line = lines
            .next()
            .ok_or_else(|| Error::Format("truncated held-out file".into()))??;
        lineno += 1;
        let fold_in = parse_index_line(&fi_line, n_items, lineno)?;
        let ho_line = lines
            .next()
            .ok_or_else(|| Error::Format("truncated held-out file".into()))??;
        lineno += 1;
        let held_out = parse_index_line(&ho_line, n_items, lineno)?;
        if fold_in.len() != nf || held_out.len() != nh {
            return Err(Error::Format(format!(
                "line {lineno}: counts disagree with record header"
            )));
        }
        users.push(HeldOutUser {
            user_index,
            fold_in,
            held_out,
        });
    }
    Ok((users, n_items))
}

fn join_indices(ixs: &[usize]) -> String {
    let mut s = String::new();
    for (k, ix) in ixs.iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{ix}");
    }
    s
}

//! Delimited interaction files, id maps and split manifests.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mars_core::{Interaction, InteractionDataset, SplitDataset};
use serde::{Deserialize, Serialize};

use crate::Error;

/// Column layout of an interaction file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelimitedFormat {
    /// `None` splits on any run of whitespace.
    pub delimiter: Option<char>,
    pub skip_header: bool,
    pub user_col: usize,
    pub item_col: usize,
    pub timestamp_col: Option<usize>,
}

impl Default for DelimitedFormat {
    fn default() -> Self {
        Self { delimiter: Some('\t'), skip_header: false, user_col: 0, item_col: 1, timestamp_col: Some(2) }
    }
}

impl DelimitedFormat {
    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self.delimiter {
            Some(d) => line.split(d).map(str::trim).collect(),
            None => line.split_whitespace().collect(),
        }
    }
}

/// Dense ids assigned to raw string ids in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self, dense: usize) -> &str {
        &self.raw[dense]
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    /// `raw_id<TAB>dense_id` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (dense, raw) in self.raw.iter().enumerate() {
            let _ = writeln!(out, "{raw}\t{dense}");
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self, Error> {
        let mut map = IdMap::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "expected raw_id<TAB>dense_id".into() };
            let (raw, dense) = line.split_once('\t').ok_or_else(bad)?;
            let dense: usize = dense.trim().parse().map_err(|_| bad())?;
            if dense != map.len() {
                return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "dense ids must be 0..n in order".into() });
            }
            map.intern(raw);
        }
        Ok(map)
    }
}

/// An interaction file after id compaction.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: InteractionDataset,
    pub users: IdMap,
    pub items: IdMap,
    pub rows_read: usize,
}

impl LoadedDataset {
    pub fn duplicates_removed(&self) -> usize {
        self.rows_read - self.dataset.len()
    }
}

fn parse_timestamp(field: &str) -> Option<i64> {
    field.parse::<i64>().ok().or_else(|| field.parse::<f64>().ok().filter(|t| t.is_finite()).map(|t| t as i64))
}

/// Reads `user item [timestamp]` rows and compacts raw ids to dense ranges.
pub fn load_interactions(path: &Path, format: &DelimitedFormat) -> Result<LoadedDataset, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut rows = Vec::new();
    let mut header_pending = format.skip_header;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields = format.fields(line);
        let get = |col: usize, what: &str| {
            fields
                .get(col)
                .copied()
                .filter(|f| !f.is_empty())
                .ok_or_else(|| err(format!("missing {what} column {col} (row has {} fields)", fields.len())))
        };
        let user = users.intern(get(format.user_col, "user")?);
        let item = items.intern(get(format.item_col, "item")?);
        let timestamp = match format.timestamp_col {
            Some(col) if col < fields.len() => {
                let f = fields[col];
                Some(parse_timestamp(f).ok_or_else(|| err(format!("bad timestamp `{f}`")))?)
            }
            _ => None,
        };
        rows.push(Interaction { user, item, timestamp });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    let rows_read = rows.len();
    let dataset = InteractionDataset::new(users.len(), items.len(), rows)?;
    Ok(LoadedDataset { dataset, users, items, rows_read })
}

fn write_pairs(pairs: &[Interaction]) -> String {
    let mut out = String::new();
    for p in pairs {
        match p.timestamp {
            Some(t) => writeln!(out, "{}\t{}\t{}", p.user, p.item, t),
            None => writeln!(out, "{}\t{}", p.user, p.item),
        }
        .expect("writing to a string");
    }
    out
}

/// Statistics written next to the manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub source: String,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub rows_read: usize,
    pub duplicates_removed: usize,
    pub pairs: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub eval_users: usize,
    pub train_only_users: usize,
    pub density: f64,
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const DEV_FILE: &str = "dev.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const USER_MAP_FILE: &str = "user_map.tsv";
pub const ITEM_MAP_FILE: &str = "item_map.tsv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn summarize(source: &str, seed: u64, loaded: &LoadedDataset, split: &SplitDataset) -> SplitSummary {
    let (n, m) = (loaded.dataset.n_users(), loaded.dataset.n_items());
    SplitSummary {
        source: source.to_string(),
        seed,
        n_users: n,
        n_items: m,
        rows_read: loaded.rows_read,
        duplicates_removed: loaded.duplicates_removed(),
        pairs: loaded.dataset.len(),
        train_pairs: split.train.len(),
        dev_pairs: split.dev.len(),
        test_pairs: split.test.len(),
        eval_users: split.test.len(),
        train_only_users: split.train_only_users,
        density: loaded.dataset.len() as f64 / (n as f64 * m as f64),
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes manifests, id maps and the summary into `dir`.
pub fn write_split(
    dir: &Path,
    loaded: &LoadedDataset,
    split: &SplitDataset,
    summary: &SplitSummary,
) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (TRAIN_FILE, write_pairs(split.train.pairs())),
        (DEV_FILE, write_pairs(&split.dev)),
        (TEST_FILE, write_pairs(&split.test)),
        (USER_MAP_FILE, loaded.users.to_tsv()),
        (ITEM_MAP_FILE, loaded.items.to_tsv()),
        (SUMMARY_FILE, crate::to_json_pretty(summary)?),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_file(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

fn read_pairs(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<Interaction>, Error> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 2 || f.len() > 3 {
            return Err(err("expected user<TAB>item[<TAB>timestamp]"));
        }
        let user: usize = f[0].parse().map_err(|_| err("bad user id"))?;
        let item: usize = f[1].parse().map_err(|_| err("bad item id"))?;
        if user >= n_users || item >= n_items {
            return Err(err("id outside the range recorded in summary.json"));
        }
        let timestamp = match f.get(2) {
            Some(t) => Some(t.parse().map_err(|_| err("bad timestamp"))?),
            None => None,
        };
        out.push(Interaction { user, item, timestamp });
    }
    Ok(out)
}

/// Reads a split directory written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<(SplitDataset, SplitSummary), Error> {
    let summary_path = dir.join(SUMMARY_FILE);
    let summary: SplitSummary = serde_json::from_str(&read_file(&summary_path)?)
        .map_err(|e| Error::Json { path: summary_path.clone(), source: e })?;
    let (n, m) = (summary.n_users, summary.n_items);
    let train = read_pairs(&dir.join(TRAIN_FILE), n, m)?;
    let dev = read_pairs(&dir.join(DEV_FILE), n, m)?;
    let test = read_pairs(&dir.join(TEST_FILE), n, m)?;
    let train = InteractionDataset::new(n, m, train)?;
    let split = SplitDataset::from_parts(train, dev, test)?;
    Ok((split, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_map_round_trip() {
        let mut m = IdMap::default();
        assert_eq!(m.intern("b"), 0);
        assert_eq!(m.intern("a"), 1);
        assert_eq!(m.intern("b"), 0);
        let back = IdMap::from_tsv(&m.to_tsv(), Path::new("x")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.dense("a"), Some(1));
    }

    #[test]
    fn timestamps_accept_floats() {
        assert_eq!(parse_timestamp("881250949"), Some(881250949));
        assert_eq!(parse_timestamp("881250949.0"), Some(881250949));
        assert_eq!(parse_timestamp("x"), None);
    }

    #[test]
    fn whitespace_delimiter() {
        let f = DelimitedFormat { delimiter: None, ..Default::default() };
        assert_eq!(f.fields(" 1  2\t3 "), vec!["1", "2", "3"]);
    }
}

//! Flat `key = value` config files.

use std::path::Path;

use mars_core::TrainConfig;

use crate::io::read_file;
use crate::Error;

/// Key/value pairs in file order. `#` starts a comment; blank lines are
/// skipped.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>, Error> {
    Ok(entries(text, path)?.into_iter().map(|(_, k, v)| (k, v)).collect())
}

fn entries(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>, Error> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies a config file to `cfg`, reporting the line of any bad entry.
pub fn apply_file(cfg: &mut TrainConfig, path: &Path) -> Result<(), Error> {
    let text = read_file(path)?;
    for (line, k, v) in entries(&text, path)? {
        cfg.set(&k, &v).map_err(|e| Error::Parse { path: path.to_path_buf(), line, msg: e.to_string() })?;
    }
    Ok(())
}

/// The resolved config in the same `key = value` format.
pub fn render(cfg: &TrainConfig) -> String {
    cfg.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mars_core::Variant;

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig { variant: Variant::Mar, learning_rate: 0.005, lambda_pull: 1.0 / 3.0, ..Default::default() };
        cfg.seed = 42;
        let text = render(&cfg);
        let mut back = TrainConfig::default();
        for (k, v) in parse_pairs(&text, Path::new("mem")).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let pairs = parse_pairs("# header\nk = 3  # facets\n\n dim=8\n", Path::new("c")).unwrap();
        assert_eq!(pairs, vec![("k".into(), "3".into()), ("dim".into(), "8".into())]);
        let err = parse_pairs("k = 3\nnonsense\n", Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("c:2"));
    }
}

//! `key = value` config files, spliced into argv ahead of the user's own
//! flags so anything given on the command line wins.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// keys may be written with `_` or `-`.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            bail!("{}:{}: invalid key {:?}", path.display(), i + 1, k.trim());
        }
        out.push((key, v.trim().trim_matches('"').to_owned()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_owned());
        }
    }
    None
}

/// Returns argv with the config file's flags inserted right after the
/// subcommand name. Boolean keys become bare flags when `true` and are
/// dropped when `false`.
pub fn splice_config(args: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let pairs = parse_config(&text, path)?;
    let Some(pos) = args.iter().position(|a| subcommands.contains(&a.as_str())) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => injected.push(format!("--{k}")),
            "false" => {}
            _ => {
                injected.push(format!("--{k}"));
                injected.push(v);
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn parses_comments_and_underscores() {
        let p = parse_config("# c\nlearning_rate = 0.1 # x\n\nmode = \"full\"\n", Path::new("c")).unwrap();
        assert_eq!(p, vec![("learning-rate".into(), "0.1".into()), ("mode".into(), "full".into())]);
        assert!(parse_config("oops\n", Path::new("c")).is_err());
    }

    #[test]
    fn config_goes_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "epochs = 2\nno-text = true\nfixed-fanout = false\n").unwrap();
        let args = argv(&format!("star --config {} train-gnn --epochs 5", cfg.display()));
        let out = splice_config(args, &["train-gnn"]).unwrap();
        let tail: Vec<&str> = out[4..].iter().map(String::as_str).collect();
        assert_eq!(tail, ["--epochs", "2", "--no-text", "--epochs", "5"]);
    }
}

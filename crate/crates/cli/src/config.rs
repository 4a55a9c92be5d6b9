//! Flat `key = value` run configuration merged with command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use eyepurify::{Error, Result};

/// Resolves settings with precedence flag > config file > default and
/// records every resolved value for logging.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, (String, usize)>,
    consumed: Vec<String>,
    resolved: Vec<(String, String, &'static str)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = normalize(k);
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
            return Err(Error::Config(format!("config line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => BTreeMap::new(),
        };
        Ok(Resolver {
            file,
            ..Default::default()
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.consumed.push(key.to_string());
        match self.file.get(key) {
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("config line {line}: invalid value `{v}` for {key}: {e}"))),
            None => Ok(None),
        }
    }

    fn record(&mut self, key: &str, value: String, source: &'static str) {
        self.resolved.push((key.to_string(), value, source));
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let (v, src) = match (flag, file) {
            (Some(v), _) => (v, "flag"),
            (None, Some(v)) => (v, "file"),
            (None, None) => (default, "default"),
        };
        self.record(key, v.to_string(), src);
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let (v, src) = match (flag, file) {
            (Some(v), _) => (Some(v), "flag"),
            (None, Some(v)) => (Some(v), "file"),
            (None, None) => (None, "default"),
        };
        let shown = v.as_ref().map_or_else(|| "(none)".to_string(), |v| v.to_string());
        self.record(key, shown, src);
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required setting --{key}")))
    }

    /// Rejects config-file keys that the command never asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<String> = self
            .file
            .iter()
            .filter(|(k, _)| !self.consumed.contains(k))
            .map(|(k, (_, line))| format!("`{k}` (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    pub fn render(&self) -> String {
        self.resolved
            .iter()
            .map(|(k, v, s)| format!("  {k} = {v}  [{s}]\n"))
            .collect()
    }
}

/// Comma-separated list wrapper usable with [`Resolver`].
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .and_then(|v| if v.is_empty() { Err("empty list".to_string()) } else { Ok(List(v)) })
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Path newtype with `Display`, for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct PathArg(pub std::path::PathBuf);

impl FromStr for PathArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(PathArg(s.into()))
    }
}

impl Display for PathArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolver(text: &str) -> Resolver {
        Resolver {
            file: parse_config(text).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn precedence_flag_file_default() {
        let mut r = resolver("iters = 7\nlr = 0.5\n");
        assert_eq!(r.get("iters", Some(3usize), 1).unwrap(), 3);
        assert_eq!(r.get("lr", None, 1e-4).unwrap(), 0.5);
        assert_eq!(r.get("batch", None, 4usize).unwrap(), 4);
        r.finish().unwrap();
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let mut r = resolver("itres = 7\n");
        r.get("iters", None, 1usize).unwrap();
        assert!(r.finish().unwrap_err().to_string().contains("itres"));
        assert!(parse_config("no equals sign").is_err());
        assert!(parse_config("a = 1\na = 2").is_err());
        let mut r = resolver("iters = many");
        assert!(r.get("iters", None, 1usize).is_err());
    }

    #[test]
    fn lists_and_comments() {
        let mut r = resolver("# comment\nsizes = 64, 128 # trailing\n");
        let l: List<usize> = r.get("sizes", None, List(vec![1])).unwrap();
        assert_eq!(l.0, vec![64, 128]);
        assert!("64,x".parse::<List<usize>>().is_err());
    }
}

//! `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored. A
//! key is the long name of a command-line flag with or without the leading
//! `--` (underscores and dashes are interchangeable). `true`/`false` switch
//! boolean flags. Repeatable flags may be given on several lines. Settings
//! are placed in front of the real arguments, so flags on the command line
//! win.

#[derive(Debug, thiserror::Error)]
#[error("{path}:{line}: {msg}")]
pub struct ConfigError {
    pub path: String,
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_config(path: &str, text: &str) -> Result<Vec<Setting>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError { path: path.into(), line: i + 1, msg: format!("expected 'key = value', got '{line}'") });
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(ConfigError { path: path.into(), line: i + 1, msg: format!("invalid key '{}'", k.trim()) });
        }
        out.push(Setting { key, value: v.trim().to_string(), line: i + 1 });
    }
    Ok(out)
}

/// Command-line tokens for `settings`; `is_switch(key)` tells boolean flags apart.
pub fn to_args(settings: &[Setting], is_switch: impl Fn(&str) -> bool) -> Result<Vec<String>, String> {
    let mut args = Vec::new();
    for s in settings {
        if is_switch(&s.key) {
            match s.value.as_str() {
                "true" => args.push(format!("--{}", s.key)),
                "false" => {}
                v => return Err(format!("line {}: '{}' expects true or false, got '{v}'", s.line, s.key)),
            }
        } else {
            args.push(format!("--{}", s.key));
            args.push(s.value.clone());
        }
    }
    Ok(args)
}

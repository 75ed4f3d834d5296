use std::fmt;
use std::path::Path;

use lbfti::experiment::ExperimentConfig;

/// A problem with how the tool was invoked or configured (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses a TOML experiment config; the error names the first offending key.
pub fn parse(text: &str) -> Result<ExperimentConfig, UsageError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." || path.is_empty() { "<root>".to_string() } else { path };
        UsageError(format!("config error at `{key}`: {}", e.into_inner().message().trim()))
    })
}

/// Reads and parses a config file, returning the verbatim text for the run snapshot.
pub fn load(path: &Path) -> Result<(ExperimentConfig, String), UsageError> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    Ok((parse(&text)?, text))
}

/// Serialises a config back to TOML.
pub fn render(cfg: &ExperimentConfig) -> anyhow::Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

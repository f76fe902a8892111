//! Flat `key = value` configuration with command-line overrides.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};

use switched_slq::outer::Ocs2Settings;
use switched_slq::{SlqSettings, SwitchingTimes};

/// Every setting the commands understand. `None` means "use the default of
/// the command".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub benchmark: Option<String>,
    pub initial_times: Option<Vec<f64>>,
    pub nodes_per_mode: Option<usize>,
    pub l_min: Option<f64>,
    pub max_iterations: Option<usize>,
    pub max_outer: Option<usize>,
    pub gap_tol: Option<f64>,
    pub step_tol: Option<f64>,
    pub gammas: Option<Vec<f64>>,
    pub warm_start: Option<bool>,
    pub h: Option<f64>,
    pub tolerance: Option<f64>,
    pub nodes: Option<Vec<usize>>,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

pub const DEFAULT_NODES_PER_MODE: usize = 200;
pub const DEFAULT_FD_STEP: f64 = 1e-4;
pub const DEFAULT_GRADIENT_TOLERANCE: f64 = 1e-2;

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("{key}: cannot parse `{s}`: {e}")))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| anyhow!("{key}: cannot parse `{value}`: {e}"))
}

impl Config {
    /// Parses `key = value` lines. Blank lines and lines starting with `#`
    /// are ignored; keys may use `-` or `_`.
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            c.set(&key.trim().replace('-', "_"), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Config::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "benchmark" => self.benchmark = Some(value.to_string()),
            "initial_times" => self.initial_times = Some(parse_list(key, value)?),
            "nodes_per_mode" => self.nodes_per_mode = Some(parse_one(key, value)?),
            "l_min" => self.l_min = Some(parse_one(key, value)?),
            "max_iterations" => self.max_iterations = Some(parse_one(key, value)?),
            "max_outer" => self.max_outer = Some(parse_one(key, value)?),
            "gap_tol" => self.gap_tol = Some(parse_one(key, value)?),
            "step_tol" => self.step_tol = Some(parse_one(key, value)?),
            "gammas" => self.gammas = Some(parse_list(key, value)?),
            "warm_start" => self.warm_start = Some(parse_one(key, value)?),
            "h" => self.h = Some(parse_one(key, value)?),
            "tolerance" => self.tolerance = Some(parse_one(key, value)?),
            "nodes" => self.nodes = Some(parse_list(key, value)?),
            "threads" => self.threads = Some(parse_one(key, value)?),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => bail!("unknown setting `{key}`"),
        }
        Ok(())
    }

    /// Settings present in `other` replace those in `self`.
    pub fn merged(self, other: Config) -> Config {
        Config {
            benchmark: other.benchmark.or(self.benchmark),
            initial_times: other.initial_times.or(self.initial_times),
            nodes_per_mode: other.nodes_per_mode.or(self.nodes_per_mode),
            l_min: other.l_min.or(self.l_min),
            max_iterations: other.max_iterations.or(self.max_iterations),
            max_outer: other.max_outer.or(self.max_outer),
            gap_tol: other.gap_tol.or(self.gap_tol),
            step_tol: other.step_tol.or(self.step_tol),
            gammas: other.gammas.or(self.gammas),
            warm_start: other.warm_start.or(self.warm_start),
            h: other.h.or(self.h),
            tolerance: other.tolerance.or(self.tolerance),
            nodes: other.nodes.or(self.nodes),
            threads: other.threads.or(self.threads),
            output_dir: other.output_dir.or(self.output_dir),
        }
    }

    pub fn benchmark_name(&self) -> Result<&str> {
        self.benchmark.as_deref().ok_or_else(|| anyhow!("no benchmark given (use --benchmark)"))
    }

    pub fn nodes_per_mode(&self) -> usize {
        self.nodes_per_mode.unwrap_or(DEFAULT_NODES_PER_MODE)
    }

    pub fn times_or(&self, fallback: &SwitchingTimes) -> SwitchingTimes {
        self.initial_times
            .clone()
            .map(SwitchingTimes::new)
            .unwrap_or_else(|| fallback.clone())
    }

    /// Inner settings with `defaults` filling the unset fields.
    pub fn slq_settings(&self, defaults: SlqSettings) -> SlqSettings {
        SlqSettings {
            l_min: self.l_min.unwrap_or(defaults.l_min),
            max_iterations: self.max_iterations.unwrap_or(defaults.max_iterations),
            ..defaults
        }
    }

    pub fn ocs2_settings(&self) -> Ocs2Settings {
        let d = Ocs2Settings::default();
        Ocs2Settings {
            gap_tol: self.gap_tol.unwrap_or(d.gap_tol),
            step_tol: self.step_tol.unwrap_or(d.step_tol),
            max_outer_iterations: self.max_outer.unwrap_or(d.max_outer_iterations),
            gammas: self.gammas.clone().unwrap_or(d.gammas),
            warm_start: self.warm_start.unwrap_or(d.warm_start),
            slq: self.slq_settings(d.slq),
            ..d
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_file() {
        let c = Config::parse("# run\nbenchmark = ex2\ninitial-times = 0.5, 1.5\n\nmax_outer=4\nwarm_start = false\n").unwrap();
        assert_eq!(c.benchmark.as_deref(), Some("ex2"));
        assert_eq!(c.initial_times, Some(vec![0.5, 1.5]));
        assert_eq!(c.max_outer, Some(4));
        assert_eq!(c.warm_start, Some(false));
        assert_eq!(c.ocs2_settings().max_outer_iterations, 4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Config::parse("colour = red").is_err());
        assert!(Config::parse("l_min = small").is_err());
        assert!(Config::parse("just a line").is_err());
    }

    #[test]
    fn overrides_win() {
        let file = Config::parse("benchmark = ex1\nl_min = 1e-4").unwrap();
        let flags = Config {
            l_min: Some(1e-5),
            ..Config::default()
        };
        let c = file.merged(flags);
        assert_eq!(c.benchmark.as_deref(), Some("ex1"));
        assert_eq!(c.l_min, Some(1e-5));
    }
}

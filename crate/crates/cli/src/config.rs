//! `key = value` run configuration with `#` comments.

use std::fmt;

use flowkit::losses::LossWeights;
use flowkit::solver::SolverConfig;
use flowkit::url::{FitOptions, DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub solver: SolverConfig,
    /// Weights for the `loss` command.
    pub weights: LossWeights,
    pub flow_cap: f64,
    pub window: usize,
    pub url_max_iter: usize,
    pub url_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            solver: SolverConfig::default(),
            weights: LossWeights::default(),
            flow_cap: 20.0,
            window: 3,
            url_max_iter: DEFAULT_MAX_ITER,
            url_tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    /// 1-based line in the config file; `None` for command-line overrides.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "override: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: &[&str] = &[
    "seed",
    "lambda1",
    "lambda2",
    "lambda3",
    "alpha_pixel",
    "alpha_smooth",
    "epsilon",
    "solver_lambda1",
    "solver_lambda2",
    "solver_lambda3",
    "solver_alpha_pixel",
    "solver_alpha_smooth",
    "solver_epsilon",
    "pyramid_levels",
    "scale_factor",
    "iters_per_level",
    "step",
    "smooth_order",
    "use_ssim",
    "bidirectional",
    "occlusion_second_pass",
    "occlusion_alpha1",
    "occlusion_alpha2",
    "flow_cap",
    "window",
    "url_max_iter",
    "url_tol",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let s = &mut self.solver;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                s.seed = self.seed;
            }
            "lambda1" => self.weights.lambda1 = parse(key, value)?,
            "lambda2" => self.weights.lambda2 = parse(key, value)?,
            "lambda3" => self.weights.lambda3 = parse(key, value)?,
            "alpha_pixel" => self.weights.alpha_pixel = parse(key, value)?,
            "alpha_smooth" => self.weights.alpha_smooth = parse(key, value)?,
            "epsilon" => self.weights.epsilon = parse(key, value)?,
            "solver_lambda1" => s.weights.lambda1 = parse(key, value)?,
            "solver_lambda2" => s.weights.lambda2 = parse(key, value)?,
            "solver_lambda3" => s.weights.lambda3 = parse(key, value)?,
            "solver_alpha_pixel" => s.weights.alpha_pixel = parse(key, value)?,
            "solver_alpha_smooth" => s.weights.alpha_smooth = parse(key, value)?,
            "solver_epsilon" => s.weights.epsilon = parse(key, value)?,
            "pyramid_levels" => s.pyramid_levels = parse(key, value)?,
            "scale_factor" => s.scale_factor = parse(key, value)?,
            "iters_per_level" => s.iters_per_level = parse(key, value)?,
            "step" => s.step = parse(key, value)?,
            "smooth_order" => s.smooth_order = parse(key, value)?,
            "use_ssim" => s.use_ssim = parse_bool(key, value)?,
            "bidirectional" => s.bidirectional = parse_bool(key, value)?,
            "occlusion_second_pass" => s.occlusion_second_pass = parse_bool(key, value)?,
            "occlusion_alpha1" => s.occlusion_alpha1 = parse(key, value)?,
            "occlusion_alpha2" => s.occlusion_alpha2 = parse(key, value)?,
            "flow_cap" => self.flow_cap = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "url_max_iter" => self.url_max_iter = parse(key, value)?,
            "url_tol" => self.url_tol = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?} (known: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError {
                line: Some(i + 1),
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            self.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, item: &str) -> Result<(), ConfigError> {
        let err = |message: String| ConfigError { line: None, message };
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got {item:?}")))?;
        self.set(key.trim(), value.trim()).map_err(err)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.url_max_iter,
            tol: self.url_tol,
            seed: self.seed,
        }
    }
}

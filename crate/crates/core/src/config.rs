//! Run configuration: a small `key = value` text format with `#` comments.
//!
//! Parsing is strict — unknown keys, duplicates, and malformed values are
//! errors that name their line — and `canonical_text` serializes every
//! setting back out in a fixed order, so a config embedded in a checkpoint
//! reparses to exactly the same `RunConfig`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::data::CropMode;
use crate::error::{Error, Result};
use crate::nn::{DenoiserConfig, LossNorm};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::training::TrainConfig;

/// Where training pairs come from: a generated toy set or a directory of
/// images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    Toy { n: usize, size: usize },
    Dir(PathBuf),
}

impl std::fmt::Display for DataSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Toy { n, size } => write!(f, "toy({n},{size})"),
            Self::Dir(path) => write!(f, "dir({})", path.display()),
        }
    }
}

impl std::str::FromStr for DataSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("toy(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "expected toy(count,size), got `{s}`"
                )));
            }
            let n = parts[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad toy count `{}`", parts[0])))?;
            let size = parts[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad toy size `{}`", parts[1])))?;
            return Ok(Self::Toy { n, size });
        }
        if let Some(inner) = s.strip_prefix("dir(").and_then(|r| r.strip_suffix(')')) {
            if inner.trim().is_empty() {
                return Err(Error::Config("dir() needs a path".into()));
            }
            return Ok(Self::Dir(PathBuf::from(inner.trim())));
        }
        Err(Error::Config(format!(
            "data must be toy(count,size) or dir(path), got `{s}`"
        )))
    }
}

/// How the partial-sampling start step is chosen: a fixed step index, or
/// the largest step whose noise scale still exceeds a threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutoffSpec {
    Step(usize),
    Threshold(f64),
}

impl CutoffSpec {
    /// Turn this setting into a concrete step count on a schedule.
    pub fn resolve(&self, schedule: &NoiseSchedule) -> Result<usize> {
        match *self {
            Self::Step(k) => {
                if k < 1 || k > schedule.len() {
                    Err(Error::Range(format!(
                        "cutoff {k} outside 1..={}",
                        schedule.len()
                    )))
                } else {
                    Ok(k)
                }
            }
            Self::Threshold(s) => {
                if !(0.0..1.0).contains(&s) {
                    return Err(Error::Domain(format!(
                        "threshold must lie in [0,1), got {s}"
                    )));
                }
                let k = schedule.cutoff_step_for_threshold(s);
                if k == 0 {
                    return Err(Error::Domain(format!(
                        "threshold {s} exceeds every noise scale; no start step"
                    )));
                }
                Ok(k)
            }
        }
    }
}

/// Everything a run needs, merged from the config file over defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_schedule: ScheduleSpec,
    pub infer_schedule: ScheduleSpec,
    pub data: DataSpec,
    pub k_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub loss: LossNorm,
    pub seed: u64,
    pub blur_sigma_range: (f64, f64),
    pub upsample_factor: usize,
    pub cutoff: CutoffSpec,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub residual_blocks: usize,
    pub group_channels: usize,
    pub crop: usize,
    pub crop_mode: CropMode,
}

/// Keys the parser accepts, with `schedule` accepted as shorthand for
/// `train_schedule`.
const KNOWN_KEYS: &[&str] = &[
    "train_schedule",
    "infer_schedule",
    "data",
    "k_fraction",
    "learning_rate",
    "batch_size",
    "total_steps",
    "loss",
    "seed",
    "blur_sigma_range",
    "upsample_factor",
    "cutoff",
    "threshold",
    "out_dir",
    "checkpoint_every",
    "image_channels",
    "base_channels",
    "channel_multipliers",
    "residual_blocks",
    "group_channels",
    "crop",
    "crop_mode",
];

const REQUIRED_KEYS: &[&str] = &["train_schedule", "infer_schedule", "data"];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| {
        Error::Config(format!("line {line}: invalid value for `{key}`: {e}"))
    })
}

fn parse_pair(key: &str, value: &str, line: usize) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "line {line}: `{key}` expects two comma-separated numbers, got `{value}`"
        )));
    }
    Ok((
        parse_value(key, parts[0], line)?,
        parse_value(key, parts[1], line)?,
    ))
}

fn parse_usize_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse_value(key, p, line))
        .collect()
}

impl RunConfig {
    /// Built-in defaults for everything except the required keys.
    fn defaults() -> Self {
        Self {
            train_schedule: ScheduleSpec::new(5e-5, 0.01, 2000),
            infer_schedule: ScheduleSpec::new(1e-5, 0.213, 100),
            data: DataSpec::Toy { n: 500, size: 32 },
            k_fraction: 1.0,
            learning_rate: 1e-4,
            batch_size: 2,
            total_steps: 5000,
            loss: LossNorm::L2,
            seed: 0,
            blur_sigma_range: (0.0, 0.0),
            upsample_factor: 2,
            cutoff: CutoffSpec::Threshold(0.25),
            out_dir: PathBuf::from("out"),
            checkpoint_every: 1000,
            image_channels: 1,
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            residual_blocks: 1,
            group_channels: 16,
            crop: 32,
            crop_mode: CropMode::Random,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::defaults();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut cutoff_line = None;
        let mut threshold_line = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((lhs, rhs)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line_no}: expected `key = value`, got `{line}`"
                )));
            };
            let mut key = lhs.trim().to_string();
            let value = rhs.trim();
            if key == "schedule" {
                key = "train_schedule".into();
            }
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "line {line_no}: unknown key `{key}`"
                )));
            }
            if let Some(first) = seen.insert(key.clone(), line_no) {
                return Err(Error::Config(format!(
                    "duplicate key `{key}` on lines {first} and {line_no}"
                )));
            }

            match key.as_str() {
                "train_schedule" => config.train_schedule = parse_value(&key, value, line_no)?,
                "infer_schedule" => config.infer_schedule = parse_value(&key, value, line_no)?,
                "data" => config.data = parse_value(&key, value, line_no)?,
                "k_fraction" => config.k_fraction = parse_value(&key, value, line_no)?,
                "learning_rate" => config.learning_rate = parse_value(&key, value, line_no)?,
                "batch_size" => config.batch_size = parse_value(&key, value, line_no)?,
                "total_steps" => config.total_steps = parse_value(&key, value, line_no)?,
                "loss" => config.loss = parse_value(&key, value, line_no)?,
                "seed" => config.seed = parse_value(&key, value, line_no)?,
                "blur_sigma_range" => {
                    config.blur_sigma_range = parse_pair(&key, value, line_no)?
                }
                "upsample_factor" => config.upsample_factor = parse_value(&key, value, line_no)?,
                "cutoff" => {
                    cutoff_line = Some(line_no);
                    config.cutoff = CutoffSpec::Step(parse_value(&key, value, line_no)?);
                }
                "threshold" => {
                    threshold_line = Some(line_no);
                    config.cutoff = CutoffSpec::Threshold(parse_value(&key, value, line_no)?);
                }
                "out_dir" => config.out_dir = PathBuf::from(value),
                "checkpoint_every" => {
                    config.checkpoint_every = parse_value(&key, value, line_no)?
                }
                "image_channels" => config.image_channels = parse_value(&key, value, line_no)?,
                "base_channels" => config.base_channels = parse_value(&key, value, line_no)?,
                "channel_multipliers" => {
                    config.channel_multipliers = parse_usize_list(&key, value, line_no)?
                }
                "residual_blocks" => config.residual_blocks = parse_value(&key, value, line_no)?,
                "group_channels" => config.group_channels = parse_value(&key, value, line_no)?,
                "crop" => config.crop = parse_value(&key, value, line_no)?,
                "crop_mode" => {
                    config.crop_mode = match value {
                        "random" => CropMode::Random,
                        "center" => CropMode::Center,
                        other => {
                            return Err(Error::Config(format!(
                                "line {line_no}: crop_mode must be random or center, got `{other}`"
                            )))
                        }
                    }
                }
                _ => unreachable!("key list covered above"),
            }
        }

        if let (Some(a), Some(b)) = (cutoff_line, threshold_line) {
            return Err(Error::Config(format!(
                "cutoff (line {a}) and threshold (line {b}) are mutually exclusive"
            )));
        }
        let missing: Vec<&str> = REQUIRED_KEYS
            .iter()
            .copied()
            .filter(|k| !seen.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing required keys: {}",
                missing.join(", ")
            )));
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Deterministic full serialization; `parse(canonical_text())` returns
    /// an equal config. This text is what checkpoints embed.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("train_schedule", self.train_schedule.to_string());
        push("infer_schedule", self.infer_schedule.to_string());
        push("data", self.data.to_string());
        push("k_fraction", self.k_fraction.to_string());
        push("learning_rate", self.learning_rate.to_string());
        push("batch_size", self.batch_size.to_string());
        push("total_steps", self.total_steps.to_string());
        push("loss", self.loss.to_string());
        push("seed", self.seed.to_string());
        push(
            "blur_sigma_range",
            format!("{},{}", self.blur_sigma_range.0, self.blur_sigma_range.1),
        );
        push("upsample_factor", self.upsample_factor.to_string());
        match self.cutoff {
            CutoffSpec::Step(k) => push("cutoff", k.to_string()),
            CutoffSpec::Threshold(s) => push("threshold", s.to_string()),
        }
        push("out_dir", self.out_dir.display().to_string());
        push("checkpoint_every", self.checkpoint_every.to_string());
        push("image_channels", self.image_channels.to_string());
        push("base_channels", self.base_channels.to_string());
        push(
            "channel_multipliers",
            self.channel_multipliers
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        push("residual_blocks", self.residual_blocks.to_string());
        push("group_channels", self.group_channels.to_string());
        push("crop", self.crop.to_string());
        push(
            "crop_mode",
            match self.crop_mode {
                CropMode::Random => "random".into(),
                CropMode::Center => "center".into(),
            },
        );
        out
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_channels: self.image_channels,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            residual_blocks_per_stage: self.residual_blocks,
            group_channels: self.group_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.train_schedule,
            k_fraction: self.k_fraction,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            loss: self.loss,
            seed: self.seed,
            blur_sigma_range: self.blur_sigma_range,
            upsample_factor: self.upsample_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.infer_schedule.build()?;
        self.denoiser_config().validate()?;
        if self.crop == 0 || !self.crop.is_multiple_of(self.upsample_factor) {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of upsample_factor {}",
                self.crop, self.upsample_factor
            )));
        }
        if let DataSpec::Toy { n, size } = self.data {
            if n == 0 || size == 0 {
                return Err(Error::Config("toy dataset needs n > 0 and size > 0".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
train_schedule = linear(5e-5,0.01,2000)
infer_schedule = linear(1e-5,0.213,100)
data = toy(500,32)
";

    #[test]
    fn minimal_config_fills_defaults() {
        let config = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(config.train_schedule, ScheduleSpec::new(5e-5, 0.01, 2000));
        assert_eq!(config.infer_schedule, ScheduleSpec::new(1e-5, 0.213, 100));
        assert_eq!(config.data, DataSpec::Toy { n: 500, size: 32 });
        assert_eq!(config.k_fraction, 1.0);
        assert_eq!(config.learning_rate, 1e-4);
        assert_eq!(config.batch_size, 2);
        assert_eq!(config.cutoff, CutoffSpec::Threshold(0.25));
        assert_eq!(config.loss, LossNorm::L2);
        assert!(config.validate().is_ok());
    }

    #[test]
    fn schedule_is_shorthand_for_train_schedule() {
        let text = "\
schedule = linear(5e-5,0.01,2000)
infer_schedule = linear(1e-5,0.213,100)
data = toy(10,16)
";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.train_schedule, ScheduleSpec::new(5e-5, 0.01, 2000));
    }

    #[test]
    fn empty_file_lists_missing_required_keys() {
        let err = RunConfig::parse("").unwrap_err().to_string();
        assert!(err.contains("train_schedule"), "{err}");
        assert!(err.contains("infer_schedule"), "{err}");
        assert!(err.contains("data"), "{err}");
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let text = "\
train_schedule = linear(5e-5,0.01,2000)
infer_schedule = linear(1e-5,0.213,100)
data = toy(10,16)
seed = 1
seed = 2
";
        let err = RunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("lines 4 and 5"), "{err}");

        // The shorthand collides with the canonical name.
        let text = "\
schedule = linear(5e-5,0.01,2000)
train_schedule = linear(5e-5,0.01,2000)
infer_schedule = linear(1e-5,0.213,100)
data = toy(10,16)
";
        let err = RunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("duplicate key `train_schedule`"), "{err}");
    }

    #[test]
    fn unknown_key_names_the_line() {
        let text = format!("{MINIMAL}mystery = 4\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("mystery"), "{err}");
    }

    #[test]
    fn malformed_value_names_line_and_key() {
        let text = format!("{MINIMAL}batch_size = many\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("batch_size"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "\
# full-line comment
train_schedule = linear(5e-5,0.01,2000)   # trailing comment

infer_schedule = linear(1e-5,0.213,100)
data = dir(images/train)
";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.data, DataSpec::Dir(PathBuf::from("images/train")));
    }

    #[test]
    fn cutoff_and_threshold_are_mutually_exclusive() {
        let text = format!("{MINIMAL}cutoff = 50\nthreshold = 0.25\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("mutually exclusive"), "{err}");
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = format!(
            "{MINIMAL}\
k_fraction = 0.5
learning_rate = 0.0003
batch_size = 4
total_steps = 123
loss = l1
seed = 42
blur_sigma_range = 0.5,1.25
upsample_factor = 4
cutoff = 37
out_dir = runs/a
checkpoint_every = 17
image_channels = 3
base_channels = 32
channel_multipliers = 1,2,4
residual_blocks = 2
group_channels = 8
crop = 64
crop_mode = center
"
        );
        let config = RunConfig::parse(&text).unwrap();
        let reparsed = RunConfig::parse(&config.canonical_text()).unwrap();
        assert_eq!(config, reparsed);
        // And the canonical form is a fixpoint.
        assert_eq!(config.canonical_text(), reparsed.canonical_text());
    }

    #[test]
    fn cutoff_spec_resolution() {
        let schedule = NoiseSchedule::linear(1e-5, 0.213, 100).unwrap();
        assert_eq!(CutoffSpec::Step(50).resolve(&schedule).unwrap(), 50);
        assert!(CutoffSpec::Step(0).resolve(&schedule).is_err());
        assert!(CutoffSpec::Step(101).resolve(&schedule).is_err());
        assert_eq!(CutoffSpec::Threshold(0.25).resolve(&schedule).unwrap(), 50);
        assert!(CutoffSpec::Threshold(0.9999999).resolve(&schedule).is_err());
        assert!(CutoffSpec::Threshold(1.0).resolve(&schedule).is_err());
        assert!(CutoffSpec::Threshold(-0.1).resolve(&schedule).is_err());
    }

    #[test]
    fn missing_equals_sign_is_reported() {
        let text = format!("{MINIMAL}just some words\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn data_spec_parsing() {
        assert_eq!(
            "toy(10, 16)".parse::<DataSpec>().unwrap(),
            DataSpec::Toy { n: 10, size: 16 }
        );
        assert_eq!(
            "dir(a/b c)".parse::<DataSpec>().unwrap(),
            DataSpec::Dir(PathBuf::from("a/b c"))
        );
        assert!("toy(10)".parse::<DataSpec>().is_err());
        assert!("csv(x)".parse::<DataSpec>().is_err());
        assert!("dir()".parse::<DataSpec>().is_err());
    }
}

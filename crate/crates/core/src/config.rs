//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored. Relative paths resolve against the
//! directory of the config file. Every key and its default:
//!
//! ```text
//! gps = gps.csv                # user_id,lat,lon,timestamp
//! pois = pois.csv              # lat,lon,category
//! categories =                 # id,name; empty selects the built-in 28-category table
//! output = out
//! bbox = min_lat,min_lon,max_lat,max_lon   # required
//! level = 6
//! stay_radius_m = 200
//! stay_seconds = 1200
//! timezone = UTC               # or +HH:MM / -HH:MM
//! weekdays_only = true
//! mask = column                # column | element
//! hap_scaling = none           # none | spectral
//! lambda1 = 1
//! lambda2 = 1
//! lambda3 = 0.1
//! lambda4 = 1
//! lambda5 = 0.01
//! k = 10
//! alpha0 = 0.001
//! rho = 0.999
//! epsilon = 1e-8
//! max_iter = 2000
//! init_std = 0.1
//! update = gauss_seidel        # gauss_seidel | jacobi
//! method = crf                 # crf | kmeans
//! feature = latent_v           # raw_poi | tfidf | svd_poi | latent_v | latent_z
//! feature_scaling = none       # none | l2 | standardize
//! c = 4
//! beta = 1
//! svd_t = 10
//! icm_schedule = sequential    # sequential | colored
//! crf_max_rounds = 50
//! kmeans_max_iter = 300
//! restarts = 10               # K-means / CRF initializations, best kept
//! seed = 0
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activity::{Timezone, DEFAULT_STAY_RADIUS_M, DEFAULT_STAY_SECONDS};
use crate::cluster::{ClusterMethod, FeatureScaling, IcmSchedule, DEFAULT_CRF_ROUNDS, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::fusion::{Hyperparams, UpdateOrder};
use crate::geo::{BBox, MAX_LEVEL};
use crate::poi::{FeatureKind, MaskGranularity};

/// Rescaling applied to the activity pattern matrix before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HapScaling {
    /// Raw trip counts.
    #[default]
    None,
    /// Divide by the largest singular value, so step sizes do not depend on data volume.
    Spectral,
}

impl FromStr for HapScaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HapScaling::None),
            "spectral" => Ok(HapScaling::Spectral),
            _ => Err(Error::Config(format!("hap_scaling must be `none` or `spectral`, got `{s}`"))),
        }
    }
}

impl HapScaling {
    fn as_str(self) -> &'static str {
        match self {
            HapScaling::None => "none",
            HapScaling::Spectral => "spectral",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub gps: PathBuf,
    pub pois: PathBuf,
    pub categories: Option<PathBuf>,
    pub output: PathBuf,
    pub bbox: Option<BBox>,
    pub level: usize,
    pub stay_radius_m: f64,
    pub stay_seconds: i64,
    pub timezone: Timezone,
    pub weekdays_only: bool,
    pub mask: MaskGranularity,
    pub hap_scaling: HapScaling,
    pub hyper: Hyperparams,
    pub method: ClusterMethod,
    pub feature: FeatureKind,
    pub feature_scaling: FeatureScaling,
    pub c: usize,
    pub beta: f64,
    pub svd_t: usize,
    pub icm_schedule: IcmSchedule,
    pub crf_max_rounds: usize,
    pub kmeans_max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gps: "gps.csv".into(),
            pois: "pois.csv".into(),
            categories: None,
            output: "out".into(),
            bbox: None,
            level: 6,
            stay_radius_m: DEFAULT_STAY_RADIUS_M,
            stay_seconds: DEFAULT_STAY_SECONDS,
            timezone: Timezone::utc(),
            weekdays_only: true,
            mask: MaskGranularity::Column,
            hap_scaling: HapScaling::None,
            hyper: Hyperparams::default(),
            method: ClusterMethod::Crf,
            feature: FeatureKind::LatentV,
            feature_scaling: FeatureScaling::None,
            c: 4,
            beta: 1.0,
            svd_t: 10,
            icm_schedule: IcmSchedule::Sequential,
            crf_max_rounds: DEFAULT_CRF_ROUNDS,
            kmeans_max_iter: 300,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_bbox(value: &str) -> Result<BBox> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse("bbox", p.trim()))
        .collect::<Result<_>>()?;
    let [a, b, c, d] = parts[..] else {
        return Err(Error::Config("`bbox` needs min_lat,min_lon,max_lat,max_lon".into()));
    };
    BBox::new(a, b, c, d).map_err(|e| Error::Config(format!("`bbox`: {e}")))
}

impl PipelineConfig {
    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::parse_str(&text, base)
    }

    /// Makes relative input and output paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.gps);
        fix(&mut self.pois);
        fix(&mut self.output);
        if let Some(c) = self.categories.as_mut() {
            fix(c);
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.hyper;
        match key {
            "gps" => self.gps = value.into(),
            "pois" => self.pois = value.into(),
            "categories" => self.categories = (!value.is_empty()).then(|| value.into()),
            "output" => self.output = value.into(),
            "bbox" => self.bbox = Some(parse_bbox(value)?),
            "level" => self.level = parse(key, value)?,
            "stay_radius_m" => self.stay_radius_m = parse(key, value)?,
            "stay_seconds" => self.stay_seconds = parse(key, value)?,
            "timezone" => self.timezone = value.parse()?,
            "weekdays_only" => self.weekdays_only = parse_bool(key, value)?,
            "mask" => self.mask = value.parse()?,
            "hap_scaling" => self.hap_scaling = value.parse()?,
            "lambda1" => h.lambda1 = parse(key, value)?,
            "lambda2" => h.lambda2 = parse(key, value)?,
            "lambda3" => h.lambda3 = parse(key, value)?,
            "lambda4" => h.lambda4 = parse(key, value)?,
            "lambda5" => h.lambda5 = parse(key, value)?,
            "k" => h.k = parse(key, value)?,
            "alpha0" => h.alpha0 = parse(key, value)?,
            "rho" => h.rho = parse(key, value)?,
            "epsilon" => h.epsilon = parse(key, value)?,
            "max_iter" => h.max_iter = parse(key, value)?,
            "init_std" => h.init_std = parse(key, value)?,
            "update" => h.update = value.parse::<UpdateOrder>()?,
            "method" => self.method = value.parse()?,
            "feature" => self.feature = value.parse()?,
            "feature_scaling" => self.feature_scaling = value.parse()?,
            "c" => self.c = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "svd_t" => self.svd_t = parse(key, value)?,
            "icm_schedule" => {
                self.icm_schedule = match value {
                    "sequential" => IcmSchedule::Sequential,
                    "colored" => IcmSchedule::Colored,
                    _ => return Err(Error::Config(format!("icm_schedule must be `sequential` or `colored`, got `{value}`"))),
                }
            }
            "crf_max_rounds" => self.crf_max_rounds = parse(key, value)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse(key, value)?,
            "restarts" => self.restarts = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.hyper.seed = self.seed;
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.bbox.is_none() {
            return Err(Error::Config("`bbox` is required".into()));
        }
        if !(1..=MAX_LEVEL).contains(&self.level) {
            return Err(Error::Config(format!("`level` must be in 1..={MAX_LEVEL}")));
        }
        if !(self.stay_radius_m.is_finite() && self.stay_radius_m > 0.0) || self.stay_seconds < 0 {
            return Err(Error::Config("stay radius must be positive and stay duration nonnegative".into()));
        }
        if self.c == 0 {
            return Err(Error::Config("`c` must be at least 1".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("`beta` must be finite and nonnegative".into()));
        }
        if self.svd_t == 0 {
            return Err(Error::Config("`svd_t` must be at least 1".into()));
        }
        if self.crf_max_rounds == 0 || self.kmeans_max_iter == 0 || self.restarts == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        self.hyper.validate()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox.expect("validated config has a bbox")
    }

    /// Canonical text form: every key in a fixed order. Parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let b = self.bbox();
        let path = |p: &Path| p.display().to_string();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("gps", path(&self.gps));
        kv("pois", path(&self.pois));
        kv("categories", self.categories.as_deref().map(path).unwrap_or_default());
        kv("output", path(&self.output));
        kv("bbox", format!("{},{},{},{}", b.min_lat, b.min_lon, b.max_lat, b.max_lon));
        kv("level", self.level.to_string());
        kv("stay_radius_m", self.stay_radius_m.to_string());
        kv("stay_seconds", self.stay_seconds.to_string());
        kv("timezone", self.timezone.to_string());
        kv("weekdays_only", self.weekdays_only.to_string());
        kv(
            "mask",
            match self.mask {
                MaskGranularity::Column => "column".into(),
                MaskGranularity::Element => "element".into(),
            },
        );
        kv("hap_scaling", self.hap_scaling.as_str().into());
        kv("lambda1", h.lambda1.to_string());
        kv("lambda2", h.lambda2.to_string());
        kv("lambda3", h.lambda3.to_string());
        kv("lambda4", h.lambda4.to_string());
        kv("lambda5", h.lambda5.to_string());
        kv("k", h.k.to_string());
        kv("alpha0", h.alpha0.to_string());
        kv("rho", h.rho.to_string());
        kv("epsilon", h.epsilon.to_string());
        kv("max_iter", h.max_iter.to_string());
        kv("init_std", h.init_std.to_string());
        kv(
            "update",
            match h.update {
                UpdateOrder::GaussSeidel => "gauss_seidel".into(),
                UpdateOrder::Jacobi => "jacobi".into(),
            },
        );
        kv("method", self.method.to_string());
        kv("feature", self.feature.to_string());
        kv("feature_scaling", self.feature_scaling.to_string());
        kv("c", self.c.to_string());
        kv("beta", self.beta.to_string());
        kv("svd_t", self.svd_t.to_string());
        kv(
            "icm_schedule",
            match self.icm_schedule {
                IcmSchedule::Sequential => "sequential".into(),
                IcmSchedule::Colored => "colored".into(),
            },
        );
        kv("crf_max_rounds", self.crf_max_rounds.to_string());
        kv("kmeans_max_iter", self.kmeans_max_iter.to_string());
        kv("restarts", self.restarts.to_string());
        kv("seed", self.seed.to_string());
        out
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        crate::io::sha256_bytes(self.to_text().as_bytes())
    }
}

//! Run configuration: a versioned TOML file plus the input files it names.
//!
//! A run can also be loaded from the `manifest.json` of an earlier run,
//! which embeds the configuration text and every input file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fxlv_core::io;
use fxlv_core::{
    BinnedOptions, CallPriceSurface, CalibrationGrid, Correlation3, Currency, GammaSpec, HullWhite, HybridOptions,
    LocalVolGrid, McCalibrationOptions, PathMode, PdeSpec, PiecewiseConstant, Scheme, SchobelZhuParams, SimSpec,
    ThreeFactorModel, YieldCurve,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, CliError, Result};
use crate::manifest::Manifest;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Mc,
    Pde,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub engine: Option<Engine>,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub market: MarketConfig,
    pub rates: RatesConfig,
    #[serde(default)]
    pub correlation: Correlation3,
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: Option<McConfig>,
    #[serde(default)]
    pub pde: Option<PdeSpec>,
    #[serde(default)]
    pub hybrid: Option<HybridConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub spot: f64,
    pub domestic_curve: PathBuf,
    pub foreign_curve: PathBuf,
    pub surface: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    pub domestic: HullWhiteConfig,
    pub foreign: HullWhiteConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HullWhiteConfig {
    pub alpha: f64,
    /// Piecewise-constant schedule as `t:value` pairs.
    pub sigma: String,
    /// Optional check of the initial short rate implied by the curve.
    #[serde(default)]
    pub r0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub times: Vec<f64>,
    pub strikes: Vec<f64>,
    #[serde(default = "default_density_ratio")]
    pub min_density_ratio: f64,
}

fn default_density_ratio() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub steps_per_year: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "yes")]
    pub antithetic: bool,
    #[serde(default)]
    pub path_mode: PathMode,
    #[serde(default = "default_tail_paths")]
    pub min_tail_paths: usize,
}

fn yes() -> bool {
    true
}

fn default_tail_paths() -> usize {
    100
}

impl McConfig {
    pub fn sim_spec(&self, seed: u64) -> SimSpec {
        SimSpec {
            n_paths: self.n_paths,
            steps_per_year: self.steps_per_year,
            seed,
            scheme: self.scheme,
            antithetic: self.antithetic,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    /// Pure local-vol grid as a path stem (`<stem>.csv` and `<stem>.json`);
    /// calibrated inline with the selected engine when absent.
    #[serde(default)]
    pub loc1: Option<PathBuf>,
    pub sz: SchobelZhuParams,
    #[serde(default)]
    pub gamma: GammaSpec,
    #[serde(default)]
    pub rho_f_nu: f64,
    /// Leverage dates; the calibration grid's dates when absent.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    pub n_paths: usize,
    pub steps_per_year: usize,
    #[serde(default = "yes")]
    pub antithetic: bool,
    #[serde(default)]
    pub path_mode: PathMode,
    #[serde(default)]
    pub binned: BinnedOptions,
    /// Paths per date of the vanilla repricing check.
    #[serde(default = "default_reprice_paths")]
    pub reprice_paths: usize,
}

fn default_reprice_paths() -> usize {
    50_000
}

impl HybridConfig {
    pub fn options(&self) -> HybridOptions {
        HybridOptions {
            path_mode: self.path_mode,
            binned: self.binned.clone(),
        }
    }
}

/// An input file with its content and digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
    pub content: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything a command needs, independent of where it was loaded from.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub config: RunConfig,
    pub config_text: String,
    pub files: BTreeMap<String, InputFile>,
    pub seed: u64,
    pub engine: Option<Engine>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn embed(path: &Path) -> Result<InputFile> {
    let content = read_text(path)?;
    Ok(InputFile {
        path: path.display().to_string(),
        sha256: sha256_hex(content.as_bytes()),
        content,
    })
}

fn parse_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| config(format!("{}: {e}", origin.display())))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(config(format!(
            "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
            origin.display(),
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

impl Inputs {
    /// Loads a TOML config and the files it references, or replays the
    /// inputs embedded in a manifest. `seed` overrides the stored seed.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            return Self::from_manifest(path, seed);
        }
        let text = read_text(path)?;
        let cfg = parse_config(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut files = BTreeMap::new();
        files.insert("domestic_curve".to_string(), embed(&resolve(&cfg.market.domestic_curve))?);
        files.insert("foreign_curve".to_string(), embed(&resolve(&cfg.market.foreign_curve))?);
        files.insert("surface".to_string(), embed(&resolve(&cfg.market.surface))?);
        if let Some(stem) = cfg.hybrid.as_ref().and_then(|h| h.loc1.as_ref()) {
            let stem = resolve(stem);
            files.insert("loc1_csv".to_string(), embed(&stem.with_extension("csv"))?);
            files.insert("loc1_json".to_string(), embed(&stem.with_extension("json"))?);
        }
        let seed = seed.or(cfg.seed).unwrap_or(0);
        Ok(Self {
            engine: cfg.engine,
            config: cfg,
            config_text: text,
            files,
            seed,
        })
    }

    fn from_manifest(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = read_text(path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| config(format!("{}: not a run manifest: {e}", path.display())))?;
        let cfg = parse_config(&manifest.config, path)?;
        for (role, file) in &manifest.inputs {
            if sha256_hex(file.content.as_bytes()) != file.sha256 {
                return Err(config(format!("{}: embedded input `{role}` fails its checksum", path.display())));
            }
        }
        Ok(Self {
            engine: manifest.engine.or(cfg.engine),
            config: cfg,
            config_text: manifest.config,
            files: manifest.inputs,
            seed: seed.or(manifest.seed).unwrap_or(0),
        })
    }

    fn file(&self, role: &str) -> Result<&InputFile> {
        self.files
            .get(role)
            .ok_or_else(|| config(format!("input `{role}` is missing")))
    }

    pub fn curve(&self, role: &str) -> Result<YieldCurve> {
        let f = self.file(role)?;
        Ok(io::parse_curve_csv(f.content.as_bytes(), &f.path)?)
    }

    pub fn market(&self) -> Result<CallPriceSurface> {
        let f = self.file("surface")?;
        let iv = io::parse_surface_csv(f.content.as_bytes(), &f.path, self.config.market.spot)?;
        Ok(CallPriceSurface::from_implied(iv, self.curve("domestic_curve")?, self.curve("foreign_curve")?))
    }

    fn hull_white(&self, ccy: Currency, cfg: &HullWhiteConfig, curve: YieldCurve) -> Result<HullWhite> {
        let name = match ccy {
            Currency::Domestic => "domestic",
            Currency::Foreign => "foreign",
        };
        let sigma = PiecewiseConstant::parse(&cfg.sigma).map_err(|e| config(format!("rates.{name}.sigma: {e}")))?;
        let hw = HullWhite::fitted(cfg.alpha, sigma, ccy, curve).map_err(|e| config(format!("rates.{name}: {e}")))?;
        if let Some(r0) = cfg.r0 {
            let implied = hw.phi(0.0);
            if (r0 - implied).abs() > 1e-8 {
                return Err(config(format!(
                    "rates.{name}.r0 = {r0} differs from the curve's initial short rate {implied}"
                )));
            }
        }
        Ok(hw)
    }

    /// Three-factor model with a flat placeholder local vol at the
    /// first-date at-the-money level.
    pub fn model(&self, market: &CallPriceSurface) -> Result<ThreeFactorModel> {
        let rates = &self.config.rates;
        let d = self.hull_white(Currency::Domestic, &rates.domestic, self.curve("domestic_curve")?)?;
        let f = self.hull_white(Currency::Foreign, &rates.foreign, self.curve("foreign_curve")?)?;
        let t0 = self.grid()?.times[0];
        let atm = market.implied().map_or(Ok(0.2), |iv| iv.vol(market.forward(t0), t0))?;
        let lv = LocalVolGrid::flat(atm)?;
        ThreeFactorModel::new(self.config.market.spot, d, f, self.config.correlation, lv)
            .map_err(|e| config(format!("model: {e}")))
    }

    pub fn grid(&self) -> Result<CalibrationGrid> {
        let g = &self.config.grid;
        CalibrationGrid::new(g.times.clone(), g.strikes.clone()).map_err(|e| config(format!("grid: {e}")))
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.config.out.clone())
            .ok_or_else(|| config("no output directory: pass --out or set `out` in the config"))
    }

    pub fn engine(&self, flag: Option<Engine>) -> Result<Engine> {
        flag.or(self.engine)
            .ok_or_else(|| config("no engine selected: pass --engine or set `engine` in the config"))
    }

    pub fn mc(&self) -> Result<(SimSpec, McCalibrationOptions)> {
        let mc = self.config.mc.as_ref().ok_or_else(|| config("engine `mc` needs an [mc] section"))?;
        let spec = mc.sim_spec(self.seed);
        spec.validate().map_err(|e| config(format!("[mc]: {e}")))?;
        let options = McCalibrationOptions {
            path_mode: mc.path_mode,
            min_tail_paths: mc.min_tail_paths,
            min_density_ratio: self.config.grid.min_density_ratio,
        };
        Ok((spec, options))
    }

    pub fn pde(&self) -> Result<PdeSpec> {
        let spec = self.config.pde.clone().ok_or_else(|| config("engine `pde` needs a [pde] section"))?;
        spec.validate().map_err(|e| config(format!("[pde]: {e}")))?;
        Ok(spec)
    }

    pub fn hybrid(&self) -> Result<&HybridConfig> {
        self.config
            .hybrid
            .as_ref()
            .ok_or_else(|| config("the hybrid command needs a [hybrid] section"))
    }

    /// The supplied pure local-vol grid, if the config names one.
    pub fn loc1(&self) -> Result<Option<(LocalVolGrid, String)>> {
        let (Ok(csv), Ok(json)) = (self.file("loc1_csv"), self.file("loc1_json")) else {
            return Ok(None);
        };
        let meta: io::GridMetadata =
            serde_json::from_str(&json.content).map_err(|e| config(format!("{}: {e}", json.path)))?;
        let grid = io::parse_grid_csv(csv.content.as_bytes(), &csv.path, meta.time_interp)?;
        Ok(Some((grid, csv.sha256.clone())))
    }

    /// Digest of the effective configuration and all input digests.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_text.as_bytes());
        h.update(self.seed.to_le_bytes());
        for (role, file) in &self.files {
            h.update(role.as_bytes());
            h.update(file.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Seed of an independent stream derived from the run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

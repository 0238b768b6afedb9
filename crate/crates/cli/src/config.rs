use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use spinpim_core::{CellVariant, CompileOptions, GateSet, LayoutOptions, MtjSpec, NetworkSpec, PeripheralModel, PipelineConfig, TileConfig, Weights, WeightsError};

use crate::Failure;

/// Everything a run depends on. Serialized into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name or path to a network TOML file.
    pub network: String,
    /// Built-in device name or path to a device TOML file.
    pub spec: String,
    pub tile: usize,
    pub variant: CellVariant,
    pub peripheral: bool,
    /// Peripheral constants overriding the shipped ones for the device.
    pub peripheral_file: Option<PathBuf>,
    /// Series access resistance in ohms.
    pub parasitic: f64,
    pub gate_set: GateSet,
    pub g: Option<usize>,
    pub sigma: usize,
    /// Per-layer group size, keyed by layer name.
    pub layer_g: BTreeMap<String, usize>,
    /// Per-layer wave count, keyed by layer name.
    pub layer_sigma: BTreeMap<String, usize>,
    pub pipeline: Option<PathBuf>,
    pub budget: Option<f64>,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    /// Items streamed through the pipeline.
    pub inputs: usize,
    pub estimate: bool,
    pub overlap: bool,
    pub threads: Option<usize>,
    pub out: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: "finn-fc".into(),
            spec: "future".into(),
            tile: 1024,
            variant: CellVariant::OneTTransposed,
            peripheral: false,
            peripheral_file: None,
            parasitic: 0.0,
            gate_set: GateSet::NandNotCopy,
            g: None,
            sigma: 1,
            layer_g: BTreeMap::new(),
            layer_sigma: BTreeMap::new(),
            pipeline: None,
            budget: None,
            weights: None,
            seed: 42,
            inputs: 1,
            estimate: false,
            overlap: false,
            threads: None,
            out: Vec::new(),
        }
    }
}

/// Same fields, all optional: the contents of a `--config` file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialRunConfig {
    network: Option<String>,
    spec: Option<String>,
    tile: Option<usize>,
    variant: Option<CellVariant>,
    peripheral: Option<bool>,
    peripheral_file: Option<PathBuf>,
    parasitic: Option<f64>,
    gate_set: Option<GateSet>,
    g: Option<usize>,
    sigma: Option<usize>,
    layer_g: Option<BTreeMap<String, usize>>,
    layer_sigma: Option<BTreeMap<String, usize>>,
    pipeline: Option<PathBuf>,
    budget: Option<f64>,
    weights: Option<PathBuf>,
    seed: Option<u64>,
    inputs: Option<usize>,
    estimate: Option<bool>,
    overlap: Option<bool>,
    threads: Option<usize>,
    out: Option<Vec<PathBuf>>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $(if let Some(v) = $src.$f { $dst.$f = v; })*
    };
}

macro_rules! overlay_opt {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $(if $src.$f.is_some() { $dst.$f = $src.$f; })*
    };
}

impl RunConfig {
    /// Applies a config file on top of flag values; the file wins.
    pub fn overlay_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = read_text(path)?;
        let p: PartialRunConfig = toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        overlay!(self, p, network, spec, tile, variant, peripheral, parasitic, gate_set, sigma, layer_g, layer_sigma, seed, inputs, estimate, overlap, out);
        overlay_opt!(self, p, peripheral_file, g, pipeline, budget, weights, threads);
        Ok(())
    }

    pub fn load_network(&self) -> Result<NetworkSpec, Failure> {
        load_network(&self.network)
    }

    pub fn device(&self) -> Result<MtjSpec, Failure> {
        load_device(&self.spec)
    }

    pub fn tile_config(&self) -> Result<TileConfig, Failure> {
        let mtj = self.device()?;
        let mut cfg = TileConfig::square(self.tile, self.variant, mtj);
        cfg.parasitic = self.parasitic;
        if self.peripheral {
            let model = match &self.peripheral_file {
                Some(p) => PeripheralModel::from_toml_str(&read_text(p)?),
                None => PeripheralModel::builtin(&self.spec),
            }
            .map_err(|e| Failure::Config(e.to_string()))?;
            cfg = cfg.with_peripheral(model);
        }
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn compile_options(&self, net: &NetworkSpec) -> Result<CompileOptions, Failure> {
        if self.sigma == 0 {
            return Err(Failure::Config("sigma must be at least 1".into()));
        }
        let index = |name: &String| {
            net.layers
                .iter()
                .position(|l| &l.name == name)
                .ok_or_else(|| Failure::Config(format!("no layer named `{name}` in `{}`", net.name)))
        };
        let mut g = BTreeMap::new();
        for (name, &v) in &self.layer_g {
            g.insert(index(name)?, v);
        }
        let mut sigma = BTreeMap::new();
        for (name, &v) in &self.layer_sigma {
            sigma.insert(index(name)?, v);
        }
        Ok(CompileOptions {
            defaults: LayoutOptions {
                g: self.g,
                sigma: self.sigma,
                gate_set: self.gate_set,
            },
            g,
            sigma,
        })
    }

    pub fn load_weights(&self, net: &NetworkSpec) -> Result<Arc<Weights>, Failure> {
        match &self.weights {
            Some(p) => Weights::load(net, p).map(Arc::new).map_err(weights_failure),
            None => Ok(Arc::new(Weights::seeded(net, self.seed))),
        }
    }

    pub fn input_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn estimate_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn pipeline_config(&self, net: &NetworkSpec) -> Result<Option<PipelineConfig>, Failure> {
        let mut cfg = match &self.pipeline {
            Some(p) => PipelineConfig::from_toml_str(&read_text(p)?).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
            None if self.budget.is_some() => PipelineConfig::for_network(net),
            None => return Ok(None),
        };
        if self.budget.is_some() {
            cfg.budget = self.budget;
        }
        cfg.validate(net.layers.len()).map_err(|e| Failure::Config(e.to_string()))?;
        Ok(Some(cfg))
    }
}

/// Blob integrity failures are verification failures; anything else about
/// the weights is a configuration problem.
pub fn weights_failure(e: WeightsError) -> Failure {
    match e {
        WeightsError::Checksum { .. } | WeightsError::Truncated { .. } => Failure::Verify(format!("weights: {e}")),
        _ => Failure::Config(format!("weights: {e}")),
    }
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn load_network(name: &str) -> Result<NetworkSpec, Failure> {
    if NetworkSpec::PRESETS.contains(&name.to_ascii_lowercase().replace('_', "-").as_str()) || name.eq_ignore_ascii_case("alexnet") {
        return NetworkSpec::preset(name).map_err(|e| Failure::Config(e.to_string()));
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(Failure::Config(format!(
            "`{name}` is neither a preset ({}) nor a network file",
            NetworkSpec::PRESETS.join(", ")
        )));
    }
    NetworkSpec::from_toml_str(&read_text(path)?).map_err(|e| Failure::Config(format!("{name}: {e}")))
}

pub fn load_device(name: &str) -> Result<MtjSpec, Failure> {
    match MtjSpec::builtin(name) {
        Ok(s) => Ok(s),
        Err(_) if Path::new(name).exists() => MtjSpec::from_toml_str(&read_text(Path::new(name))?).map_err(|e| Failure::Config(format!("{name}: {e}"))),
        Err(e) => Err(Failure::Config(format!("{e} (expected modern, future, future-printed or a device file)"))),
    }
}

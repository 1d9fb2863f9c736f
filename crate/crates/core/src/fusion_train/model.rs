use discover_autograd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMethod;
use crate::ensemble::{Ensemble, EnsembleConfig};
use crate::error::Result;
use crate::projector::{Projector, ProjectorConfig, IN_CHANNELS, OUT_CHANNELS};
use crate::synthgen::stream_rng;

pub const PROJECTOR_PREFIX: &str = "proj";
pub const C1_PREFIX: &str = "c1";
pub const C2_PREFIX: &str = "c2";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub projector: ProjectorConfig,
    pub c1: EnsembleConfig,
    pub c2: EnsembleConfig,
    pub attribution: AttributionMethod,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        self.c1.validate()?;
        self.c2.validate()
    }
}

/// Projection network plus both classifier ensembles, sharing one
/// parameter store. C1 sees summary images, C2 sees B-scans; no parameter
/// is shared between them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub projector: Projector,
    pub c1: Ensemble,
    pub c2: Ensemble,
    pub init_seed: u64,
}

impl Model {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(init_seed, "init");
        let mut store = ParamStore::new();
        let projector = Projector::new(config.projector, &mut store, PROJECTOR_PREFIX, &mut rng)?;
        let c1 = Ensemble::new(config.c1.clone(), OUT_CHANNELS, &mut store, C1_PREFIX, &mut rng)?;
        let c2 = Ensemble::new(config.c2.clone(), IN_CHANNELS, &mut store, C2_PREFIX, &mut rng)?;
        Ok(Model {
            config,
            store,
            projector,
            c1,
            c2,
            init_seed,
        })
    }
}

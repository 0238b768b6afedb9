//! Simulator for a spintronic processing-in-memory accelerator running
//! binarized neural networks.
//!
//! The electrical, array and cost models are generic over the scalar type
//! (`f32` or `f64`); the aliases below fix it to `f64`.

pub mod array;
pub mod bits;
pub mod device;
pub mod gate;
pub mod kernels;
pub mod layout;
pub mod network;
pub mod num;
pub mod pipeline;
pub mod reference;
pub mod report;
pub mod sim;

pub use array::{ArrayError, CellVariant, ColumnSet, GateEval, MicroOp, WriteData};
pub use bits::Mask;
pub use device::{DeviceError, MtjState};
pub use gate::GateKind;
pub use kernels::{GateSet, KernelBuilder, KernelTrace};
pub use layout::{CompileOptions, Geometry, LayerPlan, LayoutError, LayoutOptions, NetworkPlan};
pub use network::{LayerSpec, NetworkError, NetworkSpec};
pub use num::Scalar;
pub use pipeline::{PipelineConfig, PipelineError, StageSpec};
pub use reference::{Weights, WeightsError};
pub use report::{Grid, References, ReportError, ReportFormat};
pub use sim::{PhaseKind, SimError, SimOptions};

pub type MtjSpec = device::MtjSpec<f64>;
pub type VoltageWindow = gate::VoltageWindow<f64>;
pub type GateWindow = gate::GateWindow<f64>;
pub type GateElectrics = gate::GateElectrics<f64>;
pub type ResistiveNetwork = gate::ResistiveNetwork<f64>;
pub type PeripheralModel = array::PeripheralModel<f64>;
pub type TileConfig = array::TileConfig<f64>;
pub type TileContext = array::TileContext<f64>;
pub type Tile = array::Tile<f64>;
pub type Cost = array::Cost<f64>;
pub type StepCost = array::StepCost<f64>;
pub type PhaseCost = sim::PhaseCost<f64>;
pub type CostReport = sim::CostReport<f64>;
pub type Simulator = sim::Simulator<f64>;
pub type StageCost = pipeline::StageCost<f64>;
pub type BudgetSearch = pipeline::BudgetSearch<f64>;
pub type BudgetStep = pipeline::BudgetStep<f64>;

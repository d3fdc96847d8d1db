//! Stochastic reaction networks: Gillespie SSA, chemical Langevin
//! integration, BoolODE circuits, and snapshot datasets.

pub mod boolean;
pub mod circuits;
pub mod cle;
pub mod dataset;
pub mod gillespie;
pub mod network;

pub use circuits::{build_cyclic_linear, build_hsc, build_mcad, build_toggle_switch, BoolOdeParams};
pub use cle::{cle_simulate, sde_path, sde_simulate, ChemicalLangevin, DiffusionProcess, SdeBatch, SdeOptions};
pub use dataset::{ou_dataset, DatasetMeta, sample_snapshots, InitialCondition, Simulator, SnapshotDataset, SnapshotPlan, SpaceTag};
pub use gillespie::{gillespie_at_times, gillespie_simulate, Trajectory};
pub use network::{boolode_activation, load_network_json, NetworkDescription, Propensity, Reaction, ReactionNetwork, RegulatoryGene};

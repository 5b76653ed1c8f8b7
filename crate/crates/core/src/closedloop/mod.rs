//! Receding-horizon closed-loop simulation.

mod coldbox;
mod plant;
mod scenario;
mod sim;
mod trace;

pub use coldbox::{build_coldbox_2ss, build_coldbox_4ss, COLDBOX_2SS, COLDBOX_4SS};
pub use plant::{operating_point, step_plant, Interconnection, PlantStep};
pub use scenario::{Scenario, Schedule};
pub use sim::{run_decentralized, run_hierarchical};
pub use trace::{
    closed_loop_cost, is_walltime_column, median, stage_costs, ClosedLoopTrace, Comparison,
    CsvTrace, PerformanceReport, SubsystemCost, TraceRow,
};

//! Hardware-aware compression planning: layer compute cost, the platform
//! break-even pruning ratio, and the alpha search with layer restoration.

mod cost;
mod plan;
mod profile;

pub use cost::{cost_report, layer_macs, model_cost_report, model_costs, CostReport, CostRow, LayerCost, LayerUsage};
pub use plan::{
    alpha_at, plan_compression, plan_layers, propose_reductions, search_step, AccuracyConstraint,
    AccuracyProbe, CompressionPlan, PlanLayer, PlanOutcome, PlanRound, PlannerConfig, PlannerLayer,
    PLAN_SCHEMA_VERSION,
};
pub use profile::{break_even_ratio, PlatformProfile};

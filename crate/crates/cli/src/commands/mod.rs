pub mod evaluate;
pub mod gsea_context;
pub mod predict;
pub mod prepare;

pub use evaluate::{cmd_evaluate, EvaluateSummary};
pub use gsea_context::{cmd_gsea_context, GseaContextSummary};
pub use predict::{cmd_predict, method_name, PredictSummary};
pub use prepare::{cmd_prepare, PrepareSummary};

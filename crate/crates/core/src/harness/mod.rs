//! Study matrix orchestration: planning, execution, ledger and reports.

pub mod ledger;
pub mod pools;
pub mod report;
pub mod run;
pub mod spec;

pub use ledger::{load_records, read_latest, state_counts, Ledger, LedgerEntry, RunState, LEDGER_FILE};
pub use pools::{file_digest, prepare_generators, prepare_pool, synthesize_items, write_pool, DiffusionPair, Generators, Pool};
pub use report::{emit_report, summarize, BoxStats, Comparison, ConditionSummary, ReportBundle, ReportSummary};
pub use run::{Harness, MatrixOutcome, RunFailure, RunRecord, TrainSize};
pub use spec::{plan_runs, run_seed, Condition, ExperimentSpec, GeneratorSource, RunDescriptor};

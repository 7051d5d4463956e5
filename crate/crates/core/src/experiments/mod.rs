//! Sweeps over the number of training environments, theory-check batteries and plots.

mod checks;
mod config;
mod plot;
mod sweep;

pub use checks::{
    erm_instance, run_checks, CheckConfig, CheckReport, ErmBattery, ErmReport, FaultInjection, IrmBattery, IrmReport, ShrinkBattery,
    ShrinkReport,
};
pub use config::{Mixing, Mode, SweepConfig};
pub use plot::{aggregate, emit_plot, Plot, PlotPoint, PlotStyle, Series};
pub use rayon::ThreadPool;
pub use sweep::{cell_seed, thread_pool, run_sweep, CellError, SweepResult, SweepRow, CSV_HEADER};

//! Command implementations behind the `diffmatch` binary.

pub mod args;
pub mod commands;
pub mod render;
pub mod session;

use args::{Cli, Command, VisualizeCommand};

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Optimize(a) => commands::cmd_optimize(&a),
        Command::Match(a) => commands::cmd_match(&a),
        Command::Evaluate(a) => commands::cmd_evaluate(&a),
        Command::Sweep(a) => commands::cmd_sweep(&a),
        Command::Visualize(v) => match v {
            VisualizeCommand::Heatmap(a) => commands::cmd_visualize_heatmap(&a),
            VisualizeCommand::Panels(a) => commands::cmd_visualize_panels(&a),
            VisualizeCommand::Lines(a) => commands::cmd_visualize_lines(&a),
        },
        Command::Manifest(a) => commands::cmd_manifest(&a),
    }
}

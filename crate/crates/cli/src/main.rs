use clap::Parser;
use drl_cli::args::{Cli, Command};
use drl_cli::commands::{cmd_ablate, cmd_depth_sweep, cmd_gradcheck, cmd_group_compare, cmd_train};
use drl_cli::CliResult;

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common } => {
            let m = cmd_train(&common)?;
            if let Some(eval) = &m.eval {
                println!(
                    "query_accuracy={} class_separation={}",
                    eval.query_accuracy,
                    eval.class_separation.map_or("n/a".into(), |s| s.to_string())
                );
            }
            println!("wrote {}", common.out.join("manifest.json").display());
        }
        Command::Ablate { common, axis } => {
            cmd_ablate(&common, axis)?;
            println!("wrote {}", common.out.join(format!("ablate_{}.csv", axis.as_str())).display());
        }
        Command::DepthSweep { common, depths } => {
            cmd_depth_sweep(&common, &depths)?;
            println!("wrote {}", common.out.join("depth_sweep.csv").display());
        }
        Command::GroupCompare {
            common,
            shot_list,
            iterations,
        } => {
            cmd_group_compare(&common, &shot_list, iterations)?;
            println!("wrote {}", common.out.join("group_compare.csv").display());
        }
        Command::Gradcheck { out } => {
            cmd_gradcheck(&out)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;
use serde_json::json;
use vegecast_cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = json!({ "error": { "kind": "usage", "message": e.to_string().trim(), "details": [] } });
            eprintln!("{err}");
            std::process::exit(2);
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(summary) => println!("{}", json!({ "status": "ok", "command": name, "result": summary })),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}

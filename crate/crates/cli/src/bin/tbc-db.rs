use botforge_cli::tbc_db::{run, Env};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let code = run(&args, &Env::from_process(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}

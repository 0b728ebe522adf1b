use clap::Parser;

fn main() {
    let cli = blowfish_rtp_cli::Cli::parse();
    std::process::exit(blowfish_rtp_cli::run(cli));
}

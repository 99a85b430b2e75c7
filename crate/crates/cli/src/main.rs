fn main() {
    eprintln!("ph-lab: command dispatch not wired up yet");
    std::process::exit(2);
}

//! CLI scaffolding (subcommands land here).
pub fn run() -> i32 {
    0
}

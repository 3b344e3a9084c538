//! Write a toy workspace (frames, records, prompts, config) for the demo
//! pipeline. Usage: `cargo run -p mmtok-cli --example gen_toy_data -- DIR`.

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "toy".to_string());
    let ws = mmtok_cli::toydata::write_toy_workspace(std::path::Path::new(&dir))?;
    println!("toy workspace at {}", ws.root.display());
    println!("config: {}", ws.config_path.display());
    Ok(())
}

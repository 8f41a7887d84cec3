//! Regenerates the bundled toy corpus: `cargo run -p tdc-core --example make_toy -- data/toy`

use tdc_core::toy::{generate_toy, TOY_SEED};

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/toy".into());
    generate_toy(TOY_SEED).write_to(&dir)?;
    println!("wrote toy corpus to {dir}");
    Ok(())
}

//! Prints the per-layer parameter table of the default model.

use pcqa::network::{param_count, param_table, ModelConfig};

fn main() {
    let config = ModelConfig::default();
    for (layer, n) in param_table(&config) {
        println!("{layer:<32} {n:>9}");
    }
    println!("{:<32} {:>9}", "total", param_count(&config));
}

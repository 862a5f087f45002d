//! Regenerates the example configs shipped in configs/.

use bighype::oracles;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "configs".to_string());
    std::fs::create_dir_all(&dir).unwrap();
    let ex1 = oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)]);
    std::fs::write(format!("{dir}/ex1.json"), ex1.to_json()).unwrap();
    println!("wrote {dir}/ex1.json");
}

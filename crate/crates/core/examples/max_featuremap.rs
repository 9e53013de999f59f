//! Activation bitwidths that cap every feature map of the toy ResNet at the
//! size of its largest map under uniform 4-bit activations.

use quantbench::mpq::{featuremap_layers, max_featuremap_allocation, uniform_max_featuremap_bytes};
use quantbench::network::build_toy_resnet;

fn main() -> quantbench::Result<()> {
    let bits: u32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let model = build_toy_resnet(8, 2, 4)?;
    let layers = featuremap_layers(&model)?;
    let cap = uniform_max_featuremap_bytes(&layers, bits);
    println!("cap {cap} bytes per sample (uniform {bits}-bit)");
    let alloc = max_featuremap_allocation(&layers, cap)?;
    for (name, elements) in &layers {
        let b = alloc[name];
        println!("  {name:<16} {elements:>5} elements  {b:>2} bits  {:>4} bytes", (elements * b as usize).div_ceil(8));
    }
    Ok(())
}

//! Write and read back an RTS container and inspect its JSON header.
//!
//! `cargo run --release --example raster_io`

use sardist::raster::{decode_rts, encode_rts, read_rts, write_rts};
use sardist::synth::{generate, SynthConfig};

fn main() -> sardist::Result<()> {
    let (stack, _) = generate(&SynthConfig { height: 8, width: 12, seed: 5, ..SynthConfig::default() })?;
    let path = std::env::temp_dir().join("sardist_example.rts");
    write_rts(&stack, &path)?;
    let back = read_rts(&path)?;
    assert_eq!(back, stack);
    let bytes = std::fs::read(&path)?;
    let (header, _) = decode_rts(&bytes)?;
    println!("{} bytes, shape {:?}, first date {}", bytes.len(), header.shape, header.timestamps[0]);
    assert_eq!(encode_rts(&header, back.data().view())?, bytes);
    std::fs::remove_file(&path)?;
    Ok(())
}

//! Writes and reads RVF volumes and SSCK checkpoints, then shows the errors
//! produced by damaged files.
//!
//! `cargo run --release --example file_formats -- [dir]`
use shapesig::nets::{decode_checkpoint, encode_checkpoint, save_checkpoint, load_checkpoint, Network, SegNet, SegNetConfig, ShapeLearner};
use shapesig::rvf::{read_labels, read_volume, write_labels, write_volume, RvfData};
use shapesig::synth::generate_dataset;

fn main() -> shapesig::Result<()> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/example_formats".into()));
    std::fs::create_dir_all(&dir)?;
    let ds = generate_dataset(4, [32; 3], 7, 0.5)?;
    let case = &ds.cases[0];
    write_volume(dir.join("image.rvf"), &case.image)?;
    write_labels(dir.join("label.rvf"), &case.label)?;
    println!("image round trip exact: {}", read_volume(dir.join("image.rvf"))? == case.image);
    println!("label round trip exact: {}", read_labels(dir.join("label.rvf"))? == case.label);

    let bytes = RvfData::Labels(case.label.clone()).to_bytes();
    println!("truncated rvf: {}", RvfData::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("bad magic: {}", RvfData::from_bytes(&bad).unwrap_err());

    let net = SegNet::new(SegNetConfig::default(), 1)?;
    save_checkpoint(&net, dir.join("seg.ssck"))?;
    let back: SegNet = load_checkpoint(dir.join("seg.ssck"))?;
    println!("checkpoint round trip exact: {} ({} tensors)", back == net, net.params().len());
    let enc = encode_checkpoint(&net);
    println!("truncated checkpoint: {}", decode_checkpoint::<SegNet>(&enc[..enc.len() / 2]).unwrap_err());
    println!("wrong network type: {}", decode_checkpoint::<ShapeLearner>(&enc).unwrap_err());
    Ok(())
}

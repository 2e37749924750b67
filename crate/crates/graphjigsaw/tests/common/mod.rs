#![allow(dead_code)]

use std::path::Path;

use graphjigsaw::config::Config;
use graphjigsaw::synthetic::generate_synthetic;

pub fn tiny_overrides(root: &Path) -> Vec<(String, String)> {
    [
        ("data.root", format!("\"{}\"", root.display())),
        ("data.min_images", "1".into()),
        ("data.split", "0.25".into()),
        ("model.widths", "[4, 8, 8, 8]".into()),
        ("model.blocks_per_stage", "1".into()),
        ("model.input_resolution", "64".into()),
        ("train.epochs", "2".into()),
        ("train.batch_size", "4".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn tiny_config(root: &Path, extra: &[(&str, &str)]) -> Config {
    let mut o = tiny_overrides(root);
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    Config::load(None, &o).expect("valid config")
}

pub fn synthetic(dir: &Path, classes: usize, per_class: usize) {
    generate_synthetic(dir, classes, per_class, 64, 11).expect("synthetic dataset");
}

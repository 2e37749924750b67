use std::path::Path;

use graphjigsaw::data::{augment_eval, augment_train, load_image, scan_dataset, DecodedImage, Split, NORMALIZE_MEAN, NORMALIZE_STD};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_png(path: &Path, color: [u8; 3], side: u32) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(side, side, Rgb(color)).save(path).unwrap();
}

fn two_identities(root: &Path) {
    for i in 0..3 {
        write_png(&root.join(format!("a/{i}.png")), [10, 20, 30], 8);
    }
    for i in 0..2 {
        write_png(&root.join(format!("b/{i}.png")), [200, 100, 0], 8);
    }
}

#[test]
fn scan_counts_and_filter() {
    let dir = tempfile::tempdir().unwrap();
    two_identities(dir.path());
    let m = scan_dataset(dir.path(), 1, Split::Train).unwrap();
    assert_eq!(m.samples.len(), 5);
    assert_eq!(m.num_classes(), 2);
    assert_eq!(m.identities, vec!["a", "b"]);
    let only_a = scan_dataset(dir.path(), 3, Split::Train).unwrap();
    assert_eq!(only_a.identities, vec!["a"]);
    assert_eq!(only_a.samples.len(), 3);
    assert_eq!(only_a.filtered, vec!["b"]);
}

#[test]
fn rescan_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    two_identities(dir.path());
    let csv = |name: &str| {
        let p = dir.path().join(name);
        scan_dataset(dir.path(), 1, Split::Train).unwrap().write_csv(&p).unwrap();
        std::fs::read(p).unwrap()
    };
    let first = csv("m1.csv");
    assert_eq!(first, csv("m2.csv"));
    assert!(String::from_utf8(first).unwrap().starts_with("path,identity,split\n"));
}

#[test]
fn unreadable_files_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    two_identities(dir.path());
    std::fs::write(dir.path().join("a/broken.png"), b"not an image").unwrap();
    std::fs::write(dir.path().join("a/notes.txt"), b"ignored").unwrap();
    let m = scan_dataset(dir.path(), 1, Split::Train).unwrap();
    assert_eq!(m.samples.len(), 5);
    assert_eq!(m.unreadable.len(), 1);
}

#[test]
fn empty_root_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = scan_dataset(dir.path(), 1, Split::Train).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn holdout_keeps_a_training_image() {
    let dir = tempfile::tempdir().unwrap();
    two_identities(dir.path());
    let m = scan_dataset(dir.path(), 1, Split::Train).unwrap().with_holdout(0.5);
    let val: Vec<_> = m.of_split(Split::Validation).iter().map(|s| s.path.clone()).collect();
    assert_eq!(val, vec![Path::new("a/1.png"), Path::new("a/2.png"), Path::new("b/1.png")]);
    assert_eq!(m.of_split(Split::Train).len(), 2);
}

#[test]
fn eval_on_constant_image_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.png");
    write_png(&p, [51, 102, 255], 40);
    let img = load_image(&p, 73).unwrap();
    let x = augment_eval(&img, 64);
    assert_eq!(x.len(), 3 * 64 * 64);
    for (c, v) in [51.0, 102.0, 255.0].iter().enumerate() {
        let want = (v / 255.0 - NORMALIZE_MEAN) / NORMALIZE_STD;
        assert!(x[c * 4096..(c + 1) * 4096].iter().all(|&a| (a - want).abs() < 1e-12));
    }
}

fn gradient_image(side: usize) -> DecodedImage {
    let plane = side * side;
    let pixels = (0..3 * plane).map(|i| ((i % plane) % side * 255 / side) as u8).collect();
    DecodedImage { side, pixels }
}

#[test]
fn train_augmentation_replays_and_has_fixed_shape() {
    let img = gradient_image(256);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| augment_train(&img, 224, &mut rng)).collect::<Vec<_>>()
    };
    let a = run(5);
    assert!(a.iter().all(|x| x.len() == 3 * 224 * 224));
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
    let first_columns: std::collections::BTreeSet<u64> = a.iter().map(|x| x[0].to_bits()).collect();
    assert!(first_columns.len() > 1);
}

#[test]
fn flip_mirrors_rows() {
    let img = gradient_image(8);
    let mut seen = [false, false];
    for seed in 0..64 {
        let x = augment_train(&img, 8, &mut ChaCha8Rng::seed_from_u64(seed));
        let flipped = x[0] > x[7];
        seen[flipped as usize] = true;
        let row: Vec<f64> = if flipped { x[..8].iter().rev().copied().collect() } else { x[..8].to_vec() };
        assert_eq!(row, augment_eval(&img, 8)[..8].to_vec());
    }
    assert_eq!(seen, [true, true]);
}

use std::fs;
use std::path::Path;

use codistill::data::{load_cifar_bin, read_cifar_bin, read_idx, write_idx, CIFAR_RECORD_LEN};
use codistill::rng::{stream, Stream};
use codistill::Error;
use rand::Rng;

fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = stream(Stream::Data, seed, 77);
    (0..n).map(|_| rng.random()).collect()
}

fn write_mnist_like(dir: &Path, n: usize) -> (Vec<u8>, Vec<u8>) {
    let pixels = random_bytes(n * 28 * 28, 1);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    write_idx(dir.join("img"), dir.join("lbl"), n, 28, 28, &pixels, &labels).unwrap();
    (pixels, labels)
}

fn assert_format_error(result: codistill::Result<codistill::Dataset>) {
    match result {
        Err(e @ Error::Format { .. }) => assert_eq!(e.exit_code(), 3),
        Err(other) => panic!("expected a format error, got {other}"),
        Ok(ds) => panic!("malformed file produced a dataset of {} samples", ds.len()),
    }
}

#[test]
fn idx_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (pixels, labels) = write_mnist_like(dir.path(), 17);
    let ds = read_idx(dir.path().join("img"), dir.path().join("lbl")).unwrap();
    assert_eq!(ds.inputs.shape(), &[17, 1, 28, 28]);
    assert_eq!(ds.num_classes, 10);
    let back: Vec<u8> = ds.inputs.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    assert_eq!(back, pixels);
    assert_eq!(ds.classes, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());

    write_idx(dir.path().join("img2"), dir.path().join("lbl2"), 17, 28, 28, &back, &labels).unwrap();
    assert_eq!(fs::read(dir.path().join("img")).unwrap(), fs::read(dir.path().join("img2")).unwrap());
    assert_eq!(fs::read(dir.path().join("lbl")).unwrap(), fs::read(dir.path().join("lbl2")).unwrap());
}

#[test]
fn idx_header_is_big_endian() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist_like(dir.path(), 3);
    let img = fs::read(dir.path().join("img")).unwrap();
    assert_eq!(&img[..4], &[0, 0, 8, 3]);
    assert_eq!(&img[4..8], &[0, 0, 0, 3]);
    assert_eq!(&img[8..16], &[0, 0, 0, 28, 0, 0, 0, 28]);
}

#[test]
fn malformed_idx_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist_like(dir.path(), 4);
    let img = fs::read(dir.path().join("img")).unwrap();
    let lbl = fs::read(dir.path().join("lbl")).unwrap();
    let (ip, lp) = (dir.path().join("bad_img"), dir.path().join("bad_lbl"));

    // Truncated pixel data.
    fs::write(&ip, &img[..img.len() - 1]).unwrap();
    fs::write(&lp, &lbl).unwrap();
    assert_format_error(read_idx(&ip, &lp));

    // Truncated header.
    fs::write(&ip, &img[..10]).unwrap();
    assert_format_error(read_idx(&ip, &lp));

    // Wrong magic.
    let mut bad = img.clone();
    bad[3] = 0x01;
    fs::write(&ip, &bad).unwrap();
    assert_format_error(read_idx(&ip, &lp));

    // Label count disagrees with image count.
    fs::write(&ip, &img).unwrap();
    let mut bad = lbl.clone();
    bad[7] = 5;
    bad.push(0);
    fs::write(&lp, &bad).unwrap();
    assert_format_error(read_idx(&ip, &lp));

    // Trailing garbage.
    let mut bad = img.clone();
    bad.push(0);
    fs::write(&ip, &bad).unwrap();
    fs::write(&lp, &lbl).unwrap();
    assert_format_error(read_idx(&ip, &lp));
}

#[test]
fn cifar_records_parse_and_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = random_bytes(3 * CIFAR_RECORD_LEN, 2);
    for r in 0..3 {
        bytes[r * CIFAR_RECORD_LEN] = r as u8 * 4;
    }
    let path = dir.path().join("data_batch_1.bin");
    fs::write(&path, &bytes).unwrap();
    let raw = read_cifar_bin(&[&path]).unwrap();
    assert_eq!(raw.inputs.shape(), &[3, 3, 32, 32]);
    assert_eq!(raw.classes, vec![0, 4, 8]);
    assert_eq!(raw.inputs.data()[0], bytes[1] as f64 / 255.0);

    let norm = load_cifar_bin(&[&path]).unwrap();
    let plane = 32 * 32;
    for c in 0..3 {
        let mut sum = 0.0;
        for s in 0..3 {
            let start = s * 3 * plane + c * plane;
            sum += norm.inputs.data()[start..start + plane].iter().sum::<f64>();
        }
        assert!((sum / (3 * plane) as f64).abs() < 1e-6, "channel {c} mean {sum}");
    }
}

#[test]
fn malformed_cifar_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    let good = vec![1u8; 2 * CIFAR_RECORD_LEN];

    fs::write(&path, &good[..CIFAR_RECORD_LEN + 7]).unwrap();
    assert_format_error(read_cifar_bin(&[&path]));

    fs::write(&path, []).unwrap();
    assert_format_error(read_cifar_bin(&[&path]));

    let mut bad = good.clone();
    bad[CIFAR_RECORD_LEN] = 10;
    fs::write(&path, &bad).unwrap();
    assert_format_error(read_cifar_bin(&[&path]));

    // One bad file among good ones still yields no dataset.
    let ok = dir.path().join("ok.bin");
    fs::write(&ok, &good).unwrap();
    assert_format_error(read_cifar_bin(&[&ok, &path]));
}

use scae_core::data::{detect_dir, load_cifar_binary, parse_planar, DatasetKind, CIFAR10, CIFAR100};
use scae_core::report::{encode_pgm, encode_ppm};
use scae_core::{Checkpoint, Head, Network, NetworkSpec, NormStats, Rng, Tensor};

fn u32le(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn tensor_f32(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    u32le(out, name.len());
    out.extend(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        u32le(out, d);
    }
    out.push(0);
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

#[test]
fn checkpoint_bytes_follow_the_layout() {
    let spec = NetworkSpec::from_layer_counts(&[1], 1, [1, 3, 3], Head::None);
    let net = Network::new(spec.clone()).unwrap();
    let mut params = net.init_params::<f32>(&mut Rng::new(4), 0.5).unwrap();
    params.set("enc.1.conv.bias", Tensor::new(&[1], vec![0.25]).unwrap());
    let norm = NormStats { mean: vec![100.5], std: vec![40.0] };
    let ckpt = Checkpoint::new(spec.clone(), params.clone(), norm);

    let mut expected = b"SCAE".to_vec();
    u32le(&mut expected, 1);
    let text = spec.to_canonical_text();
    u32le(&mut expected, text.len());
    expected.extend(text.as_bytes());
    u32le(&mut expected, params.len() + 2);
    for (name, t) in params.iter() {
        tensor_f32(&mut expected, name, t.shape(), t.data());
    }
    tensor_f32(&mut expected, "norm.mean", &[1], &[100.5]);
    tensor_f32(&mut expected, "norm.std", &[1], &[40.0]);
    expected.push(0);

    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(bytes, expected);
    let back: Checkpoint = Checkpoint::from_bytes(&expected).unwrap();
    assert!(back.params.bit_eq(&params));
    assert_eq!(back.norm.mean, vec![100.5]);

    let mut trailing = expected.clone();
    trailing.push(0);
    assert!(Checkpoint::<f32>::from_bytes(&trailing).is_err());
}

#[test]
fn cifar10_records_decode_planar_bytes() {
    let mut bytes = Vec::new();
    for (label, flip) in [(7u8, false), (2u8, true)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| if flip { 255 - (i % 256) as u8 } else { (i % 256) as u8 }));
    }
    let ds = parse_planar(&bytes, &CIFAR10).unwrap();
    assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
    assert_eq!(ds.labels.as_deref(), Some(&[7, 2][..]));
    let at = |n: usize, c: usize, y: usize, x: usize| ds.images.data()[((n * 3 + c) * 32 + y) * 32 + x];
    assert_eq!(at(0, 0, 0, 1), 1.0);
    assert_eq!(at(0, 1, 0, 0), 0.0);
    assert_eq!(at(0, 2, 3, 5), ((2 * 1024 + 3 * 32 + 5) % 256) as f32);
    assert_eq!(at(1, 0, 0, 0), 255.0);
    assert!(parse_planar(&bytes[..3000], &CIFAR10).is_err());
}

#[test]
fn cifar100_uses_fine_label() {
    let mut bytes = vec![3u8, 42];
    bytes.extend(std::iter::repeat(9u8).take(3072));
    let ds = parse_planar(&bytes, &CIFAR100).unwrap();
    assert_eq!(ds.labels, Some(vec![42]));
    assert!(ds.images.data().iter().all(|&v| v == 9.0));
}

#[test]
fn ppm_bytes() {
    // Two pixels: (255, 0, 127.5) and (-3, 300, 10.4).
    let img = Tensor::new(&[3, 1, 2], vec![255.0, -3.0, 0.0, 300.0, 127.5, 10.4]).unwrap();
    let mut expected = b"P6\n2 1\n255\n".to_vec();
    expected.extend([255, 0, 128, 0, 255, 10]);
    assert_eq!(encode_ppm(&img).unwrap(), expected);

    let black = Tensor::zeros(&[3, 1, 1]).unwrap();
    assert_eq!(encode_ppm(&black).unwrap(), b"P6\n1 1\n255\n\0\0\0".to_vec());
}

#[test]
fn ppm_decodes_back() {
    let mut rng = Rng::new(1);
    let data: Vec<f32> = (0..3 * 4 * 5).map(|_| rng.below(256) as f32).collect();
    let img = Tensor::new(&[3, 4, 5], data).unwrap();
    let bytes = encode_ppm(&img).unwrap();
    let header = b"P6\n5 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let body = &bytes[header.len()..];
    for p in 0..20 {
        for c in 0..3 {
            assert_eq!(body[p * 3 + c] as f32, img.data()[c * 20 + p]);
        }
    }
}

#[test]
fn pgm_bytes() {
    assert_eq!(
        encode_pgm(&[0.0, 254.6, 1.49], 1, 3).unwrap(),
        b"P5\n3 1\n255\n\x00\xff\x01".to_vec()
    );
    assert!(encode_pgm(&[0.0; 3], 2, 2).is_err());
}

/// Reads the real CIFAR-10 binaries when `SCAE_CIFAR10_DIR` points at them.
#[test]
fn official_cifar10_files() {
    let Ok(dir) = std::env::var("SCAE_CIFAR10_DIR") else {
        return;
    };
    let (kind, train, test) = detect_dir(std::path::Path::new(&dir)).unwrap();
    assert_eq!(kind, DatasetKind::Cifar10);
    let train = load_cifar_binary(&train, kind.format()).unwrap();
    let test = load_cifar_binary(&test, kind.format()).unwrap();
    assert_eq!(train.images.shape(), &[50_000, 3, 32, 32]);
    assert_eq!(test.images.shape(), &[10_000, 3, 32, 32]);
    let mut counts = [0usize; 10];
    for &l in test.labels.as_ref().unwrap() {
        counts[l] += 1;
    }
    assert_eq!(counts, [1000; 10]);
}

use myoseg::nifti::{
    encode_label_map, encode_volume, parse, read_label_map, read_volume, write_label_map, write_volume, NiftiError,
};
use myoseg::volume::{DataType, Orientation};
use myoseg::{LabelMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_extents(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.gen_range(1..=9), rng.gen_range(1..=9), rng.gen_range(1..=9)]
}

fn random_orientation(rng: &mut ChaCha8Rng) -> Orientation {
    let mut o = [0u8; 76];
    rng.fill(&mut o[..]);
    Orientation(o)
}

fn random_volume(rng: &mut ChaCha8Rng) -> Volume {
    let ext = random_extents(rng);
    let n: usize = ext.iter().product();
    let dtype = [DataType::Uint8, DataType::Int16, DataType::Float32][rng.gen_range(0..3)];
    let data: Vec<f32> = (0..n)
        .map(|_| match dtype {
            DataType::Uint8 => rng.gen_range(0..=255) as f32,
            DataType::Int16 => rng.gen_range(-32768..=32767) as f32,
            // Arbitrary finite bit patterns, including subnormals.
            DataType::Float32 => loop {
                let v = f32::from_bits(rng.gen());
                if v.is_finite() {
                    break v;
                }
            },
        })
        .collect();
    let spacing = [rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0)];
    let mut v = Volume::new(ext, spacing, data).unwrap().with_dtype(dtype);
    v.orientation = random_orientation(rng);
    v
}

fn bits(v: &Volume) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn fuzzed_volumes_and_label_maps_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..100 {
        let v = random_volume(&mut rng);
        let path = dir.path().join(if i % 2 == 0 { "v.nii.gz" } else { "v.nii" });
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.extents(), v.extents());
        assert_eq!(back.spacing().map(f32::to_bits), v.spacing().map(f32::to_bits));
        assert_eq!(bits(&back), bits(&v));
        assert_eq!(back.dtype, v.dtype);
        assert_eq!(back.orientation, v.orientation);
        assert_eq!(encode_volume(&back).unwrap(), encode_volume(&v).unwrap());
    }
    for i in 0..100 {
        let ext = random_extents(&mut rng);
        let n: usize = ext.iter().product();
        let mut m = LabelMap::new(ext, [1.0, 1.5, 2.5], (0..n).map(|_| rng.gen_range(0..=4)).collect()).unwrap();
        m.orientation = random_orientation(&mut rng);
        let path = dir.path().join(if i % 2 == 0 { "m.nii.gz" } else { "m.nii" });
        write_label_map(&path, &m).unwrap();
        assert_eq!(read_label_map(&path).unwrap(), m);
    }
}

#[test]
fn gzip_is_chosen_by_extension_and_detected_by_magic() {
    let dir = tempfile::tempdir().unwrap();
    let m = LabelMap::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 3, 4, 0, 1, 2]).unwrap();
    let gz = dir.path().join("a.nii.gz");
    let raw = dir.path().join("a.nii");
    write_label_map(&gz, &m).unwrap();
    write_label_map(&raw, &m).unwrap();
    assert_eq!(&std::fs::read(&gz).unwrap()[..2], &[0x1f, 0x8b]);
    assert_eq!(std::fs::read(&raw).unwrap(), encode_label_map(&m).unwrap());
    // A gzip stream under a plain name still reads.
    let renamed = dir.path().join("b.nii");
    std::fs::copy(&gz, &renamed).unwrap();
    assert_eq!(read_label_map(&renamed).unwrap(), m);
}

#[test]
fn truncated_files_give_structured_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let v = random_volume(&mut rng);
        let bytes = encode_volume(&v).unwrap();
        let cut = rng.gen_range(0..bytes.len());
        match parse(&bytes[..cut]) {
            Err(NiftiError::Truncated { needed, available, .. }) => {
                assert_eq!(available, cut);
                assert!(needed > cut);
            }
            other => panic!("cut at {cut} of {}: {other:?}", bytes.len()),
        }
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_volume(std::path::Path::new("/nonexistent/x.nii")).unwrap_err();
    assert!(matches!(err, NiftiError::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/x.nii"));
}

#[test]
fn corrupted_gzip_is_reported() {
    let m = LabelMap::new([1, 1, 1], [1.0; 3], vec![1]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.nii.gz");
    write_label_map(&path, &m).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(parse(&bytes[..bytes.len() / 2]), Err(NiftiError::Gzip(_))));
}

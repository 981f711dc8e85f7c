use std::fs;
use std::path::Path;

use skipclip::numerics::{skt, Tensor};
use skipclip::rng;
use skipclip::sampling::SampleSpec;
use skipclip::videoio::{
    centroid, generate_synthetic_dataset, load_video, motion_of_class, read_manifest,
    render_video, save_video, write_manifest, Dataset, DatasetManifest, Split, SyntheticSpec,
    Video, SPRITE_FLOOR,
};
use skipclip::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_videos: 16,
        num_test_videos: 8,
        seed: 11,
        ..Default::default()
    }
}

fn min_frames() -> usize {
    SampleSpec::default().min_frames()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "test"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(split))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for n in names {
            out.push((format!("{split}/{n}"), fs::read(dir.join(split).join(&n)).unwrap()));
        }
        let m = format!("{split}.json");
        out.push((m.clone(), fs::read(dir.join(m)).unwrap()));
    }
    out
}

#[test]
fn generation_is_byte_identical_for_the_same_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let ma = generate_synthetic_dataset(&spec, min_frames(), a.path()).unwrap();
    let mb = generate_synthetic_dataset(&spec, min_frames(), b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(read_tree(a.path()), read_tree(b.path()));

    let other = SyntheticSpec { seed: 12, ..spec };
    let c = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&other, min_frames(), c.path()).unwrap();
    assert_ne!(read_tree(a.path()), read_tree(c.path()));
}

#[test]
fn centroid_moves_by_the_class_velocity() {
    let spec = SyntheticSpec::default();
    for index in 0..spec.num_motion_classes * 2 {
        let v = render_video(&spec, Split::Train, index).unwrap();
        let m = motion_of_class(&spec, v.motion_class.unwrap());
        let mut prev = centroid(&v.frame(0), SPRITE_FLOOR).unwrap();
        for f in 1..v.num_frames() {
            let cur = centroid(&v.frame(f), SPRITE_FLOOR).unwrap();
            let (dy, dx) = (cur.0 - prev.0, cur.1 - prev.1);
            assert!((dx - m.dx).abs() <= 0.5, "video {index} frame {f}: dx {dx} vs {}", m.dx);
            assert!((dy - m.dy).abs() <= 0.5, "video {index} frame {f}: dy {dy} vs {}", m.dy);
            prev = cur;
        }
    }
}

#[test]
fn reversed_video_negates_displacement() {
    let spec = SyntheticSpec::default();
    for index in [0, 5, 13] {
        let v = render_video(&spec, Split::Test, index).unwrap();
        let r = v.reversed();
        let n = v.num_frames();
        let start = centroid(&v.frame(0), SPRITE_FLOOR).unwrap();
        let end = centroid(&v.frame(n - 1), SPRITE_FLOOR).unwrap();
        let rstart = centroid(&r.frame(0), SPRITE_FLOOR).unwrap();
        let rend = centroid(&r.frame(n - 1), SPRITE_FLOOR).unwrap();
        assert_eq!(rend.0 - rstart.0, -(end.0 - start.0));
        assert_eq!(rend.1 - rstart.1, -(end.1 - start.1));
    }
}

#[test]
fn classes_are_exactly_balanced() {
    let spec = SyntheticSpec::default();
    assert_eq!((spec.num_videos, spec.num_motion_classes), (160, 16));
    let mut counts = vec![0; 16];
    for i in 0..spec.num_videos {
        counts[render_video(&spec, Split::Train, i).unwrap().motion_class.unwrap()] += 1;
    }
    assert_eq!(counts, vec![10; 16]);
}

#[test]
fn every_generated_video_admits_a_seek() {
    let spec = SyntheticSpec::default();
    let v = render_video(&spec, Split::Train, 3).unwrap();
    assert!(v.num_frames() >= min_frames());
    assert!(v.frames.data().iter().all(|&x| (0.0..=1.0).contains(&x)));

    let short = SyntheticSpec {
        frames_per_video: min_frames() - 1,
        ..spec
    };
    let msg = short.validate(min_frames()).unwrap_err().to_string();
    assert!(msg.contains(&min_frames().to_string()), "{msg}");
}

#[test]
fn video_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(3, "video", 0);
    let data = (0..5 * 2 * 4 * 3).map(|_| rand::Rng::gen::<f32>(&mut r)).collect();
    let v = Video::new(Tensor::new(vec![5, 2, 4, 3], data).unwrap(), "clip", None).unwrap();
    let path = dir.path().join("clip.skt");
    save_video(&v, &path).unwrap();
    let back = load_video(&path).unwrap();
    assert_eq!(back.frames, v.frames);
    assert_eq!(back.frames.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        v.frames.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = Video::new(Tensor::full(&[3, 1, 2, 2], 0.5), "v", None).unwrap();
    let good = dir.path().join("good.skt");
    save_video(&v, &good).unwrap();
    let bytes = fs::read(&good).unwrap();

    let truncated = dir.path().join("truncated.skt");
    fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_video(&truncated).unwrap_err();
    assert!(matches!(err, Error::TruncatedPayload { .. }), "{err}");
    assert!(err.to_string().contains("truncated payload"));

    let padded = dir.path().join("padded.skt");
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    fs::write(&padded, long).unwrap();
    let err = load_video(&padded).unwrap_err();
    assert!(matches!(err, Error::SizeMismatch { .. }), "{err}");
    assert!(err.to_string().contains("size mismatch"));

    let magic = dir.path().join("magic.skt");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&magic, bad).unwrap();
    assert!(matches!(load_video(&magic).unwrap_err(), Error::BadMagic { .. }));

    let rank3 = dir.path().join("rank3.skt");
    skt::write_tensor(&Tensor::full(&[3, 2, 2], 0.5), &rank3).unwrap();
    assert!(matches!(load_video(&rank3).unwrap_err(), Error::Rank { .. }));
}

#[test]
fn manifest_round_trip_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_dataset(&small_spec(), min_frames(), dir.path()).unwrap();
    let path = dir.path().join("copy.json");
    write_manifest(&corpus.test, &path).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), corpus.test);

    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    doc["entries"][2].as_object_mut().unwrap().remove("motion_class");
    fs::write(&path, doc.to_string()).unwrap();
    match read_manifest(&path).unwrap_err() {
        Error::Schema { field, .. } => assert_eq!(field, "entries[2].motion_class"),
        other => panic!("expected a schema error, got {other}"),
    }

    let mut doc: serde_json::Value = serde_json::to_value(&corpus.train).unwrap();
    doc["entries"][0]["fps"] = 30.into();
    fs::write(&path, doc.to_string()).unwrap();
    match read_manifest(&path).unwrap_err() {
        Error::Schema { field, .. } => assert_eq!(field, "fps"),
        other => panic!("expected a schema error, got {other}"),
    }
}

#[test]
fn manifest_shapes_are_checked_against_headers() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_dataset(&small_spec(), min_frames(), dir.path()).unwrap();
    assert!(Dataset::load(&dir.path().join("train.json")).is_ok());

    let mut wrong: DatasetManifest = corpus.train.clone();
    wrong.entries[1].n += 1;
    write_manifest(&wrong, &dir.path().join("train.json")).unwrap();
    let err = Dataset::load(&dir.path().join("train.json")).unwrap_err();
    assert!(matches!(err, Error::Validation { .. }), "{err}");

    let mut missing = corpus.train;
    missing.entries[0].path = "train/nope.skt".into();
    assert!(matches!(missing.validate(dir.path()).unwrap_err(), Error::Validation { .. }));
}

//! Synthetic dataset: determinism, internal consistency, class structure
//! and the on-disk formats.

use std::fs;

use mmvit::datagen::{
    generate, generate_clip, load_dataset, read_clip, read_clip_from, read_manifest, write_clip,
    write_clip_to, write_dataset, AudioMode, DatasetSpec, MACROBLOCK,
};
use mmvit::tokenize::{CompressedClip, Modality};
use mmvit::Error;

fn spec(clips_per_class: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        clips_per_class,
        seed,
        ..Default::default()
    }
}

fn bytes_of(clips: &[CompressedClip]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in clips {
        write_clip_to(&mut out, c).unwrap();
    }
    out
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&spec(3, 7)).unwrap();
    let b = generate(&spec(3, 7)).unwrap();
    assert_eq!(bytes_of(&a), bytes_of(&b));
    let c = generate(&spec(3, 8)).unwrap();
    assert_ne!(bytes_of(&a), bytes_of(&c));
    // Clips come from independent streams: regenerating one alone matches.
    let s = spec(3, 7);
    let single = generate_clip(&s, 10, 3).unwrap().clip;
    assert_eq!(single, a[10]);
    let labels: Vec<usize> = a.iter().map(|c| c.label).collect();
    assert_eq!(labels, (0..8).flat_map(|l| [l; 3]).collect::<Vec<_>>());
}

#[test]
fn predicted_frames_are_motion_compensated_key_frames_plus_residual() {
    let s = DatasetSpec {
        noise: 0.0,
        frames: 3,
        height: 48,
        width: 32,
        ..spec(1, 11)
    };
    for label in 0..8 {
        let g = generate_clip(&s, label, label).unwrap();
        let (t, h, w) = (3, 48, 32);
        let clip = &g.clip;
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let dx = clip.motion_vectors.at(&[ti, 0, y, x]);
                    let dy = clip.motion_vectors.at(&[ti, 1, y, x]);
                    // Motion is constant over each macroblock and integral.
                    let (by, bx) = (y / MACROBLOCK * MACROBLOCK, x / MACROBLOCK * MACROBLOCK);
                    assert_eq!(dx, clip.motion_vectors.at(&[ti, 0, by, bx]));
                    assert_eq!(dx.fract(), 0.0);
                    let sy = (y as f64 - dy).clamp(0.0, (h - 1) as f64) as usize;
                    let sx = (x as f64 - dx).clamp(0.0, (w - 1) as f64) as usize;
                    for c in 0..3 {
                        let want = clip.iframes.at(&[ti, c, sy, sx]) + clip.residuals.at(&[ti, c, y, x]);
                        assert!((g.pframes.at(&[ti, c, y, x]) - want).abs() < 1e-12);
                    }
                }
            }
        }
        assert_eq!(g.clean_iframes, clip.iframes);
        assert_eq!(g.clean_motion, clip.motion_vectors);
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits per-class centroids of the raw modality `m` on `train` and
/// returns the accuracy of nearest-centroid classification of `test`,
/// restricted to the class pair `pair`.
fn pair_accuracy(train: &[CompressedClip], test: &[CompressedClip], m: Modality, pair: [usize; 2]) -> f64 {
    let centroid = |label: usize| -> Vec<f64> {
        let members: Vec<&CompressedClip> = train.iter().filter(|c| c.label == label).collect();
        let mut acc = vec![0.0; members[0].modality(m).numel()];
        for c in &members {
            for (a, v) in acc.iter_mut().zip(c.modality(m).data()) {
                *a += v / members.len() as f64;
            }
        }
        acc
    };
    let cents = pair.map(centroid);
    let scored: Vec<bool> = test
        .iter()
        .filter(|c| pair.contains(&c.label))
        .map(|c| {
            let x = c.modality(m).data();
            let pick = if dist2(x, &cents[0]) <= dist2(x, &cents[1]) { pair[0] } else { pair[1] };
            pick == c.label
        })
        .collect();
    scored.iter().filter(|&&ok| ok).count() as f64 / scored.len() as f64
}

#[test]
fn designated_modality_separates_its_class_pair() {
    let train = generate(&spec(16, 1)).unwrap();
    let test = generate(&spec(16, 2)).unwrap();
    for (s, m) in Modality::ALL.into_iter().enumerate() {
        let acc = pair_accuracy(&train, &test, m, [2 * s, 2 * s + 1]);
        assert!(acc > 0.95, "{m}: nearest-centroid accuracy {acc}");
    }
}

#[test]
fn noiseless_modalities_carry_no_foreign_class_information() {
    let clean = |seed| DatasetSpec { noise: 0.0, ..spec(64, seed) };
    let train = generate(&clean(1)).unwrap();
    let test = generate(&clean(2)).unwrap();
    for (s, m) in Modality::ALL.into_iter().enumerate() {
        assert_eq!(pair_accuracy(&train, &test, m, [2 * s, 2 * s + 1]), 1.0, "{m}");
        // A pair that leaves `m` neutral: chance within 3σ of a binomial(128, ½).
        let other = (s + 1) % 4;
        let acc = pair_accuracy(&train, &test, m, [2 * other, 2 * other + 1]);
        let sigma = (0.25f64 / 128.0).sqrt();
        assert!((acc - 0.5).abs() < 3.0 * sigma, "{m} on foreign pair: {acc}");
    }
}

/// Welch t statistic of two samples.
fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (m, v, n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    (ma - mb) / (va / na + vb / nb).sqrt()
}

/// Per-clip summary of one modality: spread of its first plane (first
/// channel of the first frame, or the first audio row).
fn summary(c: &CompressedClip, m: Modality) -> f64 {
    let t = c.modality(m);
    let plane = match m {
        Modality::Audio => t.shape()[1],
        _ => t.shape()[2] * t.shape()[3],
    };
    let x = &t.data()[..plane];
    let mean = x.iter().sum::<f64>() / plane as f64;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64
}

#[test]
fn only_the_designated_modality_depends_on_the_class() {
    let clips = generate(&spec(40, 3)).unwrap();
    let of = |label: usize, m: Modality| -> Vec<f64> {
        clips.iter().filter(|c| c.label == label).map(|c| summary(c, m)).collect()
    };
    for (s, m) in Modality::ALL.into_iter().enumerate() {
        // Two classes that leave modality `m` neutral.
        let neutral: Vec<usize> = (0..8).filter(|l| l / 2 != s).collect();
        let t = welch_t(&of(neutral[0], m), &of(neutral[3], m));
        assert!(t.abs() < 4.0, "{m}: neutral classes differ, t = {t}");
        // A designated class against a neutral one.
        let t = welch_t(&of(2 * s, m), &of(neutral[0], m));
        assert!(t.abs() > 4.0, "{m}: signature not visible, t = {t}");
    }
}

#[test]
fn clip_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let clip = generate_clip(&spec(1, 4), 0, 5).unwrap().clip;
    let path = dir.path().join("c.mmvc");
    write_clip(&clip, &path).unwrap();
    assert_eq!(read_clip(&path).unwrap(), clip);

    let mut bytes = Vec::new();
    write_clip_to(&mut bytes, &clip).unwrap();
    for cut in [0, 2, 7, 20, bytes.len() / 3, bytes.len() - 1] {
        assert!(matches!(read_clip_from(&mut &bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    match read_clip_from(&mut &bad[..]) {
        Err(e @ Error::Format { .. }) => assert!(e.to_string().contains("MMVC")),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clips = generate(&spec(2, 5)).unwrap();
    let manifest = write_dataset(dir.path(), &clips).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), clips);
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 16);
    assert_eq!(entries[3].1, 1);

    let text = fs::read_to_string(&manifest).unwrap().replacen("\t0\n", "\t7\n", 1);
    fs::write(&manifest, text).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Data(_))));
    fs::write(&manifest, "clip_00000.mmvc 0\n").unwrap();
    assert!(matches!(read_manifest(&manifest), Err(Error::Data(_))));
}

#[test]
fn waveform_audio_goes_through_the_feature_stub() {
    let s = DatasetSpec {
        audio: AudioMode::Waveform,
        ..spec(1, 6)
    };
    let clips = generate(&s).unwrap();
    assert!(clips.iter().all(|c| c.audio.shape() == [2, 128] && c.audio.is_finite()));
    assert_eq!(bytes_of(&clips), bytes_of(&generate(&s).unwrap()));
}

#[test]
fn bad_specs_are_rejected() {
    let s = spec(1, 0);
    assert!(matches!(generate_clip(&s, 0, 8), Err(Error::Config(_))));
    let s = DatasetSpec { num_classes: 9, ..spec(1, 0) };
    assert!(matches!(generate(&s), Err(Error::Config(_))));
}

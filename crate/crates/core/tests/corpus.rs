use gelina_core::corpus::{
    generate_corpus, load_all, load_clip, motion_from_bytes, motion_to_bytes, speaker_amplitudes, speech_from_bytes,
    speech_to_bytes, write_clip, LanguageSpec, Manifest, SyntheticLanguage,
};
use gelina_core::interleave::{build_stream, SPEECH_PER_GESTURE};
use gelina_core::rvq::DOWNSAMPLE_FACTOR;
use gelina_core::Error;
use proptest::prelude::*;

fn language(seed: u64) -> SyntheticLanguage {
    SyntheticLanguage::new(LanguageSpec {
        seed,
        ..LanguageSpec::default()
    })
    .unwrap()
}

fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(&language(3), 12, a.path()).unwrap();
    generate_corpus(&language(3), 12, b.path()).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(ta.len(), 25);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    generate_corpus(&language(4), 12, c.path()).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn zero_clips_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    assert!(generate_corpus(&language(0), 0, d.path()).is_err());
}

#[test]
fn every_frame_is_a_valid_pose() {
    let lang = language(5);
    for i in 0..40 {
        let c = lang.clip(i);
        assert!(c.motion.cast::<f64>().has_valid_rotations(1e-5), "clip {i}");
        assert!(c.motion.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn clips_meet_interleave_preconditions() {
    let lang = language(6);
    for i in 0..40 {
        let c = lang.clip(i);
        assert_eq!(c.speech.len() % SPEECH_PER_GESTURE, 0);
        let gestures = c.motion.num_frames() / DOWNSAMPLE_FACTOR;
        assert_eq!(c.motion.num_frames() % DOWNSAMPLE_FACTOR, 0);
        assert_eq!(gestures, c.speech.len() / SPEECH_PER_GESTURE);
        let s = build_stream(&c.speech.ids, &vec![0; gestures]).unwrap();
        s.validate().unwrap();
    }
}

#[test]
fn write_then_load_roundtrips() {
    let d = tempfile::tempdir().unwrap();
    let lang = language(7);
    let m = generate_corpus(&lang, 6, d.path()).unwrap();
    let (loaded_manifest, clips) = load_all(d.path()).unwrap();
    assert_eq!(m, loaded_manifest);
    for (i, c) in clips.iter().enumerate() {
        let orig = lang.clip(i);
        assert_eq!(c.id, orig.id);
        assert_eq!(c.text, orig.text);
        assert_eq!(c.speaker, orig.speaker);
        assert_eq!(c.speech, orig.speech);
        assert_eq!(c.motion, orig.motion);
    }
    assert_eq!(Manifest::from_jsonl(&m.to_jsonl()).unwrap(), m);
}

#[test]
fn missing_files_are_reported() {
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(load_all(d.path()), Err(Error::MissingFile(_))));
    let m = generate_corpus(&language(8), 2, d.path()).unwrap();
    std::fs::remove_file(d.path().join(&m.records[1].motion)).unwrap();
    assert!(matches!(load_clip(d.path(), &m.records[1]), Err(Error::MissingFile(_))));
}

#[test]
fn mismatched_durations_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let c = language(9).clip(0);
    // drop two motion frames: 0.1 s short of the speech
    let frames = c.motion.num_frames() - 2;
    let short = c.motion.window(0, frames).unwrap();
    let mut r = write_clip(d.path(), "x", &c.text, 0, &c.speech, &short).unwrap();
    assert!(matches!(load_clip(d.path(), &r), Err(Error::DurationMismatch { .. })));
    let one_short = c.motion.window(0, c.motion.num_frames() - 1).unwrap();
    r = write_clip(d.path(), "y", &c.text, 0, &c.speech, &one_short).unwrap();
    load_clip(d.path(), &r).unwrap();
    r.duration += 1.0;
    assert!(matches!(load_clip(d.path(), &r), Err(Error::DurationMismatch { .. })));
}

#[test]
fn wrong_magic_or_version_is_a_version_mismatch() {
    let c = language(10).clip(1);
    let mut m = motion_to_bytes(&c.motion);
    m[8] = 9;
    assert!(matches!(motion_from_bytes(&m), Err(Error::VersionMismatch(_))));
    let s = speech_to_bytes(&c.speech).unwrap();
    assert!(matches!(motion_from_bytes(&s), Err(Error::VersionMismatch(_))));
    assert!(matches!(speech_from_bytes(&motion_to_bytes(&c.motion)), Err(Error::VersionMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn truncated_or_corrupted_files_never_panic(cut in 0usize..4000, flip in 0usize..4000, byte in any::<u8>()) {
        let c = language(11).clip(2);
        for bytes in [motion_to_bytes(&c.motion), speech_to_bytes(&c.speech).unwrap()] {
            let n = cut % (bytes.len() + 1);
            let truncated = &bytes[..n];
            if n < bytes.len() {
                prop_assert!(motion_from_bytes(truncated).is_err());
                prop_assert!(speech_from_bytes(truncated).is_err());
            }
            let mut corrupted = bytes.clone();
            let at = flip % corrupted.len();
            corrupted[at] = byte;
            let _ = motion_from_bytes(&corrupted);
            let _ = speech_from_bytes(&corrupted);
        }
    }
}

#[test]
fn speakers_differ_in_gesture_amplitude() {
    let lang = language(12);
    let clips: Vec<_> = (0..60).map(|i| lang.clip(i)).collect();
    let amps = speaker_amplitudes(&clips, 2);
    assert!(amps[0] > 1.5 * amps[1], "{amps:?}");
}

#[test]
fn three_word_clip_sizes() {
    let spec = LanguageSpec {
        speech_tokens_per_word: 45,
        ..LanguageSpec::default()
    };
    let lang = SyntheticLanguage::new(spec).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let c = lang.clip_from_words(0, &[0, 1, 2], 1, &mut rng);
    assert_eq!(c.speech.len(), 135);
    assert_eq!(c.motion.num_frames(), 36);
    assert_eq!(c.speech.len() / SPEECH_PER_GESTURE, 9);
}

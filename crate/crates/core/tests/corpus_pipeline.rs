use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stainedit::color::RgbImage;
use stainedit::corpus::{
    build_manifest, slice_slide, tissue_filter, CorpusManifest, Domain, FilterThresholds, PrepareConfig, SlideImage,
};
use stainedit::Error;

const SIDE: usize = 4096;

fn white_slide(id: &str, domain: Domain) -> SlideImage {
    SlideImage {
        pixels: RgbImage::new(SIDE, SIDE, 3, vec![255; SIDE * SIDE * 3]).unwrap(),
        slide_id: id.into(),
        domain,
    }
}

/// Noise on the left, paper white on the right, with a ragged boundary so
/// some tiles land on either side of the background threshold.
fn textured_slide(id: &str, domain: Domain, seed: u64) -> SlideImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![255u8; SIDE * SIDE * 3];
    for y in 0..SIDE {
        let edge = 1500 + (y / 256) * 120;
        for x in 0..edge.min(SIDE) {
            let i = (y * SIDE + x) * 3;
            data[i] = rng.random_range(90..230);
            data[i + 1] = rng.random_range(40..200);
            data[i + 2] = rng.random_range(90..230);
        }
    }
    SlideImage {
        pixels: RgbImage::new(SIDE, SIDE, 3, data).unwrap(),
        slide_id: id.into(),
        domain,
    }
}

#[test]
fn all_white_slides_leave_an_empty_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let slides = [white_slide("w1", Domain::He), white_slide("w2", Domain::P63)];
    let err = build_manifest(&slides, &PrepareConfig::new(tmp.path(), 0)).unwrap_err();
    assert!(matches!(err, Error::Corpus(_)), "{err}");
}

#[test]
fn manifest_counts_match_direct_filtering() {
    let tmp = tempfile::tempdir().unwrap();
    let slides = [textured_slide("he-a", Domain::He, 1), textured_slide("p63-a", Domain::P63, 2)];
    let cfg = PrepareConfig::new(tmp.path(), 7);
    let m = build_manifest(&slides, &cfg).unwrap();

    let th = FilterThresholds::default();
    let mut kept = [0usize; 2];
    for (i, s) in slides.iter().enumerate() {
        let tiles = slice_slide(s, 1024, 256).unwrap();
        assert_eq!(tiles.len(), 16);
        kept[i] = tiles.iter().filter(|t| tissue_filter(t, &th).accepted).count();
    }
    assert!(kept.iter().all(|&k| k > 0 && k < 16), "{kept:?}");
    assert_eq!((m.tiles_kept.he, m.tiles_kept.p63), (kept[0], kept[1]));
    assert_eq!((m.tiles_seen.he, m.tiles_seen.p63), (16, 16));

    let back = CorpusManifest::load(tmp.path()).unwrap();
    let tiles = back.load_domain(Domain::P63).unwrap();
    assert_eq!(tiles.len(), kept[1]);
    assert!(tiles.iter().all(|t| t.size() == 256 && t.domain == Domain::P63));
}

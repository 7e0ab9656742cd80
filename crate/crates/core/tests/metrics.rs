use hetadapt_core::evalharness::{chord_recall, chroma_cosine, masked_accuracy, CHORD_RESOLUTION};
use hetadapt_core::symbolic::{ChordQuality, ChordSpan};
use hetadapt_core::{Error, FrameMask, TokenSequence};
use proptest::prelude::*;

fn row(pcs: &[usize]) -> [f64; 12] {
    let mut r = [0.0; 12];
    for &p in pcs {
        r[p] = 1.0;
    }
    r
}

fn span(start: f64, end: f64, root: u8, quality: ChordQuality) -> ChordSpan {
    ChordSpan { start, end, root, quality }
}

#[test]
fn chroma_cosine_examples() {
    let a = vec![row(&[0, 4, 7]), row(&[2])];
    assert_eq!(chroma_cosine(&a, &a).unwrap(), 1.0);
    assert_eq!(chroma_cosine(&[row(&[0, 4])], &[row(&[1, 5])]).unwrap(), 0.0);
    let half = chroma_cosine(&vec![row(&[0, 4]); 5], &vec![row(&[0, 7]); 5]).unwrap();
    assert!((half - 0.5).abs() < 1e-15);
    assert_eq!(chroma_cosine(&[row(&[])], &[row(&[])]).unwrap(), 1.0);
    assert_eq!(chroma_cosine(&[row(&[])], &[row(&[3])]).unwrap(), 0.0);
    assert!(chroma_cosine(&[row(&[])], &[]).is_err());
}

#[test]
fn chord_recall_examples() {
    let reference = [span(0.0, 2.0, 0, ChordQuality::Maj)];
    assert_eq!(chord_recall(&reference, &reference, CHORD_RESOLUTION).unwrap(), 1.0);
    let none = [span(0.0, 2.0, 0, ChordQuality::N)];
    assert_eq!(chord_recall(&none, &reference, CHORD_RESOLUTION).unwrap(), 0.0);
    assert_eq!(chord_recall(&[], &reference, CHORD_RESOLUTION).unwrap(), 0.0);
    let half = [span(0.0, 1.0, 0, ChordQuality::Maj), span(1.0, 2.0, 9, ChordQuality::Min)];
    let r = chord_recall(&half, &reference, CHORD_RESOLUTION).unwrap();
    assert!((r - 0.5).abs() <= 0.01, "{r}");
    assert!(matches!(chord_recall(&reference, &none, CHORD_RESOLUTION), Err(Error::Contract(_))));
    assert!(chord_recall(&reference, &reference, 0.0).is_err());
}

#[test]
fn chord_recall_is_not_symmetric() {
    // Predicting a chord where the reference has none costs nothing.
    let reference = [span(0.0, 1.0, 0, ChordQuality::Maj), span(1.0, 2.0, 0, ChordQuality::N)];
    let predicted = [span(0.0, 2.0, 0, ChordQuality::Maj)];
    assert_eq!(chord_recall(&predicted, &reference, CHORD_RESOLUTION).unwrap(), 1.0);
    let back = chord_recall(&reference, &predicted, CHORD_RESOLUTION).unwrap();
    assert!((back - 0.5).abs() < 1e-12);
}

#[test]
fn accuracy_hand_fixture() {
    let reference = TokenSequence::mono(vec![3, 1, 4, 1, 5, 9, 2, 6]);
    let predicted = TokenSequence::mono(vec![0, 1, 0, 7, 5, 0, 0, 0]);
    let mask = FrameMask::from_indices(8, &[1, 3, 4, 7]).unwrap();
    assert_eq!(masked_accuracy(&predicted, &reference, &mask).unwrap(), 0.5);
    assert_eq!(masked_accuracy(&reference, &reference, &mask).unwrap(), 1.0);
    assert!(matches!(masked_accuracy(&reference, &reference, &FrameMask::unmasked(8)), Err(Error::Contract(_))));
    // Multi-codebook frames count only when every codebook matches.
    let r2 = TokenSequence::new(2, 2, vec![1, 2, 3, 4]).unwrap();
    let p2 = TokenSequence::new(2, 2, vec![1, 2, 3, 0]).unwrap();
    assert_eq!(masked_accuracy(&p2, &r2, &FrameMask::new(vec![true, true])).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn accuracy_ignores_unmasked_predictions(
        tokens in prop::collection::vec(0u16..8, 1..60),
        flags in prop::collection::vec(any::<bool>(), 60),
        scramble in prop::collection::vec(0u16..8, 60),
    ) {
        let n = tokens.len();
        let mut flags = flags[..n].to_vec();
        flags[0] = true;
        let mask = FrameMask::new(flags);
        let reference = TokenSequence::mono(tokens.clone());
        let mut a = tokens.clone();
        let mut b = tokens.clone();
        for t in 0..n {
            if mask.is_masked(t) {
                a[t] = scramble[t];
                b[t] = scramble[t];
            } else {
                b[t] = scramble[(t + 7) % 60];
            }
        }
        let sa = masked_accuracy(&TokenSequence::mono(a), &reference, &mask).unwrap();
        let sb = masked_accuracy(&TokenSequence::mono(b), &reference, &mask).unwrap();
        prop_assert_eq!(sa, sb);
        prop_assert!((0.0..=1.0).contains(&sa));
    }

    #[test]
    fn chroma_cosine_is_symmetric_and_bounded(
        a in prop::collection::vec(prop::collection::vec(0usize..12, 0..5), 1..20),
        b in prop::collection::vec(prop::collection::vec(0usize..12, 0..5), 1..20),
    ) {
        let n = a.len().min(b.len());
        let ra: Vec<[f64; 12]> = a[..n].iter().map(|p| row(p)).collect();
        let rb: Vec<[f64; 12]> = b[..n].iter().map(|p| row(p)).collect();
        let x = chroma_cosine(&ra, &rb).unwrap();
        prop_assert_eq!(x, chroma_cosine(&rb, &ra).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
    }

    #[test]
    fn chord_recall_is_a_fraction(split in 1u32..99, root in 0u8..12) {
        let reference = [span(0.0, 1.0, 0, ChordQuality::Maj)];
        let s = split as f64 / 100.0;
        let predicted = [span(0.0, s, 0, ChordQuality::Maj), span(s, 1.0, root, ChordQuality::Min)];
        let r = chord_recall(&predicted, &reference, 0.01).unwrap();
        prop_assert!((r - s).abs() < 0.011);
    }
}

use proptest::prelude::*;

use super::*;
use crate::data::tokenize;

#[test]
fn edit_distance_examples() {
    assert_eq!(char_distance("", "abc"), 3);
    assert_eq!(char_distance("abc", "abc"), 0);
    assert_eq!(char_distance("kitten", "sitting"), 3);
    assert_eq!(char_distance("flaw", "lawn"), 2);
}

#[test]
fn metric_examples() {
    let r = metrics(&["abc"], &["abc"]).unwrap();
    assert_eq!((r.cer, r.wer, r.ser), (0.0, 0.0, 0.0));
    let r = metrics(&["abc"], &["abd"]).unwrap();
    assert!((r.cer - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!((r.wer, r.ser), (1.0, 1.0));
    let r = metrics(&["ab cd", "xy"], &["ab cd", "xz"]).unwrap();
    assert_eq!(r.ser, 0.5);
    assert_eq!(r.wer, 1.0 / 3.0);
    assert!(matches!(metrics::<&str, &str>(&[], &[]), Err(Error::Config(_))));
    assert!(matches!(metrics(&["a"], &["a", "b"]), Err(Error::Shape(_))));
}

#[test]
fn cer_is_scale_invariant() {
    let refs = ["the cat", "sat on", "a mat"];
    let hyps = ["the cot", "sat an", "a mat"];
    let once = metrics(&refs, &hyps).unwrap();
    let refs2: Vec<&str> = refs.iter().chain(&refs).copied().collect();
    let hyps2: Vec<&str> = hyps.iter().chain(&hyps).copied().collect();
    let twice = metrics(&refs2, &hyps2).unwrap();
    assert_eq!(once.cer, twice.cer);
    assert_eq!(once.wer, twice.wer);
    assert_eq!(once.ser, twice.ser);
}

#[test]
fn lexicon_examples() {
    let lex = Lexicon::new(["had", "has"], 1, DEFAULT_CONFIDENCE_THRESHOLD).unwrap();
    assert_eq!(lexicon_correct("ha", &lex, None), "ha");
    assert_eq!(lexicon_correct("had", &lex, None), "had");
    assert_eq!(lexicon_correct("hax", &lex, None), "hax");

    let lex = Lexicon::new(["fleeing"], 2, DEFAULT_CONFIDENCE_THRESHOLD).unwrap();
    assert_eq!(lexicon_correct("rleeing", &lex, None), "fleeing");
    // a confident word is left alone
    assert_eq!(lexicon_correct("rleeing", &lex, Some(&[0.95])), "rleeing");
    assert_eq!(lexicon_correct("rleeing", &lex, Some(&[0.5])), "fleeing");

    let lex = Lexicon::new(["the", "cat"], 1, 0.9).unwrap();
    assert_eq!(lexicon_correct("tho  cat", &lex, None), "the  cat");
    assert!(Lexicon::new(Vec::<String>::new(), 1, 0.9).is_err());
}

#[test]
fn lexicon_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("lex.txt");
    fs::write(&p, "alpha\n\nbeta\n").unwrap();
    let lex = Lexicon::load(&p, 1, 0.9).unwrap();
    assert_eq!(lex.len(), 2);
    assert!(lex.contains("beta"));
}

#[test]
fn confusion_examples() {
    let cs = Charset::from_chars("ab".chars()).unwrap();
    let m = confusion_matrix(&["ab", "ba"], &["ab", "ba"], &cs).unwrap();
    assert_eq!(m.off_diagonal(), 0);
    assert_eq!(m.get(1, 1), 2);

    let m = confusion_matrix(&["a"], &["b"], &cs).unwrap();
    assert_eq!(m.get(1, 2), 1);

    let m = confusion_matrix(&["ab"], &["b"], &cs).unwrap();
    assert_eq!(m.get(1, 0), 1);
    assert_eq!(m.get(2, 2), 1);
    assert_eq!(m.off_diagonal(), 1);

    let m = confusion_matrix(&["a"], &["ab"], &cs).unwrap();
    assert_eq!(m.get(0, 2), 1);
}

#[test]
fn confusion_rows_sum_to_reference_counts() {
    let cs = Charset::from_chars("abc ".chars()).unwrap();
    let refs = ["abc cab", "aab", "c"];
    let hyps = ["ab cb", "abbb", ""];
    let m = confusion_matrix(&refs, &hyps, &cs).unwrap();
    for c in cs.chars() {
        let id = cs.id(*c).unwrap();
        let n = refs.iter().map(|r| r.chars().filter(|x| x == c).count()).sum::<usize>();
        assert_eq!(m.row_sum(id), n as u64, "{c:?}");
    }
}

#[test]
fn attention_export() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("att");
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let (csv, pgm) = export_attention(&eye, 3, 3, &stem).unwrap();
    let img = crate::data::read_pgm(&pgm).unwrap();
    for y in 0..3 {
        for x in 0..3 {
            assert_eq!(img.get(y, x), if x == y { 255.0 } else { 0.0 });
        }
    }
    let (back, r, c) = read_attention_csv(&csv).unwrap();
    assert_eq!((r, c), (3, 3));
    assert_eq!(back, eye);

    let uniform = vec![0.25; 8];
    let (_, pgm) = export_attention(&uniform, 2, 4, &stem).unwrap();
    let img = crate::data::read_pgm(&pgm).unwrap();
    assert!(img.data().iter().all(|&v| v == img.data()[0]));

    let odd = [0.1f64.sqrt(), 1.0 - 0.1f64.sqrt(), 1.0 / 3.0, 2.0 / 3.0];
    let (csv, _) = export_attention(&odd, 2, 2, &stem).unwrap();
    assert_eq!(read_attention_csv(&csv).unwrap().0, odd);
    assert!(export_attention(&odd, 3, 2, &stem).is_err());
}

#[test]
fn word_confidences_follow_alignment() {
    // charset " ab": space=1, a=2, b=3; frames emit a, blank, space, b, b
    let cs = Charset::from_chars(" ab".chars()).unwrap();
    let confident = |k: usize, p: f64| {
        let rest = (1.0 - p) / 3.0;
        (0..4).map(|j| if j == k { p.ln() } else { rest.ln() }).collect::<Vec<_>>()
    };
    let rows = [confident(2, 0.9), confident(0, 0.8), confident(1, 0.7), confident(3, 0.6), confident(3, 0.5)];
    let lat = Lattice::new(rows.concat(), 5, 4).unwrap();
    let labels = tokenize("a b", &cs).unwrap();
    let c = word_confidences(&lat, &labels, &cs).unwrap();
    assert_eq!(c.len(), 2);
    assert!((c[0] - 0.9).abs() < 1e-12);
    assert!((c[1] - 0.55).abs() < 1e-12);
}

proptest! {
    #[test]
    fn metrics_of_identity_are_zero(lines in prop::collection::vec("[a-c ]{1,12}", 1..6)) {
        prop_assume!(lines.iter().any(|l| !l.is_empty()));
        let r = metrics(&lines, &lines).unwrap();
        prop_assert_eq!((r.cer, r.wer, r.ser), (0.0, 0.0, 0.0));
    }

    #[test]
    fn correction_never_hurts_with_full_lexicon(
        words in prop::collection::vec(prop::sample::select(vec!["cart", "dog", "house", "tree", "river"]), 1..5),
        which in 0usize..5,
        pos in 0usize..8,
        ch in prop::sample::select(vec!['x', 'q', 'z']),
    ) {
        let reference = words.join(" ");
        let mut tokens: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let i = which % tokens.len();
        let mut chars: Vec<char> = tokens[i].chars().collect();
        let p = pos % chars.len();
        chars[p] = ch;
        tokens[i] = chars.into_iter().collect();
        let hyp = tokens.join(" ");
        let lex = Lexicon::new(["cart", "dog", "house", "tree", "river"], 1, 0.9).unwrap();
        let fixed = lexicon_correct(&hyp, &lex, None);
        prop_assert!(char_distance(&reference, &fixed) <= char_distance(&reference, &hyp));
    }

    #[test]
    fn alignment_cost_equals_distance(a in "[ab]{0,6}", b in "[ab]{0,6}") {
        let (x, y): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let al = align(&x, &y);
        let cost = al.iter().filter(|(p, q)| p != q).count();
        prop_assert_eq!(cost, edit_distance(&x, &y));
    }
}

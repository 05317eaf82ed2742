use std::fs;
use std::path::Path;

use dermachat_core::data::{read_jsonl, write_jsonl, CaptionPair, Stage};
use dermachat_core::ingest::{load_class_tree, load_concept_dataset, merge_stage2, ColumnMapping};
use dermachat_core::taxonomy::{ConceptTaxonomy, DiseaseTaxonomy, OTHERS};
use dermachat_core::{Error, Image};

fn touch_image(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    Image::new(4, 4, [10, 20, 30]).save_png(path).unwrap();
}

fn concept_fixture(dir: &Path) -> std::path::PathBuf {
    for name in ["a.png", "b.png", "c.png"] {
        touch_image(&dir.join("img").join(name));
    }
    let csv = dir.join("concepts.csv");
    fs::write(&csv, "image,Erythema,Plaque,Papule,Sparkle\na.png,1,0,0,0\nb.png,0,1,1,1\nc.png,0,0,0,0\n").unwrap();
    csv
}

#[test]
fn concept_table_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let csv = concept_fixture(dir.path());
    let (pairs, s) =
        load_concept_dataset(&csv, &dir.path().join("img"), &ConceptTaxonomy::default(), &ColumnMapping::default())
            .unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!((s.count("Erythema"), s.count("Plaque"), s.count("Papule")), (1, 1, 1));
    assert_eq!(s.flagged_empty, 1);
    assert_eq!(s.unknown_columns, vec!["Sparkle".to_string()]);
    assert_eq!(pairs[0].text, "This image shows Erythema.");
    assert_eq!(pairs[1].text, "This image shows Papule, Plaque.");
    assert_eq!(pairs[2].text, "No clinical concept annotated.");
    assert!(pairs[2].flagged && !pairs[0].flagged);
    assert!(pairs.iter().all(|p| p.stage == Stage::Concepts));
}

#[test]
fn concept_table_conservation_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    touch_image(&dir.path().join("a.png"));
    let csv = dir.path().join("t.csv");
    fs::write(&csv, "image,Erythema\na.png,1\nmissing.png,1\na.png,2\n").unwrap();
    let (pairs, s) =
        load_concept_dataset(&csv, dir.path(), &ConceptTaxonomy::default(), &ColumnMapping::default()).unwrap();
    assert_eq!(pairs.len() + s.skipped, s.rows);
    assert_eq!(s.skipped, 2);
    assert!(s.skip_reasons[0].contains("missing.png"));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "image,Erythema\n").unwrap();
    let err = load_concept_dataset(&empty, dir.path(), &ConceptTaxonomy::default(), &ColumnMapping::default());
    assert!(matches!(err, Err(Error::EmptyDataset(_))));
    let err = load_concept_dataset(&dir.path().join("nope.csv"), dir.path(), &ConceptTaxonomy::default(), &ColumnMapping::default());
    assert!(matches!(err, Err(Error::Io { .. })));
}

#[test]
fn column_mapping_renames_headers() {
    let dir = tempfile::tempdir().unwrap();
    touch_image(&dir.path().join("a.png"));
    let csv = dir.path().join("t.csv");
    fs::write(&csv, "id,path,hyperpigmentation\n7,a.png,1\n").unwrap();
    let mapping = ColumnMapping {
        image_column: Some("path".into()),
        concepts: [("hyperpigmentation".to_string(), "Brown(Hyperpigmentation)".to_string())].into(),
    };
    let (pairs, s) = load_concept_dataset(&csv, dir.path(), &ConceptTaxonomy::default(), &mapping).unwrap();
    assert_eq!(pairs[0].text, "This image shows Brown(Hyperpigmentation).");
    assert_eq!(s.unknown_columns, vec!["id".to_string()]);
}

#[test]
fn class_tree_listing_and_notes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (class, img) in [("Acne and Rosacea Photos", "x.png"), ("Acne and Rosacea Photos", "y.jpg"), ("Bullous Disease", "z.png"), ("Bullous Disease", "w.png")] {
        touch_image(&root.join(class).join(img));
    }
    fs::write(root.join("Bullous Disease/w.png.txt"), "Eczema on fingertips with dry flaky skin\n").unwrap();
    fs::create_dir_all(root.join("Mystery")).unwrap();
    touch_image(&root.join("Mystery/m.png"));
    fs::create_dir_all(root.join("Eczema Photos")).unwrap();

    let (pairs, s) = load_class_tree(root, &DiseaseTaxonomy::default(), 160).unwrap();
    assert_eq!(pairs.len(), 5);
    assert_eq!(s.count("Acne and Rosacea"), 2);
    assert_eq!(s.count("Bullous Disease"), 2);
    assert_eq!(s.count(OTHERS), 1);
    assert_eq!(s.warnings.len(), 3, "{:?}", s.warnings);
    let w = pairs.iter().find(|p| p.image.ends_with("w.png")).unwrap();
    assert_eq!(w.text, "Eczema on fingertips with dry flaky skin");
    let z = pairs.iter().find(|p| p.image.ends_with("z.png")).unwrap();
    assert_eq!(z.text, "The diagnosis is Bullous Disease.");

    let (cut, s) = load_class_tree(root, &DiseaseTaxonomy::default(), 3).unwrap();
    assert_eq!(s.notes_truncated, 1);
    let w = cut.iter().find(|p| p.image.ends_with("w.png")).unwrap();
    assert_eq!(w.text, "Eczema on fingertips");
    assert!(w.flagged);

    assert!(matches!(load_class_tree(&root.join("absent"), &DiseaseTaxonomy::default(), 160), Err(Error::Io { .. })));
}

#[test]
fn loaders_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let csv = concept_fixture(dir.path());
    let run = |out: &str| {
        let (pairs, _) =
            load_concept_dataset(&csv, &dir.path().join("img"), &ConceptTaxonomy::default(), &ColumnMapping::default())
                .unwrap();
        let p = dir.path().join(out);
        write_jsonl(&p, &pairs).unwrap();
        fs::read(p).unwrap()
    };
    assert_eq!(run("one.jsonl"), run("two.jsonl"));
    let back = read_jsonl(&dir.path().join("one.jsonl")).unwrap();
    assert_eq!(back.pairs.len(), 3);
}

fn pairs(names: &[&str]) -> Vec<CaptionPair> {
    names.iter().map(|n| CaptionPair::new(*n, "The diagnosis is Others.", Stage::Diagnosis)).collect()
}

#[test]
fn merge_keeps_first_duplicate() {
    let (m, r) = merge_stage2(&[pairs(&["a", "b", "c"]), pairs(&["d", "e"])]).unwrap();
    assert_eq!(m.len(), 5);
    assert!(r.duplicates.is_empty());
    let mut second = pairs(&["c", "d"]);
    second[0].text = "later".into();
    let (m, r) = merge_stage2(&[pairs(&["a", "b", "c"]), second]).unwrap();
    assert_eq!(m.len(), 4);
    assert_eq!(r.duplicates, vec!["c".to_string()]);
    assert_eq!(m[2].text, "The diagnosis is Others.");
    assert!(merge_stage2(&[]).is_err());
}

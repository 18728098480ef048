use std::path::PathBuf;

use cotox_core::ingest::{BioContext, Term, TermKind};
use cotox_core::model::Compound;
use cotox_core::prompt::{build_prompt, build_system_prompt, PromptError, PromptStrategy, StructureFormat, TemplateStore};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn propranolol() -> Compound {
    let mut c = Compound::new("D011433", "Propranolol");
    c.iupac_name = Some("1-naphthalen-1-yloxy-3-(propan-2-ylamino)propan-2-ol".into());
    c.smiles = Some("CC(C)NCC(COC1=CC=CC2=CC=CC=C21)O".into());
    c
}

fn context() -> BioContext {
    let mut ctx = BioContext::empty("D011433");
    ctx.push(Term::new("R-HSA-109606", "Intrinsic Pathway for Apoptosis", TermKind::Pathway, "CTD"));
    ctx.push(Term::new("R-HSA-111459", "Activation of caspases", TermKind::Pathway, "CTD"));
    ctx.push(Term::new(
        "GO:1903209",
        "positive regulation of oxidative stress-induced cell death",
        TermKind::GoBiologicalProcess,
        "CTD",
    ));
    ctx.filtered = true;
    ctx
}

/// Compares against the stored file; set COTOX_UPDATE_GOLDEN=1 to rewrite it
/// after an intentional template change.
fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("COTOX_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden mismatch for {name}");
}

#[test]
fn cotox_iupac_golden() {
    let b = build_prompt(
        &TemplateStore::Embedded,
        &propranolol(),
        Some(&context()),
        PromptStrategy::CoTox,
        StructureFormat::Iupac,
        None,
    )
    .unwrap();
    check_golden("cotox_iupac.user.txt", &b.user_text);
    check_golden("cotox.system.txt", &b.system_text);
    assert!(!b.user_text.contains("CC(C)NCC"));
    assert!(!b.user_text.contains("Propranolol"));
}

#[test]
fn cotox_smiles_golden() {
    let b = build_prompt(
        &TemplateStore::Embedded,
        &propranolol(),
        Some(&context()),
        PromptStrategy::CoTox,
        StructureFormat::Smiles,
        None,
    )
    .unwrap();
    check_golden("cotox_smiles.user.txt", &b.user_text);
    assert!(!b.user_text.contains("naphthalen-1-yloxy"));
}

#[test]
fn prompts_are_deterministic() {
    let build = || {
        build_prompt(
            &TemplateStore::Embedded,
            &propranolol(),
            Some(&context()),
            PromptStrategy::CoTox,
            StructureFormat::Iupac,
            None,
        )
        .unwrap()
    };
    let (a, b) = (build(), build());
    assert_eq!(a, b);
    assert_eq!(a.content_hash, b.content_hash);
}

#[test]
fn directory_store_and_missing_asset() {
    let dir = tempfile::tempdir().unwrap();
    TemplateStore::export_embedded(dir.path()).unwrap();
    let store = TemplateStore::Dir(dir.path().to_path_buf());
    assert_eq!(
        build_system_prompt(&store, PromptStrategy::CoTox).unwrap(),
        build_system_prompt(&TemplateStore::Embedded, PromptStrategy::CoTox).unwrap()
    );
    std::fs::remove_file(dir.path().join("cotox.system.txt")).unwrap();
    let err = build_system_prompt(&store, PromptStrategy::CoTox).unwrap_err();
    assert!(matches!(err, PromptError::MissingTemplateAsset { ref name, .. } if name == "cotox.system.txt"));

    std::fs::write(dir.path().join("zeroshot.user.txt"), "{{pathways}}").unwrap();
    let err = build_prompt(
        &store,
        &propranolol(),
        Some(&context()),
        PromptStrategy::ZeroShot,
        StructureFormat::Iupac,
        None,
    )
    .unwrap_err();
    // Structure-only strategies never receive biological context.
    assert!(matches!(err, PromptError::UnknownPlaceholder { .. }));
}

use std::path::Path;

use fsdet::protocol::ExperimentConfig;

fn reference() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.conf");
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn reference_file_lists_the_defaults() {
    let cfg = ExperimentConfig::from_toml_str(&reference(), &[]).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn reference_file_names_every_key() {
    let text = reference();
    let table: toml::Table = toml::from_str(&ExperimentConfig::default().to_toml()).unwrap();
    for (section, keys) in &table {
        for key in keys.as_table().unwrap().keys() {
            let dotted = format!("{section}.{key} =");
            assert!(text.lines().any(|l| l.starts_with(&dotted)), "{dotted} missing");
        }
    }
}

#[test]
fn overrides_apply_on_top_of_the_file() {
    let over = vec![
        ("train.lr_finetune".to_string(), "0.05".to_string()),
        ("world.n_base".to_string(), "4".to_string()),
        ("loss.kl_weight".to_string(), "0.5".to_string()),
    ];
    let cfg = ExperimentConfig::from_toml_str(&reference(), &over).unwrap();
    assert_eq!(cfg.train.lr_finetune, 0.05);
    assert_eq!(cfg.world.n_base, 4);
    assert_ne!(cfg.fingerprint(), ExperimentConfig::default().fingerprint());
    let bad = vec![("world.no_such_key".to_string(), "1".to_string())];
    assert!(ExperimentConfig::from_toml_str(&reference(), &bad).is_err());
}

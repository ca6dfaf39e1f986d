use cerberus_cli::config::{ParadigmChoice, RunConfig};
use cerberus_cli::parse;
use serde_json::{json, Value};

struct Case {
    key: &'static str,
    file: Value,
    flag: &'static str,
    read: fn(&RunConfig) -> Value,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            key: "seed",
            file: json!(5),
            flag: "7",
            read: |c| json!(c.seed),
        },
        Case {
            key: "gate.threshold",
            file: json!(0.5),
            flag: "1.25",
            read: |c| json!(c.gate.threshold),
        },
        Case {
            key: "tree.paths",
            file: json!(120),
            flag: "150",
            read: |c| json!(c.tree.paths),
        },
        Case {
            key: "paradigm",
            file: json!("medusa"),
            flag: "vanilla",
            read: |c| json!(c.paradigm),
        },
        Case {
            key: "train_heads.lr",
            file: json!(0.002),
            flag: "0.005",
            read: |c| json!(c.train_heads.lr.to_string().parse::<f64>().unwrap()),
        },
        Case {
            key: "decode.stop_token",
            file: json!(10),
            flag: "46",
            read: |c| json!(c.decode.stop_token),
        },
    ]
}

fn nest(key: &str, v: Value) -> Value {
    key.rsplit('.').fold(v, |acc, part| json!({ part: acc }))
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

/// Every subset of keys set in the file crossed with every subset set by flag.
#[test]
fn flags_beat_file_beat_defaults() {
    let cases = cases();
    let defaults = RunConfig::default();
    let n = cases.len();
    for file_mask in 0..1u32 << n {
        for flag_mask in 0..1u32 << n {
            let mut file = json!({});
            let mut argv = vec!["cerberus".to_string(), "decode".to_string()];
            for (i, c) in cases.iter().enumerate() {
                if file_mask >> i & 1 == 1 {
                    merge(&mut file, nest(c.key, c.file.clone()));
                }
                if flag_mask >> i & 1 == 1 {
                    argv.push(format!("--{}", c.key.replace('_', "-")));
                    argv.push(c.flag.to_string());
                }
            }
            let (_, overrides) = parse(argv).unwrap().unwrap();
            let cfg = RunConfig::resolve(Some(&file), &overrides).unwrap();
            for (i, c) in cases.iter().enumerate() {
                let expect = if flag_mask >> i & 1 == 1 {
                    serde_json::from_str(c.flag).unwrap_or(Value::String(c.flag.into()))
                } else if file_mask >> i & 1 == 1 {
                    c.file.clone()
                } else {
                    (c.read)(&defaults)
                };
                assert_eq!(
                    (c.read)(&cfg),
                    expect,
                    "{} file={file_mask:b} flag={flag_mask:b}",
                    c.key
                );
            }
        }
    }
}

#[test]
fn literal_values_of_the_matrix() {
    let file = json!({"seed": 5, "paradigm": "medusa", "gate": {"threshold": 0.5}});
    let c = RunConfig::resolve(Some(&file), &[("gate.threshold".into(), "2".into())]).unwrap();
    assert_eq!(
        (c.seed, c.paradigm, c.gate.threshold),
        (5, ParadigmChoice::Medusa, Some(2.0))
    );
    let c = RunConfig::resolve(None, &[]).unwrap();
    assert_eq!(
        (c.seed, c.paradigm, c.gate.threshold),
        (0, ParadigmChoice::Cerberus, None)
    );
}

#[test]
fn shipped_configs_resolve() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    RunConfig::load(Some(&root.join("data/toy.json")), &[]).unwrap();
}

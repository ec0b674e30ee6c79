use anytime_core::calibration::{
    best_config, best_config_all_heads, calibrate, load_tables, save_tables, CalibConfig,
    CalibError, CalibTables, Config,
};
use anytime_core::pipeline::{Pipeline, PipelineConfig};
use anytime_core::scenegen::{generate_scene, Scene, SceneSpec};

fn scenes() -> Vec<Scene> {
    [101, 102]
        .iter()
        .map(|s| {
            generate_scene(&SceneSpec {
                duration_s: 5.0,
                ..SceneSpec::standard(*s)
            })
            .unwrap()
        })
        .collect()
}

fn quick() -> CalibConfig {
    CalibConfig {
        runs_per_cell: 1,
        seed: 3,
        ..CalibConfig::default()
    }
}

#[test]
fn reference_fixture_loads() {
    let t = CalibTables::reference();
    assert_eq!((t.num_blocks(), t.num_heads()), (3, 6));
    assert_eq!(t.wcet(Config::new(2, 4)), 76.8);
    assert_eq!(t.accuracy(Config::new(3, 6)), 100.0);
    assert_eq!(t.min_wcet(), 30.9);
    let on_disk = include_str!("../fixtures/reference_tables.json");
    assert_eq!(CalibTables::from_json(on_disk).unwrap(), t);
}

#[test]
fn dominated_reference_cell_is_not_executable() {
    let t = CalibTables::reference();
    // (3,1) is faster and more accurate than (1,4)
    assert!(t.wcet(Config::new(3, 1)) < t.wcet(Config::new(1, 4)));
    assert!(t.accuracy(Config::new(3, 1)) > t.accuracy(Config::new(1, 4)));
    assert!(!t.is_executable(Config::new(1, 4)));
    assert!(t
        .configs()
        .filter(|c| c.blocks == 3)
        .all(|c| t.is_executable(c)));
}

#[test]
fn phase_one_examples() {
    let t = CalibTables::reference();
    let c = best_config(&t, 70.0);
    assert_eq!(c.config, Config::new(2, 3));
    assert_eq!(t.accuracy(c.config), 82.1);
    assert!(!c.infeasible);
    assert_eq!(best_config(&t, 120.0).config, Config::new(3, 6));
    let c = best_config(&t, 25.0);
    assert_eq!(c.config, Config::new(1, 1));
    assert!(c.infeasible);
    assert_eq!(best_config_all_heads(&t, 95.0).config, Config::new(2, 6));
}

#[test]
fn save_load_round_trip_recomputes_mask() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tables.json");
    let t = CalibTables::reference();
    save_tables(&t, &path).unwrap();
    assert_eq!(load_tables(&path).unwrap(), t);

    // a tampered mask on disk is ignored
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["executable"] = serde_json::to_value(vec![vec![true; 6]; 3]).unwrap();
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(
        load_tables(&path).unwrap().executable_mask(),
        t.executable_mask()
    );
}

#[test]
fn malformed_tables_rejected() {
    assert!(matches!(
        CalibTables::from_json("{"),
        Err(CalibError::Malformed(_))
    ));
    let ragged = r#"{"R": 2, "H": 2, "wcet": [[1.0, 2.0], [3.0]], "accuracy": [[50.0, 60.0], [70.0, 100.0]]}"#;
    assert!(CalibTables::from_json(ragged).is_err());
    let flat = r#"{"R": 1, "H": 2, "wcet": [[2.0, 2.0]], "accuracy": [[50.0, 100.0]]}"#;
    assert!(matches!(
        CalibTables::from_json(flat),
        Err(CalibError::NonMonotoneWcet { .. })
    ));
    let unnormalized = r#"{"R": 1, "H": 2, "wcet": [[1.0, 2.0]], "accuracy": [[50.0, 90.0]]}"#;
    assert!(matches!(
        CalibTables::from_json(unnormalized),
        Err(CalibError::NotNormalized(_))
    ));
}

#[test]
fn simulated_calibration_is_monotone_and_normalized() {
    let scenes = scenes();
    let t = calibrate(
        |s| Pipeline::new(PipelineConfig::default(), s).unwrap(),
        &scenes,
        &quick(),
    )
    .unwrap();
    let w = t.wcet_matrix();
    for r in 0..3 {
        for h in 0..6 {
            if h > 0 {
                assert!(w[r][h] > w[r][h - 1]);
            }
            if r > 0 {
                assert!(w[r][h] > w[r - 1][h]);
            }
            assert!(w[r][h] <= CalibTables::reference().wcet(Config::new(r + 1, h + 1)));
        }
    }
    assert_eq!(t.accuracy(Config::new(3, 6)), 100.0);
    assert!(t.accuracy(Config::new(1, 1)) < t.accuracy(Config::new(3, 1)));
}

#[test]
fn calibration_is_deterministic() {
    let scenes = scenes();
    let make = |s| Pipeline::new(PipelineConfig::default(), s).unwrap();
    let a = calibrate(make, &scenes, &quick()).unwrap();
    let b = calibrate(make, &scenes, &quick()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let other = calibrate(make, &scenes, &CalibConfig { seed: 4, ..quick() }).unwrap();
    assert_ne!(a.accuracy_matrix(), other.accuracy_matrix());
}

#[test]
fn calibration_input_errors() {
    let make = |s| Pipeline::new(PipelineConfig::default(), s).unwrap();
    assert!(matches!(
        calibrate(make, &[], &quick()),
        Err(CalibError::NoScenes)
    ));
    let scenes = scenes();
    let none = CalibConfig {
        runs_per_cell: 0,
        ..quick()
    };
    assert!(matches!(
        calibrate(make, &scenes, &none),
        Err(CalibError::NoRuns)
    ));
}

use corrpath::detect::{pair_score, PairSign, ScanEngine};
use corrpath::harness::{read_csv, ExperimentConfig};
use corrpath::model::{
    log_likelihood_ratio, read_sample, simulate_alternative, simulate_null, write_sample,
};
use corrpath::{scan, CorrelationModel, NodeId, Path, PathClass, Start, TorusLattice};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dense_llr(x: &[f64], psi: f64) -> f64 {
    let k = x.len();
    let g = DMatrix::from_fn(k, k, |i, j| psi.powi((i as i32 - j as i32).abs()));
    let chol = g.clone().cholesky().unwrap();
    let v = DVector::from_column_slice(x);
    let q = v.dot(&(chol.inverse() * &v));
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * log_det - 0.5 * (q - v.dot(&v))
}

#[test]
fn planted_path_is_found_by_every_exact_engine() {
    let lattice = TorusLattice::new(3, 10).unwrap();
    let class = PathClass::new(lattice.clone(), 7, Start::Known(NodeId(0)), true).unwrap();
    let path = class.paths().unwrap().nth(200).unwrap();
    let model = CorrelationModel::new(1.0 - 1e-9).unwrap();
    let sample = simulate_alternative(&lattice, &path, model, 5).unwrap();
    let t = 0.05;
    let dp = scan(
        &sample.values,
        &class,
        t,
        PairSign::Plus,
        ScanEngine::OrientedDp,
    )
    .unwrap();
    let ex = scan(
        &sample.values,
        &class,
        t,
        PairSign::Plus,
        ScanEngine::Exhaustive,
    )
    .unwrap();
    assert_eq!(dp.v_star, ex.v_star);
    assert_eq!(dp.argmax_path, ex.argmax_path);
    assert_eq!(dp.v_star, 6);
    assert_eq!(
        pair_score(&sample.values, path.nodes(), t, PairSign::Plus),
        6
    );
}

#[test]
fn sample_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("x.bin");
    let lattice = TorusLattice::new(2, 9).unwrap();
    let sample = simulate_null(&lattice, 44);
    write_sample(&file, &lattice, &sample).unwrap();
    let (l2, s2) = read_sample(&file).unwrap();
    assert_eq!(l2, lattice);
    assert_eq!(s2.values, sample.values);
}

#[test]
fn risk_report_csv_parses_back() {
    let cfg = ExperimentConfig::from_toml(
        "psi = [0.0, 0.9]\ntrials = 60\nseed = 3\nengine = \"dp\"\n\
         [lattice]\nd = 2\nm = 6\n[class]\nk = 4\nstart = 0\noriented = true\n",
    )
    .unwrap();
    let report = corrpath::harness::run_risk_curve(&cfg).unwrap();
    let rows = read_csv(&report.to_csv()).unwrap();
    assert_eq!(rows, report.csv_records());
}

proptest! {
    #[test]
    fn llr_matches_dense_linear_algebra(
        psi in -0.95f64..0.95,
        x in proptest::collection::vec(-3.0f64..3.0, 2..9),
    ) {
        let lattice = TorusLattice::new(1, 16).unwrap();
        let nodes: Vec<NodeId> = (0..x.len() as u32).map(NodeId).collect();
        let path = Path::new(&lattice, nodes).unwrap();
        let mut values = vec![0.0; 16];
        values[..x.len()].copy_from_slice(&x);
        let got = log_likelihood_ratio(&values, &path, CorrelationModel::new(psi).unwrap());
        let want = dense_llr(&x, psi);
        prop_assert!((got - want).abs() < 1e-8 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn dp_and_exhaustive_agree_on_null_fields(seed in any::<u64>(), t in 0.05f64..1.5) {
        let lattice = TorusLattice::new(2, 7).unwrap();
        let class = PathClass::new(lattice.clone(), 5, Start::Unknown, true).unwrap();
        let values = simulate_null(&lattice, seed).values;
        for sign in [PairSign::Plus, PairSign::Minus] {
            let dp = scan(&values, &class, t, sign, ScanEngine::OrientedDp).unwrap();
            let ex = scan(&values, &class, t, sign, ScanEngine::Exhaustive).unwrap();
            prop_assert_eq!(dp.v_star, ex.v_star);
            prop_assert_eq!(dp.argmax_path, ex.argmax_path);
        }
    }

    #[test]
    fn beam_never_exceeds_exact(seed in any::<u64>(), width in 1usize..6) {
        let lattice = TorusLattice::new(2, 6).unwrap();
        let class = PathClass::new(lattice.clone(), 5, Start::Known(NodeId(7)), false).unwrap();
        let values = simulate_null(&lattice, seed).values;
        let exact = scan(&values, &class, 0.6, PairSign::Plus, ScanEngine::Exhaustive).unwrap();
        let beam = scan(&values, &class, 0.6, PairSign::Plus, ScanEngine::Beam(width)).unwrap();
        prop_assert!(!beam.exact);
        prop_assert!(beam.v_star <= exact.v_star);
    }
}

//! Exercises the bindings through an embedded interpreter. Everything lives
//! in one test because the module must be registered before Python starts.

use phenoflow_py::phenoflow_py as pymodule_def;
use pyo3::prelude::*;
use pyo3::types::PyModule;

fn module(py: Python<'_>) -> Bound<'_, PyModule> {
    py.import("phenoflow_py").expect("import phenoflow_py")
}

#[test]
fn bindings_cover_the_main_operations() {
    pyo3::append_to_inittab!(pymodule_def);
    Python::attach(|py| {
        let m = module(py);

        // Config: defaults, parse, canonical round-trip.
        let cfg = m.getattr("Config").unwrap().call0().unwrap();
        let n: usize = cfg.getattr("n_patients").unwrap().extract().unwrap();
        assert_eq!(n, 800);
        let parsed = m
            .getattr("Config")
            .unwrap()
            .getattr("parse")
            .unwrap()
            .call1(("n_patients = 50\nseed = 9\n",))
            .unwrap();
        let n: usize = parsed.getattr("n_patients").unwrap().extract().unwrap();
        assert_eq!(n, 50);
        let canon: String = parsed.call_method0("canonical").unwrap().extract().unwrap();
        assert!(canon.contains("n_patients = 50"));
        assert!(canon.contains("seed = 9"));
        assert!(
            m.getattr("Config")
                .unwrap()
                .getattr("parse")
                .unwrap()
                .call1(("bogus = 1\n",))
                .is_err(),
            "unknown keys must be rejected"
        );

        // AUC with a perfectly separable set.
        let auc: f64 = m
            .getattr("auc")
            .unwrap()
            .call1((vec![0.1, 0.9, 0.8], vec![false, true, true]))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(auc, 1.0);

        // Amari index of the identity composite is exactly zero.
        let amari: f64 = m
            .getattr("amari_index")
            .unwrap()
            .call1((vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(amari, 0.0);

        // Interpolation reproduces its knots.
        let curve = m
            .getattr("Curve")
            .unwrap()
            .call1((vec![0.0, 1.0, 3.0], vec![2.0, 4.0, 1.0]))
            .unwrap();
        let at_one: f64 = curve
            .call_method1("eval", (1.0,))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(at_one, 4.0);

        // Intensity estimation conserves mass on a simple series.
        let (grid, values): (Vec<f64>, Vec<f64>) = m
            .getattr("intensity_curve")
            .unwrap()
            .call1((vec![1.0, 2.0, 2.5, 7.0], 0.0, 10.0))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(grid.len(), values.len());
        let mut integral = 0.0;
        for i in 0..grid.len() - 1 {
            let width = (grid[i + 1].min(10.0) - grid[i].min(10.0)).max(0.0);
            integral += (values[i] + values[i + 1]) / 2.0 * width;
        }
        assert!((integral - 4.0).abs() / 4.0 < 0.05, "integral {integral}");

        // Decomposition recovers a planted two-source mixture.
        let py_code = r#"
import phenoflow_py as pf
import random

rng = random.Random(5)
m = 4000
s_true = [
    [rng.choice([0.0, 1.0]) for _ in range(m)],
    [(-1 if rng.random() < 0.5 else 1) * rng.expovariate(2.0) for _ in range(m)],
]
a = [[1.0, 0.4], [0.3, 1.0], [0.8, -0.5]]
x = [[sum(a[i][k] * s_true[k][j] for k in range(2)) for j in range(m)] for i in range(3)]
fit = pf.fit_ica(x, 2, seed=1)
mean, pairs = pf.match_components(s_true, fit.expressions())
assert fit.rank == 2
assert mean > 0.95, mean
proj = fit.project(x)
assert len(proj) == 2 and len(proj[0]) == m

forest = pf.train_forest(s_true, [v > 0.5 for v in s_true[0]], n_trees=40, seed=2)
scores = forest.predict_proba(s_true)
assert pf.auc(scores, [v > 0.5 for v in s_true[0]]) > 0.99
assert len(forest.importances) == 2
"#;
        let code = std::ffi::CString::new(py_code).unwrap();
        py.run(&code, None, None).unwrap_or_else(|e| {
            e.print(py);
            panic!("planted-source python check failed");
        });

        // End-to-end reproduction on a tiny cohort.
        let parse = m.getattr("Config").unwrap().getattr("parse").unwrap();
        let small = parse
            .call1(("n_patients = 70\nk_true = 3\nk = 4\nn_trees = 40\nintensity_iterations = 40\nseed = 12\n",))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = m
            .getattr("reproduce")
            .unwrap()
            .call1((small, dir.path().to_str().unwrap()))
            .unwrap();
        let mean: f64 = outcome
            .getattr("mean_matched_correlation")
            .unwrap()
            .extract()
            .unwrap();
        assert!((0.0..=1.0).contains(&mean));
        let metrics: String = outcome.call_method0("metrics").unwrap().extract().unwrap();
        assert!(metrics.contains("auc_test"));
        assert!(dir.path().join("summary.txt").exists());
        assert!(dir.path().join("plots/component_00.svg").exists());
    });
}

use std::fs;

use proptest::prelude::*;
use stcast_core::forecast::{predict, score_forecast, ForecastConfig};
use stcast_core::infer::{fit, posterior_sd, FitConfig};
use stcast_core::model::{assemble, BasisKind, ModelData, ModelSpec};
use stcast_core::panel::{compute_expected_counts, load_and_align, observed_relative_risk};
use stcast_core::simulate::{simulate, write_dataset, SimConfig};
use stcast_core::structures::{
    adjacency_from_neighbor_list, icar_precision, proper_car_precision, read_neighbors, ProximityKind,
    SpatialStructure,
};
use stcast_core::{Month, MonthWindow};

#[test]
fn written_dataset_fits_and_forecasts() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(&SimConfig {
        n_months: 75,
        seed: 21,
        ..SimConfig::default()
    })
    .unwrap();
    write_dataset(dir.path(), &data).unwrap();

    let panels = load_and_align(
        &dir.path().join("cases.csv"),
        &dir.path().join("population.csv"),
        &[dir.path().join("covariates/rain.csv")],
    )
    .unwrap();
    assert_eq!(panels.cases, data.cases);
    assert_eq!(panels.covariates[0].values(), data.covariates[0].values());
    let edges = read_neighbors(fs::File::open(dir.path().join("neighbors.csv")).unwrap(), "neighbors.csv").unwrap();
    assert_eq!(edges, data.neighbors);

    let first = Month::new(2000, 1).unwrap();
    let train = MonthWindow::new(first, Month::new(2005, 12).unwrap()).unwrap();
    let expected = compute_expected_counts(&panels.cases, &panels.population, train).unwrap();
    let prox = adjacency_from_neighbor_list(&edges, panels.cases.regions()).unwrap();
    let spec = ModelSpec::new(
        "icar",
        BasisKind::Linear,
        SpatialStructure::Icar,
        Some(ProximityKind::Neighbor),
        vec!["rain".into()],
    );
    let model = assemble(
        &spec,
        &ModelData {
            cases: &panels.cases,
            expected: &expected,
            covariates: &panels.covariates,
            proximity: Some(&prox),
            train,
        },
    )
    .unwrap();
    let f = fit(&model, &FitConfig::default()).unwrap();
    assert!(f.converged);

    let truth = data.truth.fixed_effects_for(&model, expected.rate());
    let idx: Vec<usize> = (0..model.n_fixed()).collect();
    let sd = posterior_sd(&f, &idx).unwrap();
    for k in 1..model.n_fixed() {
        let z = (f.latent_mode[k] - truth[k]) / sd[k];
        assert!(z.abs() < 4.0, "coefficient {k}: z = {z}");
    }

    let test = MonthWindow::new(Month::new(2006, 1).unwrap(), Month::new(2006, 3).unwrap()).unwrap();
    let panel = predict(&f, &model, test, &ForecastConfig::default()).unwrap();
    assert_eq!(panel.rows.len(), 8 * 3);
    let observed = observed_relative_risk(&panels.cases, &expected).unwrap();
    let report = score_forecast(&panel, &observed, panels.cases.regions()).unwrap();
    assert_eq!(report.regions.len(), 8);
    assert_eq!(report.cells.len(), 24);
    assert!(report.regions.iter().all(|r| r.nis.is_some_and(f64::is_finite)));
}

/// Random connected graph: a spanning path plus extra edges.
fn graph() -> impl Strategy<Value = (usize, Vec<(String, String)>)> {
    (3usize..=32).prop_flat_map(|n| {
        let extra = proptest::collection::vec((0..n, 0..n), 0..2 * n);
        extra.prop_map(move |pairs| {
            let name = |i: usize| format!("N{i:02}");
            let mut edges: Vec<(String, String)> = (1..n).map(|i| (name(i - 1), name(i))).collect();
            edges.extend(pairs.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (name(a), name(b))));
            (n, edges)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn car_structures_on_random_graphs((n, edges) in graph(), d in 0.05f64..5.0) {
        let regions: Vec<String> = (0..n).map(|i| format!("N{i:02}")).collect();
        let prox = adjacency_from_neighbor_list(&edges, &regions).unwrap();
        let icar = icar_precision(&prox).unwrap();
        let eig = icar.eigenvalues();
        prop_assert_eq!(eig.iter().filter(|v| v.abs() < 1e-10).count(), 1);
        let q1 = icar.q.mul_vec(&vec![1.0; n]);
        prop_assert!(q1.iter().all(|v| v.abs() < 1e-10));
        let proper = proper_car_precision(&prox, d).unwrap();
        let min = proper.eigenvalues().into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= d - 1e-10);
    }
}

use misscate::data::assign_folds;
use misscate::learners::LearnerSpec;
use misscate::longitudinal::{
    estimate_cate_longitudinal, fit_sequential_nuisances, mdr_longitudinal_pseudo, PanelDataset, PanelOptions,
    PanelSpec,
};
use misscate::meta::{predict_cate, PipelineConfig};
use misscate::nuisance::{MissingnessModel, NuisanceSpecs};
use misscate::seed;
use misscate::sim::draw_panel;
use ndarray::Array2;
use rand::Rng;

fn light_specs() -> NuisanceSpecs {
    NuisanceSpecs {
        propensity: LearnerSpec::ridge_logistic(),
        missingness: LearnerSpec::ridge_logistic(),
        outcome: LearnerSpec::forest(40, 20),
        imputation: LearnerSpec::linear(),
        missingness_model: MissingnessModel::Pooled,
    }
}

fn light_spec(options: PanelOptions) -> PanelSpec {
    PanelSpec {
        pipeline: PipelineConfig {
            nuisances: light_specs(),
            stage2: LearnerSpec::forest(100, 20),
            ..PipelineConfig::default()
        },
        options,
    }
}

/// Two visits with independent 0.8 stay probabilities at each step.
fn constant_hazard_panel(n: usize, s: u64) -> PanelDataset {
    let mut rng = seed::rng(s);
    let z0 = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
    let mut z1 = Array2::from_elem((n, 1), f64::NAN);
    let (mut c1, mut c2, mut a, mut y) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let stay1 = rng.random_bool(0.8);
        let stay2 = stay1 && rng.random_bool(0.8);
        if stay1 {
            z1[[i, 0]] = rng.random_range(-1.0..1.0);
        }
        a.push(rng.random_bool(0.5));
        c1.push(stay1);
        c2.push(stay2);
        y.push(stay2.then(|| z0[[i, 0]] + rng.random_range(-1.0..1.0)));
    }
    PanelDataset::new(z0, vec![z1], vec![c1, c2], a, y, vec![0, 1]).unwrap()
}

fn mean_hazard_specs() -> NuisanceSpecs {
    NuisanceSpecs {
        missingness: LearnerSpec::Mean,
        ..light_specs()
    }
}

#[test]
fn cumulative_observation_tracks_product_of_hazards() {
    let panel = constant_hazard_panel(4000, 1);
    let folds = assign_folds(panel.n(), 5, 2).unwrap();
    let nuis = fit_sequential_nuisances(&panel, &folds, &mean_hazard_specs(), 0.01, &PanelOptions::default(), 3).unwrap();
    let g = nuis.g_cum();
    let at_risk: Vec<usize> = (0..panel.n()).filter(|&i| panel.observed_through(i, 1)).collect();
    let g1 = (0..panel.n()).map(|i| g[[i, 1]]).sum::<f64>() / panel.n() as f64;
    let g2 = at_risk.iter().map(|&i| g[[i, 2]]).sum::<f64>() / at_risk.len() as f64;
    assert!((g1 - 0.8).abs() < 0.03, "{g1}");
    assert!((g2 - 0.64).abs() < 0.03, "{g2}");
    for i in 0..panel.n() {
        assert_eq!(g[[i, 0]], 1.0);
        assert!(g[[i, 1]] <= g[[i, 0]] && g[[i, 2]] <= g[[i, 1]]);
    }
}

#[test]
fn pooled_hazard_matches_per_visit_on_constant_hazards() {
    let panel = constant_hazard_panel(3000, 4);
    let folds = assign_folds(panel.n(), 5, 2).unwrap();
    let options = PanelOptions {
        pooled_hazard: true,
        ..PanelOptions::default()
    };
    let nuis = fit_sequential_nuisances(&panel, &folds, &light_specs(), 0.01, &options, 3).unwrap();
    let g = nuis.g_cum();
    let at_risk: Vec<usize> = (0..panel.n()).filter(|&i| panel.observed_through(i, 1)).collect();
    let g2 = at_risk.iter().map(|&i| g[[i, 2]]).sum::<f64>() / at_risk.len() as f64;
    assert!((g2 - 0.64).abs() < 0.05, "{g2}");
}

#[test]
fn pseudo_outcome_telescopes_without_dropout() {
    let draw = draw_panel(600, 9, false).unwrap();
    let panel = &draw.panel;
    let folds = assign_folds(panel.n(), 4, 1).unwrap();
    let nuis = fit_sequential_nuisances(panel, &folds, &light_specs(), 0.01, &PanelOptions::default(), 5).unwrap();
    assert!(nuis.g_cum().iter().all(|&g| g == 1.0));
    let pseudo = mdr_longitudinal_pseudo(panel, &nuis).unwrap();
    let l = panel.n_visits();
    for (i, v) in pseudo.dense().iter().enumerate() {
        let a = panel.treatment()[i];
        let af = f64::from(u8::from(a));
        let pi = nuis.pi()[i];
        let own = nuis.mu(a);
        let y = panel.outcome()[i].unwrap();
        let oracle = (af - pi) / (pi * (1.0 - pi)) * (y - own[[i, l]]) + nuis.mu(true)[[i, l]] - nuis.mu(false)[[i, l]];
        assert!((v - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()), "{i}: {v} vs {oracle}");
    }
}

fn panel_rmse(n: usize, seed: u64, options: PanelOptions) -> f64 {
    let draw = draw_panel(n, seed, true).unwrap();
    let test = draw_panel(1000, 77, false).unwrap();
    let model = estimate_cate_longitudinal(&draw.panel, &light_spec(options), seed).unwrap();
    let pred = predict_cate(&model, test.panel.x_matrix().view()).unwrap();
    let se: f64 = pred.iter().zip(&test.theta).map(|(p, t)| (p - t).powi(2)).sum();
    (se / pred.len() as f64).sqrt()
}

#[test]
fn error_shrinks_with_sample_size() {
    let small: f64 = (0..3).map(|r| panel_rmse(800, 100 + r, PanelOptions::default())).sum::<f64>() / 3.0;
    let large: f64 = (0..3).map(|r| panel_rmse(3200, 200 + r, PanelOptions::default())).sum::<f64>() / 3.0;
    assert!(large < small, "n=800 {small}, n=3200 {large}");
}

#[test]
fn sequential_dr_runs_and_is_deterministic() {
    let options = PanelOptions {
        sequential_dr: true,
        pooled_hazard: false,
    };
    let a = panel_rmse(600, 3, options.clone());
    let b = panel_rmse(600, 3, options);
    assert_eq!(a, b);
    assert!(a.is_finite() && a < 2.0);
}

#[test]
fn panel_estimates_are_reproducible() {
    let draw = draw_panel(500, 12, true).unwrap();
    let spec = light_spec(PanelOptions::default());
    let x = draw.panel.x_matrix();
    let a = predict_cate(&estimate_cate_longitudinal(&draw.panel, &spec, 8).unwrap(), x.view()).unwrap();
    let b = predict_cate(&estimate_cate_longitudinal(&draw.panel, &spec, 8).unwrap(), x.view()).unwrap();
    let c = predict_cate(&estimate_cate_longitudinal(&draw.panel, &spec, 9).unwrap(), x.view()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

mod common;

use common::*;
use gpprog::data::{BiomarkerSpec, Cohort, IndividualRecord, Observation, RandomEffectKind};
use gpprog::ep::{ep_run, EpOptions, Site};
use gpprog::fit::{
    get_params, grad_grid, grad_objective, objective, objective_with_sites, set_params, FitConfig, ParamBlock, Priors,
};
use gpprog::kernels::assemble_joint;

fn converged_sites(c: &Cohort) -> Vec<Vec<Site>> {
    let state = ep_run(&assemble_joint(c).unwrap(), &EpOptions::default()).unwrap();
    assert!(state.converged);
    state.sites()
}

fn central_difference(c: &Cohort, sites: &[Vec<Site>], priors: &Priors, block: ParamBlock, k: usize, h: f64) -> f64 {
    let x = get_params(c, block);
    let at = |v: f64| {
        let mut y = x.clone();
        y[k] = v;
        let mut c2 = c.clone();
        set_params(&mut c2, block, &y);
        objective_with_sites(&c2, sites, priors).unwrap()
    };
    (at(x[k] + h) - at(x[k] - h)) / (2.0 * h)
}

fn check_block(c: &Cohort, lambda: f64, block: ParamBlock) {
    let mut c = c.clone();
    for b in &mut c.biomarkers {
        b.lambda = lambda;
    }
    let sites = converged_sites(&c);
    let priors = Priors::new(&c, &FitConfig::default());
    let g = grad_objective(&c, &sites, &priors, block).unwrap();
    assert_eq!(g.len(), get_params(&c, block).len());
    assert!(!g.is_empty());
    for (k, &gk) in g.iter().enumerate() {
        let fd = central_difference(&c, &sites, &priors, block, k, 1e-5);
        let rel = (gk - fd).abs() / fd.abs().max(1e-3);
        assert!(rel < 1e-4, "{block:?}[{k}]: analytic {gk} vs difference {fd} (rel {rel:e})");
    }
}

#[test]
fn hyperparameter_gradient_matches_differences() {
    let c = small_cohort(2, 5, 11);
    check_block(&c, 1e-6, ParamBlock::Hyper);
    check_block(&c, 0.3, ParamBlock::Hyper);
}

#[test]
fn random_effect_gradient_matches_differences() {
    let c = small_cohort(2, 5, 12);
    check_block(&c, 1e-6, ParamBlock::Individual);
    check_block(&c, 0.3, ParamBlock::Individual);
}

#[test]
fn shift_gradient_matches_differences() {
    let c = small_cohort(2, 5, 13);
    check_block(&c, 1e-6, ParamBlock::Shifts);
    check_block(&c, 0.3, ParamBlock::Shifts);
}

#[test]
fn grid_gradient_matches_differences() {
    let c = small_cohort(2, 5, 14);
    let sites = converged_sites(&c);
    let flat = Priors::flat(2);
    let g = grad_grid(&c, &sites).unwrap();
    for b in 0..2 {
        for a in 0..c.derivative_grid[b].len() {
            let at = |delta: f64| {
                let mut c2 = c.clone();
                c2.derivative_grid[b][a] += delta;
                objective_with_sites(&c2, &sites, &flat).unwrap()
            };
            let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
            assert!((g[b][a] - fd).abs() / fd.abs().max(1e-3) < 1e-4, "grid {b},{a}: {} vs {fd}", g[b][a]);
        }
    }
}

/// A lone observation where the curve is flat carries no timing information.
#[test]
fn flat_region_observation_has_no_shift_gradient() {
    let mut c = small_cohort(1, 6, 15);
    c.individuals.push(IndividualRecord {
        id: "flat".into(),
        observations: vec![Observation { biomarker: 0, time: 0.0, value: 1.0 }],
        time_shift: 40.0,
        random_effect: RandomEffectKind::Zero,
    });
    let sites = converged_sites(&c);
    let priors = Priors::flat(1);
    let g = grad_objective(&c, &sites, &priors, ParamBlock::Shifts).unwrap();
    assert!(g.last().unwrap().abs() < 1e-6, "{}", g.last().unwrap());
}

/// Moving every shift and every derivative location together is a symmetry,
/// so the two gradients cancel.
#[test]
fn translation_is_a_null_direction() {
    let c = small_cohort(2, 5, 16);
    let sites = converged_sites(&c);
    let flat = Priors::flat(2);
    let g_d: f64 = grad_objective(&c, &sites, &flat, ParamBlock::Shifts).unwrap().iter().sum();
    let g_grid: f64 = grad_grid(&c, &sites).unwrap().iter().flatten().sum();
    assert!((g_d + g_grid).abs() < 1e-8 * (1.0 + g_d.abs()), "{g_d} vs {g_grid}");

    // and the objective itself is unchanged by the joint translation
    let mut moved = c.clone();
    for ind in &mut moved.individuals {
        ind.time_shift += 1.7;
    }
    for g in &mut moved.derivative_grid {
        g.iter_mut().for_each(|x| *x += 1.7);
    }
    let a = objective(&c, &flat, &EpOptions::default());
    let b = objective(&moved, &flat, &EpOptions::default());
    assert!((a - b).abs() < 1e-8 * a.abs(), "{a} vs {b}");

    // with centered shifts the prior adds nothing along the direction
    let mut centered = c.clone();
    gpprog::fit::center_shifts(&mut centered);
    let priors = Priors::new(&centered, &FitConfig::default());
    let lik: f64 = grad_objective(&centered, &sites, &flat, ParamBlock::Shifts).unwrap().iter().sum();
    let pen: f64 = grad_objective(&centered, &sites, &priors, ParamBlock::Shifts).unwrap().iter().sum();
    assert!((lik - pen).abs() < 1e-10);
}

#[test]
fn flat_priors_leave_the_bare_log_marginal() {
    let c = small_cohort(2, 4, 17);
    let state = ep_run(&assemble_joint(&c).unwrap(), &EpOptions::default()).unwrap();
    let f = objective(&c, &Priors::flat(2), &EpOptions::default());
    assert_eq!(f, state.log_marginal);
}

/// Noise far below the residual scale must be penalized by the likelihood.
#[test]
fn too_small_noise_lowers_the_objective() {
    let mut c = small_cohort(1, 8, 18);
    let mut rng_state = 1u64;
    for ind in &mut c.individuals {
        for o in &mut ind.observations {
            // deterministic extra noise of scale 0.3
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            o.value += 0.3 * (((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0);
        }
    }
    let priors = Priors::flat(1);
    let at = |sd: f64| {
        let mut c2 = c.clone();
        c2.biomarkers[0] = BiomarkerSpec { noise_sd: sd, ..c2.biomarkers[0].clone() };
        objective(&c2, &priors, &EpOptions::default())
    };
    assert!(at(0.01) < at(0.2));
}

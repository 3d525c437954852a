use nalgebra::{DMatrix, DVector};
use phcore::ebdi::{self, IdentifyOptions};
use phcore::models;
use phcore::pbc::{ClosedLoop, Controller, Gains};
use phcore::sim::{self, SimConfig};
use phcore::{tuning, State};

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&dv(v))
}

#[test]
fn csv_records_identify_like_in_memory_ones() {
    let model = models::rigid_2dof(&Default::default()).unwrap();
    let cfg = SimConfig {
        horizon: 3.0,
        substeps: 2,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut trajs = Vec::new();
    let mut paths = Vec::new();
    for (h, target) in [[0.6, 0.8], [-0.5, 0.4], [0.3, -0.7]].iter().enumerate() {
        let ctrl = Controller::new(&model, diag(&[30.0, 10.0]), Gains::Pi { k_p: diag(&[0.0, 0.0]) }, dv(target), false).unwrap();
        let traj = sim::integrate(&model, &ctrl, &State::zeros(2), &cfg).unwrap();
        let path = dir.path().join(format!("run{h}.csv"));
        sim::write_csv_file(&traj, &path).unwrap();
        paths.push(path);
        trajs.push(traj);
    }
    let (_, mem) = ebdi::identify(&model, &trajs, IdentifyOptions::default()).unwrap();
    let file = ebdi::identify_from_files(&model, &paths, IdentifyOptions::default()).unwrap();
    for k in 0..2 {
        assert!((mem.gamma[k] - file.gamma[k]).abs() < 1e-12);
        let truth = models::RIGID_DAMPING[k];
        assert!((file.gamma[k] - truth).abs() / truth < 0.01, "gamma {k}: {}", file.gamma[k]);
    }
}

#[test]
fn identified_damping_feeds_synthesis() {
    let model = models::rigid_2dof(&Default::default()).unwrap();
    let q_star = dv(&[0.6, 0.8]);
    let k_i = diag(&[30.0, 10.0]);
    let cfg = SimConfig {
        horizon: 5.0,
        ..Default::default()
    };
    let trajs: Vec<_> = [[0.6, 0.8], [-0.5, 0.4]]
        .iter()
        .map(|t| {
            let ctrl = Controller::new(&model, k_i.clone(), Gains::Pi { k_p: diag(&[0.0, 0.0]) }, dv(t), false).unwrap();
            sim::integrate(&model, &ctrl, &State::zeros(2), &cfg).unwrap()
        })
        .collect();
    let (_, est) = ebdi::identify(&model, &trajs, IdentifyOptions::default()).unwrap();
    let identified = model.with_damping(est.gamma.clone()).unwrap();
    let (k_p, report) = tuning::synthesize_min_kp(&identified, &k_i, &q_star).unwrap();
    assert!(report.verdict);
    assert!((k_p[(0, 0)] - 3.2046).abs() < 1e-3);

    let ctrl = Controller::new(&model, k_i, Gains::Pi { k_p }, q_star.clone(), false).unwrap();
    let traj = sim::integrate(&model, &ctrl, &State::zeros(2), &cfg).unwrap();
    let metrics = sim::oscillation_metrics(&traj, &q_star).unwrap();
    assert!(metrics.coordinates.iter().all(|c| c.zero_crossings == 0 && !c.overshoots()));
    let last = traj.q.last().unwrap();
    assert!((last - &q_star).norm() < 1e-6);
}

#[test]
fn modified_loop_dissipates_shaped_energy() {
    let model = models::flexible_2dof(&Default::default()).unwrap();
    let q_star = dv(&[0.5, -0.3, 0.5, -0.3]);
    let ctrl = Controller::new(
        &model,
        diag(&[30.0, 10.0]),
        Gains::Modified {
            k_pa: diag(&[5.0, 2.0]),
            k_pu: diag(&[1.0, 0.01]),
        },
        q_star.clone(),
        false,
    )
    .unwrap();
    let cl = ClosedLoop::new(&model, &ctrl).unwrap();
    let cfg = SimConfig {
        horizon: 3.0,
        substeps: 4,
        ..Default::default()
    };
    let traj = sim::integrate(&model, &ctrl, &State::zeros(4), &cfg).unwrap();
    let hd: Vec<f64> = traj
        .q
        .iter()
        .zip(&traj.qdot)
        .map(|(q, v)| cl.hamiltonian(&State::new(q.clone(), model.momentum(q, v)).unwrap()).unwrap())
        .collect();
    assert!(hd.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(sim::energy_audit(&model, &traj).unwrap() < 1e-5);

    // R₂ is positive semidefinite here, so dissipation holds pointwise
    let x = State::new(dv(&[0.1, 0.2, -0.1, 0.3]), dv(&[0.4, -0.2, 0.1, 0.05])).unwrap();
    let ups = tuning::upsilon_sym(&cl, &q_star, tuning::DEFAULT_EPSILON).unwrap();
    assert!(tuning::gershgorin(&ups).unwrap().contained);
    assert!(cl.dissipation_rate(&x).unwrap() <= 0.0);
}

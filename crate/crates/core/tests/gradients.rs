use bmfa::gradcheck::{grad_check, run_suite, GradCheckConfig, REGISTRY};

#[test]
fn every_registered_op_passes() {
    let started = std::time::Instant::now();
    let reports = run_suite(None, &GradCheckConfig::default()).unwrap();
    assert_eq!(reports.len(), REGISTRY.len());
    for r in &reports {
        println!("{:<24} {:.3e} {} ({} coords, worst {})", r.op, r.max_rel_error, r.passed, r.coords_checked, r.worst);
    }
    println!("suite took {:?}", started.elapsed());
    assert!(reports.iter().all(|r| r.passed));
}

#[test]
fn corrupted_gradients_fail_everywhere() {
    let cfg = GradCheckConfig {
        corrupt_analytic: true,
        ..Default::default()
    };
    for id in ["conv2d", "batchnorm_train", "afm"] {
        assert!(!grad_check(id, &cfg).unwrap().passed, "{id}");
    }
}


#[test]
fn primitive_kernels_meet_their_own_bounds() {
    let cfg = GradCheckConfig::default();
    let bounds = [
        ("conv2d", 1e-6),
        ("conv2d_stride", 1e-6),
        ("conv2d_1x1", 1e-6),
        ("batchnorm_train", 1e-6),
        ("batchnorm_infer", 1e-6),
        ("tanh", 1e-8),
        ("upsample", 1e-6),
        ("concat", 1e-6),
        ("stats_pool", 1e-6),
        ("linear", 1e-6),
    ];
    for (id, bound) in bounds {
        let r = grad_check(id, &cfg).unwrap();
        assert!(r.max_rel_error < bound, "{id}: {:.3e} >= {bound:e}", r.max_rel_error);
    }
}

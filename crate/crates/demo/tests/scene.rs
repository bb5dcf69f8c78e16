use erasure_lab_demo::{class_distance, Scene};

#[test]
fn separated_and_unerased_leaks_about_ln2() {
    let s = Scene::new(3.0, 0.0).unwrap();
    let d = s.sample(20_000, 1).unwrap();
    let l = s.leakage(&d, 40).unwrap();
    assert!(l.plugin_mi > 0.6 && l.plugin_mi < 0.72, "{l:?}");
    assert!(l.bayes_error < 0.01);
    assert!(l.plugin_mi <= l.entropy_bound + 0.02);
    assert!(l.pinsker + 0.02 >= l.plugin_mi);
}

#[test]
fn full_erasure_leaves_only_estimator_bias() {
    let s = Scene::new(3.0, 1.0).unwrap();
    let d = s.sample(20_000, 2).unwrap();
    let l = s.leakage(&d, 40).unwrap();
    assert!(l.plugin_mi < 0.05, "{l:?}");
    assert!(l.entropy_bound < 1e-9);
    let (fd, _) = class_distance(&d).unwrap();
    assert!(fd < 0.05, "{fd}");
}

#[test]
fn partial_erasure_sits_between() {
    let s = Scene::new(3.0, 0.5).unwrap();
    let d = s.sample(20_000, 3).unwrap();
    let l = s.leakage(&d, 40).unwrap();
    assert!(l.plugin_mi > 0.1 && l.plugin_mi < 0.5, "{l:?}");
    // Bayes error for the blend is a quarter: half the concept draws are neutral.
    assert!((l.bayes_error - 0.25).abs() < 0.02, "{l:?}");
    // Concept-class mean moves to x = 0, three units from the neutral mean.
    let (fd, kl) = class_distance(&d).unwrap();
    assert!(fd > 5.0 && kl > 0.0);
}

#[test]
fn sliders_are_validated() {
    assert!(Scene::new(-1.0, 0.0).is_err());
    assert!(Scene::new(1.0, 1.5).is_err());
    assert!(Scene::new(1.0, 0.5).unwrap().sample(5, 0).is_err());
}

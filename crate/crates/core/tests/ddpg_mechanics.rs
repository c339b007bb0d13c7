mod common;

use common::criteria::{
    actor_on_stub, critic_regression, ou_statistics, replay_uniformity, soft_update_blend,
};

#[test]
fn critic_regression_drops_loss_by_ninety_percent() {
    let (first, last) = critic_regression();
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn actor_converges_on_quadratic_critic() {
    let d = actor_on_stub(2000);
    assert!(d < 0.05, "distance to a* {d}");
}

#[test]
fn soft_update_is_the_convex_blend() {
    soft_update_blend().unwrap();
}

#[test]
fn replay_draws_are_uniform() {
    let p = replay_uniformity();
    assert!(p > 0.01, "chi-squared p = {p}");
}

#[test]
fn ou_stationary_moments() {
    let s = ou_statistics(100_000);
    assert!(s.mean_z < 3.0, "{s:?}");
    assert!(s.std_rel < 0.05, "{s:?}");
}

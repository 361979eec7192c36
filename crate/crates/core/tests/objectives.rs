mod common;

use common::loss_suite as s;

#[test]
fn smooth_l1_examples() {
    s::smooth_l1_examples();
}

#[test]
fn rep_examples() {
    s::rep_examples();
}

#[test]
fn disc_examples() {
    s::disc_examples();
}

#[test]
fn disc_is_bounded_by_teacher_entropy() {
    s::disc_entropy_bound(500);
}

#[test]
fn pixel_examples() {
    s::pixel_examples();
}

#[test]
fn total_weights_and_gradients() {
    s::total_examples();
}

#[test]
fn decomposition_over_random_weights() {
    s::decomposition(200);
}

#[test]
fn losses_ignore_mask_order() {
    s::set_semantics();
}

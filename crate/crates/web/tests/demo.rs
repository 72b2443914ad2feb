use affspace_web::{noisy_prediction, poly_curve, render_pair};

#[test]
fn render_pair_buffers_are_rgba_sized() {
    let pair = render_pair(3, 5, 48, 0.6, 0.1, 0.05, 8.0).ok().unwrap();
    let n = 4 * 48 * 48;
    assert_eq!(pair.source().len(), n);
    assert_eq!(pair.target().len(), n);
    assert_eq!(pair.labels().len(), n);
    assert_ne!(pair.source(), pair.target());
}

#[test]
fn clean_prediction_matches_label_boundaries() {
    let labels = vec![0, 0, 1, 1];
    let p = noisy_prediction(&labels, 2, 2, 2, 1.0, 0.0, 1);
    assert_eq!(p.data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn poly_curve_endpoints() {
    let c = poly_curve(2.5e-4, 0.9, 3000, 11).ok().unwrap();
    assert_eq!(c.len(), 11);
    assert_eq!(c[0], 2.5e-4);
    assert_eq!(c[10], 0.0);
    assert!(c.windows(2).all(|w| w[1] < w[0]));
}

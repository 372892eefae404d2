use meshrecover_demo::Scene;

#[test]
fn render_covers_the_body_and_images_match_frame_size() {
    let s = Scene::new(0);
    let n = s.frame().width() * s.frame().height();
    assert!(s.frame().covered_pixels() > 1000);
    assert_eq!(s.depth_rgba().len(), 4 * n);
    assert_eq!(s.uv_rgba().len(), 4 * n);
    let opaque = s.depth_rgba().chunks(4).filter(|p| p[3] == 255).count();
    assert_eq!(opaque, s.frame().covered_pixels());
}

#[test]
fn looser_eps_never_matches_fewer_vertices() {
    let mut s = Scene::new(3);
    s.render(40.0);
    let mut last = 0;
    for eps in [0.002, 0.005, 0.01, 0.03] {
        let m = s.match_uv(eps).unwrap();
        assert!(m.matched >= last, "eps {eps}");
        assert!(m.matched <= m.vertices);
        last = m.matched;
    }
    assert!(last > 20);
}

#[test]
fn completion_fits_visible_vertices_closer_than_hidden_ones() {
    let mut s = Scene::new(0);
    s.render(0.0);
    s.match_uv(0.01).unwrap();
    let c = s.complete(300).unwrap();
    assert!(c.pve_mm.is_finite());
    assert!(c.visible_pve_mm < c.hidden_pve_mm, "{c:?}");
    let kinds: Vec<f64> = s.overlay().chunks(3).map(|t| t[2]).collect();
    assert!(kinds.contains(&0.0) && kinds.contains(&1.0) && kinds.contains(&2.0));
}

#[test]
fn rerender_clears_match_state() {
    let mut s = Scene::new(1);
    s.match_uv(0.01).unwrap();
    s.render(90.0);
    assert!(s.overlay().chunks(3).all(|t| t[2] == 0.0));
}
